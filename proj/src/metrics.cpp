#include "esc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <memory>

namespace esc {

Tensor4f rgb_to_y(const Tensor4f& img) {
  if (img.c() != 3)
    throw ShapeError("rgb_to_y: expected 3 channels, got " + img.shape_str());
  Tensor4f y(img.n(), 1, img.h(), img.w());
  for (Index n = 0; n < img.n(); ++n) {
    auto out = y.plane_array(n, 0);
    out = 16.0f + 65.481f * img.plane_array(n, 0) +
          128.553f * img.plane_array(n, 1) + 24.966f * img.plane_array(n, 2);
  }
  return y;
}

namespace {

std::pair<Tensor4f, Tensor4f> cropped_luma(const Tensor4f& sr, const Tensor4f& hr,
                                           int scale, const char* who) {
  if (!sr.same_shape(hr))
    throw ShapeError(std::string(who) + ": shape mismatch " + sr.shape_str() +
                     " vs " + hr.shape_str());
  if (scale < 1) throw ShapeError(std::string(who) + ": scale must be >= 1");
  if (sr.h() <= 2 * Index(scale) || sr.w() <= 2 * Index(scale))
    throw ShapeError(std::string(who) + ": image " + sr.shape_str() +
                     " too small to crop " + std::to_string(scale) + " per side");
  const Pad border = Pad::uniform(scale);
  return {crop(rgb_to_y(sr), border), crop(rgb_to_y(hr), border)};
}

}  // namespace

double psnr_y(const Tensor4f& sr, const Tensor4f& hr, int scale) {
  auto [ys, yh] = cropped_luma(sr, hr, scale, "psnr_y");
  double se = 0.0;
  for (Index i = 0; i < ys.size(); ++i) {
    const double d = double(ys.array()[i]) - double(yh.array()[i]);
    se += d * d;
  }
  const double mse = se / double(ys.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(255.0 * 255.0 / mse);
}

namespace {

// 11-tap Gaussian, sigma 1.5, normalized.
Eigen::Matrix<double, 11, 1> ssim_window() {
  Eigen::Matrix<double, 11, 1> g;
  for (int i = 0; i < 11; ++i) g(i) = std::exp(-double((i - 5) * (i - 5)) / 4.5);
  return g / g.sum();
}

// Valid-region separable filtering with the SSIM window.
Eigen::MatrixXd ssim_filter(const Eigen::MatrixXd& x,
                            const Eigen::Matrix<double, 11, 1>& g) {
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(x.rows(), x.cols() - 10);
  for (int v = 0; v < 11; ++v) h += g(v) * x.middleCols(v, x.cols() - 10);
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(x.rows() - 10, x.cols() - 10);
  for (int u = 0; u < 11; ++u) out += g(u) * h.middleRows(u, x.rows() - 10);
  return out;
}

Eigen::MatrixXd luma_matrix(const Tensor4f& y, Index n) {
  Eigen::MatrixXd m(y.h(), y.w());
  for (Index r = 0; r < y.h(); ++r)
    for (Index c = 0; c < y.w(); ++c) m(r, c) = double(y(n, 0, r, c));
  return m;
}

}  // namespace

double ssim_y(const Tensor4f& sr, const Tensor4f& hr, int scale) {
  auto [ys, yh] = cropped_luma(sr, hr, scale, "ssim_y");
  if (ys.h() < 11 || ys.w() < 11)
    throw ShapeError("ssim_y: cropped image " + ys.shape_str() +
                     " smaller than the 11x11 window");
  constexpr double c1 = 6.5025;    // (0.01 * 255)^2
  constexpr double c2 = 58.5225;   // (0.03 * 255)^2
  const auto g = ssim_window();

  double total = 0.0;
  Index count = 0;
  for (Index n = 0; n < ys.n(); ++n) {
    const Eigen::MatrixXd x = luma_matrix(ys, n);
    const Eigen::MatrixXd y = luma_matrix(yh, n);
    const Eigen::MatrixXd mx = ssim_filter(x, g);
    const Eigen::MatrixXd my = ssim_filter(y, g);
    const Eigen::MatrixXd vx = ssim_filter(x.cwiseProduct(x), g) - mx.cwiseProduct(mx);
    const Eigen::MatrixXd vy = ssim_filter(y.cwiseProduct(y), g) - my.cwiseProduct(my);
    const Eigen::MatrixXd cxy = ssim_filter(x.cwiseProduct(y), g) - mx.cwiseProduct(my);
    const Eigen::ArrayXXd num =
        (2.0 * mx.cwiseProduct(my).array() + c1) * (2.0 * cxy.array() + c2);
    const Eigen::ArrayXXd den =
        (mx.array().square() + my.array().square() + c1) *
        (vx.array() + vy.array() + c2);
    total += (num / den).sum();
    count += num.size();
  }
  return total / double(count);
}

double linear_cka(Eigen::MatrixXd x, Eigen::MatrixXd y) {
  if (x.rows() != y.rows())
    throw ShapeError("linear_cka: sample counts differ (" +
                     std::to_string(x.rows()) + " vs " + std::to_string(y.rows()) +
                     ")");
  if (x.size() == 0 || y.size() == 0) throw ShapeError("linear_cka: empty matrix");
  x.rowwise() -= x.colwise().mean();
  y.rowwise() -= y.colwise().mean();
  const double num = (y.transpose() * x).squaredNorm();
  const double den = (x.transpose() * x).norm() * (y.transpose() * y).norm();
  if (den == 0.0)
    throw ShapeError("linear_cka: zero-variance input, similarity undefined");
  return num / den;
}

std::string similarity_name(Similarity s) {
  return s == Similarity::cka ? "cka" : "cosine";
}

Similarity parse_similarity(const std::string& name) {
  if (name == "cka") return Similarity::cka;
  if (name == "cosine") return Similarity::cosine;
  throw ShapeError("unknown similarity kind '" + name + "' (cka, cosine)");
}

namespace {

// Pixels as samples, channels as features.
Eigen::MatrixXd feature_matrix(const Tensor4f& t) {
  Eigen::MatrixXd m(t.n() * t.h() * t.w(), t.c());
  for (Index c = 0; c < t.c(); ++c) {
    Index row = 0;
    for (Index n = 0; n < t.n(); ++n)
      for (Index y = 0; y < t.h(); ++y)
        for (Index x = 0; x < t.w(); ++x) m(row++, c) = double(t(n, c, y, x));
  }
  return m;
}

Eigen::VectorXd pooled_vector(const Tensor4f& t) {
  const Tensor4f p = global_avg_pool(t);
  Eigen::VectorXd v(p.size());
  for (Index i = 0; i < p.size(); ++i) v(i) = double(p.array()[i]);
  return v;
}

}  // namespace

Eigen::MatrixXd inter_layer_similarity(const FeatureTrace& trace, Similarity kind) {
  const Index L = Index(trace.entries.size());
  if (L < 2)
    throw ShapeError("inter_layer_similarity: need at least two trace entries, got " +
                     std::to_string(L));
  const Tensor4f& first = trace.entries[0].second;
  for (const auto& [name, t] : trace.entries) {
    if (t.n() != first.n() || t.h() != first.h() || t.w() != first.w())
      throw ShapeError("inter_layer_similarity: entry '" + name +
                       "' disagrees on batch/spatial dims");
    if (kind == Similarity::cosine && t.c() != first.c())
      throw ShapeError("inter_layer_similarity: entry '" + name +
                       "' channel count differs, cosine undefined");
  }

  std::vector<Eigen::MatrixXd> feats;
  std::vector<Eigen::VectorXd> pooled;
  for (const auto& [name, t] : trace.entries) {
    if (kind == Similarity::cka)
      feats.push_back(feature_matrix(t));
    else
      pooled.push_back(pooled_vector(t));
  }

  Eigen::MatrixXd s = Eigen::MatrixXd::Identity(L, L);
  for (Index i = 0; i < L; ++i)
    for (Index j = i + 1; j < L; ++j) {
      double v;
      if (kind == Similarity::cka) {
        v = linear_cka(feats[size_t(i)], feats[size_t(j)]);
      } else {
        const double nn = pooled[size_t(i)].norm() * pooled[size_t(j)].norm();
        if (nn == 0.0)
          throw ShapeError("inter_layer_similarity: zero feature vector, cosine undefined");
        v = pooled[size_t(i)].dot(pooled[size_t(j)]) / nn;
      }
      s(i, j) = s(j, i) = v;
    }
  return s;
}

AttributionMap perturbation_attribution(const ForwardFn& forward, const Tensor4f& img,
                                        Index ty, Index tx, double eps) {
  if (img.n() != 1)
    throw ShapeError("perturbation_attribution: batch must be 1, got " +
                     img.shape_str());
  if (!(eps > 0.0))
    throw ShapeError("perturbation_attribution: eps must be positive");
  const Tensor4f base = forward(img);
  if (ty < 0 || ty >= base.h() || tx < 0 || tx >= base.w())
    throw ShapeError("perturbation_attribution: target (" + std::to_string(ty) +
                     ", " + std::to_string(tx) + ") outside output " +
                     base.shape_str());

  AttributionMap map;
  map.h = img.h();
  map.w = img.w();
  map.ty = ty;
  map.tx = tx;
  map.values.setZero(map.h, map.w);

  const float step = float(eps);
  Tensor4f work = img;
  for (Index y = 0; y < img.h(); ++y)
    for (Index x = 0; x < img.w(); ++x) {
      for (Index c = 0; c < img.c(); ++c) work(0, c, y, x) = img(0, c, y, x) + step;
      const Tensor4f hi = forward(work);
      for (Index c = 0; c < img.c(); ++c) work(0, c, y, x) = img(0, c, y, x) - step;
      const Tensor4f lo = forward(work);
      for (Index c = 0; c < img.c(); ++c) work(0, c, y, x) = img(0, c, y, x);

      double acc = 0.0;
      for (Index oc = 0; oc < base.c(); ++oc) {
        const double d =
            (double(hi(0, oc, ty, tx)) - double(lo(0, oc, ty, tx))) / (2.0 * eps);
        acc += std::max(d, 0.0);
      }
      map.values(y, x) = acc / double(base.c());
    }
  return map;
}

double diffusion_index(const AttributionMap& a) {
  const Index n = a.values.size();
  if (n == 0) throw ShapeError("diffusion_index: empty map");
  std::vector<double> v(a.values.data(), a.values.data() + n);
  double sum = 0.0;
  for (double d : v) {
    if (d < 0.0) throw ShapeError("diffusion_index: negative attribution value");
    sum += d;
  }
  if (sum == 0.0) throw ShapeError("diffusion_index: all-zero map");
  std::sort(v.begin(), v.end());
  double acc = 0.0;
  for (Index i = 0; i < n; ++i) acc += (2.0 * double(i + 1) - double(n) - 1.0) * v[size_t(i)];
  const double gini = acc / (double(n) * sum);
  return (1.0 - gini) * 100.0;
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_for_write(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  return f;
}

}  // namespace

void write_matrix_csv(const Eigen::MatrixXd& m, const std::string& path,
                      const std::vector<std::string>& labels) {
  if (!labels.empty() && Index(labels.size()) != m.rows())
    throw ShapeError("write_matrix_csv: label count does not match matrix rows");
  FilePtr f = open_for_write(path);
  if (!labels.empty()) {
    std::fputs("layer", f.get());
    for (const std::string& l : labels) std::fprintf(f.get(), ",%s", l.c_str());
    std::fputc('\n', f.get());
  }
  for (Index r = 0; r < m.rows(); ++r) {
    if (!labels.empty()) std::fprintf(f.get(), "%s,", labels[size_t(r)].c_str());
    for (Index c = 0; c < m.cols(); ++c)
      std::fprintf(f.get(), c + 1 < m.cols() ? "%.10g," : "%.10g\n", m(r, c));
  }
}

void write_attribution_csv(const AttributionMap& a, const std::string& path) {
  FilePtr f = open_for_write(path);
  for (Index r = 0; r < a.values.rows(); ++r)
    for (Index c = 0; c < a.values.cols(); ++c)
      std::fprintf(f.get(), c + 1 < a.values.cols() ? "%.10g," : "%.10g\n",
                   a.values(r, c));
}

Tensor4f attribution_to_image(const AttributionMap& a) {
  Tensor4f img(1, 1, a.h, a.w);
  const double peak = a.values.maxCoeff();
  if (peak > 0.0)
    for (Index y = 0; y < a.h; ++y)
      for (Index x = 0; x < a.w; ++x)
        img(0, 0, y, x) = float(a.values(y, x) / peak);
  return img;
}

}  // namespace esc
