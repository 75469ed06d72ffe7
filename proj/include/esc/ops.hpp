#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "esc/tensor.hpp"

namespace esc {

namespace detail {

template <class S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class S>
void check_conv_args(const Tensor4<S>& x, const ConvKernel<S>& k, const Pad& pad,
                     int stride) {
  if (k.groups < 1) throw ShapeError("conv2d: groups must be positive");
  if (stride < 1) throw ShapeError("conv2d: stride must be positive");
  if (pad.top < 0 || pad.bottom < 0 || pad.left < 0 || pad.right < 0)
    throw ShapeError("conv2d: negative padding");
  if (x.c() != static_cast<Index>(k.cin_per_group) * k.groups)
    throw ShapeError("conv2d: input channels " + std::to_string(x.c()) +
                     " != c_in_per_group*groups = " +
                     std::to_string(k.cin_per_group * k.groups));
  if (k.cout % k.groups != 0)
    throw ShapeError("conv2d: c_out " + std::to_string(k.cout) +
                     " not divisible by groups " + std::to_string(k.groups));
  if (k.has_bias() && k.bias.size() != k.cout)
    throw ShapeError("conv2d: bias length != c_out");
  if (x.h() + pad.top + pad.bottom < k.kh || x.w() + pad.left + pad.right < k.kw)
    throw ShapeError("conv2d: kernel exceeds padded input, kernel (" +
                     std::to_string(k.kh) + ", " + std::to_string(k.kw) +
                     ") vs input " + x.shape_str());
}

}  // namespace detail

/// Grouped 2-D cross-correlation with zero-fill padding.
/// Output spatial dims: floor((h + pad_t + pad_b - kh)/stride) + 1, same for w.
template <class S>
Tensor4<S> conv2d(const Tensor4<S>& x, const ConvKernel<S>& k, const Pad& pad = {},
                  int stride = 1) {
  detail::check_conv_args(x, k, pad, stride);
  using Mat = detail::MatRM<S>;

  const Index oh = (x.h() + pad.top + pad.bottom - k.kh) / stride + 1;
  const Index ow = (x.w() + pad.left + pad.right - k.kw) / stride + 1;
  const Index P = oh * ow;
  const int cpg_in = k.cin_per_group;
  const int cpg_out = k.cout / k.groups;
  const Index rows = static_cast<Index>(cpg_in) * k.kh * k.kw;

  Tensor4<S> out(x.n(), k.cout, oh, ow);
  if (out.size() == 0 || x.n() == 0) return out;

  const bool pointwise =
      k.kh == 1 && k.kw == 1 && stride == 1 && !pad.any();

  Mat patches;
  if (!pointwise) patches.resize(rows, P);

  for (Index n = 0; n < x.n(); ++n) {
    for (int g = 0; g < k.groups; ++g) {
      Eigen::Map<const Mat> wmat(k.weights.data() + static_cast<Index>(g) * cpg_out * rows,
                                 cpg_out, rows);
      Eigen::Map<Mat> omat(out.plane(n, static_cast<Index>(g) * cpg_out), cpg_out, P);
      if (pointwise) {
        Eigen::Map<const Mat> xmat(x.plane(n, static_cast<Index>(g) * cpg_in), cpg_in, P);
        omat.noalias() = wmat * xmat;
        continue;
      }
      // im2col: row r = (ic, u, v), column = output pixel.
      Index r = 0;
      for (int ic = 0; ic < cpg_in; ++ic) {
        const S* src = x.plane(n, static_cast<Index>(g) * cpg_in + ic);
        for (int u = 0; u < k.kh; ++u) {
          for (int v = 0; v < k.kw; ++v, ++r) {
            S* dst = patches.data() + r * P;
            for (Index oy = 0; oy < oh; ++oy) {
              const Index iy = oy * stride + u - pad.top;
              S* drow = dst + oy * ow;
              if (iy < 0 || iy >= x.h()) {
                std::fill(drow, drow + ow, S(0));
                continue;
              }
              const S* srow = src + iy * x.w();
              if (stride == 1) {
                // valid ox range where ix = ox + v - pad.left lands in [0, w)
                const Index lo = std::max<Index>(0, pad.left - v);
                const Index hi = std::min<Index>(ow, x.w() + pad.left - v);
                std::fill(drow, drow + std::min(lo, ow), S(0));
                if (hi > lo)
                  std::memcpy(drow + lo, srow + lo + v - pad.left,
                              sizeof(S) * (hi - lo));
                if (hi < ow) std::fill(drow + std::max(hi, lo), drow + ow, S(0));
              } else {
                for (Index ox = 0; ox < ow; ++ox) {
                  const Index ix = ox * stride + v - pad.left;
                  drow[ox] = (ix >= 0 && ix < x.w()) ? srow[ix] : S(0);
                }
              }
            }
          }
        }
      }
      omat.noalias() = wmat * patches;
    }
    if (k.has_bias())
      for (int c = 0; c < k.cout; ++c) out.plane_array(n, c) += k.bias[c];
  }
  return out;
}

/// Layer norm over the channel axis at each spatial position.
template <class S>
Tensor4<S> layer_norm_channels(const Tensor4<S>& x,
                               const Eigen::Array<S, Eigen::Dynamic, 1>& gamma,
                               const Eigen::Array<S, Eigen::Dynamic, 1>& beta,
                               S eps = S(1e-6)) {
  if (x.c() == 0) throw ShapeError("layer_norm_channels: zero channels");
  if (gamma.size() != x.c() || beta.size() != x.c())
    throw ShapeError("layer_norm_channels: gamma/beta length != channels");
  if (!(eps > S(0))) throw ShapeError("layer_norm_channels: eps must be positive");

  using Arr = Eigen::Array<S, Eigen::Dynamic, 1>;
  const Index hw = x.h() * x.w();
  Tensor4<S> out(x.n(), x.c(), x.h(), x.w());
  if (hw == 0) return out;

  Arr mean(hw), var(hw);
  for (Index n = 0; n < x.n(); ++n) {
    mean.setZero();
    var.setZero();
    for (Index c = 0; c < x.c(); ++c) {
      auto p = x.plane_array(n, c);
      mean += p;
      var += p.square();
    }
    mean /= S(x.c());
    var = var / S(x.c()) - mean.square();
    Arr inv_sigma = (var + eps).sqrt().inverse();
    for (Index c = 0; c < x.c(); ++c)
      out.plane_array(n, c) = (x.plane_array(n, c) - mean) * inv_sigma * gamma[c] + beta[c];
  }
  return out;
}

/// Exact-erf GELU: x * Phi(x).
template <class S>
Tensor4<S> gelu(const Tensor4<S>& x) {
  Tensor4<S> out(x.n(), x.c(), x.h(), x.w());
  const S* src = x.data();
  S* dst = out.data();
  const S inv_sqrt2 = S(0.7071067811865475);
  for (Index i = 0; i < x.size(); ++i)
    dst[i] = S(0.5) * src[i] * (S(1) + std::erf(src[i] * inv_sqrt2));
  return out;
}

/// Spatial mean per channel -> (n, c, 1, 1). Accumulates in double so the
/// result is insensitive to summation-order perturbations at float scale.
template <class S>
Tensor4<S> global_avg_pool(const Tensor4<S>& x) {
  if (x.h() * x.w() == 0) throw ShapeError("global_avg_pool: empty spatial extent");
  const Index hw = x.h() * x.w();
  Tensor4<S> out(x.n(), x.c(), 1, 1);
  for (Index n = 0; n < x.n(); ++n)
    for (Index c = 0; c < x.c(); ++c) {
      const S* p = x.plane(n, c);
      double acc = 0;
      for (Index i = 0; i < hw; ++i) acc += double(p[i]);
      out(n, c, 0, 0) = S(acc / double(hw));
    }
  return out;
}

/// Sub-pixel rearrangement: channel block c*r^2 + dy*r + dx feeds output
/// position (y*r + dy, x*r + dx) of channel c.
template <class S>
Tensor4<S> pixel_shuffle(const Tensor4<S>& x, int r) {
  if (r < 1) throw ShapeError("pixel_shuffle: r must be positive");
  if (x.c() % (static_cast<Index>(r) * r) != 0)
    throw ShapeError("pixel_shuffle: channels " + std::to_string(x.c()) +
                     " not divisible by r^2 = " + std::to_string(r * r));
  const Index co = x.c() / (static_cast<Index>(r) * r);
  Tensor4<S> out(x.n(), co, x.h() * r, x.w() * r);
  for (Index n = 0; n < x.n(); ++n)
    for (Index c = 0; c < co; ++c)
      for (int dy = 0; dy < r; ++dy)
        for (int dx = 0; dx < r; ++dx) {
          const S* src = x.plane(n, (c * r + dy) * r + dx);
          for (Index y = 0; y < x.h(); ++y) {
            S* drow = out.plane(n, c) + (y * r + dy) * out.w() + dx;
            const S* srow = src + y * x.w();
            for (Index xx = 0; xx < x.w(); ++xx) drow[xx * r] = srow[xx];
          }
        }
  return out;
}

/// Reflection padding without edge repetition: (1,2,3) padded by 1 -> (2,1,2,3,2).
template <class S>
Tensor4<S> pad_reflect(const Tensor4<S>& x, const Pad& pad) {
  if (pad.top < 0 || pad.bottom < 0 || pad.left < 0 || pad.right < 0)
    throw ShapeError("pad_reflect: negative padding");
  if ((pad.top >= x.h() && pad.top > 0) || (pad.bottom >= x.h() && pad.bottom > 0) ||
      (pad.left >= x.w() && pad.left > 0) || (pad.right >= x.w() && pad.right > 0))
    throw ShapeError("pad_reflect: pad must be smaller than spatial dim, input " +
                     x.shape_str());
  Tensor4<S> out(x.n(), x.c(), x.h() + pad.top + pad.bottom,
                 x.w() + pad.left + pad.right);
  auto mirror = [](Index i, Index size) {
    if (i < 0) return -i;
    if (i >= size) return 2 * size - 2 - i;
    return i;
  };
  for (Index n = 0; n < x.n(); ++n)
    for (Index c = 0; c < x.c(); ++c) {
      const S* src = x.plane(n, c);
      S* dst = out.plane(n, c);
      for (Index y = 0; y < out.h(); ++y) {
        const Index sy = mirror(y - pad.top, x.h());
        for (Index xx = 0; xx < out.w(); ++xx)
          dst[y * out.w() + xx] = src[sy * x.w() + mirror(xx - pad.left, x.w())];
      }
    }
  return out;
}

/// Remove per-side margins; inverse of any same-sized padding.
template <class S>
Tensor4<S> crop(const Tensor4<S>& x, const Pad& margin) {
  if (margin.top < 0 || margin.bottom < 0 || margin.left < 0 || margin.right < 0)
    throw ShapeError("crop: negative margin");
  const Index nh = x.h() - margin.top - margin.bottom;
  const Index nw = x.w() - margin.left - margin.right;
  if (nh < 0 || nw < 0)
    throw ShapeError("crop: margins exceed spatial dims, input " + x.shape_str());
  Tensor4<S> out(x.n(), x.c(), nh, nw);
  for (Index n = 0; n < x.n(); ++n)
    for (Index c = 0; c < x.c(); ++c)
      for (Index y = 0; y < nh; ++y)
        std::memcpy(out.plane(n, c) + y * nw,
                    x.plane(n, c) + (y + margin.top) * x.w() + margin.left,
                    sizeof(S) * nw);
  return out;
}

namespace detail {

// Keys' cubic convolution kernel with a = -0.5.
template <class S>
S cubic_weight(S t) {
  const S a = S(-0.5);
  t = std::abs(t);
  if (t <= S(1)) return ((a + S(2)) * t - (a + S(3))) * t * t + S(1);
  if (t < S(2)) return (((t - S(5)) * t + S(8)) * t - S(4)) * a;
  return S(0);
}

}  // namespace detail

/// Separable bicubic upsampling by an integer factor, edge-clamped samples.
/// Sample positions follow the half-pixel convention: src = (dst + 0.5)/r - 0.5.
template <class S>
Tensor4<S> bicubic_resize(const Tensor4<S>& x, int r) {
  if (r < 1) throw ShapeError("bicubic_resize: r must be positive");
  if (r == 1 || x.size() == 0) {
    Tensor4<S> out = x;
    return out;
  }
  const Index oh = x.h() * r, ow = x.w() * r;

  // Tap indices and weights depend only on dst % r; precompute one period.
  struct Taps {
    Index base;
    S w[4];
  };
  auto make_taps = [&](Index out_size) {
    std::vector<Taps> taps(out_size);
    for (Index d = 0; d < out_size; ++d) {
      const double src = (d + 0.5) / r - 0.5;
      const Index fl = static_cast<Index>(std::floor(src));
      taps[d].base = fl - 1;
      for (int t = 0; t < 4; ++t)
        taps[d].w[t] = detail::cubic_weight<S>(S(src - double(fl - 1 + t)));
    }
    return taps;
  };
  const auto ty = make_taps(oh);
  const auto tx = make_taps(ow);

  Tensor4<S> out(x.n(), x.c(), oh, ow);
  std::vector<S> row(static_cast<size_t>(ow));
  for (Index n = 0; n < x.n(); ++n)
    for (Index c = 0; c < x.c(); ++c) {
      const S* src = x.plane(n, c);
      S* dst = out.plane(n, c);
      for (Index oy = 0; oy < oh; ++oy) {
        // horizontal pass for the 4 contributing source rows, then blend
        for (Index ox = 0; ox < ow; ++ox) {
          S acc = S(0);
          for (int u = 0; u < 4; ++u) {
            const Index sy =
                std::clamp<Index>(ty[oy].base + u, 0, x.h() - 1);
            const S* srow = src + sy * x.w();
            S hacc = S(0);
            for (int v = 0; v < 4; ++v) {
              const Index sx = std::clamp<Index>(tx[ox].base + v, 0, x.w() - 1);
              hacc += tx[ox].w[v] * srow[sx];
            }
            acc += ty[oy].w[u] * hacc;
          }
          dst[oy * ow + ox] = acc;
        }
      }
    }
  return out;
}

/// Copy of channels [c0, c0+count) for every batch item.
template <class S>
Tensor4<S> slice_channels(const Tensor4<S>& x, Index c0, Index count) {
  if (c0 < 0 || count < 0 || c0 + count > x.c())
    throw ShapeError("slice_channels: channel range [" + std::to_string(c0) + ", " +
                     std::to_string(c0 + count) + ") outside " + x.shape_str());
  Tensor4<S> out(x.n(), count, x.h(), x.w());
  const Index plane = x.h() * x.w();
  for (Index n = 0; n < x.n(); ++n)
    std::memcpy(out.plane(n, 0), x.plane(n, c0), sizeof(S) * count * plane);
  return out;
}

/// Channel-axis concatenation of two tensors with matching n/h/w.
template <class S>
Tensor4<S> concat_channels(const Tensor4<S>& a, const Tensor4<S>& b) {
  if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w())
    throw ShapeError("concat_channels: shapes " + a.shape_str() + " vs " +
                     b.shape_str());
  Tensor4<S> out(a.n(), a.c() + b.c(), a.h(), a.w());
  const Index plane = a.h() * a.w();
  for (Index n = 0; n < a.n(); ++n) {
    std::memcpy(out.plane(n, 0), a.plane(n, 0), sizeof(S) * a.c() * plane);
    std::memcpy(out.plane(n, a.c()), b.plane(n, 0), sizeof(S) * b.c() * plane);
  }
  return out;
}

/// Single batch item as an (1, c, h, w) tensor.
template <class S>
Tensor4<S> batch_item(const Tensor4<S>& x, Index n) {
  if (n < 0 || n >= x.n())
    throw ShapeError("batch_item: index " + std::to_string(n) + " outside " +
                     x.shape_str());
  Tensor4<S> out(1, x.c(), x.h(), x.w());
  std::memcpy(out.data(), x.plane(n, 0), sizeof(S) * x.c() * x.h() * x.w());
  return out;
}

/// Tile each of the 3 channels r^2 times so pixel_shuffle(.., r) reproduces
/// nearest-neighbor upsampling.
template <class S>
Tensor4<S> repeat_skip(const Tensor4<S>& img, int r) {
  if (r < 1) throw ShapeError("repeat_skip: r must be positive");
  if (img.c() != 3)
    throw ShapeError("repeat_skip: expected 3 channels, got " + std::to_string(img.c()));
  Tensor4<S> out(img.n(), 3 * static_cast<Index>(r) * r, img.h(), img.w());
  const Index plane = img.h() * img.w();
  for (Index n = 0; n < img.n(); ++n)
    for (Index c = 0; c < 3; ++c)
      for (int j = 0; j < r * r; ++j)
        std::memcpy(out.plane(n, c * r * r + j), img.plane(n, c), sizeof(S) * plane);
  return out;
}

}  // namespace esc
