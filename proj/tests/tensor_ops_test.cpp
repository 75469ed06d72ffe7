#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "esc/ops.hpp"
#include "oracles.hpp"

using namespace esc;

TEST_CASE("conv2d: 1x1 identity kernel returns the input exactly") {
  std::mt19937 g(11);
  Tensor4f x = oracle::random_tensor(g, 2, 5, 6, 7);
  Tensor4f y = conv2d(x, ConvKernelF::identity1x1(5));
  CHECK(oracle::bitwise_equal(x, y));
}

TEST_CASE("conv2d: all-ones 3x3 kernel on all-ones 3x3 input gives 9.0") {
  Tensor4f x = Tensor4f::full(1, 1, 3, 3, 1.f);
  ConvKernelF k = ConvKernelF::zeros(3, 3, 1, 1, 1, false);
  k.weights.setConstant(1.f);
  Tensor4f y = conv2d(x, k);
  REQUIRE(y.h() == 1);
  REQUIRE(y.w() == 1);
  CHECK(y(0, 0, 0, 0) == 9.0f);
}

TEST_CASE("conv2d: zero kernel and bias annihilate, shape follows floor law") {
  std::mt19937 g(12);
  Tensor4f x = oracle::random_tensor(g, 1, 4, 9, 11);
  ConvKernelF k = ConvKernelF::zeros(3, 5, 4, 6);
  Tensor4f y = conv2d(x, k, Pad{1, 2, 0, 3}, 2);
  CHECK(y.n() == 1);
  CHECK(y.c() == 6);
  CHECK(y.h() == (9 + 1 + 2 - 3) / 2 + 1);
  CHECK(y.w() == (11 + 0 + 3 - 5) / 2 + 1);
  CHECK((y.array() == 0.f).all());
}

TEST_CASE("conv2d: depthwise path matches the scalar triple-loop oracle") {
  std::mt19937 g(13);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor4f x = oracle::random_tensor(g, 2, 6, 8, 8);
    ConvKernelF k = oracle::random_kernel(g, 3, 3, 1, 6, 6);
    Tensor4f got = conv2d(x, k, Pad::same(3));
    Tensor4f want = oracle::conv2d_loops(x, k, Pad::same(3));
    CHECK(oracle::max_abs_diff(got, want) <= 1e-5f);
  }
}

TEST_CASE("conv2d: grouped and strided cases match the loop oracle") {
  std::mt19937 g(14);
  struct Case {
    int kh, kw, cin, cout, groups, stride;
    Pad pad;
    float tol;  // scaled with reduction length (float vs double accumulation)
  } cases[] = {
      {3, 3, 8, 12, 1, 1, Pad::same(3), 1e-5f},
      {1, 1, 8, 4, 1, 1, {}, 1e-5f},
      {5, 3, 8, 8, 4, 2, Pad{2, 1, 1, 0}, 1e-5f},
      {13, 13, 4, 4, 1, 1, Pad::same(13), 1e-4f},
      {3, 3, 6, 9, 3, 3, Pad{0, 2, 2, 0}, 1e-5f},
  };
  for (const auto& cs : cases) {
    Tensor4f x = oracle::random_tensor(g, 2, cs.cin, 10, 9);
    ConvKernelF k = oracle::random_kernel(g, cs.kh, cs.kw, cs.cin / cs.groups,
                                          cs.cout, cs.groups);
    Tensor4f got = conv2d(x, k, cs.pad, cs.stride);
    Tensor4f want = oracle::conv2d_loops(x, k, cs.pad, cs.stride);
    CHECK(oracle::max_abs_diff(got, want) <= cs.tol);
  }
}

TEST_CASE("conv2d: linear in its input for bias-free kernels") {
  std::mt19937 g(15);
  Tensor4f x = oracle::random_tensor(g, 1, 3, 7, 7);
  Tensor4f y = oracle::random_tensor(g, 1, 3, 7, 7);
  ConvKernelF k = oracle::random_kernel(g, 3, 3, 3, 5, 1, false);
  const float alpha = 7.5f, beta = -9.25f;
  Tensor4f mix(1, 3, 7, 7);
  mix.array() = alpha * x.array() + beta * y.array();
  Tensor4f lhs = conv2d(mix, k, Pad::same(3));
  Tensor4f cx = conv2d(x, k, Pad::same(3));
  Tensor4f cy = conv2d(y, k, Pad::same(3));
  Tensor4f rhs(lhs.n(), lhs.c(), lhs.h(), lhs.w());
  rhs.array() = alpha * cx.array() + beta * cy.array();
  CHECK(oracle::max_abs_diff(lhs, rhs) <= 1e-4f);
}

TEST_CASE("conv2d: dimension mismatches raise errors that name the axis") {
  Tensor4f x(1, 4, 6, 6);
  CHECK_THROWS_WITH_AS(conv2d(x, ConvKernelF::zeros(3, 3, 3, 8)),
                       doctest::Contains("channels"), ShapeError);
  ConvKernelF bad_groups = ConvKernelF::zeros(3, 3, 2, 9, 2);
  CHECK_THROWS_WITH_AS(conv2d(x, bad_groups), doctest::Contains("groups"),
                       ShapeError);
  CHECK_THROWS_WITH_AS(conv2d(x, ConvKernelF::zeros(7, 7, 4, 1)),
                       doctest::Contains("kernel"), ShapeError);
  ConvKernelF bad_bias = ConvKernelF::zeros(1, 1, 4, 4);
  bad_bias.bias = Eigen::ArrayXf::Zero(3);
  CHECK_THROWS_AS(conv2d(x, bad_bias), ShapeError);
}

TEST_CASE("conv2d: repeated calls are bitwise deterministic") {
  std::mt19937 g(16);
  Tensor4f x = oracle::random_tensor(g, 1, 8, 12, 12);
  ConvKernelF k = oracle::random_kernel(g, 3, 3, 8, 8);
  Tensor4f a = conv2d(x, k, Pad::same(3));
  Tensor4f b = conv2d(x, k, Pad::same(3));
  CHECK(oracle::bitwise_equal(a, b));
}

TEST_CASE("layer_norm_channels: constant channel vector maps to beta") {
  Tensor4f x = Tensor4f::full(1, 4, 3, 3, 2.5f);
  Eigen::ArrayXf gamma = Eigen::ArrayXf::Ones(4), beta = Eigen::ArrayXf::Zero(4);
  Tensor4f y = layer_norm_channels(x, gamma, beta);
  CHECK(y.array().abs().maxCoeff() <= 1e-3f);
}

TEST_CASE("layer_norm_channels: two-channel (1,3) standardizes to (-1,1)") {
  Tensor4f x(1, 2, 1, 1);
  x(0, 0, 0, 0) = 1.f;
  x(0, 1, 0, 0) = 3.f;
  Eigen::ArrayXf gamma = Eigen::ArrayXf::Ones(2), beta = Eigen::ArrayXf::Zero(2);
  Tensor4f y = layer_norm_channels(x, gamma, beta, 1e-6f);
  CHECK(y(0, 0, 0, 0) == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(y(0, 1, 0, 0) == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("layer_norm_channels: per-position mean 0 and variance 1") {
  std::mt19937 g(17);
  Tensor4f x = oracle::random_tensor(g, 2, 16, 5, 4, -3.f, 3.f);
  Eigen::ArrayXf gamma = Eigen::ArrayXf::Ones(16), beta = Eigen::ArrayXf::Zero(16);
  Tensor4f y = layer_norm_channels(x, gamma, beta, 1e-6f);
  for (Index n = 0; n < y.n(); ++n)
    for (Index py = 0; py < y.h(); ++py)
      for (Index px = 0; px < y.w(); ++px) {
        double mean = 0, sq = 0;
        for (Index c = 0; c < y.c(); ++c) {
          mean += y(n, c, py, px);
          sq += double(y(n, c, py, px)) * y(n, c, py, px);
        }
        mean /= double(y.c());
        sq /= double(y.c());
        CHECK(std::fabs(mean) <= 1e-6);
        CHECK(std::fabs(sq - mean * mean - 1.0) <= 1e-3);
      }
}

TEST_CASE("layer_norm_channels: gamma scales and beta shifts the normalized value") {
  std::mt19937 g(18);
  Tensor4f x = oracle::random_tensor(g, 1, 8, 4, 4);
  Eigen::ArrayXf ones = Eigen::ArrayXf::Ones(8), zeros = Eigen::ArrayXf::Zero(8);
  Eigen::ArrayXf gamma(8), beta(8);
  oracle::fill_uniform(gamma, g);
  oracle::fill_uniform(beta, g);
  Tensor4f base = layer_norm_channels(x, ones, zeros);
  Tensor4f scaled = layer_norm_channels(x, gamma, beta);
  float worst = 0.f;
  for (Index c = 0; c < 8; ++c)
    for (Index py = 0; py < 4; ++py)
      for (Index px = 0; px < 4; ++px)
        worst = std::max(worst,
                         std::fabs(scaled(0, c, py, px) -
                                   (base(0, c, py, px) * gamma[c] + beta[c])));
  CHECK(worst <= 1e-5f);
}

TEST_CASE("layer_norm_channels: rejects bad channel setups") {
  Tensor4f empty(1, 0, 3, 3);
  Eigen::ArrayXf none;
  CHECK_THROWS_AS(layer_norm_channels(empty, none, none), ShapeError);
  Tensor4f x(1, 3, 2, 2);
  Eigen::ArrayXf two = Eigen::ArrayXf::Ones(2);
  CHECK_THROWS_AS(layer_norm_channels(x, two, two), ShapeError);
  Eigen::ArrayXf three = Eigen::ArrayXf::Ones(3);
  CHECK_THROWS_AS(layer_norm_channels(x, three, three, 0.f), ShapeError);
}

TEST_CASE("gelu: fixed points and asymptotes") {
  Tensor4f x(1, 1, 1, 3);
  x(0, 0, 0, 0) = 0.f;
  x(0, 0, 0, 1) = 1.f;
  x(0, 0, 0, 2) = -10.f;
  Tensor4f y = gelu(x);
  CHECK(y(0, 0, 0, 0) == 0.f);
  CHECK(y(0, 0, 0, 1) == doctest::Approx(0.8413447461).epsilon(1e-6));
  CHECK(std::fabs(y(0, 0, 0, 2)) <= 1e-8f);
}

TEST_CASE("global_avg_pool: means, shape, and empty-extent error") {
  Tensor4f c = Tensor4f::full(2, 3, 4, 5, -1.75f);
  Tensor4f pc = global_avg_pool(c);
  CHECK(pc.h() == 1);
  CHECK(pc.w() == 1);
  CHECK((pc.array() == -1.75f).all());

  Tensor4f x(1, 1, 2, 2);
  x(0, 0, 0, 0) = 1.f;
  x(0, 0, 0, 1) = 2.f;
  x(0, 0, 1, 0) = 3.f;
  x(0, 0, 1, 1) = 4.f;
  CHECK(global_avg_pool(x)(0, 0, 0, 0) == doctest::Approx(2.5).epsilon(1e-7));

  Tensor4f empty(1, 2, 0, 3);
  CHECK_THROWS_AS(global_avg_pool(empty), ShapeError);
}

TEST_CASE("pixel_shuffle: identity at r=1, 2x2 enumeration, shape law") {
  std::mt19937 g(19);
  Tensor4f x = oracle::random_tensor(g, 1, 4, 3, 2);
  CHECK(oracle::bitwise_equal(pixel_shuffle(x, 1), x));

  Tensor4f v(1, 4, 1, 1);
  for (int i = 0; i < 4; ++i) v(0, i, 0, 0) = float(10 + i);  // a,b,c,d
  Tensor4f s = pixel_shuffle(v, 2);
  REQUIRE(s.c() == 1);
  CHECK(s(0, 0, 0, 0) == 10.f);
  CHECK(s(0, 0, 0, 1) == 11.f);
  CHECK(s(0, 0, 1, 0) == 12.f);
  CHECK(s(0, 0, 1, 1) == 13.f);

  Tensor4f big = oracle::random_tensor(g, 1, 12, 5, 7);
  Tensor4f sb = pixel_shuffle(big, 2);
  CHECK(sb.c() == 3);
  CHECK(sb.h() == 10);
  CHECK(sb.w() == 14);

  CHECK_THROWS_AS(pixel_shuffle(big, 5), ShapeError);
}

TEST_CASE("pixel_shuffle: element bijection preserves the value multiset") {
  std::mt19937 g(20);
  Tensor4f x = oracle::random_tensor(g, 2, 9, 4, 5);
  Tensor4f y = pixel_shuffle(x, 3);
  std::vector<float> a(x.data(), x.data() + x.size());
  std::vector<float> b(y.data(), y.data() + y.size());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  CHECK(a == b);
}

TEST_CASE("pad_reflect and crop: identity, reflection rule, round trip") {
  std::mt19937 g(21);
  Tensor4f x = oracle::random_tensor(g, 1, 2, 5, 6);
  CHECK(oracle::bitwise_equal(pad_reflect(x, Pad{}), x));
  CHECK(oracle::bitwise_equal(crop(x, Pad{}), x));

  Tensor4f row(1, 1, 1, 3);
  row(0, 0, 0, 0) = 1.f;
  row(0, 0, 0, 1) = 2.f;
  row(0, 0, 0, 2) = 3.f;
  Tensor4f padded = pad_reflect(row, Pad{0, 0, 1, 1});
  REQUIRE(padded.w() == 5);
  const float want[5] = {2.f, 1.f, 2.f, 3.f, 2.f};
  for (int i = 0; i < 5; ++i) CHECK(padded(0, 0, 0, i) == want[i]);

  Pad p{3, 1, 2, 4};
  CHECK(oracle::bitwise_equal(crop(pad_reflect(x, p), p), x));

  CHECK_THROWS_AS(pad_reflect(row, Pad{1, 0, 0, 0}), ShapeError);
  CHECK_THROWS_AS(pad_reflect(row, Pad{0, 0, 3, 0}), ShapeError);
  CHECK_THROWS_AS(crop(row, Pad{0, 0, 2, 2}), ShapeError);
}

TEST_CASE("bicubic_resize: identity, partition of unity, 1-D kernel oracle") {
  std::mt19937 g(22);
  Tensor4f x = oracle::random_tensor(g, 1, 3, 4, 5);
  CHECK(oracle::bitwise_equal(bicubic_resize(x, 1), x));

  Tensor4f c = Tensor4f::full(1, 2, 3, 3, 0.625f);
  Tensor4f cu = bicubic_resize(c, 3);
  CHECK(cu.h() == 9);
  CHECK((cu.array() - 0.625f).abs().maxCoeff() <= 1e-5f);

  Tensor4f line(1, 1, 1, 2);
  line(0, 0, 0, 0) = 0.f;
  line(0, 0, 0, 1) = 1.f;
  Tensor4f up = bicubic_resize(line, 2);
  REQUIRE(up.w() == 4);
  auto want = oracle::bicubic_1d({0.0, 1.0}, 2);
  for (int i = 0; i < 4; ++i)
    CHECK(up(0, 0, 0, i) == doctest::Approx(want[size_t(i)]).epsilon(1e-5));

  CHECK_THROWS_AS(bicubic_resize(x, 0), ShapeError);
}

TEST_CASE("bicubic_resize: separable 2-D result matches row-then-column oracle") {
  std::mt19937 g(23);
  Tensor4f x = oracle::random_tensor(g, 1, 1, 3, 4, 0.f, 1.f);
  const int r = 2;
  Tensor4f up = bicubic_resize(x, r);
  // rows first
  std::vector<std::vector<double>> rows_up(size_t(x.h()));
  for (Index y = 0; y < x.h(); ++y) {
    std::vector<double> row(size_t(x.w()));
    for (Index xx = 0; xx < x.w(); ++xx) row[size_t(xx)] = x(0, 0, y, xx);
    rows_up[size_t(y)] = oracle::bicubic_1d(row, r);
  }
  for (Index ox = 0; ox < up.w(); ++ox) {
    std::vector<double> col(size_t(x.h()));
    for (Index y = 0; y < x.h(); ++y) col[size_t(y)] = rows_up[size_t(y)][size_t(ox)];
    auto col_up = oracle::bicubic_1d(col, r);
    for (Index oy = 0; oy < up.h(); ++oy)
      CHECK(up(0, 0, oy, ox) == doctest::Approx(col_up[size_t(oy)]).epsilon(1e-5));
  }
}

TEST_CASE("repeat_skip: identity at r=1, shuffle reproduces nearest neighbor") {
  std::mt19937 g(24);
  Tensor4f img = oracle::random_tensor(g, 2, 3, 5, 4, 0.f, 1.f);
  CHECK(oracle::bitwise_equal(repeat_skip(img, 1), img));

  for (int r : {2, 3, 4}) {
    Tensor4f rep = repeat_skip(img, r);
    CHECK(rep.c() == 3 * r * r);
    CHECK(rep.h() == img.h());
    Tensor4f up = pixel_shuffle(rep, r);
    CHECK(oracle::bitwise_equal(up, oracle::nearest_upsample(img, r)));
  }

  Tensor4f gray(1, 1, 3, 3);
  CHECK_THROWS_AS(repeat_skip(gray, 2), ShapeError);
}
