#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <numeric>

#include "esc/attention.hpp"
#include "oracles.hpp"

using namespace esc;

namespace {

// Scalar-loop softmax attention in double precision, decoupled from the
// library's GEMM/online-softmax paths.
Tensor4f attention_oracle(const Tensor4f& q, const Tensor4f& k, const Tensor4f& v,
                          const RelPosTable<float>& bias, int ws) {
  const Index P = Index(ws) * ws;
  const int heads = bias.heads;
  const Index d = q.c() / heads;
  const double scale = 1.0 / std::sqrt(double(d));
  Tensor4f out(q.n(), q.c(), ws, ws);
  std::vector<double> scores(static_cast<size_t>(P));
  for (Index w = 0; w < q.n(); ++w)
    for (int h = 0; h < heads; ++h)
      for (Index p = 0; p < P; ++p) {
        for (Index j = 0; j < P; ++j) {
          double s = 0;
          for (Index t = 0; t < d; ++t)
            s += double(q.plane(w, h * d + t)[p]) * double(k.plane(w, h * d + t)[j]);
          const int dy = int(p) / ws - int(j) / ws;
          const int dx = int(p) % ws - int(j) % ws;
          scores[size_t(j)] = s * scale + double(bias.at(h, dy, dx));
        }
        double mx = *std::max_element(scores.begin(), scores.end());
        double denom = 0;
        for (double& s : scores) {
          s = std::exp(s - mx);
          denom += s;
        }
        for (Index t = 0; t < d; ++t) {
          double acc = 0;
          for (Index j = 0; j < P; ++j)
            acc += scores[size_t(j)] * double(v.plane(w, h * d + t)[j]);
          out.plane(w, h * d + t)[p] = float(acc / denom);
        }
      }
  return out;
}

RelPosTable<float> random_bias(std::mt19937& g, int ws, int heads) {
  RelPosTable<float> t = RelPosTable<float>::zeros(ws, heads);
  oracle::fill_uniform(t.table, g, -0.5f, 0.5f);
  return t;
}

}  // namespace

TEST_CASE("window_partition: single window equals the input") {
  std::mt19937 g(31);
  Tensor4f x = oracle::random_tensor(g, 1, 3, 4, 4);
  WindowSet<float> ws = window_partition(x, 4);
  CHECK(ws.windows.n() == 1);
  CHECK(oracle::bitwise_equal(ws.windows, x));
}

TEST_CASE("window_partition: 4x4 input at ws=2 enumerates row-major tiles") {
  Tensor4f x(1, 1, 4, 4);
  for (Index i = 0; i < 16; ++i) x.data()[i] = float(i);
  WindowSet<float> ws = window_partition(x, 2);
  REQUIRE(ws.windows.n() == 4);
  // window 0 = rows 0-1, cols 0-1; window 1 = rows 0-1, cols 2-3; ...
  const float want[4][4] = {{0, 1, 4, 5}, {2, 3, 6, 7}, {8, 9, 12, 13}, {10, 11, 14, 15}};
  for (int wi = 0; wi < 4; ++wi)
    for (int e = 0; e < 4; ++e)
      CHECK(ws.windows.plane(wi, 0)[e] == want[wi][e]);
}

TEST_CASE("window partition/merge: exact inverse pair, error instructs padding") {
  std::mt19937 g(32);
  Tensor4f x = oracle::random_tensor(g, 2, 5, 12, 8);
  WindowSet<float> ws = window_partition(x, 4);
  CHECK(ws.windows.n() == 2 * 3 * 2);
  CHECK(oracle::bitwise_equal(window_merge(ws), x));

  CHECK_THROWS_WITH_AS(window_partition(x, 5), doctest::Contains("pad"),
                       ShapeError);
}

TEST_CASE("attention_naive: P=1 returns v exactly") {
  std::mt19937 g(33);
  Tensor4f q = oracle::random_tensor(g, 3, 4, 1, 1);
  Tensor4f k = oracle::random_tensor(g, 3, 4, 1, 1);
  Tensor4f v = oracle::random_tensor(g, 3, 4, 1, 1);
  RelPosTable<float> bias = random_bias(g, 1, 2);
  Tensor4f out = attention_naive(q, k, v, bias, 1);
  CHECK(oracle::bitwise_equal(out, v));
}

TEST_CASE("attention_naive: zero q and zero bias average the v rows") {
  std::mt19937 g(34);
  Tensor4f q(1, 2, 2, 2);
  Tensor4f k = oracle::random_tensor(g, 1, 2, 2, 2);
  Tensor4f v = oracle::random_tensor(g, 1, 2, 2, 2);
  RelPosTable<float> bias = RelPosTable<float>::zeros(2, 1);
  Tensor4f out = attention_naive(q, k, v, bias, 2);
  for (Index c = 0; c < 2; ++c) {
    const float mean = v.plane_array(0, c).mean();
    for (int p = 0; p < 4; ++p)
      CHECK(out.plane(0, c)[p] == doctest::Approx(mean).epsilon(1e-6));
  }
}

TEST_CASE("attention_naive: matches the scalar softmax oracle on hand-fed values") {
  // smallest nontrivial window (ws=2, P=4), one head, d=1
  Tensor4f q(1, 1, 2, 2), k(1, 1, 2, 2), v(1, 1, 2, 2);
  const float qv[4] = {0.5f, -1.0f, 2.0f, 0.0f};
  const float kv[4] = {1.0f, 0.25f, -0.75f, 1.5f};
  const float vv[4] = {3.0f, -2.0f, 0.5f, 1.0f};
  for (int i = 0; i < 4; ++i) {
    q.plane(0, 0)[i] = qv[i];
    k.plane(0, 0)[i] = kv[i];
    v.plane(0, 0)[i] = vv[i];
  }
  RelPosTable<float> bias = RelPosTable<float>::zeros(2, 1);
  bias.at(0, 0, 1) = 0.5f;
  bias.at(0, -1, 0) = -0.25f;
  Tensor4f got = attention_naive(q, k, v, bias, 2);
  Tensor4f want = attention_oracle(q, k, v, bias, 2);
  CHECK(oracle::max_abs_diff(got, want) <= 1e-6f);
}

TEST_CASE("attention backends: random windows match the oracle and each other") {
  std::mt19937 g(35);
  for (int seed = 0; seed < 8; ++seed) {
    const int ws = (seed % 2 == 0) ? 4 : 8;
    const int heads = 1 + seed % 3;
    const Index d = (seed % 2 == 0) ? 8 : 16;
    const Index c = heads * d;
    Tensor4f q = oracle::random_tensor(g, 2, c, ws, ws);
    Tensor4f k = oracle::random_tensor(g, 2, c, ws, ws);
    Tensor4f v = oracle::random_tensor(g, 2, c, ws, ws);
    RelPosTable<float> bias = random_bias(g, ws, heads);
    Tensor4f ref = attention_oracle(q, k, v, bias, ws);
    Tensor4f naive = attention_naive(q, k, v, bias, ws);
    CHECK(oracle::max_abs_diff(naive, ref) <= 1e-5f);
    for (int block : {1, 7, 64, ws * ws}) {
      Tensor4f tiled = attention_tiled(q, k, v, bias, ws, block);
      CHECK(oracle::max_abs_diff(tiled, naive) <= 1e-4f);
      CHECK(oracle::max_abs_diff(tiled, ref) <= 1e-4f);
    }
  }
}

TEST_CASE("attention_tiled: single covering block is numerically near naive") {
  std::mt19937 g(36);
  const int ws = 4;
  Tensor4f q = oracle::random_tensor(g, 1, 6, ws, ws);
  Tensor4f k = oracle::random_tensor(g, 1, 6, ws, ws);
  Tensor4f v = oracle::random_tensor(g, 1, 6, ws, ws);
  RelPosTable<float> bias = random_bias(g, ws, 2);
  Tensor4f naive = attention_naive(q, k, v, bias, ws);
  for (int block : {16, 50}) {  // block >= P degenerates to one tile
    Tensor4f tiled = attention_tiled(q, k, v, bias, ws, block);
    CHECK(oracle::max_abs_diff(tiled, naive) <= 1e-6f);
  }
}

TEST_CASE("attention: naive softmax rows sum to one") {
  std::mt19937 g(37);
  const int ws = 4;
  Tensor4f q = oracle::random_tensor(g, 2, 4, ws, ws);
  Tensor4f k = oracle::random_tensor(g, 2, 4, ws, ws);
  Tensor4f v = oracle::random_tensor(g, 2, 4, ws, ws);
  RelPosTable<float> bias = random_bias(g, ws, 2);
  std::vector<esc::detail::MatRM<float>> probs;
  attention_naive(q, k, v, bias, ws, nullptr, &probs);
  REQUIRE(probs.size() == 4);  // 2 windows x 2 heads
  for (const auto& m : probs)
    for (Index p = 0; p < m.rows(); ++p)
      CHECK(m.row(p).sum() == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("attention: permuting v channels permutes output channels identically") {
  std::mt19937 g(38);
  const int ws = 4;
  const Index c = 6;
  Tensor4f q = oracle::random_tensor(g, 1, c, ws, ws);
  Tensor4f k = oracle::random_tensor(g, 1, c, ws, ws);
  Tensor4f v = oracle::random_tensor(g, 1, c, ws, ws);
  RelPosTable<float> bias = random_bias(g, ws, 1);

  std::vector<Index> perm(static_cast<size_t>(c));
  std::iota(perm.begin(), perm.end(), Index(0));
  std::shuffle(perm.begin(), perm.end(), g);
  Tensor4f vp(1, c, ws, ws);
  for (Index i = 0; i < c; ++i)
    vp.plane_array(0, i) = v.plane_array(0, perm[size_t(i)]);

  Tensor4f base = attention_naive(q, k, v, bias, ws);
  Tensor4f permuted = attention_naive(q, k, vp, bias, ws);
  Tensor4f unshuffled(1, c, ws, ws);
  for (Index i = 0; i < c; ++i)
    unshuffled.plane_array(0, perm[size_t(i)]) = permuted.plane_array(0, i);
  CHECK(oracle::bitwise_equal(unshuffled, base));

  Tensor4f tiled_p = attention_tiled(q, k, vp, bias, ws, 5);
  Tensor4f tiled = attention_tiled(q, k, v, bias, ws, 5);
  for (Index i = 0; i < c; ++i)
    CHECK((tiled_p.plane_array(0, i) == tiled.plane_array(0, perm[size_t(i)])).all());
}

TEST_CASE("attention: workspace accounting matches its documented formulas") {
  std::mt19937 g(39);
  const int ws = 32, heads = 4, block = 64;
  const Index P = 1024, d = 16;
  Tensor4f q = oracle::random_tensor(g, 1, heads * d, ws, ws);
  RelPosTable<float> bias = random_bias(g, ws, heads);

  AttentionWorkspace wn, wt;
  attention_naive(q, q, q, bias, ws, &wn);
  attention_tiled(q, q, q, bias, ws, block, &wt);

  CHECK(wn.aux_floats_peak == Index(heads) * P * P);
  CHECK(wn.blocks_processed == heads);
  CHECK(wt.aux_floats_peak == P * block + 3 * P);
  CHECK(wt.blocks_processed == Index(heads) * (P / block));

  // spec bounds and the Table 1 analogue ratio
  CHECK(wn.aux_floats_peak >= Index(heads) * P * P);
  CHECK(wt.aux_floats_peak <= Index(heads) * (2 * P * block + 4 * P));
  CHECK(double(wn.aux_floats_peak) / double(wt.aux_floats_peak) >= 8.0);
}

TEST_CASE("attention: argument errors") {
  Tensor4f q(1, 2, 2, 2);
  RelPosTable<float> bias3 = RelPosTable<float>::zeros(2, 3);
  CHECK_THROWS_AS(attention_naive(q, q, q, bias3, 2), ShapeError);  // d fractional
  RelPosTable<float> bias4 = RelPosTable<float>::zeros(2, 4);
  Tensor4f q3(1, 3, 2, 2);
  CHECK_THROWS_AS(attention_naive(q3, q3, q3, bias4, 2), ShapeError);  // d = 0
  RelPosTable<float> bias1 = RelPosTable<float>::zeros(2, 1);
  CHECK_THROWS_AS(attention_tiled(q, q, q, bias1, 2, 0), ShapeError);
  Tensor4f other(1, 2, 2, 3);
  CHECK_THROWS_AS(attention_naive(q, q, other, bias1, 2), ShapeError);
}

TEST_CASE("attention_tiled: bitwise deterministic across calls") {
  std::mt19937 g(40);
  const int ws = 8;
  Tensor4f q = oracle::random_tensor(g, 2, 8, ws, ws);
  RelPosTable<float> bias = random_bias(g, ws, 2);
  Tensor4f a = attention_tiled(q, q, q, bias, ws, 7);
  Tensor4f b = attention_tiled(q, q, q, bias, ws, 7);
  CHECK(oracle::bitwise_equal(a, b));
}

TEST_CASE("self_attention_layer: shape, backend equivalence, zero projection") {
  std::mt19937 g(41);
  const int ws = 8, heads = 2;
  const Index C = 16;
  Tensor4f x = oracle::random_tensor(g, 1, C, 16, 24);

  SelfAttentionParams<float> p;
  p.ln_gamma = Eigen::ArrayXf(C);
  p.ln_beta = Eigen::ArrayXf(C);
  oracle::fill_uniform(p.ln_gamma, g, 0.5f, 1.5f);
  oracle::fill_uniform(p.ln_beta, g, -0.2f, 0.2f);
  p.relpos = random_bias(g, ws, heads);
  p.proj = oracle::random_kernel(g, 1, 1, int(C), int(C));

  Tensor4f tiled = self_attention_layer(x, p, {Backend::tiled, 16});
  CHECK(tiled.same_shape(x));
  Tensor4f naive = self_attention_layer(x, p, {Backend::naive, 0});
  CHECK(oracle::max_abs_diff(tiled, naive) <= 1e-4f);

  SelfAttentionParams<float> zp = p;
  zp.proj.weights.setZero();
  zp.proj.bias.setZero();
  Tensor4f zero_out = self_attention_layer(x, zp);
  CHECK((zero_out.array() == 0.f).all());

  Tensor4f odd = oracle::random_tensor(g, 1, C, 10, 16);
  CHECK_THROWS_AS(self_attention_layer(odd, p), ShapeError);
}
