#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "esc/ops.hpp"
#include "esc/tensor.hpp"

namespace esc {

enum class Backend { naive, tiled };

/// Scratch accounting for one attention pass. aux_floats_peak is the largest
/// number of auxiliary floats simultaneously live in any single window
/// (outputs and inputs excluded); blocks_processed counts key-block visits,
/// one per (window, head) full pass for the naive backend.
struct AttentionWorkspace {
  std::int64_t aux_floats_peak = 0;
  std::int64_t blocks_processed = 0;
};

/// Additive per-head score offset indexed by in-window coordinate offsets
/// (dy, dx) = query - key, each in [-(ws-1), ws-1]. Head-major storage.
template <class S>
struct RelPosTable {
  int ws = 0;
  int heads = 0;
  Eigen::Array<S, Eigen::Dynamic, 1> table;  // heads * (2ws-1)^2

  static RelPosTable zeros(int ws, int heads) {
    RelPosTable t;
    t.ws = ws;
    t.heads = heads;
    t.table = Eigen::Array<S, Eigen::Dynamic, 1>::Zero(
        static_cast<Index>(heads) * span(ws) * span(ws));
    return t;
  }

  static int span(int ws) { return 2 * ws - 1; }

  const S* head_table(int head) const {
    return table.data() + static_cast<Index>(head) * span(ws) * span(ws);
  }
  S at(int head, int dy, int dx) const {
    return head_table(head)[(dy + ws - 1) * span(ws) + (dx + ws - 1)];
  }
  S& at(int head, int dy, int dx) {
    return table[static_cast<Index>(head) * span(ws) * span(ws) +
                 (dy + ws - 1) * span(ws) + (dx + ws - 1)];
  }
};

/// Non-overlapping ws x ws tiling of a feature map whose spatial dims are
/// multiples of ws. Window order is batch-major, then row-major over tiles.
template <class S>
struct WindowSet {
  Tensor4<S> windows;  // (n * num_windows, c, ws, ws)
  Index n = 0, c = 0, hp = 0, wp = 0;
  int ws = 0;

  Index windows_per_image() const { return (hp / ws) * (wp / ws); }
};

template <class S>
WindowSet<S> window_partition(const Tensor4<S>& x, int ws) {
  if (ws < 1) throw ShapeError("window_partition: ws must be positive");
  if (x.h() % ws != 0 || x.w() % ws != 0)
    throw ShapeError("window_partition: spatial dims " + x.shape_str() +
                     " not multiples of ws=" + std::to_string(ws) +
                     "; pad the input first");
  WindowSet<S> out;
  out.n = x.n();
  out.c = x.c();
  out.hp = x.h();
  out.wp = x.w();
  out.ws = ws;
  const Index nwy = x.h() / ws, nwx = x.w() / ws;
  out.windows = Tensor4<S>(x.n() * nwy * nwx, x.c(), ws, ws);
  for (Index n = 0; n < x.n(); ++n)
    for (Index wy = 0; wy < nwy; ++wy)
      for (Index wx = 0; wx < nwx; ++wx) {
        const Index widx = (n * nwy + wy) * nwx + wx;
        for (Index c = 0; c < x.c(); ++c) {
          const S* src = x.plane(n, c) + wy * ws * x.w() + wx * ws;
          S* dst = out.windows.plane(widx, c);
          for (int row = 0; row < ws; ++row)
            std::memcpy(dst + Index(row) * ws, src + Index(row) * x.w(),
                        sizeof(S) * ws);
        }
      }
  return out;
}

template <class S>
Tensor4<S> window_merge(const WindowSet<S>& wset) {
  const int ws = wset.ws;
  const Index nwy = wset.hp / ws, nwx = wset.wp / ws;
  if (wset.windows.n() != wset.n * nwy * nwx || wset.windows.c() != wset.c ||
      wset.windows.h() != ws || wset.windows.w() != ws)
    throw ShapeError("window_merge: inconsistent WindowSet");
  Tensor4<S> out(wset.n, wset.c, wset.hp, wset.wp);
  for (Index n = 0; n < wset.n; ++n)
    for (Index wy = 0; wy < nwy; ++wy)
      for (Index wx = 0; wx < nwx; ++wx) {
        const Index widx = (n * nwy + wy) * nwx + wx;
        for (Index c = 0; c < wset.c; ++c) {
          const S* src = wset.windows.plane(widx, c);
          S* dst = out.plane(n, c) + wy * ws * out.w() + wx * ws;
          for (int row = 0; row < ws; ++row)
            std::memcpy(dst + Index(row) * out.w(), src + Index(row) * ws,
                        sizeof(S) * ws);
        }
      }
  return out;
}

namespace detail {

template <class S>
void check_attention_args(const Tensor4<S>& q, const Tensor4<S>& k,
                          const Tensor4<S>& v, const RelPosTable<S>& bias,
                          int ws) {
  if (!q.same_shape(k) || !q.same_shape(v))
    throw ShapeError("attention: q/k/v shapes differ");
  if (q.h() != ws || q.w() != ws)
    throw ShapeError("attention: window tensors must be ws x ws, got " +
                     q.shape_str());
  if (bias.ws != ws) throw ShapeError("attention: bias table built for other ws");
  if (bias.heads < 1) throw ShapeError("attention: heads must be positive");
  if (q.c() % bias.heads != 0 || q.c() / bias.heads == 0)
    throw ShapeError("attention: head dim d = c/heads is zero or fractional, c=" +
                     std::to_string(q.c()) + " heads=" + std::to_string(bias.heads));
}

// Adds bias(query p, key q) for keys [k0, k0+cnt) of one head into a score
// row. Index arithmetic hoisted over runs of constant key row.
template <class S, class Row>
void add_bias_row(Row&& row, const RelPosTable<S>& bias, int head, int ws,
                  Index p, Index k0, Index cnt) {
  const int span = RelPosTable<S>::span(ws);
  const S* tab = bias.head_table(head);
  const int py = int(p) / ws, px = int(p) % ws;
  Index j = 0;
  while (j < cnt) {
    const Index key = k0 + j;
    const int qy = int(key) / ws;
    const Index run = std::min<Index>(cnt - j, (Index(qy) + 1) * ws - key);
    const S* base = tab + (py - qy + ws - 1) * span + (px + ws - 1);
    int qx = int(key) % ws;
    for (Index t = 0; t < run; ++t, ++qx) row[j + t] += base[-qx];
    j += run;
  }
}

}  // namespace detail

/// Full-score-matrix windowed attention: softmax(q k^T / sqrt(d) + bias) v
/// per head. Materializes all heads' P x P scores at once (the reference
/// memory behavior the tiled variant is measured against).
template <class S>
Tensor4<S> attention_naive(
    const Tensor4<S>& q, const Tensor4<S>& k, const Tensor4<S>& v,
    const RelPosTable<S>& bias, int ws, AttentionWorkspace* workspace = nullptr,
    std::vector<detail::MatRM<S>>* probs_out = nullptr) {
  detail::check_attention_args(q, k, v, bias, ws);
  using Mat = detail::MatRM<S>;
  using MatCM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
  using Vec = Eigen::Array<S, Eigen::Dynamic, 1>;

  const Index P = Index(ws) * ws;
  const int heads = bias.heads;
  const Index d = q.c() / heads;
  const S scale = S(1) / std::sqrt(S(d));
  Tensor4<S> out(q.n(), q.c(), ws, ws);
  if (probs_out) probs_out->clear();

  AttentionWorkspace acc;
  Mat scores(static_cast<Index>(heads) * P, P);
  acc.aux_floats_peak = scores.size();

  for (Index w = 0; w < q.n(); ++w) {
    Eigen::Map<const MatCM> qm(q.plane(w, 0), P, q.c());
    Eigen::Map<const MatCM> km(k.plane(w, 0), P, q.c());
    Eigen::Map<const MatCM> vm(v.plane(w, 0), P, q.c());
    Eigen::Map<MatCM> om(out.plane(w, 0), P, q.c());
    for (int h = 0; h < heads; ++h) {
      auto sh = scores.middleRows(Index(h) * P, P);
      sh.noalias() = qm.middleCols(h * d, d) * km.middleCols(h * d, d).transpose();
      sh *= scale;
      for (Index p = 0; p < P; ++p)
        detail::add_bias_row(sh.row(p).data(), bias, h, ws, p, 0, P);
      Vec rowmax = sh.rowwise().maxCoeff();
      sh = (sh.colwise() - rowmax.matrix()).array().exp().matrix();
      Vec rowsum = sh.rowwise().sum();
      sh.array().colwise() /= rowsum;
      if (probs_out) probs_out->push_back(sh);
      om.middleCols(h * d, d).noalias() = sh * vm.middleCols(h * d, d);
    }
    acc.blocks_processed += heads;
  }
  if (workspace) *workspace = acc;
  return out;
}

/// Online-softmax tiled attention: streams key/value blocks of size `block`,
/// maintaining a running row maximum and normalizer; bias terms are computed
/// on the fly from the table, so no P x P object ever exists.
template <class S>
Tensor4<S> attention_tiled(const Tensor4<S>& q, const Tensor4<S>& k,
                           const Tensor4<S>& v, const RelPosTable<S>& bias,
                           int ws, int block,
                           AttentionWorkspace* workspace = nullptr) {
  detail::check_attention_args(q, k, v, bias, ws);
  if (block < 1) throw ShapeError("attention_tiled: block must be positive");
  using Mat = detail::MatRM<S>;
  using MatCM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
  using Vec = Eigen::Array<S, Eigen::Dynamic, 1>;

  const Index P = Index(ws) * ws;
  const Index B = std::min<Index>(block, P);
  const int heads = bias.heads;
  const Index d = q.c() / heads;
  const S scale = S(1) / std::sqrt(S(d));
  Tensor4<S> out(q.n(), q.c(), ws, ws);

  AttentionWorkspace acc;
  Mat sblk(P, B);
  Vec m(P), l(P), alpha(P);
  acc.aux_floats_peak = sblk.size() + m.size() + l.size() + alpha.size();

  for (Index w = 0; w < q.n(); ++w) {
    Eigen::Map<const MatCM> qm(q.plane(w, 0), P, q.c());
    Eigen::Map<const MatCM> km(k.plane(w, 0), P, q.c());
    Eigen::Map<const MatCM> vm(v.plane(w, 0), P, q.c());
    Eigen::Map<MatCM> om(out.plane(w, 0), P, q.c());
    for (int h = 0; h < heads; ++h) {
      auto oh = om.middleCols(h * d, d);
      m.setConstant(-std::numeric_limits<S>::infinity());
      l.setZero();
      oh.setZero();
      for (Index k0 = 0; k0 < P; k0 += B) {
        const Index cnt = std::min(B, P - k0);
        auto sb = sblk.topLeftCorner(P, cnt);
        sb.noalias() = qm.middleCols(h * d, d) *
                       km.middleCols(h * d, d).middleRows(k0, cnt).transpose();
        sb *= scale;
        for (Index p = 0; p < P; ++p)
          detail::add_bias_row(sb.row(p).data(), bias, h, ws, p, k0, cnt);
        Vec mnew = m.max(sb.rowwise().maxCoeff().array());
        alpha = (m - mnew).exp();  // first block: exp(-inf) = 0
        sb = (sb.colwise() - mnew.matrix()).array().exp().matrix();
        l = alpha * l + sb.rowwise().sum().array();
        oh.array().colwise() *= alpha;
        oh.noalias() += sb * vm.middleCols(h * d, d).middleRows(k0, cnt);
        m = mnew;
        ++acc.blocks_processed;
      }
      oh.array().colwise() /= l;
    }
  }
  if (workspace) *workspace = acc;
  return out;
}

/// Windowed self-attention layer without QKV projections: the normalized
/// input is head-split and used directly as q, k, and v, followed by a single
/// learned 1x1 output projection. No window shifting.
template <class S>
struct SelfAttentionParams {
  Eigen::Array<S, Eigen::Dynamic, 1> ln_gamma, ln_beta;
  RelPosTable<S> relpos;
  ConvKernel<S> proj;  // 1x1, C -> C
};

struct AttnOptions {
  Backend backend = Backend::tiled;
  int block = 64;
};

template <class S>
Tensor4<S> self_attention_layer(const Tensor4<S>& x,
                                const SelfAttentionParams<S>& params,
                                const AttnOptions& opts = {},
                                AttentionWorkspace* workspace = nullptr) {
  const int ws = params.relpos.ws;
  Tensor4<S> normed = layer_norm_channels(x, params.ln_gamma, params.ln_beta);
  WindowSet<S> wset = window_partition(normed, ws);
  AttentionWorkspace local;
  Tensor4<S> attended =
      opts.backend == Backend::naive
          ? attention_naive(wset.windows, wset.windows, wset.windows,
                            params.relpos, ws, &local)
          : attention_tiled(wset.windows, wset.windows, wset.windows,
                            params.relpos, ws, opts.block, &local);
  if (workspace) {
    workspace->aux_floats_peak =
        std::max(workspace->aux_floats_peak, local.aux_floats_peak);
    workspace->blocks_processed += local.blocks_processed;
  }
  wset.windows = std::move(attended);
  Tensor4<S> merged = window_merge(wset);
  return conv2d(merged, params.proj);
}

}  // namespace esc
