#pragma once

#include <vector>

#include "esc/ops.hpp"
#include "esc/tensor.hpp"

namespace esc {

/// Weights of one ConvAttn layer: the two-layer 1x1 dynamic-kernel estimator
/// and the channel-fusing 1x1 projection. The large kernel lives separately
/// in SharedLargeKernel because it is shared across the whole network.
template <class S>
struct ConvAttnParams {
  ConvKernel<S> est_down;  // 1x1, slice -> hidden
  ConvKernel<S> est_up;    // 1x1, hidden -> 9*slice
  ConvKernel<S> fuse;      // 1x1, C -> C
  int slice = 16;
};

/// The network-wide large kernel, in exactly one of two forms: a dense
/// (L, L, 16, 16) kernel, or its depthwise-separable decomposition into a
/// 1x1 channel mixer and an (L, L, 1, 16) depthwise kernel.
template <class S>
struct SharedLargeKernel {
  enum class Mode { composed, decomposed };

  Mode mode = Mode::composed;
  ConvKernel<S> dense;  // composed mode
  ConvKernel<S> pw;     // decomposed mode, 1x1 mixer
  ConvKernel<S> dw;     // decomposed mode, depthwise spatial kernel

  static SharedLargeKernel make_composed(ConvKernel<S> k) {
    SharedLargeKernel lk;
    lk.mode = Mode::composed;
    lk.dense = std::move(k);
    return lk;
  }
  static SharedLargeKernel make_decomposed(ConvKernel<S> pw, ConvKernel<S> dw) {
    SharedLargeKernel lk;
    lk.mode = Mode::decomposed;
    lk.pw = std::move(pw);
    lk.dw = std::move(dw);
    return lk;
  }
  int spatial_size() const {
    return mode == Mode::composed ? dense.kh : dw.kh;
  }
};

namespace detail {

template <class S>
void check_estimator(const Tensor4<S>& f_att, const ConvAttnParams<S>& p) {
  if (f_att.c() != p.slice)
    throw ShapeError("estimate_dynamic_kernel: expected " +
                     std::to_string(p.slice) + " channels, got " +
                     std::to_string(f_att.c()));
  if (p.est_down.kh != 1 || p.est_down.kw != 1 || p.est_down.cin_per_group != p.slice)
    throw ShapeError("estimate_dynamic_kernel: est_down must be 1x1 over slice channels");
  if (p.est_up.kh != 1 || p.est_up.kw != 1 ||
      p.est_up.cin_per_group != p.est_down.cout || p.est_up.cout != 9 * p.slice)
    throw ShapeError("estimate_dynamic_kernel: est_up must map hidden to 9*slice channels");
}

}  // namespace detail

/// DK = reshape(est_up(gelu(est_down(GAP(f_att))))): one (3, 3, 1, slice)
/// depthwise kernel per batch item. The 9*slice estimator output reshapes
/// channel-major: flat elements [9c, 9c+9) become channel c's 3x3 taps.
template <class S>
std::vector<ConvKernel<S>> estimate_dynamic_kernel(const Tensor4<S>& f_att,
                                                   const ConvAttnParams<S>& p) {
  detail::check_estimator(f_att, p);
  Tensor4<S> up = conv2d(gelu(conv2d(global_avg_pool(f_att), p.est_down)), p.est_up);
  std::vector<ConvKernel<S>> dks;
  dks.reserve(static_cast<size_t>(f_att.n()));
  for (Index n = 0; n < f_att.n(); ++n) {
    ConvKernel<S> dk = ConvKernel<S>::zeros(3, 3, 1, p.slice, p.slice, false);
    for (Index i = 0; i < dk.weights.size(); ++i) dk.weights[i] = up(n, i, 0, 0);
    dks.push_back(std::move(dk));
  }
  return dks;
}

/// Spatially embed a 3x3 depthwise kernel in the center of a target x target
/// depthwise kernel, zero elsewhere.
template <class S>
ConvKernel<S> zero_pad_kernel(const ConvKernel<S>& dk, int target) {
  if (dk.cin_per_group != 1 || dk.groups != dk.cout)
    throw ShapeError("zero_pad_kernel: expected a depthwise kernel");
  if (target < dk.kh || (target - dk.kh) % 2 != 0)
    throw ShapeError("zero_pad_kernel: cannot center " + std::to_string(dk.kh) +
                     " inside " + std::to_string(target));
  const int off = (target - dk.kh) / 2;
  ConvKernel<S> out = ConvKernel<S>::zeros(target, target, 1, dk.cout, dk.groups,
                                           dk.has_bias());
  if (dk.has_bias()) out.bias = dk.bias;
  for (int c = 0; c < dk.cout; ++c)
    for (int u = 0; u < dk.kh; ++u)
      for (int v = 0; v < dk.kw; ++v)
        out.at(c, 0, off + u, off + v) = dk.at(c, 0, u, v);
  return out;
}

///// LK' = LK + embed(dk): dk's per-channel taps land at the spatial center of
/// the channel-diagonal entries, so (x (*) dk) + (x (*) LK) = x (*) LK'.
template <class S>
ConvKernel<S> merge_dk_into_lk(const ConvKernel<S>& dk, const ConvKernel<S>& lk) {
  if (lk.groups != 1 || lk.cin_per_group != lk.cout)
    throw ShapeError("merge_dk_into_lk: lk must be dense and square over channels");
  if (dk.cin_per_group != 1 || dk.groups != dk.cout || dk.cout != lk.cout)
    throw ShapeError("merge_dk_into_lk: dk must be depthwise over lk's channels");
  if (lk.kh < dk.kh || (lk.kh - dk.kh) % 2 != 0)
    throw ShapeError("merge_dk_into_lk: cannot center dk inside lk");
  const int off = (lk.kh - dk.kh) / 2;
  ConvKernel<S> merged = lk;
  for (int c = 0; c < dk.cout; ++c)
    for (int u = 0; u < dk.kh; ++u)
      for (int v = 0; v < dk.kw; ++v)
        merged.at(c, c, off + u, off + v) += dk.at(c, 0, u, v);
  return merged;
}

namespace detail {

template <class S>
void check_conv_attn(const Tensor4<S>& f_cf, const ConvAttnParams<S>& p) {
  if (f_cf.c() < p.slice)
    throw ShapeError("conv_attn: input channels " + std::to_string(f_cf.c()) +
                     " < slice " + std::to_string(p.slice));
  if (p.fuse.kh != 1 || p.fuse.kw != 1 || p.fuse.cin_per_group != f_cf.c() ||
      p.fuse.cout != f_cf.c())
    throw ShapeError("conv_attn: fuse must be 1x1 over all channels");
}

// Shared tail: concat the convolved slice with the untouched channels, fuse.
template <class S>
Tensor4<S> fuse_tail(const Tensor4<S>& f_cf, const Tensor4<S>& f_res,
                     const ConvAttnParams<S>& p) {
  if (f_cf.c() == p.slice) return conv2d(f_res, p.fuse);
  Tensor4<S> f_idt = slice_channels(f_cf, p.slice, f_cf.c() - p.slice);
  return conv2d(concat_channels(f_res, f_idt), p.fuse);
}

}  // namespace detail

/// ConvAttn, two-conv form: the first `slice` channels go through the
/// instance-estimated DK and the shared LK ("same" padding on both), the
/// remaining channels pass through, and a 1x1 fuse mixes everything back.
template <class S>
Tensor4<S> conv_attn_forward(const Tensor4<S>& f_cf, const SharedLargeKernel<S>& lk,
                             const ConvAttnParams<S>& p) {
  detail::check_conv_attn(f_cf, p);
  if (lk.mode != SharedLargeKernel<S>::Mode::composed)
    throw ShapeError("conv_attn_forward: large kernel mode mismatch, expected composed");
  Tensor4<S> f_att = slice_channels(f_cf, 0, p.slice);
  std::vector<ConvKernel<S>> dks = estimate_dynamic_kernel(f_att, p);
  Tensor4<S> f_res = conv2d(f_att, lk.dense, Pad::same(lk.dense.kh));
  for (Index n = 0; n < f_cf.n(); ++n) {
    Tensor4<S> dk_out = conv2d(batch_item(f_att, n), dks[size_t(n)], Pad::same(3));
    for (Index c = 0; c < p.slice; ++c)
      f_res.plane_array(n, c) += dk_out.plane_array(0, c);
  }
  return detail::fuse_tail(f_cf, f_res, p);
}

/// ConvAttn in the decomposed form: F_res = (F_att (*) LK^c) (*) (ZP(DK) + LK^s),
/// the depthwise-separable reformulation with DK folded into the spatial kernel.
template <class S>
Tensor4<S> conv_attn_decomposed(const Tensor4<S>& f_cf,
                                const SharedLargeKernel<S>& lk,
                                const ConvAttnParams<S>& p) {
  detail::check_conv_attn(f_cf, p);
  if (lk.mode != SharedLargeKernel<S>::Mode::decomposed)
    throw ShapeError("conv_attn_decomposed: large kernel mode mismatch, expected decomposed");
  Tensor4<S> f_att = slice_channels(f_cf, 0, p.slice);
  std::vector<ConvKernel<S>> dks = estimate_dynamic_kernel(f_att, p);
  Tensor4<S> mixed = conv2d(f_att, lk.pw);
  const int L = lk.dw.kh;
  Tensor4<S> f_res(f_cf.n(), p.slice, f_cf.h(), f_cf.w());
  for (Index n = 0; n < f_cf.n(); ++n) {
    ConvKernel<S> spatial = lk.dw;
    ConvKernel<S> padded = zero_pad_kernel(dks[size_t(n)], L);
    spatial.weights += padded.weights;
    Tensor4<S> item = conv2d(batch_item(mixed, n), spatial, Pad::same(L));
    for (Index c = 0; c < p.slice; ++c)
      f_res.plane_array(n, c) = item.plane_array(0, c);
  }
  return detail::fuse_tail(f_cf, f_res, p);
}

/// Testing-oriented variant of the two-conv form that first merges DK into
/// the dense LK and then performs a single convolution.
template <class S>
Tensor4<S> conv_attn_forward_merged(const Tensor4<S>& f_cf,
                                    const SharedLargeKernel<S>& lk,
                                    const ConvAttnParams<S>& p) {
  detail::check_conv_attn(f_cf, p);
  if (lk.mode != SharedLargeKernel<S>::Mode::composed)
    throw ShapeError("conv_attn_forward_merged: large kernel mode mismatch, expected composed");
  Tensor4<S> f_att = slice_channels(f_cf, 0, p.slice);
  std::vector<ConvKernel<S>> dks = estimate_dynamic_kernel(f_att, p);
  Tensor4<S> f_res(f_cf.n(), p.slice, f_cf.h(), f_cf.w());
  for (Index n = 0; n < f_cf.n(); ++n) {
    ConvKernel<S> merged = merge_dk_into_lk(dks[size_t(n)], lk.dense);
    Tensor4<S> item = conv2d(batch_item(f_att, n), merged, Pad::same(merged.kh));
    for (Index c = 0; c < p.slice; ++c)
      f_res.plane_array(n, c) = item.plane_array(0, c);
  }
  return detail::fuse_tail(f_cf, f_res, p);
}

}  // namespace esc
