#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace esc {

using Index = std::int64_t;

/// Thrown when tensor/kernel dimensions are incompatible. The message names
/// the offending axis.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Thrown on malformed, truncated or unwritable files.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
inline std::string dims_str(Index n, Index c, Index h, Index w) {
  return "(" + std::to_string(n) + ", " + std::to_string(c) + ", " +
         std::to_string(h) + ", " + std::to_string(w) + ")";
}
}  // namespace detail

/// Dense rank-4 array in (batch, channel, height, width) order, row-major:
/// index = ((n*C + c)*H + y)*W + x. Each (n, c) spatial plane is contiguous.
template <class Scalar>
class Tensor4 {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Tensor4() = default;

  Tensor4(Index n, Index c, Index h, Index w) : n_(n), c_(c), h_(h), w_(w) {
    if (n < 0 || c < 0 || h < 0 || w < 0)
      throw ShapeError("Tensor4: negative dimension " + detail::dims_str(n, c, h, w));
    data_ = Array::Zero(n * c * h * w);
  }

  static Tensor4 full(Index n, Index c, Index h, Index w, Scalar value) {
    Tensor4 t(n, c, h, w);
    t.data_.setConstant(value);
    return t;
  }

  Index n() const { return n_; }
  Index c() const { return c_; }
  Index h() const { return h_; }
  Index w() const { return w_; }
  Index size() const { return data_.size(); }
  bool same_shape(const Tensor4& o) const {
    return n_ == o.n_ && c_ == o.c_ && h_ == o.h_ && w_ == o.w_;
  }
  std::string shape_str() const { return detail::dims_str(n_, c_, h_, w_); }

  Scalar& operator()(Index n, Index c, Index y, Index x) {
    return data_[((n * c_ + c) * h_ + y) * w_ + x];
  }
  Scalar operator()(Index n, Index c, Index y, Index x) const {
    return data_[((n * c_ + c) * h_ + y) * w_ + x];
  }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  /// Pointer to the contiguous (h, w) plane of channel c in batch item n.
  Scalar* plane(Index n, Index c) { return data_.data() + (n * c_ + c) * h_ * w_; }
  const Scalar* plane(Index n, Index c) const {
    return data_.data() + (n * c_ + c) * h_ * w_;
  }

  /// Flat view over all elements, for coefficient-wise expressions.
  Array& array() { return data_; }
  const Array& array() const { return data_; }

  Eigen::Map<Array> plane_array(Index n, Index c) {
    return Eigen::Map<Array>(plane(n, c), h_ * w_);
  }
  Eigen::Map<const Array> plane_array(Index n, Index c) const {
    return Eigen::Map<const Array>(plane(n, c), h_ * w_);
  }

  bool all_finite() const { return data_.isFinite().all(); }

 private:
  Index n_ = 0, c_ = 0, h_ = 0, w_ = 0;
  Array data_;
};

using Tensor4f = Tensor4<float>;
using Tensor4d = Tensor4<double>;

/// Convolution weights stored [c_out][c_in_per_group][kh][kw], row-major.
/// `groups` splits both input and output channels into contiguous blocks;
/// a depthwise kernel has c_in_per_group == 1 and groups == channel count.
template <class Scalar>
struct ConvKernel {
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  int kh = 0, kw = 0;
  int cin_per_group = 0;
  int cout = 0;
  int groups = 1;
  Array weights;  // cout * cin_per_group * kh * kw
  Array bias;     // empty (no bias) or cout

  static ConvKernel zeros(int kh, int kw, int cin_per_group, int cout,
                          int groups = 1, bool with_bias = true) {
    ConvKernel k;
    k.kh = kh;
    k.kw = kw;
    k.cin_per_group = cin_per_group;
    k.cout = cout;
    k.groups = groups;
    k.weights = Array::Zero(static_cast<Index>(cout) * cin_per_group * kh * kw);
    if (with_bias) k.bias = Array::Zero(cout);
    return k;
  }

  /// 1x1 kernel acting as the identity map over `c` channels, zero bias.
  static ConvKernel identity1x1(int c) {
    ConvKernel k = zeros(1, 1, c, c);
    for (int i = 0; i < c; ++i) k.at(i, i, 0, 0) = Scalar(1);
    return k;
  }

  /// Depthwise kernel with a single centered unit tap per channel (identity).
  static ConvKernel delta_depthwise(int channels, int ksize) {
    ConvKernel k = zeros(ksize, ksize, 1, channels, channels, false);
    for (int c = 0; c < channels; ++c)
      k.at(c, 0, ksize / 2, ksize / 2) = Scalar(1);
    return k;
  }

  Scalar& at(int o, int i, int u, int v) {
    return weights[((static_cast<Index>(o) * cin_per_group + i) * kh + u) * kw + v];
  }
  Scalar at(int o, int i, int u, int v) const {
    return weights[((static_cast<Index>(o) * cin_per_group + i) * kh + u) * kw + v];
  }

  bool has_bias() const { return bias.size() > 0; }
  Index weight_count() const { return weights.size(); }
};

using ConvKernelF = ConvKernel<float>;

/// Per-side spatial padding amounts.
struct Pad {
  int top = 0, bottom = 0, left = 0, right = 0;

  static Pad uniform(int p) { return Pad{p, p, p, p}; }
  /// "Same" zero padding for an odd kernel size.
  static Pad same(int ksize) { return uniform((ksize - 1) / 2); }
  bool any() const { return top || bottom || left || right; }
};

}  // namespace esc
