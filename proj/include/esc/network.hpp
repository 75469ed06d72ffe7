#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "esc/attention.hpp"
#include "esc/conv_attn.hpp"

namespace esc {

enum class Variant { esc, esc_light, esc_fp };

std::string variant_name(Variant v);
Variant parse_variant(const std::string& name);  // throws on unknown names

/// Architecture hyperparameters. Defaults describe the full ESC model;
/// `preset` fills the published per-variant values. ffn_expand=1.5 and
/// heads=4 are the calibrated defaults that land the parameter counts on
/// the published totals.
struct ModelConfig {
  Variant variant = Variant::esc;
  int channels = 64;         // C
  int blocks = 5;            // N
  int layers_per_block = 5;  // M, ConvAttn layers per block
  int window = 32;           // ws
  int scale = 2;             // r
  int est_hidden = 8;        // kernel-estimator hidden width
  int heads = 4;
  double ffn_expand = 1.5;
  int lk_size = 13;
  bool decomposed_lk = false;
  bool extra_ln = false;
  bool shared_lk = true;  // false builds per-layer large kernels (ablation)

  int ffn_hidden() const;
  static ModelConfig preset(Variant v, int scale);
  void validate() const;  // throws ShapeError on inconsistent settings
};

/// One serialized tensor: dims plus flat row-major payload.
struct NamedTensor {
  std::vector<std::int64_t> dims;
  std::vector<float> data;

  std::int64_t count() const;
};

using WeightStore = std::map<std::string, NamedTensor>;

/// One entry of the architecture's tensor enumeration. fan_in drives the
/// random-init scale (1 for norm/bias-table parameters).
struct TensorSpec {
  std::string name;
  std::vector<std::int64_t> dims;
  std::int64_t fan_in = 1;
};

/// The single authoritative walk over every tensor the config requires;
/// parameter counting, random init, and weight validation all consume it.
std::vector<TensorSpec> enumerate_tensors(const ModelConfig& cfg);

std::int64_t count_params(const ModelConfig& cfg);

/// MACs of one convolution: kh*kw*cin_per_group*cout*oh*ow.
std::int64_t conv2d_macs(std::int64_t kh, std::int64_t kw, std::int64_t cin_per_group,
                         std::int64_t cout, std::int64_t oh, std::int64_t ow);

/// Analytic multiply-accumulate count for one forward pass at the given
/// input size (1 MAC counted as 1 FLOP). Counts convolutions and attention
/// matmuls exactly, layer norms at 4 MACs per element, pooling at 1 per
/// element; elementwise activations, softmax normalization, residual adds,
/// pixel shuffling, and the bicubic skip are counted as zero.
std::int64_t count_flops(const ModelConfig& cfg, std::int64_t in_h,
                         std::int64_t in_w);

/// Deterministic seeded initialization, uniform in [-a, a] with
/// a = 1/sqrt(fan_in), covering exactly the enumerated names.
WeightStore build_random_weights(const ModelConfig& cfg, std::uint64_t seed);

/// Exact name/shape agreement between a store and the config's enumeration.
void validate_weights(const WeightStore& store, const ModelConfig& cfg);

struct LayerNormWeights {
  Eigen::ArrayXf gamma, beta;
};

struct ConvFfnWeights {
  ConvKernelF expand, dw, project;
};

struct CaLayerWeights {
  bool has_ln = false;
  LayerNormWeights ln;  // present when the config asks for extra norms
  ConvFfnWeights ffn;
  ConvAttnParams<float> ca;
  std::shared_ptr<SharedLargeKernel<float>> lk;  // network-shared unless unshared config
};

struct BlockWeights {
  LayerNormWeights ln0;
  ConvFfnWeights ffn0;
  SelfAttentionParams<float> attn;
  std::vector<CaLayerWeights> layers;
  LayerNormWeights ln1;
  ConvKernelF conv;  // closing 3x3
};

/// Weights bound into ready-to-run structures. `lk` is the shared instance
/// every layer references when the config shares it.
struct EscModel {
  ModelConfig cfg;
  ConvKernelF stem;
  std::shared_ptr<SharedLargeKernel<float>> lk;
  std::vector<BlockWeights> blocks;
  ConvKernelF tail;
  ConvKernelF up;
};

EscModel build_model(const WeightStore& store, const ModelConfig& cfg);

/// Intermediate activations captured during a forward pass: each attention
/// and ConvAttn output, taken before its residual add.
struct FeatureTrace {
  std::vector<std::pair<std::string, Tensor4f>> entries;
};

struct ForwardOptions {
  Backend backend = Backend::tiled;
  int block = 64;
  AttentionWorkspace* workspace = nullptr;
  FeatureTrace* trace = nullptr;
};

/// pointwise expand -> GELU -> depthwise 3x3 -> pointwise project.
Tensor4f conv_ffn(const Tensor4f& x, const ConvFfnWeights& w);

/// One ESCBlock: ConvFFN(LN(x)), residual self-attention, M residual
/// ConvAttn(ConvFFN(.)) layers, then LN -> 3x3 conv -> block residual.
Tensor4f esc_block(const Tensor4f& f_prev, const BlockWeights& bw,
                   const ModelConfig& cfg, const ForwardOptions& opts = {},
                   const std::string& trace_prefix = {});

/// Full pipeline: stem, reflect-pad to window multiples, N blocks, closing
/// conv, global residual, crop, then the variant's upsampler and skip.
Tensor4f esc_forward(const Tensor4f& img, const EscModel& model,
                     const ForwardOptions& opts = {});
Tensor4f esc_forward(const Tensor4f& img, const WeightStore& store,
                     const ModelConfig& cfg, const ForwardOptions& opts = {});

}  // namespace esc
