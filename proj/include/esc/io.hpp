#pragma once

#include <string>

#include "esc/network.hpp"

namespace esc {

/// Loads an 8-bit RGB image (binary PPM "P6" or PNG) as (1,3,h,w) in [0,1].
/// 16-bit PNGs and other depths are rejected.
Tensor4f load_image(const std::string& path);

/// Saves a (1,3,h,w) or (1,1,h,w) tensor as .ppm or .png by extension.
/// Values are clamped to [0,1] and rounded half away from zero to 8 bits.
void save_image(const Tensor4f& img, const std::string& path);

/// Binary weight container: magic "ESCW", version u16, tensor count u32,
/// then per tensor name (u16 length + bytes), dtype u8 (0 = f32), rank u8,
/// dims u32 each, raw f32 payload. All integers little-endian. Tensors are
/// written in name order, so save then load is bitwise identity.
void save_weights(const WeightStore& store, const std::string& path);
WeightStore load_weights(const std::string& path);
/// Load plus exact name/shape validation against the config's architecture.
WeightStore load_weights(const std::string& path, const ModelConfig& cfg);

std::string backend_name(Backend b);
Backend parse_backend(const std::string& name);

/// Textual key=value run settings; '#' starts a comment. Keys: variant,
/// scale, window_size, backend, block_size, seed, heads, ffn_expand.
/// Unknown keys are rejected.
struct RunConfig {
  Variant variant = Variant::esc;
  int scale = 2;
  int window_size = 32;
  Backend backend = Backend::tiled;
  int block_size = 64;
  std::uint64_t seed = 0;
  int heads = 4;
  double ffn_expand = 1.5;

  /// Preset for the variant/scale with the architectural overrides applied.
  ModelConfig to_model_config() const;
};

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

}  // namespace esc
