#include "esc/network.hpp"

#include <cmath>
#include <random>

namespace esc {

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::esc: return "esc";
    case Variant::esc_light: return "esc-light";
    case Variant::esc_fp: return "esc-fp";
  }
  return "esc";
}

Variant parse_variant(const std::string& name) {
  if (name == "esc") return Variant::esc;
  if (name == "esc-light") return Variant::esc_light;
  if (name == "esc-fp") return Variant::esc_fp;
  throw ShapeError("unknown variant '" + name + "' (esc, esc-light, esc-fp)");
}

int ModelConfig::ffn_hidden() const {
  return int(std::lround(double(channels) * ffn_expand));
}

ModelConfig ModelConfig::preset(Variant v, int scale) {
  ModelConfig c;
  c.variant = v;
  c.scale = scale;
  switch (v) {
    case Variant::esc:
      break;
    case Variant::esc_light:
      c.blocks = 3;
      break;
    case Variant::esc_fp:
      c.channels = 48;
      c.est_hidden = 4;
      c.decomposed_lk = true;
      c.extra_ln = true;
      break;
  }
  return c;
}

void ModelConfig::validate() const {
  if (channels < 16)
    throw ShapeError("ModelConfig: channels must be >= 16 (the ConvAttn slice)");
  if (blocks < 1 || layers_per_block < 1)
    throw ShapeError("ModelConfig: blocks and layers_per_block must be positive");
  if (window < 1) throw ShapeError("ModelConfig: window must be positive");
  if (scale < 1) throw ShapeError("ModelConfig: scale must be positive");
  if (est_hidden < 1) throw ShapeError("ModelConfig: est_hidden must be positive");
  if (heads < 1 || channels % heads != 0)
    throw ShapeError("ModelConfig: heads must divide channels");
  if (ffn_hidden() < 1) throw ShapeError("ModelConfig: ffn_expand too small");
  if (lk_size < 3 || lk_size % 2 == 0)
    throw ShapeError("ModelConfig: lk_size must be odd and >= 3");
}

std::int64_t NamedTensor::count() const {
  std::int64_t n = 1;
  for (std::int64_t d : dims) n *= d;
  return n;
}

namespace {

constexpr int kSlice = 16;

struct Enumerator {
  const ModelConfig& cfg;
  std::vector<TensorSpec> out;

  void tensor(std::string name, std::vector<std::int64_t> dims, std::int64_t fan) {
    out.push_back({std::move(name), std::move(dims), fan});
  }
  void conv(const std::string& name, std::int64_t cout, std::int64_t cin_pg,
            std::int64_t kh, std::int64_t kw, bool bias = true) {
    const std::int64_t fan = cin_pg * kh * kw;
    tensor(name + ".weight", {cout, cin_pg, kh, kw}, fan);
    if (bias) tensor(name + ".bias", {cout}, fan);
  }
  void ln(const std::string& name) {
    tensor(name + ".gamma", {cfg.channels}, 1);
    tensor(name + ".beta", {cfg.channels}, 1);
  }
  void ffn(const std::string& p) {
    const std::int64_t C = cfg.channels, E = cfg.ffn_hidden();
    conv(p + ".expand", E, C, 1, 1);
    conv(p + ".dw", E, 1, 3, 3);
    conv(p + ".project", C, E, 1, 1);
  }
  void large_kernel(const std::string& p) {
    const std::int64_t L = cfg.lk_size;
    if (cfg.decomposed_lk) {
      conv(p + ".pw", kSlice, kSlice, 1, 1, false);
      conv(p + ".dw", kSlice, 1, L, L, false);
    } else {
      conv(p + ".dense", kSlice, kSlice, L, L, false);
    }
  }

  void run() {
    const std::int64_t C = cfg.channels;
    conv("stem", C, 3, 3, 3);
    if (cfg.shared_lk) large_kernel("lk");
    for (int i = 0; i < cfg.blocks; ++i) {
      const std::string bi = "block" + std::to_string(i);
      ln(bi + ".ln0");
      ffn(bi + ".ffn0");
      ln(bi + ".attn.ln");
      const std::int64_t span = 2 * std::int64_t(cfg.window) - 1;
      tensor(bi + ".attn.relpos", {cfg.heads, span, span}, 1);
      conv(bi + ".attn.proj", C, C, 1, 1);
      for (int j = 0; j < cfg.layers_per_block; ++j) {
        const std::string lj = bi + ".layer" + std::to_string(j);
        if (cfg.extra_ln) ln(lj + ".ln");
        ffn(lj + ".ffn");
        conv(lj + ".ca.est_down", cfg.est_hidden, kSlice, 1, 1);
        conv(lj + ".ca.est_up", 9 * kSlice, cfg.est_hidden, 1, 1);
        conv(lj + ".ca.fuse", C, C, 1, 1);
        if (!cfg.shared_lk) large_kernel(lj + ".ca.lk");
      }
      ln(bi + ".ln1");
      conv(bi + ".conv", C, C, 3, 3);
    }
    conv("tail", C, C, 3, 3);
    conv("up", 3 * std::int64_t(cfg.scale) * cfg.scale, C, 3, 3);
  }
};

}  // namespace

std::vector<TensorSpec> enumerate_tensors(const ModelConfig& cfg) {
  cfg.validate();
  Enumerator e{cfg, {}};
  e.run();
  return e.out;
}

std::int64_t count_params(const ModelConfig& cfg) {
  std::int64_t total = 0;
  for (const TensorSpec& t : enumerate_tensors(cfg)) {
    std::int64_t n = 1;
    for (std::int64_t d : t.dims) n *= d;
    total += n;
  }
  return total;
}

std::int64_t conv2d_macs(std::int64_t kh, std::int64_t kw, std::int64_t cin_per_group,
                         std::int64_t cout, std::int64_t oh, std::int64_t ow) {
  return kh * kw * cin_per_group * cout * oh * ow;
}

std::int64_t count_flops(const ModelConfig& cfg, std::int64_t in_h,
                         std::int64_t in_w) {
  cfg.validate();
  const std::int64_t C = cfg.channels, E = cfg.ffn_hidden(), L = cfg.lk_size;
  const std::int64_t ws = cfg.window, r = cfg.scale, h = cfg.est_hidden;
  const std::int64_t N = cfg.blocks, M = cfg.layers_per_block;
  const std::int64_t ph = (in_h + ws - 1) / ws * ws;
  const std::int64_t pw = (in_w + ws - 1) / ws * ws;
  const std::int64_t px = ph * pw;       // trunk runs on padded dims
  const std::int64_t ipx = in_h * in_w;  // stem and upsampler on input dims
  const std::int64_t P = ws * ws;

  const std::int64_t ln = 4 * C;
  const std::int64_t ffn = C * E + 9 * E + E * C;
  const std::int64_t attn = 2 * P * C + C * C;  // score+value matmuls, projection
  const std::int64_t ca = cfg.decomposed_lk
                              ? kSlice * kSlice + L * L * kSlice + kSlice + C * C
                              : L * L * kSlice * kSlice + 9 * kSlice + kSlice + C * C;

  std::int64_t block_px = ln + ffn + ln + attn;
  block_px += M * ((cfg.extra_ln ? ln : 0) + ffn + ca);
  block_px += ln + 9 * C * C;

  std::int64_t macs = 0;
  macs += conv2d_macs(3, 3, 3, C, in_h, in_w);           // stem
  macs += N * block_px * px;                             // blocks
  macs += N * M * (kSlice * h + h * 9 * kSlice);         // estimators on pooled vectors
  macs += conv2d_macs(3, 3, C, C, ph, pw);               // closing trunk conv
  macs += conv2d_macs(3, 3, C, 3 * r * r, in_h, in_w);   // upsampler conv
  return macs;
}

namespace {

// Uniform in [0,1) from raw mt19937 draws; keeps stores portable across
// standard libraries.
float unit_uniform(std::mt19937& g) {
  return float(g() >> 8) * (1.0f / 16777216.0f);
}

}  // namespace

WeightStore build_random_weights(const ModelConfig& cfg, std::uint64_t seed) {
  std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32)};
  std::mt19937 gen(seq);
  WeightStore store;
  for (const TensorSpec& t : enumerate_tensors(cfg)) {
    NamedTensor nt;
    nt.dims = t.dims;
    std::int64_t n = 1;
    for (std::int64_t d : t.dims) n *= d;
    nt.data.resize(size_t(n));
    const float a = 1.0f / std::sqrt(float(t.fan_in));
    for (float& v : nt.data) v = (2.0f * unit_uniform(gen) - 1.0f) * a;
    store.emplace(t.name, std::move(nt));
  }
  return store;
}

void validate_weights(const WeightStore& store, const ModelConfig& cfg) {
  const std::vector<TensorSpec> specs = enumerate_tensors(cfg);
  for (const TensorSpec& t : specs) {
    auto it = store.find(t.name);
    if (it == store.end())
      throw ShapeError("weight store: missing tensor '" + t.name + "'");
    if (it->second.dims != t.dims) {
      std::string want, got;
      for (auto d : t.dims) want += std::to_string(d) + ",";
      for (auto d : it->second.dims) got += std::to_string(d) + ",";
      throw ShapeError("weight store: tensor '" + t.name + "' dims (" + got +
                       ") do not match architecture (" + want + ")");
    }
    if (std::int64_t(it->second.data.size()) != it->second.count())
      throw ShapeError("weight store: tensor '" + t.name + "' payload length mismatch");
  }
  if (store.size() != specs.size())
    for (const auto& [name, _] : store) {
      bool known = false;
      for (const TensorSpec& t : specs)
        if (t.name == name) {
          known = true;
          break;
        }
      if (!known)
        throw ShapeError("weight store: unexpected tensor '" + name + "'");
    }
}

namespace {

const NamedTensor& need(const WeightStore& s, const std::string& name) {
  auto it = s.find(name);
  if (it == s.end()) throw ShapeError("weight store: missing tensor '" + name + "'");
  return it->second;
}

Eigen::ArrayXf to_array(const NamedTensor& t) {
  return Eigen::Map<const Eigen::ArrayXf>(t.data.data(), Index(t.data.size()));
}

ConvKernelF to_kernel(const WeightStore& s, const std::string& prefix, int groups,
                      bool bias) {
  const NamedTensor& w = need(s, prefix + ".weight");
  ConvKernelF k;
  k.cout = int(w.dims[0]);
  k.cin_per_group = int(w.dims[1]);
  k.kh = int(w.dims[2]);
  k.kw = int(w.dims[3]);
  k.groups = groups;
  k.weights = to_array(w);
  if (bias) k.bias = to_array(need(s, prefix + ".bias"));
  return k;
}

LayerNormWeights to_ln(const WeightStore& s, const std::string& prefix) {
  return {to_array(need(s, prefix + ".gamma")), to_array(need(s, prefix + ".beta"))};
}

std::shared_ptr<SharedLargeKernel<float>> to_lk(const WeightStore& s,
                                                const std::string& prefix,
                                                const ModelConfig& cfg) {
  if (cfg.decomposed_lk)
    return std::make_shared<SharedLargeKernel<float>>(
        SharedLargeKernel<float>::make_decomposed(
            to_kernel(s, prefix + ".pw", 1, false),
            to_kernel(s, prefix + ".dw", kSlice, false)));
  return std::make_shared<SharedLargeKernel<float>>(
      SharedLargeKernel<float>::make_composed(
          to_kernel(s, prefix + ".dense", 1, false)));
}

ConvFfnWeights to_ffn(const WeightStore& s, const std::string& prefix) {
  ConvFfnWeights f;
  f.expand = to_kernel(s, prefix + ".expand", 1, true);
  f.dw = to_kernel(s, prefix + ".dw", f.expand.cout, true);
  f.project = to_kernel(s, prefix + ".project", 1, true);
  return f;
}

}  // namespace

EscModel build_model(const WeightStore& store, const ModelConfig& cfg) {
  validate_weights(store, cfg);
  EscModel m;
  m.cfg = cfg;
  m.stem = to_kernel(store, "stem", 1, true);
  if (cfg.shared_lk) m.lk = to_lk(store, "lk", cfg);
  for (int i = 0; i < cfg.blocks; ++i) {
    const std::string bi = "block" + std::to_string(i);
    BlockWeights bw;
    bw.ln0 = to_ln(store, bi + ".ln0");
    bw.ffn0 = to_ffn(store, bi + ".ffn0");
    LayerNormWeights attn_ln = to_ln(store, bi + ".attn.ln");
    bw.attn.ln_gamma = attn_ln.gamma;
    bw.attn.ln_beta = attn_ln.beta;
    bw.attn.relpos.ws = cfg.window;
    bw.attn.relpos.heads = cfg.heads;
    bw.attn.relpos.table = to_array(need(store, bi + ".attn.relpos"));
    bw.attn.proj = to_kernel(store, bi + ".attn.proj", 1, true);
    for (int j = 0; j < cfg.layers_per_block; ++j) {
      const std::string lj = bi + ".layer" + std::to_string(j);
      CaLayerWeights lw;
      if (cfg.extra_ln) {
        lw.has_ln = true;
        lw.ln = to_ln(store, lj + ".ln");
      }
      lw.ffn = to_ffn(store, lj + ".ffn");
      lw.ca.slice = kSlice;
      lw.ca.est_down = to_kernel(store, lj + ".ca.est_down", 1, true);
      lw.ca.est_up = to_kernel(store, lj + ".ca.est_up", 1, true);
      lw.ca.fuse = to_kernel(store, lj + ".ca.fuse", 1, true);
      lw.lk = cfg.shared_lk ? m.lk : to_lk(store, lj + ".ca.lk", cfg);
      bw.layers.push_back(std::move(lw));
    }
    bw.ln1 = to_ln(store, bi + ".ln1");
    bw.conv = to_kernel(store, bi + ".conv", 1, true);
    m.blocks.push_back(std::move(bw));
  }
  m.tail = to_kernel(store, "tail", 1, true);
  m.up = to_kernel(store, "up", 1, true);
  return m;
}

Tensor4f conv_ffn(const Tensor4f& x, const ConvFfnWeights& w) {
  Tensor4f h = gelu(conv2d(x, w.expand));
  h = conv2d(h, w.dw, Pad::same(3));
  return conv2d(h, w.project);
}

Tensor4f esc_block(const Tensor4f& f_prev, const BlockWeights& bw,
                   const ModelConfig& cfg, const ForwardOptions& opts,
                   const std::string& trace_prefix) {
  Tensor4f f_in =
      conv_ffn(layer_norm_channels(f_prev, bw.ln0.gamma, bw.ln0.beta), bw.ffn0);
  Tensor4f attn_out = self_attention_layer(
      f_in, bw.attn, AttnOptions{opts.backend, opts.block}, opts.workspace);
  if (opts.trace)
    opts.trace->entries.emplace_back(trace_prefix + ".attn", attn_out);
  Tensor4f x = std::move(f_in);
  x.array() += attn_out.array();

  int j = 0;
  for (const CaLayerWeights& layer : bw.layers) {
    Tensor4f u = layer.has_ln
                     ? conv_ffn(layer_norm_channels(x, layer.ln.gamma, layer.ln.beta),
                                layer.ffn)
                     : conv_ffn(x, layer.ffn);
    Tensor4f ca = cfg.decomposed_lk ? conv_attn_decomposed(u, *layer.lk, layer.ca)
                                    : conv_attn_forward(u, *layer.lk, layer.ca);
    if (opts.trace)
      opts.trace->entries.emplace_back(
          trace_prefix + ".layer" + std::to_string(j), ca);
    x.array() += ca.array();
    ++j;
  }

  Tensor4f out = conv2d(layer_norm_channels(x, bw.ln1.gamma, bw.ln1.beta), bw.conv,
                        Pad::same(3));
  out.array() += f_prev.array();
  return out;
}

namespace {

// Reflect-pads bottom/right up to window multiples. Reflection can add at
// most dim-1 per pass, so very small inputs take several passes.
Tensor4f pad_to_window(const Tensor4f& x, int ws) {
  Tensor4f cur = x;
  while (cur.h() % ws != 0 || cur.w() % ws != 0) {
    const Index need_h = (ws - cur.h() % ws) % ws;
    const Index need_w = (ws - cur.w() % ws) % ws;
    const Index ph = std::min<Index>(need_h, cur.h() - 1);
    const Index pw = std::min<Index>(need_w, cur.w() - 1);
    if (ph == 0 && pw == 0 && (need_h > 0 || need_w > 0))
      throw ShapeError("esc_forward: input too small to reflect-pad to a multiple of " +
                       std::to_string(ws));
    cur = pad_reflect(cur, Pad{0, int(ph), 0, int(pw)});
  }
  return cur;
}

}  // namespace

Tensor4f esc_forward(const Tensor4f& img, const EscModel& model,
                     const ForwardOptions& opts) {
  const ModelConfig& cfg = model.cfg;
  if (img.n() != 1)
    throw ShapeError("esc_forward: batch size must be 1, got " + img.shape_str());
  if (img.c() != 3)
    throw ShapeError("esc_forward: expected 3 input channels, got " + img.shape_str());
  if (img.h() < 1 || img.w() < 1)
    throw ShapeError("esc_forward: empty spatial extent " + img.shape_str());

  Tensor4f f0 = conv2d(img, model.stem, Pad::same(3));
  Tensor4f residual = pad_to_window(f0, cfg.window);
  Tensor4f x = residual;
  for (size_t i = 0; i < model.blocks.size(); ++i)
    x = esc_block(x, model.blocks[i], cfg, opts, "block" + std::to_string(i));
  x = conv2d(x, model.tail, Pad::same(3));
  x.array() += residual.array();
  x = crop(x, Pad{0, int(x.h() - img.h()), 0, int(x.w() - img.w())});

  Tensor4f pre = conv2d(x, model.up, Pad::same(3));
  if (cfg.variant == Variant::esc_fp) {
    Tensor4f out = pixel_shuffle(pre, cfg.scale);
    out.array() += bicubic_resize(img, cfg.scale).array();
    return out;
  }
  pre.array() += repeat_skip(img, cfg.scale).array();
  return pixel_shuffle(pre, cfg.scale);
}

Tensor4f esc_forward(const Tensor4f& img, const WeightStore& store,
                     const ModelConfig& cfg, const ForwardOptions& opts) {
  return esc_forward(img, build_model(store, cfg), opts);
}

}  // namespace esc
