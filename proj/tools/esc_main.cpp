#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>
#include <string>
#include <vector>

#include "esc/io.hpp"
#include "esc/metrics.hpp"

using namespace esc;

namespace {

// --config accepts a bare variant name or a key=value file path.
RunConfig resolve_config(const std::string& s) {
  if (s == "esc" || s == "esc-light" || s == "esc-fp") {
    RunConfig rc;
    rc.variant = parse_variant(s);
    return rc;
  }
  return load_run_config(s);
}

float unit_uniform(std::mt19937& g) {
  return float(g() >> 8) * (1.0f / 16777216.0f);
}

Tensor4f random_tensor(std::mt19937& g, Index n, Index c, Index h, Index w,
                       float lo = -1.f, float hi = 1.f) {
  Tensor4f t(n, c, h, w);
  for (Index i = 0; i < t.size(); ++i)
    t.array()[i] = lo + (hi - lo) * unit_uniform(g);
  return t;
}

ConvKernelF random_kernel(std::mt19937& g, int kh, int kw, int cin_pg, int cout,
                          int groups = 1, bool bias = true) {
  ConvKernelF k = ConvKernelF::zeros(kh, kw, cin_pg, cout, groups, bias);
  const float a = 1.0f / std::sqrt(float(cin_pg) * float(kh) * float(kw));
  for (Index i = 0; i < k.weights.size(); ++i)
    k.weights[i] = (2.f * unit_uniform(g) - 1.f) * a;
  if (bias)
    for (Index i = 0; i < k.bias.size(); ++i)
      k.bias[i] = (2.f * unit_uniform(g) - 1.f) * a;
  return k;
}

float max_abs_diff(const Tensor4f& a, const Tensor4f& b) {
  return (a.array() - b.array()).abs().maxCoeff();
}

std::string sci(float v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2e", double(v));
  return buf;
}

// ---------------------------------------------------------------- infer ----

struct InferArgs {
  std::string config, weights, input, output, backend;
  int scale = 0, block = 0;
};

int run_infer(const InferArgs& a) {
  RunConfig rc = resolve_config(a.config);
  if (a.scale > 0) rc.scale = a.scale;
  if (!a.backend.empty()) rc.backend = parse_backend(a.backend);
  if (a.block > 0) rc.block_size = a.block;
  const ModelConfig cfg = rc.to_model_config();
  const WeightStore store = load_weights(a.weights, cfg);
  const Tensor4f img = load_image(a.input);
  ForwardOptions opts;
  opts.backend = rc.backend;
  opts.block = rc.block_size;
  const Tensor4f out = esc_forward(img, store, cfg, opts);
  save_image(out, a.output);
  std::printf("wrote %s (%lldx%lld, x%d, %s backend)\n", a.output.c_str(),
              (long long)out.w(), (long long)out.h(), cfg.scale,
              backend_name(rc.backend).c_str());
  return 0;
}

// --------------------------------------------------------------- verify ----

struct Check {
  std::string name;
  bool ok;
  std::string detail;
};

void check_attention_equivalence(std::vector<Check>& out, int seeds) {
  float worst = 0.f;
  int cases = 0;
  for (int seed = 0; seed < seeds; ++seed) {
    std::mt19937 g(1000 + seed);
    for (int ws : {8, 16})
      for (int heads : {1, 2, 4}) {
        const int c = heads * 8, p = ws * ws;
        const Tensor4f x = random_tensor(g, 1, c, ws, ws);
        RelPosTable<float> bias = RelPosTable<float>::zeros(ws, heads);
        for (Index i = 0; i < bias.table.size(); ++i)
          bias.table[i] = 2.f * unit_uniform(g) - 1.f;
        const Tensor4f win = window_partition(x, ws).windows;
        const Tensor4f naive = attention_naive(win, win, win, bias, ws);
        for (int block : {1, 7, 64, p}) {
          const Tensor4f tiled =
              attention_tiled(win, win, win, bias, ws, block);
          worst = std::max(worst, max_abs_diff(naive, tiled));
          ++cases;
        }
      }
  }
  out.push_back({"attention: tiled equals naive", worst <= 1e-4f,
                 std::to_string(cases) + " cases, max |diff| " +
                     sci(worst)});
}

void check_window_round_trip(std::vector<Check>& out, int seeds) {
  bool ok = true;
  for (int seed = 0; seed < seeds; ++seed) {
    std::mt19937 g(2000 + seed);
    const Tensor4f x = random_tensor(g, 1, 5, 24, 16);
    const Tensor4f back = window_merge(window_partition(x, 8));
    ok = ok && back.same_shape(x) && (back.array() == x.array()).all();
  }
  out.push_back({"attention: window partition/merge inverse", ok, "bitwise"});
}

ConvAttnParams<float> random_ca(std::mt19937& g, int channels, int est_hidden) {
  ConvAttnParams<float> p;
  p.slice = 16;
  p.est_down = random_kernel(g, 1, 1, 16, est_hidden);
  p.est_up = random_kernel(g, 1, 1, est_hidden, 144);
  p.fuse = random_kernel(g, 1, 1, channels, channels);
  return p;
}

void check_conv_attn_merge(std::vector<Check>& out, int seeds) {
  float worst = 0.f;
  bool zero_ok = true;
  for (int seed = 0; seed < seeds; ++seed) {
    std::mt19937 g(3000 + seed);
    const int C = 64;
    ConvAttnParams<float> p = random_ca(g, C, 8);
    const auto lk = SharedLargeKernel<float>::make_composed(
        random_kernel(g, 13, 13, 16, 16, 1, false));
    const Tensor4f x = random_tensor(g, 2, C, 13, 17);
    worst = std::max(worst, max_abs_diff(conv_attn_forward(x, lk, p),
                                         conv_attn_forward_merged(x, lk, p)));

    // zero dynamic kernel: merged kernel must reduce to the static one
    ConvKernelF dk = ConvKernelF::zeros(3, 3, 1, 16, 16, false);
    ConvKernelF merged = merge_dk_into_lk(dk, lk.dense);
    zero_ok = zero_ok && (merged.weights == lk.dense.weights).all();
  }
  out.push_back({"conv-attn: merged kernel equals two-conv form", worst <= 1e-5f,
                 "max |diff| " + sci(worst)});
  out.push_back({"conv-attn: zero dynamic kernel merge identity", zero_ok,
                 "bitwise"});
}

void check_conv_attn_decomposed(std::vector<Check>& out, int seeds) {
  float worst = 0.f;
  for (int seed = 0; seed < seeds; ++seed) {
    std::mt19937 g(4000 + seed);
    const int C = 48;
    ConvAttnParams<float> p = random_ca(g, C, 4);
    const auto lk = SharedLargeKernel<float>::make_decomposed(
        random_kernel(g, 1, 1, 16, 16, 1, false),
        random_kernel(g, 13, 13, 1, 16, 16, false));
    const Tensor4f x = random_tensor(g, 1, C, 14, 15);
    const Tensor4f fast = conv_attn_decomposed(x, lk, p);

    // dense composition of the same factorization
    const Tensor4f f_att = slice_channels(x, 0, 16);
    const std::vector<ConvKernelF> dks = estimate_dynamic_kernel(f_att, p);
    const ConvKernelF zp = zero_pad_kernel(dks[0], 13);
    ConvKernelF dense = ConvKernelF::zeros(13, 13, 16, 16, 1, false);
    for (int o = 0; o < 16; ++o)
      for (int i = 0; i < 16; ++i)
        for (int u = 0; u < 13; ++u)
          for (int v = 0; v < 13; ++v)
            dense.at(o, i, u, v) = lk.pw.at(o, i, 0, 0) *
                                   (lk.dw.at(o, 0, u, v) + zp.at(o, 0, u, v));
    Tensor4f f_res = conv2d(f_att, dense, Pad::same(13));
    Tensor4f slow;
    if (C > 16) {
      const Tensor4f f_idt = slice_channels(x, 16, C - 16);
      slow = conv2d(concat_channels(f_res, f_idt), p.fuse);
    } else {
      slow = conv2d(f_res, p.fuse);
    }
    worst = std::max(worst, max_abs_diff(fast, slow));
  }
  out.push_back({"conv-attn: decomposed equals dense composition",
                 worst <= 1e-4f, "max |diff| " + sci(worst)});
}

void check_round_trips(std::vector<Check>& out) {
  ModelConfig cfg = ModelConfig::preset(Variant::esc, 2);
  cfg.channels = 16;
  cfg.blocks = 1;
  cfg.layers_per_block = 1;
  cfg.window = 4;
  cfg.est_hidden = 2;
  const WeightStore a = build_random_weights(cfg, 5);
  const std::string wpath = "/tmp/esc_verify_weights.escw";
  save_weights(a, wpath);
  const WeightStore b = load_weights(wpath, cfg);
  bool wok = a.size() == b.size();
  for (const auto& [name, t] : a)
    wok = wok && b.count(name) && b.at(name).data == t.data;
  out.push_back({"io: weight store round trip", wok, "bitwise"});
  std::remove(wpath.c_str());

  std::mt19937 g(6);
  Tensor4f img(1, 3, 7, 9);
  for (Index i = 0; i < img.size(); ++i) img.array()[i] = float(g() % 256) / 255.f;
  bool iok = true;
  for (const char* path :
       {"/tmp/esc_verify_img.ppm", "/tmp/esc_verify_img.png"}) {
    save_image(img, path);
    const Tensor4f back = load_image(path);
    iok = iok && back.same_shape(img) && (back.array() == img.array()).all();
    std::remove(path);
  }
  out.push_back({"io: image round trips", iok, "bitwise"});
}

int run_verify(int seeds) {
  std::vector<Check> checks;
  check_attention_equivalence(checks, seeds);
  check_window_round_trip(checks, seeds);
  check_conv_attn_merge(checks, seeds);
  check_conv_attn_decomposed(checks, seeds);
  check_round_trips(checks);

  int passed = 0;
  for (const Check& c : checks) {
    std::printf("%s  %-45s %s\n", c.ok ? "PASS" : "FAIL", c.name.c_str(),
                c.detail.c_str());
    passed += c.ok;
  }
  std::printf("%d/%zu checks passed\n", passed, checks.size());
  return passed == int(checks.size()) ? 0 : 1;
}

// ---------------------------------------------------------------- bench ----

int run_bench(int ws, int block, int heads, int repeats, int channels,
              int windows) {
  std::mt19937 g(42);
  SelfAttentionParams<float> params;
  params.ln_gamma = Eigen::ArrayXf::Ones(channels);
  params.ln_beta = Eigen::ArrayXf::Zero(channels);
  params.relpos = RelPosTable<float>::zeros(ws, heads);
  for (Index i = 0; i < params.relpos.table.size(); ++i)
    params.relpos.table[i] = 2.f * unit_uniform(g) - 1.f;
  params.proj = random_kernel(g, 1, 1, channels, channels);
  const Tensor4f x = random_tensor(g, 1, channels, ws, ws * windows);

  std::printf(
      "backend,window,block,heads,pixels,repeats,best_ms,mean_ms,"
      "aux_floats_peak,blocks_processed\n");
  for (Backend backend : {Backend::naive, Backend::tiled}) {
    AttentionWorkspace acct{};
    double best = 1e300, total = 0.0;
    for (int r = 0; r < repeats; ++r) {
      AttentionWorkspace w{};
      AttnOptions opts;
      opts.backend = backend;
      opts.block = block;
      const auto t0 = std::chrono::steady_clock::now();
      const Tensor4f y = self_attention_layer(x, params, opts, &w);
      const auto t1 = std::chrono::steady_clock::now();
      if (!y.all_finite()) throw std::runtime_error("bench: non-finite output");
      const double ms =
          std::chrono::duration<double, std::milli>(t1 - t0).count();
      best = std::min(best, ms);
      total += ms;
      acct = w;
    }
    std::printf("%s,%d,%d,%d,%lld,%d,%.3f,%.3f,%lld,%lld\n",
                backend_name(backend).c_str(), ws,
                backend == Backend::tiled ? block : 0, heads,
                (long long)(x.h() * x.w()), repeats, best, total / repeats,
                (long long)acct.aux_floats_peak,
                (long long)acct.blocks_processed);
  }
  return 0;
}

// ---------------------------------------------------------------- count ----

struct Published {
  std::int64_t params;
  double gflops;
};

// reference costs at HD-output input sizes (x2: 640x360, x3: 426x240, x4: 320x180)
bool published_for(Variant v, int scale, Published& out) {
  switch (v) {
    case Variant::esc:
      if (scale == 2) out = {947000, 592.0};
      else if (scale == 3) out = {955000, 267.6};
      else if (scale == 4) out = {968000, 149.2};
      else return false;
      return true;
    case Variant::esc_light:
      if (scale == 2) out = {603000, 359.4};
      else if (scale == 3) out = {612000, 162.8};
      else if (scale == 4) out = {624000, 91.0};
      else return false;
      return true;
    case Variant::esc_fp:
      if (scale == 2) out = {524000, 239.8};
      else if (scale == 3) out = {530000, 110.0};
      else if (scale == 4) out = {539000, 60.8};
      else return false;
      return true;
  }
  return false;
}

int run_count(const std::string& config, int scale, int height, int width) {
  RunConfig rc = resolve_config(config);
  if (scale > 0) rc.scale = scale;
  const ModelConfig cfg = rc.to_model_config();

  const bool default_dims = height == 0 && width == 0;
  const std::int64_t in_h = default_dims ? 720 / cfg.scale : height;
  const std::int64_t in_w = default_dims ? 1280 / cfg.scale : width;

  const std::int64_t params = count_params(cfg);
  const std::int64_t flops = count_flops(cfg, in_h, in_w);

  std::printf("variant: %s  scale: x%d\n", variant_name(cfg.variant).c_str(),
              cfg.scale);
  std::printf("parameters: %lld\n", (long long)params);
  Published ref;
  const bool canonical = cfg.window == 32 && cfg.heads == 4 &&
                         cfg.ffn_expand == 1.5 &&
                         published_for(cfg.variant, cfg.scale, ref);
  if (canonical)
    std::printf("  reference: %lld  deviation: %+.2f%%\n", (long long)ref.params,
                100.0 * double(params - ref.params) / double(ref.params));
  std::printf("flops @ %lldx%lld input: %.1f G\n", (long long)in_w,
              (long long)in_h, double(flops) / 1e9);
  if (canonical && default_dims)
    std::printf("  reference: %.1f G  deviation: %+.2f%%\n", ref.gflops,
                100.0 * (double(flops) / 1e9 - ref.gflops) / ref.gflops);
  return 0;
}

// -------------------------------------------------------------- analyze ----

struct AnalyzeArgs {
  std::string mode, config = "esc", weights, input, output = "analysis";
  std::string target;
  double eps = 1e-3;
  int scale = 0;
};

int run_analyze(const AnalyzeArgs& a) {
  RunConfig rc = resolve_config(a.config);
  if (a.scale > 0) rc.scale = a.scale;
  const ModelConfig cfg = rc.to_model_config();
  const WeightStore store = load_weights(a.weights, cfg);
  const EscModel model = build_model(store, cfg);
  const Tensor4f img = load_image(a.input);

  if (a.mode == "cka" || a.mode == "cosine") {
    FeatureTrace trace;
    ForwardOptions opts;
    opts.backend = rc.backend;
    opts.block = rc.block_size;
    opts.trace = &trace;
    esc_forward(img, model, opts);
    const Eigen::MatrixXd s =
        inter_layer_similarity(trace, parse_similarity(a.mode));
    std::vector<std::string> labels;
    for (const auto& [name, t] : trace.entries) labels.push_back(name);
    const std::string path = a.output + "_" + a.mode + ".csv";
    write_matrix_csv(s, path, labels);
    std::printf("wrote %s (%lldx%lld similarity matrix)\n", path.c_str(),
                (long long)s.rows(), (long long)s.cols());
    return 0;
  }
  if (a.mode == "attribution") {
    ForwardOptions opts;
    opts.backend = rc.backend;
    opts.block = rc.block_size;
    auto forward = [&](const Tensor4f& x) { return esc_forward(x, model, opts); };
    Index ty = img.h() * cfg.scale / 2, tx = img.w() * cfg.scale / 2;
    if (!a.target.empty() &&
        std::sscanf(a.target.c_str(), "%lld,%lld", (long long*)&ty,
                    (long long*)&tx) != 2)
      throw IoError("analyze: --target expects 'row,col', got '" + a.target + "'");
    const AttributionMap map =
        perturbation_attribution(forward, img, ty, tx, a.eps);
    write_attribution_csv(map, a.output + "_attribution.csv");
    save_image(attribution_to_image(map), a.output + "_attribution.png");
    std::printf("wrote %s_attribution.{csv,png}  target: (%lld, %lld)\n",
                a.output.c_str(), (long long)ty, (long long)tx);
    std::printf("diffusion index: %.4f\n", diffusion_index(map));
    return 0;
  }
  throw IoError("analyze: unknown mode '" + a.mode +
                "' (cka, cosine, attribution)");
}

// -------------------------------------------------------------- metrics ----

int run_metrics(const std::string& sr, const std::string& hr, int scale) {
  const Tensor4f s = load_image(sr);
  const Tensor4f h = load_image(hr);
  const double psnr = psnr_y(s, h, scale);
  const double ssim = ssim_y(s, h, scale);
  if (std::isinf(psnr))
    std::printf("PSNR: inf\n");
  else
    std::printf("PSNR: %.4f\n", psnr);
  std::printf("SSIM: %.6f\n", ssim);
  return 0;
}

// ---------------------------------------------------------- init-random ----

int run_init_random(const std::string& config, int scale, std::uint64_t seed,
                    const std::string& output) {
  RunConfig rc = resolve_config(config);
  if (scale > 0) rc.scale = scale;
  const ModelConfig cfg = rc.to_model_config();
  const WeightStore store = build_random_weights(cfg, seed);
  save_weights(store, output);
  std::printf("wrote %zu tensors (%lld parameters) to %s\n", store.size(),
              (long long)count_params(cfg), output.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "esc: windowed self-attention super-resolution inference and analysis"};
  app.require_subcommand(1);

  InferArgs ia;
  auto* inf = app.add_subcommand("infer", "upscale an image with a weight file");
  inf->add_option("--config", ia.config, "variant name or config file")->required();
  inf->add_option("--weights", ia.weights, "ESCW weight file")->required();
  inf->add_option("--input", ia.input, "input image (ppm/png)")->required();
  inf->add_option("--output", ia.output, "output image (ppm/png)")->required();
  inf->add_option("--backend", ia.backend, "naive or tiled");
  inf->add_option("--scale", ia.scale, "override upscaling factor");
  inf->add_option("--block", ia.block, "tiled attention key-block size");

  int seeds = 5;
  auto* ver = app.add_subcommand("verify", "run the oracle-equivalence suite");
  ver->add_option("--seeds", seeds, "random trials per check")
      ->check(CLI::PositiveNumber);

  int bws = 32, bblock = 64, bheads = 4, brepeats = 5, bchannels = 64,
      bwindows = 4;
  auto* ben = app.add_subcommand("bench", "time naive vs tiled attention");
  ben->add_option("--window-size", bws, "window side length");
  ben->add_option("--block", bblock, "tiled key-block size");
  ben->add_option("--heads", bheads, "attention heads");
  ben->add_option("--repeats", brepeats, "timing repetitions");
  ben->add_option("--channels", bchannels, "feature channels");
  ben->add_option("--windows", bwindows, "number of windows timed");

  std::string ccfg;
  int cscale = 0, cheight = 0, cwidth = 0;
  auto* cnt = app.add_subcommand("count", "parameter and flop report");
  cnt->add_option("--config", ccfg, "variant name or config file")->required();
  cnt->add_option("--scale", cscale, "override upscaling factor");
  cnt->add_option("--height", cheight, "input height for the flop estimate");
  cnt->add_option("--width", cwidth, "input width for the flop estimate");

  AnalyzeArgs aa;
  auto* ana = app.add_subcommand("analyze", "similarity and attribution maps");
  ana->add_option("--mode", aa.mode, "cka, cosine or attribution")->required();
  ana->add_option("--weights", aa.weights, "ESCW weight file")->required();
  ana->add_option("--input", aa.input, "input image")->required();
  ana->add_option("--config", aa.config, "variant name or config file");
  ana->add_option("--output", aa.output, "output path prefix");
  ana->add_option("--target", aa.target, "attribution target 'row,col'");
  ana->add_option("--eps", aa.eps, "finite-difference step");
  ana->add_option("--scale", aa.scale, "override upscaling factor");

  std::string msr, mhr;
  int mscale = 2;
  auto* met = app.add_subcommand("metrics", "psnr/ssim between two images");
  met->add_option("--sr", msr, "restored image")->required();
  met->add_option("--hr", mhr, "ground-truth image")->required();
  met->add_option("--scale", mscale, "border crop in pixels per side");

  std::string icfg, iout;
  std::uint64_t iseed = 0;
  int iscale = 0;
  auto* ini = app.add_subcommand("init-random", "write a seeded random weight file");
  ini->add_option("--config", icfg, "variant name or config file")->required();
  ini->add_option("--seed", iseed, "random seed");
  ini->add_option("--output", iout, "ESCW output path")->required();
  ini->add_option("--scale", iscale, "override upscaling factor");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*inf) return run_infer(ia);
    if (*ver) return run_verify(seeds);
    if (*ben) return run_bench(bws, bblock, bheads, brepeats, bchannels, bwindows);
    if (*cnt) return run_count(ccfg, cscale, cheight, cwidth);
    if (*ana) return run_analyze(aa);
    if (*met) return run_metrics(msr, mhr, mscale);
    if (*ini) return run_init_random(icfg, iscale, iseed, iout);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
