#pragma once

#include <Eigen/Dense>
#include <functional>
#include <string>
#include <vector>

#include "esc/network.hpp"

namespace esc {

/// BT.601 studio-swing luma on the 0-255 scale from RGB in [0,1]:
/// Y = 16 + 65.481 R + 128.553 G + 24.966 B.
Tensor4f rgb_to_y(const Tensor4f& img);

/// Y-channel PSNR in dB after cropping `scale` pixels from every side.
/// Identical images return +infinity.
double psnr_y(const Tensor4f& sr, const Tensor4f& hr, int scale);

/// Y-channel mean SSIM (11x11 Gaussian window, sigma 1.5, K1 0.01, K2 0.03,
/// dynamic range 255) over the valid region, same crop rule as psnr_y.
double ssim_y(const Tensor4f& sr, const Tensor4f& hr, int scale);

/// Linear centered-kernel alignment between samples-by-features matrices:
/// |Y'X|_F^2 / (|X'X|_F |Y'Y|_F) after column centering.
double linear_cka(Eigen::MatrixXd x, Eigen::MatrixXd y);

enum class Similarity { cka, cosine };
std::string similarity_name(Similarity s);
Similarity parse_similarity(const std::string& name);

/// Pairwise layer-output similarity over a captured trace; symmetric with a
/// unit diagonal. CKA treats pixels as samples and channels as features;
/// cosine compares flattened spatially mean-pooled features.
Eigen::MatrixXd inter_layer_similarity(const FeatureTrace& trace, Similarity kind);

/// Nonnegative per-input-pixel influence on one output pixel.
struct AttributionMap {
  Index h = 0, w = 0;
  Index ty = 0, tx = 0;  // target output pixel (row, col)
  Eigen::ArrayXXd values;
};

using ForwardFn = std::function<Tensor4f(const Tensor4f&)>;

/// Central-difference sensitivity of output pixel (ty, tx) to each input
/// pixel (all input channels nudged together), positive part, averaged over
/// output channels. Runs 2 h w + 1 forwards.
AttributionMap perturbation_attribution(const ForwardFn& forward, const Tensor4f& img,
                                        Index ty, Index tx, double eps = 1e-3);

/// (1 - Gini) * 100 over the map's values; 100 means perfectly even spread.
double diffusion_index(const AttributionMap& a);

void write_matrix_csv(const Eigen::MatrixXd& m, const std::string& path,
                      const std::vector<std::string>& labels = {});
void write_attribution_csv(const AttributionMap& a, const std::string& path);

/// Peak-normalized single-channel rendering of an attribution map.
Tensor4f attribution_to_image(const AttributionMap& a);

}  // namespace esc
