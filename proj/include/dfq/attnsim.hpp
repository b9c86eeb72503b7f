// SPDX-License-Identifier: Apache-2.0
/**
 * @file   attnsim.hpp
 * @brief  Structural similarity over attention maps, inter-head coherency and
 *         rank correlation.
 *
 * SSIM here is the global single-window form
 *
 *   SSIM(x, y) = (2 mu_x mu_y + c1)(2 sigma_xy + c2)
 *                / ((mu_x^2 + mu_y^2 + c1)(sigma_x^2 + sigma_y^2 + c2))
 *
 * with population moments, c1 = (0.01 R)^2, c2 = (0.03 R)^2 and R the dynamic
 * range (max - min) over both maps, floored at 1e-8.
 */
#pragma once

#include <dfq/tensor.hpp>
#include <dfq/vit.hpp>

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dfq {

/// One query's scores over the spatial key patches, as a square grid.
class AttnMap {
public:
  AttnMap(std::size_t side, std::vector<double> values);
  /// Infers the side from a perfect-square length.
  static AttnMap from_flat(std::vector<double> values);

  std::size_t side() const { return side_; }
  std::span<const double> values() const { return values_; }
  double at(std::size_t r, std::size_t c) const { return values_[r * side_ + c]; }

private:
  std::size_t side_;
  std::vector<double> values_;
};

inline constexpr double kSsimRangeFloor = 1e-8;

double ssim(std::span<const double> a, std::span<const double> b);
double ssim(const AttnMap &a, const AttnMap &b);

enum class Metric { AbsSsim, Dssim, Mse, L1, Kl };

std::string to_string(Metric m);
Metric parse_metric(std::string_view s);

/// abs_ssim: |SSIM|; dssim: -SSIM; mse, l1: elementwise means; kl: KL(a||b)
/// after a softmax over each flattened map.
double head_distance(const AttnMap &a, const AttnMap &b, Metric metric);
double head_distance(std::span<const double> a, std::span<const double> b,
                     Metric metric);

/// SSIM between corresponding rows of the last axis: [..., M] x [..., M]
/// -> [...]. Differentiable in both arguments, including through R.
Tensor ssim_rows(const Tensor &a, const Tensor &b);

/// Row-wise metric on the tape, [..., M] x [..., M] -> [...].
Tensor distance_rows(const Tensor &a, const Tensor &b, Metric metric);

struct CoherencyOptions {
  /// Use post-softmax maps instead of the pre-softmax logits Q K^T.
  bool post_softmax = false;
};

struct CoherencyReport {
  Tensor d_values;             // [L, B, P], D_{l,q} per image
  Tensor loss;                 // scalar mean over (l, b, q) of 1 - D
  Tensor per_image_similarity; // [B], mean over (l, q) of D
};

/// Per layer and spatial query q: gathers the N heads' maps (class-token key
/// column dropped), averages |SSIM| over all N^2 ordered head pairs
/// (including i = j) into D_{l,q}, and forms L_IHC = mean(1 - D).
CoherencyReport coherency(const AttentionStack &attn,
                          const CoherencyOptions &opt = {});

/// Spatial maps of one layer: [B, N, T, T] -> [B, N, P, P] with the class
/// token's row and column removed when present. Throws unless P is a perfect
/// square.
Tensor spatial_maps(const Tensor &maps, bool has_class_token);

enum class RankKind { Spearman, Kendall };

/// Spearman (average ranks for ties) or Kendall tau-b. Throws
/// std::domain_error when either series is constant.
double rank_correlation(std::span<const double> xs, std::span<const double> ys,
                        RankKind kind);

/// Average (fractional) ranks starting at 1.
std::vector<double> average_ranks(std::span<const double> xs);

} // namespace dfq
