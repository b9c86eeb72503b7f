// SPDX-License-Identifier: Apache-2.0
/**
 * @file   toy_shapes.hpp
 * @brief  Procedural shape-classification images (disk, square, cross,
 *         triangle) used as the full-precision training set.
 */
#pragma once

#include <dfq/vit.hpp>

#include <cstdint>

namespace dfq {

enum class Shape2d { Disk = 0, Square = 1, Cross = 2, Triangle = 3 };

struct ToyShapesConfig {
  std::size_t samples = 1000; ///< train + held-out
  std::size_t classes = 4;    ///< 2 or 4
  std::size_t side = 32;
  double noise = 0.05;
  double train_fraction = 0.8;
  std::uint64_t seed = 0;
  /// Shift and scale every pixel by the training split's global mean and
  /// standard deviation, so inputs match a standard-normal prior.
  bool standardize = true;

  void validate() const;
};

struct ToyShapes {
  LabeledImages train, heldout;
  double pixel_mean = 0.0; ///< subtracted before division (0 if raw)
  double pixel_std = 1.0;
};

/// Class-balanced: sample i carries label i mod C before the split
/// permutation. Bit-identical for equal configs on every platform (all
/// randomness comes from dfq::Rng).
ToyShapes make_toy_shapes(const ToyShapesConfig &cfg);

/// Renders one shape with 2x2 supersampling; `cx`, `cy`, `radius` in pixels.
std::vector<double> render_shape(Shape2d shape, std::size_t side, double cx,
                                 double cy, double radius, double angle);

} // namespace dfq
