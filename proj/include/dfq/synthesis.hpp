// SPDX-License-Identifier: Apache-2.0
/**
 * @file   synthesis.hpp
 * @brief  Data-free sample synthesis by gradient descent on input pixels
 *         under L_G = L_IHC + alpha * L_CL + beta * L_TV.
 */
#pragma once

#include <dfq/attnsim.hpp>
#include <dfq/vit.hpp>

#include <cstdint>
#include <stdexcept>

namespace dfq {

struct SynthConfig {
  std::size_t samples_total = 256;
  std::size_t batch = 32;
  std::size_t steps_per_batch = 2000;
  double alpha = 1.0;
  double beta = 2.5e-5;
  double lr = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  /// false gives the base synthesis (alpha * L_CL + beta * L_TV only).
  bool use_ihc = true;
  /// Coherency on post-softmax maps instead of pre-softmax logits.
  bool post_softmax = false;
  /// L_G is recorded every `trace_every` steps.
  std::size_t trace_every = 10;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SynthBatch {
  Tensor images; // [B, C, H, W], unclamped
  std::vector<int> labels;
  std::vector<double> coherency; ///< per-image mean D over (layer, query)
  std::vector<double> final_cl;  ///< per-image cross-entropy
  std::vector<double> final_tv;  ///< per-image total variation
  double final_ihc = 0.0;        ///< batch L_IHC at the last step
  std::vector<double> loss_trace; ///< L_G every trace_every steps
  std::uint64_t seed = 0;
  std::size_t restarts = 0;
};

struct SynthDataset {
  std::vector<SynthBatch> batches;

  std::size_t size() const;
  LabeledImages as_labeled() const;
  std::vector<double> coherency_scores() const;
  double mean_coherency() const;
};

class SynthesisError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Mean cross-entropy against one-hot targets.
Tensor loss_cl(const Tensor &logits, const std::vector<int> &labels);

/// Per-image sum of squared vertical and horizontal forward differences,
/// averaged over batch and channels. Needs H, W >= 2.
Tensor loss_tv(const Tensor &images);

SynthDataset synthesize(const MicroViT &teacher, const SynthConfig &cfg);

/// Per-image coherency (mean of D over layers and queries) under `model`.
std::vector<double> image_coherency(const MicroViT &model, const Tensor &images,
                                    bool post_softmax = false,
                                    std::size_t batch = 64);

struct Strata {
  std::vector<std::size_t> high, low, random;
};

/// Top / bottom `fraction` of images by score (stable by index on ties) and
/// a seeded random subset of the same size.
Strata stratify_by_coherency(const std::vector<double> &scores,
                             double fraction, std::uint64_t seed);

} // namespace dfq
