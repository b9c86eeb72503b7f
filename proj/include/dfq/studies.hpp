// SPDX-License-Identifier: Apache-2.0
/**
 * @file   studies.hpp
 * @brief  Multi-run experiments: coherency-stratified subsets and bit-width
 *         sensitivity sweeps.
 */
#pragma once

#include <dfq/config.hpp>

#include <string>
#include <vector>

namespace dfq {

/// Held-out data divided into a part used only for checkpoint selection and
/// a disjoint part used only for reported accuracies.
struct EvalSplit {
  LabeledImages select;
  LabeledImages report;
};

/// The first `select_images` held-out samples select, the rest report.
/// Zero selects nothing (selection is then disabled).
EvalSplit split_heldout(const LabeledImages &heldout, std::size_t select_images);

/// One student: distill on `data`, pick the best epoch on `split.select`,
/// measure on `split.report`.
struct StudentRun {
  double accuracy = 0.0; ///< selected student on the report split
  std::size_t best_epoch = 0;
  std::vector<DistillLogEntry> log;
};

StudentRun train_student(const MicroViT &teacher, const Tensor &data,
                         const DistillConfig &cfg, const EvalSplit &split);

struct HistogramRow {
  double bin_center;
  std::size_t count;
  std::string subset;
  double accuracy; ///< subset mean accuracy over seeds
};

struct SubsetResult {
  std::string name; ///< high, low, random, mimiq
  std::vector<double> coherency; ///< per image
  std::vector<double> accuracy;  ///< per seed
  double mean_accuracy() const;
  double mean_coherency() const;
};

struct MotivStudy {
  double base_mean_coherency = 0.0;
  double mimiq_mean_coherency = 0.0;
  std::vector<SubsetResult> subsets;
  std::vector<HistogramRow> histogram;

  const SubsetResult &subset(std::string_view name) const;
  /// bin_center,count,subset,accuracy
  std::string histogram_csv() const;
  /// subset,seed,accuracy,mean_coherency
  std::string subsets_csv() const;
};

/// Students on equal-size subsets: the most and least coherent images of the
/// base pool, a random base subset, and a random subset of the full-objective
/// pool; `cfg.seeds` students each. Histogram: 20 uniform bins over the
/// observed coherency range of all four subsets.
MotivStudy motiv_study(const MicroViT &teacher, const SynthDataset &base,
                       const SynthDataset &mimiq, const EvalSplit &split,
                       const MotivConfig &cfg, const DistillConfig &distill);

struct SweepPoint {
  std::string axis; ///< weight or activation
  BitSetting bits;
  std::vector<double> accuracy; ///< per seed
  double mean_accuracy() const;
};

struct SweepTable {
  std::vector<SweepPoint> points;

  /// Accuracy change from the lowest to the highest width along one axis.
  double delta(std::string_view axis) const;
  /// axis,weight_bits,activation_bits,seed,accuracy
  std::string csv() const;
};

/// From W{k0}A{k0} (k0 = smallest width), varies one side at a time over
/// `cfg.bits`. Shared settings are trained once and reused.
SweepTable sweep_bits(const MicroViT &teacher, const Tensor &data,
                      const EvalSplit &split, const SweepConfig &cfg,
                      const DistillConfig &distill);

/// Seed of the `i`-th repeat of a run configured with `base`.
std::uint64_t repeat_seed(std::uint64_t base, std::size_t i);

} // namespace dfq
