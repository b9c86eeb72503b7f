// SPDX-License-Identifier: Apache-2.0
/**
 * @file   distill.hpp
 * @brief  Quantization-aware fine-tuning of a fake-quantized student against
 *         a frozen teacher: L_T = KL(f_T || f_S) + gamma * L_HAD.
 */
#pragma once

#include <dfq/attnsim.hpp>
#include <dfq/quant.hpp>
#include <dfq/vit.hpp>

#include <cstdint>
#include <optional>
#include <stdexcept>

namespace dfq {

enum class Augmentation { None, CropFlip };
std::string to_string(Augmentation a);
Augmentation parse_augmentation(std::string_view s);

/// What L_HAD compares per head: post-softmax attention maps (default) or the
/// head outputs softmax(Q K^T / sqrt(d)) V.
enum class HadTarget { Maps, HeadOutputs };
std::string to_string(HadTarget t);
HadTarget parse_had_target(std::string_view s);

struct DistillConfig {
  double gamma = 1.0;
  Metric metric = Metric::Dssim;
  HadTarget had_target = HadTarget::Maps;
  std::size_t epochs = 200;
  std::size_t batch = 16;
  double lr = 1e-3;
  double momentum = 0.9;
  double weight_decay = 0.0;
  BitSetting bits{4, 4};
  QuantMode mode = QuantMode::Lsq;
  Augmentation augmentation = Augmentation::CropFlip;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Random 28x28 crop (scaled to the image side) zero-padded back to full
/// size at the centre, then a horizontal flip with probability 1/2.
Tensor crop_flip(const Tensor &images, Rng &rng);

/// Mean over layers and heads of the per-head distance between teacher and
/// student. Maps drop the class-token row and column and average the metric
/// over query rows; the KL metric compares the spatial attention
/// distributions renormalized over the patch keys.
Tensor loss_had(const AttentionStack &teacher, const AttentionStack &student,
                Metric metric = Metric::Dssim,
                HadTarget target = HadTarget::Maps);

/// KL(softmax(teacher) || softmax(student)), temperature 1, batch mean.
Tensor loss_kl(const Tensor &teacher_logits, const Tensor &student_logits);

struct DistillLogEntry {
  std::size_t epoch;
  double loss_kl;
  double loss_had;
  double loss_total;
  std::optional<double> eval_accuracy;
};

struct DistillResult {
  QuantizedViT student;
  std::vector<DistillLogEntry> log;
  std::optional<double> best_accuracy;
  std::size_t best_epoch = 0;
  std::size_t steps = 0;
};

class DistillationError : public std::runtime_error {
public:
  DistillationError(const std::string &what, std::vector<DistillLogEntry> log)
      : std::runtime_error(what), log_(std::move(log)) {}
  const std::vector<DistillLogEntry> &telemetry() const { return log_; }

private:
  std::vector<DistillLogEntry> log_;
};

/// Fine-tunes a student initialized from `teacher` on `data` (labels are
/// ignored). With `eval`, returns the epoch with the best eval accuracy.
DistillResult run_distillation(const MicroViT &teacher, const Tensor &data,
                               const DistillConfig &cfg,
                               const LabeledImages *eval = nullptr);

struct CorrStudyConfig {
  std::size_t n_configs = 500;
  std::uint64_t seed = 7;
  BitSetting bits{4, 4};
  QuantMode mode = QuantMode::MinMax;
  std::size_t calibration_images = 64;
  std::vector<Metric> metrics{Metric::Dssim, Metric::Mse, Metric::L1,
                              Metric::Kl};
};

struct CorrSample {
  std::vector<std::vector<bool>> mask; // [layer][head] quantized
  double accuracy = 0.0;
  std::vector<double> distance; // one per metric, CorrStudyConfig order
};

struct CorrRow {
  Metric metric;
  std::optional<double> spearman_abs; // empty when undefined
  std::optional<double> kendall_abs;
};

struct CorrStudy {
  std::vector<Metric> metrics;
  std::vector<CorrSample> samples;
  std::vector<CorrRow> rows;

  /// metric,spearman_abs,kendall_abs
  std::string table_csv() const;
  /// One row per sampled config: config,quantized_heads,accuracy,<metrics...>
  std::string scatter_csv() const;
};

/// Per sampled config a random subset of heads in every layer is quantized;
/// attention distance to the full-precision model is recorded per metric
/// together with eval accuracy, then rank-correlated.
CorrStudy head_quant_corr_study(const MicroViT &teacher,
                                const LabeledImages &eval,
                                const CorrStudyConfig &cfg,
                                const std::vector<std::vector<std::vector<bool>>>
                                    *fixed_masks = nullptr);

} // namespace dfq
