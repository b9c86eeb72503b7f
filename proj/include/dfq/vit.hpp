// SPDX-License-Identifier: Apache-2.0
/**
 * @file   vit.hpp
 * @brief  Micro Vision Transformer classifier with per-head attention capture.
 *
 * Pre-LayerNorm blocks (LN -> MSA -> residual, LN -> MLP -> residual), a
 * learned class token and learned positional embeddings. The query, key and
 * value projections of every head live in one [d, 3d] matrix per layer with
 * column blocks [Q_0 .. Q_{N-1} | K_0 .. K_{N-1} | V_0 .. V_{N-1}], each
 * block d/N wide, so head h's W^Q is columns [h*d/N, (h+1)*d/N).
 */
#pragma once

#include <dfq/rng.hpp>
#include <dfq/tensor.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace dfq {

struct ViTConfig {
  std::size_t image_side = 32;
  std::size_t patch_side = 8;
  std::size_t channels = 1;
  std::size_t embed_dim = 32;
  std::size_t layers = 2;
  std::size_t heads = 4;
  double mlp_ratio = 2.0;
  std::size_t classes = 4;
  bool use_class_token = true;

  /// Throws std::invalid_argument naming the violated constraint.
  void validate() const;
  std::size_t grid() const { return image_side / patch_side; }
  std::size_t patches() const { return grid() * grid(); }
  std::size_t tokens() const { return patches() + (use_class_token ? 1 : 0); }
  std::size_t head_dim() const { return embed_dim / heads; }
  std::size_t mlp_dim() const;
  std::size_t patch_features() const {
    return channels * patch_side * patch_side;
  }
};

using NamedTensor = std::pair<std::string, Tensor>;

struct VitBlock {
  Tensor ln1_gamma, ln1_beta;
  Tensor qkv_weight, qkv_bias; // [d, 3d], [3d]
  Tensor proj_weight, proj_bias; // W^O [d, d], [d]
  Tensor ln2_gamma, ln2_beta;
  Tensor fc1_weight, fc1_bias;
  Tensor fc2_weight, fc2_bias;
};

/// Attention internals of one forward pass, all on the tape.
struct LayerAttention {
  Tensor logits; // [B, N, T, T] pre-softmax Q K^T / sqrt(d)
  Tensor probs;  // [B, N, T, T]
  Tensor heads;  // [B, N, T, d/N]
};

struct AttentionStack {
  std::vector<LayerAttention> layers;
  bool has_class_token = true;

  std::size_t depth() const { return layers.size(); }
  std::size_t width() const {
    return layers.empty() ? 0 : layers.front().probs.dim(1);
  }
};

/// Computes one linear site `x W + b`. The model calls it for every linear
/// layer so quantization can wrap weights and activations.
class LinearHook {
public:
  virtual ~LinearHook() = default;
  virtual Tensor linear(std::string_view site, const Tensor &x,
                        const Tensor &weight, const Tensor &bias) = 0;
};

struct ForwardResult {
  Tensor logits; // [B, C]
  std::optional<AttentionStack> attention;
};

enum class QkvPart { Query = 0, Key = 1, Value = 2 };

class MicroViT {
public:
  MicroViT() = default;
  /// Fresh weights: Xavier-uniform linears, zero biases, unit LayerNorm,
  /// N(0, 0.02^2) positional embeddings and class token.
  MicroViT(const ViTConfig &config, std::uint64_t seed);

  const ViTConfig &config() const { return config_; }

  /// `images`: [B, channels, side, side].
  ForwardResult forward(const Tensor &images, bool capture,
                        LinearHook *hook = nullptr) const;

  /// Parameters in a fixed canonical order with dotted names.
  std::vector<NamedTensor> named_parameters() const;
  std::vector<Tensor> parameters() const;
  void set_requires_grad(bool v);

  /// Deep copy with independent storage.
  MicroViT clone() const;

  /// Copies the values of a per-head projection, shape [d, d/N].
  Tensor head_weight(std::size_t layer, std::size_t head, QkvPart part) const;

  Tensor patch_weight, patch_bias; // [C*p*p, d], [d]
  Tensor class_token;              // [1, 1, d]
  Tensor pos_embed;                // [T, d]
  std::vector<VitBlock> blocks;
  Tensor norm_gamma, norm_beta;
  Tensor classifier_weight, classifier_bias; // [d, C], [C]

  /// Canonical site names used by LinearHook.
  static std::string site_patch() { return "patch_embed"; }
  static std::string site_qkv(std::size_t l);
  static std::string site_proj(std::size_t l);
  static std::string site_fc1(std::size_t l);
  static std::string site_fc2(std::size_t l);
  static std::string site_head() { return "head"; }

private:
  ViTConfig config_;
};

/// Splits [B, C, H, W] into [B, P, C*p*p] patch rows (row-major grid).
Tensor patchify(const Tensor &images, std::size_t patch_side);

/// Images with integer labels; the data tensor is never on the tape.
struct LabeledImages {
  Tensor images; // [n, C, H, W]
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  /// Gathers the listed samples into a new batch.
  LabeledImages subset(const std::vector<std::size_t> &idx) const;
};

/// Mean cross-entropy of softmax(logits) against integer labels.
Tensor cross_entropy(const Tensor &logits, const std::vector<int> &labels);

/// Top-1 accuracy of `model` on `data`, evaluated in chunks of `batch`.
double accuracy(const MicroViT &model, const LabeledImages &data,
                std::size_t batch = 128, LinearHook *hook = nullptr);

struct OptimizerConfig {
  double lr = 3e-3;
  double weight_decay = 0.01;
  std::size_t epochs = 40;
  std::size_t batch = 64;
  double warmup_fraction = 0.05;
  std::uint64_t seed = 1;
};

struct TrainLogEntry {
  std::size_t epoch;
  double train_loss;
  double train_accuracy;
  double heldout_accuracy;
};

struct TeacherResult {
  MicroViT model;
  double heldout_accuracy = 0.0;
  std::size_t best_epoch = 0;
  std::vector<TrainLogEntry> log;
};

/// Thrown when the loss stops being finite; carries seed and step.
class DivergenceError : public std::runtime_error {
public:
  DivergenceError(const std::string &what, std::uint64_t seed, std::size_t step)
      : std::runtime_error(what + " (seed " + std::to_string(seed) +
                           ", step " + std::to_string(step) + ")"),
        seed_(seed), step_(step) {}
  std::uint64_t seed() const { return seed_; }
  std::size_t step() const { return step_; }

private:
  std::uint64_t seed_;
  std::size_t step_;
};

/// Adam training with cosine decay; returns the checkpoint with the best
/// held-out accuracy.
TeacherResult train_teacher(const ViTConfig &config,
                            const LabeledImages &train,
                            const LabeledImages &heldout,
                            const OptimizerConfig &opt);

} // namespace dfq
