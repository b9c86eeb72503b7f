// SPDX-License-Identifier: Apache-2.0
/**
 * @file   quant.hpp
 * @brief  Fake quantization, min-max calibration and LSQ for the micro ViT.
 *
 * Integer mapping:  q = clamp(round(x * s - z), q_min, q_max)
 * Dequantization:   x' = (q + z) / s
 * with (q_min, q_max) = (-2^(k-1), 2^(k-1) - 1). Rounding is half away from
 * zero. Weights use per-output-channel symmetric parameters (z = 0) and
 * activations per-tensor asymmetric ones.
 */
#pragma once

#include <dfq/tensor.hpp>
#include <dfq/vit.hpp>

#include <map>
#include <optional>
#include <string>
#include <string_view>

namespace dfq {

enum class Scheme { Symmetric, Asymmetric };
enum class Granularity { PerTensor, PerChannel };
enum class QuantMode { MinMax, Lsq };
enum class QuantTarget { Weight, Activation };

std::string to_string(QuantMode m);
QuantMode parse_quant_mode(std::string_view s);

struct QuantSpec {
  int bits = 8;
  Scheme scheme = Scheme::Asymmetric;
  Granularity granularity = Granularity::PerTensor;
  QuantMode mode = QuantMode::MinMax;
  QuantTarget target = QuantTarget::Activation;

  /// Per-channel symmetric weight spec.
  static QuantSpec weight(int bits, QuantMode mode = QuantMode::MinMax);
  /// Per-tensor asymmetric activation spec.
  static QuantSpec activation(int bits, QuantMode mode = QuantMode::MinMax);

  /// Throws std::invalid_argument unless bits is in [2, 8].
  void validate() const;
  double qmin() const;
  double qmax() const;
};

struct QuantParams {
  Tensor scale;      // [1] or [channels]
  Tensor zero_point; // same shape as scale; all zeros when symmetric
  double ema_min = 0.0;
  double ema_max = 0.0;
  bool ema_initialized = false;
  bool trainable = false;
  bool degenerate = false; // fit fell back on a constant range

  std::size_t channels() const { return scale.size(); }
};

/// Raised for a non-finite input to fake_quant; names the site.
class NonFiniteError : public std::domain_error {
public:
  NonFiniteError(const std::string &site)
      : std::domain_error("non-finite value entering quantization site '" +
                          site + "'"),
        site_(site) {}
  const std::string &site() const { return site_; }

private:
  std::string site_;
};

/// Quantize-dequantize on the tape. Per-channel parameters index the last
/// axis of `x`. Backward: dx = g inside the clamp range (judged on the
/// pre-round value x*s - z) and 0 outside; ds and dz follow the chain rule
/// through the dequantization with the straight-through round.
Tensor fake_quant(const Tensor &x, const Tensor &scale, const Tensor &zero,
                  const QuantSpec &spec, std::string_view site = "");
Tensor fake_quant(const Tensor &x, const QuantParams &p, const QuantSpec &spec,
                  std::string_view site = "");

/// Integer codes of `x` (no dequantization); used by the inference-equivalence
/// checks and reports.
std::vector<double> quantize_codes(std::span<const double> x,
                                   std::span<const double> scale,
                                   std::span<const double> zero,
                                   const QuantSpec &spec);

/// Min-max parameters.
///   asymmetric: s = (2^k - 1) / (max - min),  z = s * min + 2^(k-1)
///   symmetric:  s = (2^(k-1) - 1) / max|x|,   z = 0
/// Per-channel fits apply the formulas independently along the last axis.
/// A constant range falls back to s = 1 (z from the formula) and logs a
/// warning.
QuantParams minmax_fit(const Tensor &x, const QuantSpec &spec);

/// EMA of the activation range followed by a min-max refresh of (s, z). The
/// first call initializes the range from the batch.
QuantParams ema_update(QuantParams p, const Tensor &batch, double momentum,
                       const QuantSpec &spec);

/// LSQ gradient scale 1 / sqrt(numel * q_max).
double lsq_grad_scale(std::size_t numel, int bits);

/// A "W{k}A{k}" setting. Bits of 32 on either side disable that side.
struct BitSetting {
  int weight_bits = 8;
  int activation_bits = 8;

  bool weights_enabled() const { return weight_bits < 32; }
  bool activations_enabled() const { return activation_bits < 32; }
  std::string label() const;
};

BitSetting parse_bit_setting(std::string_view s);

/// Micro ViT whose linear layers run through fake quantization.
///
/// Quantized sites are every linear weight (patch embedding, QKV, W^O, MLP,
/// classifier) and the activation entering each of those matmuls. LayerNorm,
/// softmax, the attention matmuls and residual adds stay full precision.
class QuantizedViT : public LinearHook {
public:
  QuantizedViT(MicroViT model, BitSetting bits, QuantMode mode,
               double ema_momentum = 0.95);

  MicroViT &model() { return model_; }
  const MicroViT &model() const { return model_; }
  const BitSetting &bits() const { return bits_; }
  QuantMode mode() const { return mode_; }
  double ema_momentum() const { return ema_momentum_; }

  /// In calibration/training mode, min-max activation ranges update by EMA
  /// on every forward; LSQ parameters initialize on first sight of a site.
  void set_training(bool training) { training_ = training; }
  bool training() const { return training_; }

  /// Restricts quantization to the QKV columns and W^O rows of the listed
  /// heads per layer; every other site stays full precision. Empty clears
  /// the restriction.
  void set_head_mask(std::vector<std::vector<bool>> mask);

  ForwardResult forward(const Tensor &images, bool capture);

  /// Runs forwards in training mode over `images` to initialize activation
  /// ranges (and LSQ parameters), then restores the previous mode.
  void calibrate(const Tensor &images, std::size_t batch = 64);

  /// Weights and LSQ quantizer parameters.
  std::vector<Tensor> trainable_parameters() const;
  /// LSQ scale/zero tensors only.
  std::vector<Tensor> quantizer_parameters() const;
  /// Keeps learned scales strictly positive after an optimizer step.
  void project_scales(double floor = 1e-8);

  const std::map<std::string, QuantParams, std::less<>> &
  activation_params() const {
    return act_params_;
  }
  const std::map<std::string, QuantParams, std::less<>> &
  weight_params() const {
    return weight_params_;
  }

  /// Installs previously saved quantizer state for one site.
  void restore_params(QuantTarget target, const std::string &site,
                      QuantParams params);

  /// Deep copy: model weights and quantizer state get independent storage.
  QuantizedViT clone() const;

  /// Copy of the current weights after weight fake-quantization.
  std::vector<NamedTensor> quantized_weights() const;

  Tensor linear(std::string_view site, const Tensor &x, const Tensor &weight,
                const Tensor &bias) override;

private:
  Tensor quantize_weight(std::string_view site, const Tensor &w);
  Tensor quantize_activation(std::string_view site, const Tensor &x);
  std::optional<std::size_t> masked_layer(std::string_view site,
                                          bool &is_qkv) const;

  MicroViT model_;
  BitSetting bits_;
  QuantMode mode_;
  double ema_momentum_;
  bool training_ = false;
  std::vector<std::vector<bool>> head_mask_;
  std::map<std::string, QuantParams, std::less<>> weight_params_;
  std::map<std::string, QuantParams, std::less<>> act_params_;
};

} // namespace dfq
