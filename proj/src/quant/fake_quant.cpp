// SPDX-License-Identifier: Apache-2.0
/**
 * @file   fake_quant.cpp
 * @brief  Quantize-dequantize operator, min-max/EMA calibration and LSQ
 *         gradient scaling.
 */

#include <dfq/log.hpp>
#include <dfq/quant.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <regex>
#include <stdexcept>

namespace dfq {

std::string to_string(QuantMode m) {
  return m == QuantMode::MinMax ? "minmax" : "lsq";
}

QuantMode parse_quant_mode(std::string_view s) {
  if (s == "minmax")
    return QuantMode::MinMax;
  if (s == "lsq")
    return QuantMode::Lsq;
  throw std::invalid_argument("unknown quantization mode '" + std::string(s) +
                              "' (expected minmax or lsq)");
}

QuantSpec QuantSpec::weight(int bits, QuantMode mode) {
  return {bits, Scheme::Symmetric, Granularity::PerChannel, mode,
          QuantTarget::Weight};
}

QuantSpec QuantSpec::activation(int bits, QuantMode mode) {
  return {bits, Scheme::Asymmetric, Granularity::PerTensor, mode,
          QuantTarget::Activation};
}

void QuantSpec::validate() const {
  if (bits < 2 || bits > 8)
    throw std::invalid_argument("quantization bits must be in [2, 8], got " +
                                std::to_string(bits));
}

double QuantSpec::qmin() const { return -std::ldexp(1.0, bits - 1); }
double QuantSpec::qmax() const { return std::ldexp(1.0, bits - 1) - 1.0; }

namespace {

std::size_t channel_count(const Tensor &x, const Tensor &scale,
                          const char *op) {
  const std::size_t C = scale.size();
  if (C != 1 && (x.rank() == 0 || x.shape().back() != C))
    throw DimensionError(op, x.shape(), scale.shape());
  return C;
}

} // namespace

Tensor fake_quant(const Tensor &x, const Tensor &scale, const Tensor &zero,
                  const QuantSpec &spec, std::string_view site) {
  const std::size_t C = channel_count(x, scale, "fake_quant");
  if (zero.size() != C)
    throw DimensionError("fake_quant", scale.shape(), zero.shape());
  const double qmin = spec.qmin(), qmax = spec.qmax();
  const auto xv = x.data();
  const auto sv = scale.data();
  const auto zv = zero.data();
  for (double s : sv)
    if (!(s > 0.0) || !std::isfinite(s))
      throw std::domain_error("fake_quant: scale must be positive and finite "
                              "at site '" + std::string(site) + "'");
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    if (!std::isfinite(xv[i]))
      throw NonFiniteError(std::string(site));
    const std::size_t c = i % C;
    const double q = std::clamp(std::round(xv[i] * sv[c] - zv[c]), qmin, qmax);
    out[i] = (q + zv[c]) / sv[c];
  }
  return make_result(
      "fake_quant", x.shape(), std::move(out), {x, scale, zero},
      [C, qmin, qmax](Node &n) {
        const auto &xv = n.inputs[0]->value;
        const auto &sv = n.inputs[1]->value;
        const auto &zv = n.inputs[2]->value;
        double *gx = n.inputs[0]->requires_grad
                         ? n.inputs[0]->grad_buffer().data()
                         : nullptr;
        double *gs = n.inputs[1]->requires_grad
                         ? n.inputs[1]->grad_buffer().data()
                         : nullptr;
        double *gz = n.inputs[2]->requires_grad
                         ? n.inputs[2]->grad_buffer().data()
                         : nullptr;
        for (std::size_t i = 0; i < xv.size(); ++i) {
          const std::size_t c = i % C;
          const double g = n.grad[i];
          const double s = sv[c];
          const double u = xv[i] * s - zv[c];
          const double y = n.value[i];
          if (u >= qmin && u <= qmax) {
            // y = (round(u) + z) / s with d round(u)/du = 1
            if (gx)
              gx[i] += g;
            if (gs)
              gs[c] += g * (xv[i] - y) / s;
          } else {
            // y = (q_clamped + z) / s
            if (gs)
              gs[c] -= g * y / s;
            if (gz)
              gz[c] += g / s;
          }
        }
      });
}

Tensor fake_quant(const Tensor &x, const QuantParams &p, const QuantSpec &spec,
                  std::string_view site) {
  return fake_quant(x, p.scale, p.zero_point, spec, site);
}

std::vector<double> quantize_codes(std::span<const double> x,
                                   std::span<const double> scale,
                                   std::span<const double> zero,
                                   const QuantSpec &spec) {
  const std::size_t C = scale.size();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const std::size_t c = i % C;
    out[i] = std::clamp(std::round(x[i] * scale[c] - zero[c]), spec.qmin(),
                        spec.qmax());
  }
  return out;
}

namespace {

struct Range {
  double lo, hi;
};

void fit_channel(double lo, double hi, const QuantSpec &spec, double &s,
                 double &z, bool &degenerate) {
  const int k = spec.bits;
  if (spec.scheme == Scheme::Symmetric) {
    const double a = std::max(std::abs(lo), std::abs(hi));
    z = 0.0;
    if (a > 0.0) {
      s = (std::ldexp(1.0, k - 1) - 1.0) / a;
    } else {
      s = 1.0;
      degenerate = true;
    }
    return;
  }
  if (hi > lo) {
    s = (std::ldexp(1.0, k) - 1.0) / (hi - lo);
  } else {
    s = 1.0;
    degenerate = true;
  }
  z = s * lo + std::ldexp(1.0, k - 1);
}

QuantParams params_from_ranges(const std::vector<Range> &ranges,
                               const QuantSpec &spec) {
  QuantParams p;
  std::vector<double> s(ranges.size()), z(ranges.size());
  for (std::size_t c = 0; c < ranges.size(); ++c)
    fit_channel(ranges[c].lo, ranges[c].hi, spec, s[c], z[c], p.degenerate);
  p.scale = Tensor::from({ranges.size()}, std::move(s));
  p.zero_point = Tensor::from({ranges.size()}, std::move(z));
  return p;
}

Range tensor_range(const Tensor &x) {
  const auto v = x.data();
  if (v.empty())
    throw std::invalid_argument("min-max fit of an empty tensor");
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  return {*lo, *hi};
}

} // namespace

QuantParams minmax_fit(const Tensor &x, const QuantSpec &spec) {
  spec.validate();
  std::vector<Range> ranges;
  if (spec.granularity == Granularity::PerChannel) {
    if (x.rank() == 0)
      throw DimensionError("minmax_fit", "per-channel fit needs rank >= 1");
    const std::size_t C = x.shape().back();
    ranges.assign(C, {std::numeric_limits<double>::infinity(),
                      -std::numeric_limits<double>::infinity()});
    const auto v = x.data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      auto &r = ranges[i % C];
      r.lo = std::min(r.lo, v[i]);
      r.hi = std::max(r.hi, v[i]);
    }
  } else {
    ranges.push_back(tensor_range(x));
  }
  QuantParams p = params_from_ranges(ranges, spec);
  if (p.degenerate)
    log_warning("min-max fit: degenerate (constant) range, scale set to 1");
  return p;
}

QuantParams ema_update(QuantParams p, const Tensor &batch, double momentum,
                       const QuantSpec &spec) {
  const Range r = tensor_range(batch);
  if (!p.ema_initialized) {
    p.ema_min = r.lo;
    p.ema_max = r.hi;
    p.ema_initialized = true;
  } else {
    p.ema_min = momentum * p.ema_min + (1.0 - momentum) * r.lo;
    p.ema_max = momentum * p.ema_max + (1.0 - momentum) * r.hi;
  }
  QuantParams fresh = params_from_ranges({{p.ema_min, p.ema_max}}, spec);
  if (fresh.degenerate)
    log_warning("EMA range is degenerate, scale set to 1");
  p.scale = fresh.scale;
  p.zero_point = fresh.zero_point;
  p.degenerate = fresh.degenerate;
  return p;
}

double lsq_grad_scale(std::size_t numel, int bits) {
  if (numel == 0)
    throw std::invalid_argument("lsq_grad_scale: numel must be >= 1");
  const double qmax = std::ldexp(1.0, bits - 1) - 1.0;
  return 1.0 / std::sqrt(static_cast<double>(numel) * qmax);
}

std::string BitSetting::label() const {
  return "W" + std::to_string(weight_bits) + "A" +
         std::to_string(activation_bits);
}

BitSetting parse_bit_setting(std::string_view s) {
  static const std::regex re("^[Ww]([0-9]+)[Aa]([0-9]+)$");
  std::match_results<std::string_view::const_iterator> m;
  if (!std::regex_match(s.begin(), s.end(), m, re))
    throw std::invalid_argument("malformed quantization setting '" +
                                std::string(s) + "' (expected W{k}A{k})");
  BitSetting b{std::stoi(m[1].str()), std::stoi(m[2].str())};
  for (int k : {b.weight_bits, b.activation_bits})
    if (!(k == 32 || (k >= 2 && k <= 8)))
      throw std::invalid_argument("quantization bits must be in [2, 8] or 32, "
                                  "got " + std::to_string(k));
  return b;
}

} // namespace dfq
