// SPDX-License-Identifier: Apache-2.0
/**
 * @file   ssim.cpp
 * @brief  Global SSIM, attention-map distances and their tape operators.
 */

#include <dfq/attnsim.hpp>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dfq {

namespace {

std::size_t exact_sqrt(std::size_t n) {
  auto r = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  return r * r == n ? r : 0;
}

/// Moments and SSIM terms for one pair of rows.
struct SsimTerms {
  double mu_x, mu_y, var_x, var_y, cov;
  double range; // R after flooring
  bool floored;
  std::size_t argmax, argmin; // index into the concatenation [x | y]
  double c1, c2, a1, a2, b1, b2, value;
};

SsimTerms ssim_terms(const double *x, const double *y, std::size_t m) {
  SsimTerms t{};
  const double inv = 1.0 / static_cast<double>(m);
  double sx = 0.0, sy = 0.0;
  double hi = x[0], lo = x[0];
  t.argmax = t.argmin = 0;
  for (std::size_t k = 0; k < m; ++k) {
    sx += x[k];
    sy += y[k];
    if (x[k] > hi) {
      hi = x[k];
      t.argmax = k;
    }
    if (x[k] < lo) {
      lo = x[k];
      t.argmin = k;
    }
  }
  for (std::size_t k = 0; k < m; ++k) {
    if (y[k] > hi) {
      hi = y[k];
      t.argmax = m + k;
    }
    if (y[k] < lo) {
      lo = y[k];
      t.argmin = m + k;
    }
  }
  t.mu_x = sx * inv;
  t.mu_y = sy * inv;
  double vx = 0.0, vy = 0.0, cxy = 0.0;
  for (std::size_t k = 0; k < m; ++k) {
    const double dx = x[k] - t.mu_x, dy = y[k] - t.mu_y;
    vx += dx * dx;
    vy += dy * dy;
    cxy += dx * dy;
  }
  t.var_x = vx * inv;
  t.var_y = vy * inv;
  t.cov = cxy * inv;
  t.range = hi - lo;
  t.floored = t.range < kSsimRangeFloor;
  if (t.floored)
    t.range = kSsimRangeFloor;
  t.c1 = (0.01 * t.range) * (0.01 * t.range);
  t.c2 = (0.03 * t.range) * (0.03 * t.range);
  t.a1 = 2.0 * t.mu_x * t.mu_y + t.c1;
  t.a2 = 2.0 * t.cov + t.c2;
  t.b1 = t.mu_x * t.mu_x + t.mu_y * t.mu_y + t.c1;
  t.b2 = t.var_x + t.var_y + t.c2;
  t.value = (t.a1 * t.a2) / (t.b1 * t.b2);
  return t;
}

/// Accumulates g * dSSIM/dx and g * dSSIM/dy for one row pair.
void ssim_backward(const SsimTerms &t, const double *x, const double *y,
                   std::size_t m, double g, double *gx, double *gy) {
  const double den = t.b1 * t.b2;
  const double S = t.value;
  const double d_mux = 2.0 * t.mu_y * t.a2 / den - S * 2.0 * t.mu_x / t.b1;
  const double d_muy = 2.0 * t.mu_x * t.a2 / den - S * 2.0 * t.mu_y / t.b1;
  const double d_cov = 2.0 * t.a1 / den;
  const double d_var = -S / t.b2;
  const double inv = 1.0 / static_cast<double>(m);
  if (gx)
    for (std::size_t k = 0; k < m; ++k)
      gx[k] += g * inv *
               (d_mux + 2.0 * d_var * (x[k] - t.mu_x) + d_cov * (y[k] - t.mu_y));
  if (gy)
    for (std::size_t k = 0; k < m; ++k)
      gy[k] += g * inv *
               (d_muy + 2.0 * d_var * (y[k] - t.mu_y) + d_cov * (x[k] - t.mu_x));
  if (t.floored)
    return;
  const double d_c1 = t.a2 / den - S / t.b1;
  const double d_c2 = t.a1 / den - S / t.b2;
  const double d_range = g * (d_c1 * 2e-4 * t.range + d_c2 * 18e-4 * t.range);
  auto bump = [&](std::size_t idx, double v) {
    if (idx < m) {
      if (gx)
        gx[idx] += v;
    } else if (gy) {
      gy[idx - m] += v;
    }
  };
  bump(t.argmax, d_range);
  bump(t.argmin, -d_range);
}

void check_pair(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw DimensionError("ssim", Shape{a.size()}, Shape{b.size()});
  if (a.size() < 2)
    throw DimensionError("ssim", "maps need at least 2 elements");
}

} // namespace

AttnMap::AttnMap(std::size_t side, std::vector<double> values)
    : side_(side), values_(std::move(values)) {
  if (side_ < 2)
    throw DimensionError("AttnMap", "grid must be at least 2x2");
  if (values_.size() != side_ * side_)
    throw DimensionError("AttnMap", Shape{side_, side_}, Shape{values_.size()});
  for (double v : values_)
    if (!std::isfinite(v))
      throw std::domain_error("AttnMap: non-finite value");
}

AttnMap AttnMap::from_flat(std::vector<double> values) {
  const std::size_t side = exact_sqrt(values.size());
  if (side == 0)
    throw DimensionError("AttnMap", "length " + std::to_string(values.size()) +
                                        " is not a perfect square");
  return AttnMap(side, std::move(values));
}

double ssim(std::span<const double> a, std::span<const double> b) {
  check_pair(a, b);
  return ssim_terms(a.data(), b.data(), a.size()).value;
}

double ssim(const AttnMap &a, const AttnMap &b) {
  if (a.side() != b.side())
    throw DimensionError("ssim", Shape{a.side(), a.side()},
                         Shape{b.side(), b.side()});
  return ssim(a.values(), b.values());
}

std::string to_string(Metric m) {
  switch (m) {
  case Metric::AbsSsim:
    return "abs_ssim";
  case Metric::Dssim:
    return "dssim";
  case Metric::Mse:
    return "mse";
  case Metric::L1:
    return "l1";
  case Metric::Kl:
    return "kl";
  }
  return "?";
}

Metric parse_metric(std::string_view s) {
  for (Metric m : {Metric::AbsSsim, Metric::Dssim, Metric::Mse, Metric::L1,
                   Metric::Kl})
    if (s == to_string(m))
      return m;
  throw std::invalid_argument("unknown metric '" + std::string(s) +
                              "' (expected abs_ssim, dssim, mse, l1 or kl)");
}

double head_distance(std::span<const double> a, std::span<const double> b,
                     Metric metric) {
  check_pair(a, b);
  const double inv = 1.0 / static_cast<double>(a.size());
  switch (metric) {
  case Metric::AbsSsim:
    return std::abs(ssim(a, b));
  case Metric::Dssim:
    return -ssim(a, b);
  case Metric::Mse: {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
      s += (a[i] - b[i]) * (a[i] - b[i]);
    return s * inv;
  }
  case Metric::L1: {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
      s += std::abs(a[i] - b[i]);
    return s * inv;
  }
  case Metric::Kl: {
    auto log_softmax = [](std::span<const double> v) {
      const double mx = *std::max_element(v.begin(), v.end());
      double z = 0.0;
      for (double x : v)
        z += std::exp(x - mx);
      std::vector<double> out(v.size());
      for (std::size_t i = 0; i < v.size(); ++i)
        out[i] = v[i] - mx - std::log(z);
      return out;
    };
    const auto la = log_softmax(a), lb = log_softmax(b);
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
      s += std::exp(la[i]) * (la[i] - lb[i]);
    return s;
  }
  }
  throw std::invalid_argument("unknown metric");
}

double head_distance(const AttnMap &a, const AttnMap &b, Metric metric) {
  if (a.side() != b.side())
    throw DimensionError("head_distance", Shape{a.side(), a.side()},
                         Shape{b.side(), b.side()});
  return head_distance(a.values(), b.values(), metric);
}

Tensor ssim_rows(const Tensor &a, const Tensor &b) {
  if (a.shape() != b.shape())
    throw DimensionError("ssim_rows", a.shape(), b.shape());
  if (a.rank() == 0 || a.shape().back() < 2)
    throw DimensionError("ssim_rows", "rows need at least 2 elements, got " +
                                          to_string(a.shape()));
  const std::size_t m = a.shape().back();
  const std::size_t rows = a.size() / m;
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  std::vector<double> out(rows);
  const auto av = a.data(), bv = b.data();
  for (std::size_t r = 0; r < rows; ++r)
    out[r] = ssim_terms(av.data() + r * m, bv.data() + r * m, m).value;
  return make_result("ssim_rows", std::move(out_shape), std::move(out), {a, b},
                     [m, rows](Node &n) {
                       const auto &x = n.inputs[0]->value;
                       const auto &y = n.inputs[1]->value;
                       double *gx = n.inputs[0]->requires_grad
                                        ? n.inputs[0]->grad_buffer().data()
                                        : nullptr;
                       double *gy = n.inputs[1]->requires_grad
                                        ? n.inputs[1]->grad_buffer().data()
                                        : nullptr;
                       for (std::size_t r = 0; r < rows; ++r) {
                         if (n.grad[r] == 0.0)
                           continue;
                         const double *xr = x.data() + r * m;
                         const double *yr = y.data() + r * m;
                         const SsimTerms t = ssim_terms(xr, yr, m);
                         ssim_backward(t, xr, yr, m, n.grad[r],
                                       gx ? gx + r * m : nullptr,
                                       gy ? gy + r * m : nullptr);
                       }
                     });
}

Tensor distance_rows(const Tensor &a, const Tensor &b, Metric metric) {
  if (a.shape() != b.shape())
    throw DimensionError("distance_rows", a.shape(), b.shape());
  if (a.rank() == 0)
    throw DimensionError("distance_rows", "needs rank >= 1");
  const std::size_t last = a.rank() - 1;
  switch (metric) {
  case Metric::AbsSsim:
    return abs(ssim_rows(a, b));
  case Metric::Dssim:
    return scale(ssim_rows(a, b), -1.0);
  case Metric::Mse:
    return mean(square(sub(a, b)), last);
  case Metric::L1:
    return mean(abs(sub(a, b)), last);
  case Metric::Kl: {
    Tensor la = log_softmax(a);
    return sum(mul(exp(la), sub(la, log_softmax(b))), last);
  }
  }
  throw std::invalid_argument("unknown metric");
}

Tensor spatial_maps(const Tensor &maps, bool has_class_token) {
  if (maps.rank() != 4 || maps.dim(2) != maps.dim(3))
    throw DimensionError("spatial_maps", "expected [B, N, T, T], got " +
                                             to_string(maps.shape()));
  if (maps.dim(1) == 0)
    throw DimensionError("spatial_maps", "no attention heads");
  const std::size_t T = maps.dim(2);
  const std::size_t P = has_class_token ? T - 1 : T;
  if (P < 4 || exact_sqrt(P) == 0)
    throw DimensionError("spatial_maps", std::to_string(P) +
                                             " spatial patches do not form a "
                                             "square grid of side >= 2");
  if (!has_class_token)
    return maps;
  return slice(slice(maps, 2, 1, P), 3, 1, P);
}

} // namespace dfq
