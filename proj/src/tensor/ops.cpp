// SPDX-License-Identifier: Apache-2.0
/**
 * @file   ops.cpp
 * @brief  Forward kernels and gradient rules for the tensor operations.
 */

#include <dfq/tensor.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>

namespace dfq {

namespace {

/// Grad buffer of an op input, or nullptr when the input is off the tape.
double *input_grad(Node &n, std::size_t i) {
  Node &in = *n.inputs[i];
  return in.requires_grad ? in.grad_buffer().data() : nullptr;
}

const std::vector<double> &input_value(const Node &n, std::size_t i) {
  return n.inputs[i]->value;
}

bool is_suffix(const Shape &a, const Shape &b) {
  if (b.size() > a.size())
    return false;
  return std::equal(b.rbegin(), b.rend(), a.rbegin());
}

enum class Binary { Add, Sub, Mul };

Tensor binary(const char *name, Binary kind, const Tensor &a, const Tensor &b) {
  if (!is_suffix(a.shape(), b.shape()))
    throw DimensionError(name, a.shape(), b.shape());
  const auto av = a.data();
  const auto bv = b.data();
  const std::size_t inner = bv.size();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double x = av[i], y = bv[i % inner];
    out[i] = kind == Binary::Add ? x + y : kind == Binary::Sub ? x - y : x * y;
  }
  return make_result(name, a.shape(), std::move(out), {a, b}, [kind](Node &n) {
    const auto &g = n.grad;
    const std::size_t inner = n.inputs[1]->value.size();
    double *ga = input_grad(n, 0);
    double *gb = input_grad(n, 1);
    const auto &av = input_value(n, 0);
    const auto &bv = input_value(n, 1);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const std::size_t j = i % inner;
      switch (kind) {
      case Binary::Add:
        if (ga)
          ga[i] += g[i];
        if (gb)
          gb[j] += g[i];
        break;
      case Binary::Sub:
        if (ga)
          ga[i] += g[i];
        if (gb)
          gb[j] -= g[i];
        break;
      case Binary::Mul:
        if (ga)
          ga[i] += g[i] * bv[j];
        if (gb)
          gb[j] += g[i] * av[i];
        break;
      }
    }
  });
}

/// Elementwise unary op with derivative computed from (x, y).
template <typename F, typename D>
Tensor unary(const char *name, const Tensor &a, F f, D df) {
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i)
    out[i] = f(av[i]);
  return make_result(name, a.shape(), std::move(out), {a}, [df](Node &n) {
    double *ga = input_grad(n, 0);
    if (!ga)
      return;
    const auto &x = input_value(n, 0);
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      ga[i] += n.grad[i] * df(x[i], n.value[i]);
  });
}

// C[m,n] += A[m,k] B[k,n]
void gemm_nn(const double *A, const double *B, double *C, std::size_t m,
             std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double *c = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double a = A[i * k + p];
      const double *b = B + p * n;
      for (std::size_t j = 0; j < n; ++j)
        c[j] += a * b[j];
    }
  }
}

// dA[m,k] += dC[m,n] B[k,n]^T
void gemm_nt(const double *dC, const double *B, double *dA, std::size_t m,
             std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double *g = dC + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double *b = B + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j)
        acc += g[j] * b[j];
      dA[i * k + p] += acc;
    }
  }
}

// dB[k,n] += A[m,k]^T dC[m,n]
void gemm_tn(const double *A, const double *dC, double *dB, std::size_t m,
             std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double *g = dC + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double a = A[i * k + p];
      double *b = dB + p * n;
      for (std::size_t j = 0; j < n; ++j)
        b[j] += a * g[j];
    }
  }
}

std::vector<std::size_t> strides_of(const Shape &s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;)
    st[i - 1] = st[i] * s[i];
  return st;
}

/// Maps each flat output index of permute(a, axes) to the flat input index.
std::vector<std::size_t> permute_index(const Shape &in,
                                       const std::vector<std::size_t> &axes) {
  const auto in_strides = strides_of(in);
  Shape out(axes.size());
  for (std::size_t i = 0; i < axes.size(); ++i)
    out[i] = in[axes[i]];
  std::vector<std::size_t> map(numel(in));
  std::vector<std::size_t> idx(out.size(), 0);
  for (std::size_t flat = 0; flat < map.size(); ++flat) {
    std::size_t src = 0;
    for (std::size_t d = 0; d < out.size(); ++d)
      src += idx[d] * in_strides[axes[d]];
    map[flat] = src;
    for (std::size_t d = out.size(); d-- > 0;) {
      if (++idx[d] < out[d])
        break;
      idx[d] = 0;
    }
  }
  return map;
}

struct AxisSplit {
  std::size_t outer, extent, inner;
};

AxisSplit split_axis(const Shape &s, std::size_t axis) {
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i)
    r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i)
    r.inner *= s[i];
  return r;
}

void require_rank(const char *op, const Tensor &a, std::size_t min_rank) {
  if (a.rank() < min_rank)
    throw DimensionError(op, "needs rank >= " + std::to_string(min_rank) +
                                 ", got shape " + to_string(a.shape()));
}

} // namespace

Tensor add(const Tensor &a, const Tensor &b) {
  return binary("add", Binary::Add, a, b);
}
Tensor sub(const Tensor &a, const Tensor &b) {
  return binary("sub", Binary::Sub, a, b);
}
Tensor mul(const Tensor &a, const Tensor &b) {
  return binary("mul", Binary::Mul, a, b);
}
Tensor operator+(const Tensor &a, const Tensor &b) { return add(a, b); }
Tensor operator-(const Tensor &a, const Tensor &b) { return sub(a, b); }
Tensor operator*(const Tensor &a, const Tensor &b) { return mul(a, b); }

Tensor scale(const Tensor &a, double c) {
  return unary(
      "scale", a, [c](double x) { return c * x; },
      [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor &a, double c) {
  return unary(
      "add_scalar", a, [c](double x) { return x + c; },
      [](double, double) { return 1.0; });
}

Tensor matmul(const Tensor &a, const Tensor &b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const Shape &as = a.shape();
  const Shape &bs = b.shape();
  const std::size_t m = as[as.size() - 2], k = as.back();
  const bool shared = bs.size() == 2;
  if (bs[bs.size() - 2] != k)
    throw DimensionError("matmul", as, bs);
  if (!shared && (bs.size() != as.size() ||
                  !std::equal(as.begin(), as.end() - 2, bs.begin())))
    throw DimensionError("matmul", as, bs);
  const std::size_t n = bs.back();
  const std::size_t batch = numel(as) / (m * k);

  Shape out_shape = as;
  out_shape.back() = n;
  std::vector<double> out(batch * m * n, 0.0);
  const auto av = a.data();
  const auto bv = b.data();
  if (shared) {
    gemm_nn(av.data(), bv.data(), out.data(), batch * m, k, n);
  } else {
    for (std::size_t t = 0; t < batch; ++t)
      gemm_nn(av.data() + t * m * k, bv.data() + t * k * n,
              out.data() + t * m * n, m, k, n);
  }
  return make_result(
      "matmul", std::move(out_shape), std::move(out), {a, b},
      [batch, m, k, n, shared](Node &node) {
        const double *g = node.grad.data();
        const double *A = input_value(node, 0).data();
        const double *B = input_value(node, 1).data();
        double *gA = input_grad(node, 0);
        double *gB = input_grad(node, 1);
        if (shared) {
          if (gA)
            gemm_nt(g, B, gA, batch * m, k, n);
          if (gB)
            gemm_tn(A, g, gB, batch * m, k, n);
          return;
        }
        for (std::size_t t = 0; t < batch; ++t) {
          if (gA)
            gemm_nt(g + t * m * n, B + t * k * n, gA + t * m * k, m, k, n);
          if (gB)
            gemm_tn(A + t * m * k, g + t * m * n, gB + t * k * n, m, k, n);
        }
      });
}

Tensor permute(const Tensor &a, const std::vector<std::size_t> &axes) {
  if (axes.size() != a.rank())
    throw DimensionError("permute", "axes count " +
                                        std::to_string(axes.size()) +
                                        " for shape " + to_string(a.shape()));
  std::vector<bool> used(axes.size(), false);
  for (auto ax : axes) {
    if (ax >= axes.size() || used[ax])
      throw DimensionError("permute", "axes are not a permutation");
    used[ax] = true;
  }
  Shape out_shape(axes.size());
  for (std::size_t i = 0; i < axes.size(); ++i)
    out_shape[i] = a.shape()[axes[i]];
  auto map = std::make_shared<std::vector<std::size_t>>(
      permute_index(a.shape(), axes));
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = av[(*map)[i]];
  return make_result("permute", std::move(out_shape), std::move(out), {a},
                     [map](Node &n) {
                       double *ga = input_grad(n, 0);
                       if (!ga)
                         return;
                       for (std::size_t i = 0; i < n.grad.size(); ++i)
                         ga[(*map)[i]] += n.grad[i];
                     });
}

Tensor transpose(const Tensor &a) {
  require_rank("transpose", a, 2);
  std::vector<std::size_t> axes(a.rank());
  for (std::size_t i = 0; i < axes.size(); ++i)
    axes[i] = i;
  std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
  return permute(a, axes);
}

Tensor reshape(const Tensor &a, Shape shape) {
  if (numel(shape) != a.size())
    throw DimensionError("reshape", a.shape(), shape);
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result("reshape", std::move(shape), std::move(out), {a},
                     [](Node &n) {
                       double *ga = input_grad(n, 0);
                       if (!ga)
                         return;
                       for (std::size_t i = 0; i < n.grad.size(); ++i)
                         ga[i] += n.grad[i];
                     });
}

Tensor concat(const std::vector<Tensor> &parts, std::size_t axis) {
  if (parts.empty())
    throw DimensionError("concat", "no inputs");
  const Shape &ref = parts.front().shape();
  if (axis >= ref.size())
    throw DimensionError("concat", "axis " + std::to_string(axis) +
                                       " out of range for " + to_string(ref));
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto &p : parts) {
    Shape s = p.shape();
    if (s.size() != ref.size())
      throw DimensionError("concat", ref, s);
    for (std::size_t d = 0; d < s.size(); ++d)
      if (d != axis && s[d] != ref[d])
        throw DimensionError("concat", ref, s);
    out_shape[axis] += s[axis];
  }
  const AxisSplit total = split_axis(out_shape, axis);
  std::vector<double> out(numel(out_shape));
  auto extents = std::make_shared<std::vector<std::size_t>>();
  std::size_t offset = 0;
  for (const auto &p : parts) {
    const std::size_t ext = p.shape()[axis];
    extents->push_back(ext);
    const auto pv = p.data();
    const std::size_t chunk = ext * total.inner;
    for (std::size_t o = 0; o < total.outer; ++o)
      std::copy_n(pv.begin() + o * chunk, chunk,
                  out.begin() + o * total.extent * total.inner +
                      offset * total.inner);
    offset += ext;
  }
  return make_result("concat", out_shape, std::move(out), parts,
                     [extents, total](Node &n) {
                       std::size_t offset = 0;
                       for (std::size_t i = 0; i < extents->size(); ++i) {
                         const std::size_t ext = (*extents)[i];
                         double *gp = input_grad(n, i);
                         const std::size_t chunk = ext * total.inner;
                         if (gp) {
                           for (std::size_t o = 0; o < total.outer; ++o) {
                             const double *src =
                                 n.grad.data() +
                                 o * total.extent * total.inner +
                                 offset * total.inner;
                             for (std::size_t j = 0; j < chunk; ++j)
                               gp[o * chunk + j] += src[j];
                           }
                         }
                         offset += ext;
                       }
                     });
}

Tensor index_select(const Tensor &a, std::size_t axis,
                    const std::vector<std::size_t> &indices) {
  if (axis >= a.rank())
    throw DimensionError("index_select", "axis " + std::to_string(axis) +
                                             " out of range for " +
                                             to_string(a.shape()));
  for (auto i : indices)
    if (i >= a.shape()[axis])
      throw DimensionError("index_select",
                           "index " + std::to_string(i) + " out of range for " +
                               to_string(a.shape()));
  const AxisSplit in = split_axis(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape[axis] = indices.size();
  const auto av = a.data();
  std::vector<double> out(numel(out_shape));
  const std::size_t count = indices.size();
  for (std::size_t o = 0; o < in.outer; ++o)
    for (std::size_t t = 0; t < count; ++t)
      std::copy_n(av.begin() + (o * in.extent + indices[t]) * in.inner,
                  in.inner, out.begin() + (o * count + t) * in.inner);
  auto idx = std::make_shared<std::vector<std::size_t>>(indices);
  return make_result("index_select", std::move(out_shape), std::move(out), {a},
                     [idx, in](Node &n) {
                       double *ga = input_grad(n, 0);
                       if (!ga)
                         return;
                       const std::size_t count = idx->size();
                       for (std::size_t o = 0; o < in.outer; ++o)
                         for (std::size_t t = 0; t < count; ++t) {
                           const double *src =
                               n.grad.data() + (o * count + t) * in.inner;
                           double *dst =
                               ga + (o * in.extent + (*idx)[t]) * in.inner;
                           for (std::size_t j = 0; j < in.inner; ++j)
                             dst[j] += src[j];
                         }
                     });
}

Tensor slice(const Tensor &a, std::size_t axis, std::size_t start,
             std::size_t length) {
  if (axis >= a.rank() || start + length > a.shape()[axis] || length == 0)
    throw DimensionError("slice", "range [" + std::to_string(start) + ", " +
                                      std::to_string(start + length) +
                                      ") on axis " + std::to_string(axis) +
                                      " of " + to_string(a.shape()));
  std::vector<std::size_t> idx(length);
  for (std::size_t i = 0; i < length; ++i)
    idx[i] = start + i;
  return index_select(a, axis, idx);
}

Tensor softmax(const Tensor &a) {
  require_rank("softmax", a, 1);
  const std::size_t cols = a.shape().back();
  const std::size_t rows = a.size() / cols;
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double *x = av.data() + r * cols;
    double *y = out.data() + r * cols;
    const double mx = *std::max_element(x, x + cols);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j)
      z += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < cols; ++j)
      y[j] /= z;
  }
  return make_result("softmax", a.shape(), std::move(out), {a},
                     [rows, cols](Node &n) {
                       double *ga = input_grad(n, 0);
                       if (!ga)
                         return;
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double *y = n.value.data() + r * cols;
                         const double *g = n.grad.data() + r * cols;
                         double dot = 0.0;
                         for (std::size_t j = 0; j < cols; ++j)
                           dot += g[j] * y[j];
                         for (std::size_t j = 0; j < cols; ++j)
                           ga[r * cols + j] += y[j] * (g[j] - dot);
                       }
                     });
}

Tensor log_softmax(const Tensor &a) {
  require_rank("log_softmax", a, 1);
  const std::size_t cols = a.shape().back();
  const std::size_t rows = a.size() / cols;
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double *x = av.data() + r * cols;
    const double mx = *std::max_element(x, x + cols);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j)
      z += std::exp(x[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < cols; ++j)
      out[r * cols + j] = x[j] - lse;
  }
  return make_result("log_softmax", a.shape(), std::move(out), {a},
                     [rows, cols](Node &n) {
                       double *ga = input_grad(n, 0);
                       if (!ga)
                         return;
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double *y = n.value.data() + r * cols;
                         const double *g = n.grad.data() + r * cols;
                         double gs = 0.0;
                         for (std::size_t j = 0; j < cols; ++j)
                           gs += g[j];
                         for (std::size_t j = 0; j < cols; ++j)
                           ga[r * cols + j] += g[j] - std::exp(y[j]) * gs;
                       }
                     });
}

Tensor layer_norm(const Tensor &x, const Tensor &gamma, const Tensor &beta,
                  double eps) {
  require_rank("layer_norm", x, 1);
  const std::size_t cols = x.shape().back();
  if (gamma.shape() != Shape{cols})
    throw DimensionError("layer_norm", x.shape(), gamma.shape());
  if (beta.shape() != Shape{cols})
    throw DimensionError("layer_norm", x.shape(), beta.shape());
  const std::size_t rows = x.size() / cols;
  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  std::vector<double> out(xv.size());
  // Saved per-row normalized values and inverse deviations for backward.
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double *xr = xv.data() + r * cols;
    double mu = 0.0;
    for (std::size_t j = 0; j < cols; ++j)
      mu += xr[j];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t j = 0; j < cols; ++j)
      var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(cols);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < cols; ++j) {
      const double h = (xr[j] - mu) * is;
      (*xhat)[r * cols + j] = h;
      out[r * cols + j] = h * gv[j] + bv[j];
    }
  }
  return make_result(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [rows, cols, xhat, inv_std](Node &n) {
        double *gx = input_grad(n, 0);
        double *gg = input_grad(n, 1);
        double *gb = input_grad(n, 2);
        const auto &gam = input_value(n, 1);
        const double inv_cols = 1.0 / static_cast<double>(cols);
        for (std::size_t r = 0; r < rows; ++r) {
          const double *g = n.grad.data() + r * cols;
          const double *h = xhat->data() + r * cols;
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t j = 0; j < cols; ++j) {
            const double dh = g[j] * gam[j];
            m1 += dh;
            m2 += dh * h[j];
            if (gg)
              gg[j] += g[j] * h[j];
            if (gb)
              gb[j] += g[j];
          }
          if (!gx)
            continue;
          m1 *= inv_cols;
          m2 *= inv_cols;
          const double is = (*inv_std)[r];
          for (std::size_t j = 0; j < cols; ++j)
            gx[r * cols + j] += is * (g[j] * gam[j] - m1 - h[j] * m2);
        }
      });
}

Tensor gelu(const Tensor &a) {
  return unary(
      "gelu", a,
      [](double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); },
      [](double x, double) {
        const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
        const double pdf =
            std::exp(-0.5 * x * x) * std::numbers::inv_sqrtpi / std::numbers::sqrt2;
        return cdf + x * pdf;
      });
}

Tensor exp(const Tensor &a) {
  return unary(
      "exp", a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

Tensor log(const Tensor &a) {
  return unary(
      "log", a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Tensor abs(const Tensor &a) {
  return unary(
      "abs", a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : x < 0.0 ? -1.0 : 0.0; });
}

Tensor square(const Tensor &a) {
  return unary(
      "square", a, [](double x) { return x * x; },
      [](double x, double) { return 2.0 * x; });
}

Tensor clamp(const Tensor &a, double lo, double hi) {
  return unary(
      "clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return x >= lo && x <= hi ? 1.0 : 0.0; });
}

Tensor round_ste(const Tensor &a) {
  return unary(
      "round_ste", a, [](double x) { return std::round(x); },
      [](double, double) { return 1.0; });
}

Tensor grad_scale(const Tensor &a, double factor) {
  return unary(
      "grad_scale", a, [](double x) { return x; },
      [factor](double, double) { return factor; });
}

Tensor sum(const Tensor &a) {
  double s = 0.0;
  for (double v : a.data())
    s += v;
  return make_result("sum", {}, {s}, {a}, [](Node &n) {
    double *ga = input_grad(n, 0);
    if (!ga)
      return;
    const std::size_t len = n.inputs[0]->value.size();
    for (std::size_t i = 0; i < len; ++i)
      ga[i] += n.grad[0];
  });
}

Tensor mean(const Tensor &a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor sum(const Tensor &a, std::size_t axis) {
  if (axis >= a.rank())
    throw DimensionError("sum", "axis " + std::to_string(axis) +
                                    " out of range for " +
                                    to_string(a.shape()));
  const AxisSplit sp = split_axis(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  const auto av = a.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t e = 0; e < sp.extent; ++e)
      for (std::size_t i = 0; i < sp.inner; ++i)
        out[o * sp.inner + i] += av[(o * sp.extent + e) * sp.inner + i];
  return make_result("sum_axis", std::move(out_shape), std::move(out), {a},
                     [sp](Node &n) {
                       double *ga = input_grad(n, 0);
                       if (!ga)
                         return;
                       for (std::size_t o = 0; o < sp.outer; ++o)
                         for (std::size_t e = 0; e < sp.extent; ++e)
                           for (std::size_t i = 0; i < sp.inner; ++i)
                             ga[(o * sp.extent + e) * sp.inner + i] +=
                                 n.grad[o * sp.inner + i];
                     });
}

Tensor mean(const Tensor &a, std::size_t axis) {
  if (axis >= a.rank())
    throw DimensionError("mean", "axis " + std::to_string(axis) +
                                     " out of range for " +
                                     to_string(a.shape()));
  return scale(sum(a, axis), 1.0 / static_cast<double>(a.shape()[axis]));
}

} // namespace dfq
