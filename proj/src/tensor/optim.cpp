// SPDX-License-Identifier: Apache-2.0
#include <dfq/optim.hpp>

#include <cmath>

namespace dfq {

Adam::Adam(std::vector<Tensor> params, Options opt)
    : params_(std::move(params)), opt_(opt) {
  for (const auto &p : params_) {
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor &p = params_[k];
    if (!p.has_grad())
      continue;
    auto w = p.mutable_data();
    auto g = p.grad();
    auto &m = m_[k];
    auto &v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * g[i];
      v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      if (opt_.weight_decay > 0.0)
        w[i] -= opt_.lr * opt_.weight_decay * w[i];
      w[i] -= opt_.lr * mhat / (std::sqrt(vhat) + opt_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (auto &p : params_)
    p.zero_grad();
}

NesterovSgd::NesterovSgd(std::vector<Tensor> params, Options opt)
    : params_(std::move(params)), opt_(opt) {
  for (const auto &p : params_)
    velocity_.emplace_back(p.size(), 0.0);
}

void NesterovSgd::step() {
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor &p = params_[k];
    if (!p.has_grad())
      continue;
    auto w = p.mutable_data();
    auto g = p.grad();
    auto &vel = velocity_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i] + opt_.weight_decay * w[i];
      vel[i] = opt_.momentum * vel[i] + gi;
      w[i] -= opt_.lr * (gi + opt_.momentum * vel[i]);
    }
  }
}

void NesterovSgd::zero_grad() {
  for (auto &p : params_)
    p.zero_grad();
}

} // namespace dfq
