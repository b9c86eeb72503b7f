// SPDX-License-Identifier: Apache-2.0
/**
 * @file   optim.hpp
 * @brief  First-order optimizers over tape leaves.
 */
#pragma once

#include <dfq/tensor.hpp>

#include <vector>

namespace dfq {

/// Adaptive-moment descent with bias correction and optional decoupled
/// weight decay.
class Adam {
public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };

  Adam(std::vector<Tensor> params, Options opt);

  /// Applies one update from the current grads; tensors without a grad are
  /// skipped.
  void step();
  void zero_grad();
  void set_lr(double lr) { opt_.lr = lr; }
  const Options &options() const { return opt_; }

private:
  std::vector<Tensor> params_;
  Options opt_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

/// Momentum SGD with the Nesterov look-ahead update
///   v <- mu v + g;  p <- p - lr (g + mu v).
class NesterovSgd {
public:
  struct Options {
    double lr = 1e-3;
    double momentum = 0.9;
    double weight_decay = 0.0;
  };

  NesterovSgd(std::vector<Tensor> params, Options opt);

  void step();
  void zero_grad();
  void set_lr(double lr) { opt_.lr = lr; }
  const Options &options() const { return opt_; }

private:
  std::vector<Tensor> params_;
  Options opt_;
  std::vector<std::vector<double>> velocity_;
};

} // namespace dfq
