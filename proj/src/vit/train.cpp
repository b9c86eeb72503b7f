// SPDX-License-Identifier: Apache-2.0
/**
 * @file   train.cpp
 * @brief  Full-precision teacher training.
 */

#include <dfq/log.hpp>
#include <dfq/optim.hpp>
#include <dfq/vit.hpp>

#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

namespace dfq {

TeacherResult train_teacher(const ViTConfig &config,
                            const LabeledImages &train,
                            const LabeledImages &heldout,
                            const OptimizerConfig &opt) {
  if (train.size() == 0)
    throw std::invalid_argument("train_teacher: empty training set");
  for (int y : train.labels)
    if (y < 0 || static_cast<std::size_t>(y) >= config.classes)
      throw std::out_of_range("train_teacher: label " + std::to_string(y) +
                              " outside [0, " +
                              std::to_string(config.classes) + ")");
  if (opt.epochs == 0 || opt.batch == 0)
    throw std::invalid_argument("train_teacher: epochs and batch must be >= 1");

  Rng rng(opt.seed);
  MicroViT model(config, rng.next_u64());
  model.set_requires_grad(true);
  Adam adam(model.parameters(), {.lr = opt.lr, .weight_decay = opt.weight_decay});

  const std::size_t steps_per_epoch = (train.size() + opt.batch - 1) / opt.batch;
  const std::size_t total_steps = steps_per_epoch * opt.epochs;
  const auto warmup = static_cast<std::size_t>(
      opt.warmup_fraction * static_cast<double>(total_steps));

  TeacherResult result;
  result.heldout_accuracy = -1.0;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += opt.batch) {
      const std::size_t n = std::min(opt.batch, order.size() - start);
      std::vector<std::size_t> idx(order.begin() + static_cast<long>(start),
                                   order.begin() + static_cast<long>(start + n));
      LabeledImages batch = train.subset(idx);

      double lr = opt.lr;
      if (step < warmup)
        lr *= static_cast<double>(step + 1) / static_cast<double>(warmup);
      else
        lr *= 0.5 * (1.0 + std::cos(std::numbers::pi *
                                    static_cast<double>(step - warmup) /
                                    static_cast<double>(total_steps - warmup)));
      adam.set_lr(lr);

      Tensor logits = model.forward(batch.images, false).logits;
      Tensor loss = cross_entropy(logits, batch.labels);
      if (!std::isfinite(loss.item()))
        throw DivergenceError("train_teacher: non-finite loss", opt.seed, step);
      adam.zero_grad();
      backward(loss);
      adam.step();
      ++step;

      loss_sum += loss.item() * static_cast<double>(n);
      const auto v = logits.data();
      const std::size_t C = config.classes;
      for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < C; ++j)
          if (v[i * C + j] > v[i * C + best])
            best = j;
        if (static_cast<int>(best) == batch.labels[i])
          ++correct;
      }
    }
    TrainLogEntry entry{epoch,
                        loss_sum / static_cast<double>(train.size()),
                        static_cast<double>(correct) /
                            static_cast<double>(train.size()),
                        heldout.size() ? accuracy(model, heldout) : 0.0};
    result.log.push_back(entry);
    std::ostringstream os;
    os << "teacher epoch " << epoch << " loss " << entry.train_loss
       << " train_acc " << entry.train_accuracy << " heldout_acc "
       << entry.heldout_accuracy;
    log_info(os.str());
    // Without a held-out split, fall back to training accuracy.
    const double score =
        heldout.size() ? entry.heldout_accuracy : entry.train_accuracy;
    if (score > result.heldout_accuracy) {
      result.heldout_accuracy = score;
      result.best_epoch = epoch;
      result.model = model.clone();
    }
  }
  result.model.set_requires_grad(false);
  return result;
}

} // namespace dfq
