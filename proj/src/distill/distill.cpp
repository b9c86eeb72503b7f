// SPDX-License-Identifier: Apache-2.0
/**
 * @file   distill.cpp
 * @brief  Distillation losses and the quantization-aware training loop.
 */

#include <dfq/distill.hpp>
#include <dfq/log.hpp>
#include <dfq/optim.hpp>

#include <cmath>
#include <numeric>

namespace dfq {

std::string to_string(Augmentation a) {
  return a == Augmentation::None ? "none" : "crop_flip";
}

Augmentation parse_augmentation(std::string_view s) {
  if (s == "none")
    return Augmentation::None;
  if (s == "crop_flip")
    return Augmentation::CropFlip;
  throw std::invalid_argument("unknown augmentation '" + std::string(s) +
                              "' (expected none or crop_flip)");
}

std::string to_string(HadTarget t) {
  return t == HadTarget::Maps ? "maps" : "head_outputs";
}

HadTarget parse_had_target(std::string_view s) {
  if (s == "maps")
    return HadTarget::Maps;
  if (s == "head_outputs")
    return HadTarget::HeadOutputs;
  throw std::invalid_argument("unknown distillation target '" +
                              std::string(s) +
                              "' (expected maps or head_outputs)");
}

void DistillConfig::validate() const {
  auto fail = [](const std::string &m) { throw std::invalid_argument(m); };
  if (!(gamma >= 0.0))
    fail("distill: gamma must be >= 0");
  if (epochs == 0)
    fail("distill: epochs must be >= 1");
  if (batch == 0)
    fail("distill: batch must be >= 1");
  if (!(lr > 0.0))
    fail("distill: lr must be positive");
}

Tensor crop_flip(const Tensor &images, Rng &rng) {
  if (images.rank() != 4)
    throw DimensionError("crop_flip", "expected [B, C, H, W], got " +
                                          to_string(images.shape()));
  const std::size_t B = images.dim(0), C = images.dim(1), H = images.dim(2),
                    W = images.dim(3);
  // 28 of 32 pixels, scaled for other sides.
  const std::size_t ch = std::max<std::size_t>(1, H * 7 / 8);
  const std::size_t cw = std::max<std::size_t>(1, W * 7 / 8);
  const std::size_t py = (H - ch) / 2, px = (W - cw) / 2;
  const auto src = images.data();
  std::vector<double> out(src.size(), 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t oy = rng.index(H - ch + 1), ox = rng.index(W - cw + 1);
    const bool flip = rng.bernoulli(0.5);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < ch; ++y)
        for (std::size_t x = 0; x < cw; ++x) {
          const std::size_t tx = flip ? W - 1 - (px + x) : px + x;
          out[((b * C + c) * H + py + y) * W + tx] =
              src[((b * C + c) * H + oy + y) * W + ox + x];
        }
  }
  return Tensor::from(images.shape(), std::move(out));
}

namespace {

void check_stacks(const AttentionStack &t, const AttentionStack &s) {
  if (t.depth() != s.depth() || t.width() != s.width() ||
      t.has_class_token != s.has_class_token)
    throw std::invalid_argument(
        "loss_had: teacher has " + std::to_string(t.depth()) + "x" +
        std::to_string(t.width()) + " heads, student " +
        std::to_string(s.depth()) + "x" + std::to_string(s.width()));
  if (t.depth() == 0)
    throw std::invalid_argument("loss_had: empty attention stacks");
}

/// Rows the per-head metric runs over, shape [B, N, rows, m].
Tensor had_rows(const LayerAttention &layer, bool has_cls, Metric metric,
                HadTarget target) {
  if (target == HadTarget::HeadOutputs) {
    const Tensor &h = layer.heads; // [B, N, T, d/N]
    const std::size_t T = h.dim(2), off = has_cls ? 1 : 0;
    Tensor spatial = slice(h, 2, off, T - off);
    return reshape(spatial, {h.dim(0), h.dim(1), 1, (T - off) * h.dim(3)});
  }
  // KL needs distributions: softmax of the spatial logits equals the
  // spatial probabilities renormalized over the patch keys.
  return spatial_maps(metric == Metric::Kl ? layer.logits : layer.probs,
                      has_cls);
}

} // namespace

Tensor loss_had(const AttentionStack &teacher, const AttentionStack &student,
                Metric metric, HadTarget target) {
  check_stacks(teacher, student);
  Tensor total;
  for (std::size_t l = 0; l < teacher.depth(); ++l) {
    Tensor a = had_rows(teacher.layers[l], teacher.has_class_token, metric, target);
    Tensor b = had_rows(student.layers[l], student.has_class_token, metric, target);
    if (a.shape() != b.shape())
      throw DimensionError("loss_had", a.shape(), b.shape());
    // Equal row counts per head, so the grand mean is the per-head mean.
    Tensor d = mean(distance_rows(a, b, metric));
    total = total.defined() ? add(total, d) : d;
  }
  return scale(total, 1.0 / static_cast<double>(teacher.depth()));
}

Tensor loss_kl(const Tensor &teacher_logits, const Tensor &student_logits) {
  if (teacher_logits.shape() != student_logits.shape() ||
      teacher_logits.rank() != 2)
    throw DimensionError("loss_kl", teacher_logits.shape(),
                         student_logits.shape());
  Tensor lt = log_softmax(teacher_logits);
  Tensor ls = log_softmax(student_logits);
  return scale(sum(mul(exp(lt), sub(lt, ls))),
               1.0 / static_cast<double>(teacher_logits.dim(0)));
}

DistillResult run_distillation(const MicroViT &teacher, const Tensor &data,
                               const DistillConfig &cfg,
                               const LabeledImages *eval) {
  cfg.validate();
  if (data.rank() != 4 || data.dim(0) == 0)
    throw std::invalid_argument("run_distillation: empty dataset");
  MicroViT frozen = teacher.clone();
  frozen.set_requires_grad(false);

  QuantizedViT student(teacher.clone(), cfg.bits, cfg.mode);
  student.model().set_requires_grad(true);
  const Tensor pool = data.detach();
  student.calibrate(pool, 64);
  student.set_training(true);
  NesterovSgd sgd(student.trainable_parameters(),
                  {.lr = cfg.lr, .momentum = cfg.momentum,
                   .weight_decay = cfg.weight_decay});

  const bool capture = cfg.gamma > 0.0;
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(pool.dim(0));
  std::iota(order.begin(), order.end(), std::size_t{0});

  std::vector<DistillLogEntry> log;
  std::optional<QuantizedViT> best;
  std::optional<double> best_acc;
  std::size_t best_epoch = 0, step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double sum_kl = 0.0, sum_had = 0.0, sum_total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t n = std::min(cfg.batch, order.size() - start);
      std::vector<std::size_t> idx(order.begin() + static_cast<long>(start),
                                   order.begin() + static_cast<long>(start + n));
      Tensor x = index_select(pool, 0, idx);
      if (cfg.augmentation == Augmentation::CropFlip)
        x = crop_flip(x, rng);

      auto t = frozen.forward(x, capture);
      auto s = student.forward(x, capture);
      Tensor kl = loss_kl(t.logits, s.logits);
      Tensor loss = kl;
      double had = 0.0;
      if (capture) {
        Tensor h = loss_had(*t.attention, *s.attention, cfg.metric,
                            cfg.had_target);
        had = h.item();
        loss = add(loss, scale(h, cfg.gamma));
      }
      if (!std::isfinite(loss.item())) {
        log.push_back({epoch, kl.item(), had, loss.item(), std::nullopt});
        throw DistillationError("run_distillation: non-finite loss at step " +
                                    std::to_string(step) + " (seed " +
                                    std::to_string(cfg.seed) + ")",
                                std::move(log));
      }
      sgd.zero_grad();
      backward(loss);
      sgd.step();
      student.project_scales();
      ++step;
      ++batches;
      sum_kl += kl.item();
      sum_had += had;
      sum_total += loss.item();
    }
    const double nb = static_cast<double>(batches);
    DistillLogEntry entry{epoch, sum_kl / nb, sum_had / nb, sum_total / nb,
                          std::nullopt};
    if (eval) {
      student.set_training(false);
      entry.eval_accuracy =
          accuracy(student.model(), *eval, 128, &student);
      student.set_training(true);
      if (!best_acc || *entry.eval_accuracy > *best_acc) {
        best_acc = entry.eval_accuracy;
        best_epoch = epoch;
        best = student.clone();
      }
    }
    log_info("distill epoch " + std::to_string(epoch) + " kl " +
             std::to_string(entry.loss_kl) + " had " +
             std::to_string(entry.loss_had) +
             (entry.eval_accuracy
                  ? " acc " + std::to_string(*entry.eval_accuracy)
                  : std::string()));
    log.push_back(entry);
  }
  QuantizedViT out = best ? std::move(*best) : std::move(student);
  out.set_training(false);
  return {std::move(out), std::move(log), best_acc,
          best ? best_epoch : cfg.epochs - 1, step};
}

} // namespace dfq
