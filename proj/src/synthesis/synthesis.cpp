// SPDX-License-Identifier: Apache-2.0
/**
 * @file   synthesis.cpp
 * @brief  Pixel-space inversion of a frozen teacher.
 */

#include <dfq/log.hpp>
#include <dfq/optim.hpp>
#include <dfq/synthesis.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace dfq {

namespace {

constexpr std::size_t kMaxRestarts = 3;

/// Per-image TV, shape [B]: squared differences summed over C, H, W and
/// divided by C.
Tensor tv_per_image(const Tensor &images) {
  if (images.rank() != 4)
    throw DimensionError("loss_tv", "expected [B, C, H, W], got " +
                                        to_string(images.shape()));
  const std::size_t B = images.dim(0), C = images.dim(1), H = images.dim(2),
                    W = images.dim(3);
  if (H < 2 || W < 2)
    throw DimensionError("loss_tv", "H and W must be >= 2, got " +
                                        to_string(images.shape()));
  Tensor dv = sub(slice(images, 2, 1, H - 1), slice(images, 2, 0, H - 1));
  Tensor dh = sub(slice(images, 3, 1, W - 1), slice(images, 3, 0, W - 1));
  Tensor sv = sum(reshape(square(dv), {B, C * (H - 1) * W}), 1);
  Tensor sh = sum(reshape(square(dh), {B, C * H * (W - 1)}), 1);
  return scale(add(sv, sh), 1.0 / static_cast<double>(C));
}

std::vector<double> cross_entropy_per_image(const Tensor &logits,
                                            const std::vector<int> &labels) {
  Tensor lp = log_softmax(logits.detach());
  const std::size_t C = logits.dim(1);
  std::vector<double> out(labels.size());
  for (std::size_t b = 0; b < labels.size(); ++b)
    out[b] = -lp.data()[b * C + static_cast<std::size_t>(labels[b])];
  return out;
}

SynthBatch run_batch(const MicroViT &teacher, const SynthConfig &cfg,
                     std::size_t n, std::size_t label_offset,
                     std::uint64_t seed) {
  const auto &vc = teacher.config();
  Rng rng(seed);
  std::vector<double> init(n * vc.channels * vc.image_side * vc.image_side);
  for (auto &v : init)
    v = rng.normal();
  Tensor images = Tensor::from(
      {n, vc.channels, vc.image_side, vc.image_side}, std::move(init), true);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i)
    labels[i] = static_cast<int>((label_offset + i) % vc.classes);

  Adam adam({images}, {.lr = cfg.lr, .beta1 = cfg.beta1, .beta2 = cfg.beta2});
  CoherencyOptions copt{cfg.post_softmax};
  SynthBatch out;
  out.seed = seed;
  for (std::size_t step = 0; step < cfg.steps_per_batch; ++step) {
    auto fwd = teacher.forward(images, cfg.use_ihc);
    Tensor loss = add(scale(loss_cl(fwd.logits, labels), cfg.alpha),
                      scale(loss_tv(images), cfg.beta));
    double ihc = 0.0;
    if (cfg.use_ihc) {
      Tensor l_ihc = coherency(*fwd.attention, copt).loss;
      ihc = l_ihc.item();
      loss = add(loss, l_ihc);
    }
    const double value = loss.item();
    if (!std::isfinite(value))
      throw SynthesisError("non-finite L_G at step " + std::to_string(step));
    if (step % cfg.trace_every == 0)
      out.loss_trace.push_back(value);
    out.final_ihc = ihc;
    if (!images.requires_grad() || !loss.requires_grad())
      continue; // degenerate objective: nothing to optimize
    adam.zero_grad();
    backward(loss);
    adam.step();
  }

  out.images = images.detach();
  out.labels = labels;
  auto fwd = teacher.forward(out.images, false);
  out.final_cl = cross_entropy_per_image(fwd.logits, labels);
  auto tv = tv_per_image(out.images);
  out.final_tv.assign(tv.data().begin(), tv.data().end());
  out.coherency = image_coherency(teacher, out.images, cfg.post_softmax);
  for (double v : out.coherency)
    if (!std::isfinite(v))
      throw SynthesisError("non-finite coherency in synthesized batch");
  return out;
}

} // namespace

void SynthConfig::validate() const {
  auto fail = [](const std::string &m) { throw std::invalid_argument(m); };
  if (!(alpha >= 0.0) || !(beta >= 0.0))
    fail("synth: alpha and beta must be >= 0");
  if (steps_per_batch == 0)
    fail("synth: steps_per_batch must be >= 1");
  if (batch == 0 || samples_total == 0)
    fail("synth: batch and samples_total must be >= 1");
  if (!(lr > 0.0))
    fail("synth: lr must be positive");
  if (trace_every == 0)
    fail("synth: trace_every must be >= 1");
}

std::size_t SynthDataset::size() const {
  std::size_t n = 0;
  for (const auto &b : batches)
    n += b.labels.size();
  return n;
}

LabeledImages SynthDataset::as_labeled() const {
  if (batches.empty())
    throw std::invalid_argument("synth dataset is empty");
  LabeledImages out;
  std::vector<Tensor> parts;
  for (const auto &b : batches) {
    parts.push_back(b.images);
    out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  }
  out.images = concat(parts, 0);
  return out;
}

std::vector<double> SynthDataset::coherency_scores() const {
  std::vector<double> out;
  for (const auto &b : batches)
    out.insert(out.end(), b.coherency.begin(), b.coherency.end());
  return out;
}

double SynthDataset::mean_coherency() const {
  const auto s = coherency_scores();
  if (s.empty())
    throw std::invalid_argument("synth dataset is empty");
  return std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
}

Tensor loss_cl(const Tensor &logits, const std::vector<int> &labels) {
  return cross_entropy(logits, labels);
}

Tensor loss_tv(const Tensor &images) {
  Tensor per = tv_per_image(images);
  return mean(per);
}

std::vector<double> image_coherency(const MicroViT &model, const Tensor &images,
                                    bool post_softmax, std::size_t batch) {
  std::vector<double> out;
  out.reserve(images.dim(0));
  for (std::size_t s = 0; s < images.dim(0); s += batch) {
    const std::size_t n = std::min(batch, images.dim(0) - s);
    auto fwd = model.forward(slice(images.detach(), 0, s, n), true);
    auto rep = coherency(*fwd.attention, {post_softmax});
    out.insert(out.end(), rep.per_image_similarity.data().begin(),
               rep.per_image_similarity.data().end());
  }
  return out;
}

SynthDataset synthesize(const MicroViT &teacher, const SynthConfig &cfg) {
  cfg.validate();
  MicroViT frozen = teacher.clone();
  frozen.set_requires_grad(false);
  Rng seeds(cfg.seed);
  SynthDataset ds;
  std::size_t done = 0;
  while (done < cfg.samples_total) {
    const std::size_t n = std::min(cfg.batch, cfg.samples_total - done);
    std::uint64_t seed = seeds.next_u64();
    for (std::size_t restart = 0;; ++restart) {
      try {
        SynthBatch b = run_batch(frozen, cfg, n, done, seed);
        b.restarts = restart;
        log_info("synth batch " + std::to_string(ds.batches.size()) +
                 " L_IHC " + std::to_string(b.final_ihc));
        ds.batches.push_back(std::move(b));
        break;
      } catch (const SynthesisError &e) {
        if (restart + 1 >= kMaxRestarts)
          throw SynthesisError(std::string(e.what()) + "; batch " +
                               std::to_string(ds.batches.size()) +
                               " aborted after " +
                               std::to_string(kMaxRestarts) + " restarts");
        log_warning(std::string("synth: ") + e.what() +
                    "; restarting batch with a fresh seed");
        seed = seeds.next_u64();
      }
    }
    done += n;
  }
  return ds;
}

Strata stratify_by_coherency(const std::vector<double> &scores,
                             double fraction, std::uint64_t seed) {
  const auto k = static_cast<std::size_t>(
      std::floor(fraction * static_cast<double>(scores.size()) + 1e-9));
  if (k == 0)
    throw std::invalid_argument("stratify_by_coherency: subset size is 0");
  if (k > scores.size())
    throw std::invalid_argument("stratify_by_coherency: fraction above 1");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] > scores[b];
  });
  Strata s;
  s.high.assign(order.begin(), order.begin() + static_cast<long>(k));
  // Bottom k, still ascending by index among ties.
  std::vector<std::size_t> asc(scores.size());
  std::iota(asc.begin(), asc.end(), std::size_t{0});
  std::stable_sort(asc.begin(), asc.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] < scores[b];
  });
  s.low.assign(asc.begin(), asc.begin() + static_cast<long>(k));
  std::vector<std::size_t> all(scores.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(all);
  s.random.assign(all.begin(), all.begin() + static_cast<long>(k));
  return s;
}

} // namespace dfq
