// SPDX-License-Identifier: Apache-2.0
/**
 * @file   corr_study.cpp
 * @brief  Which attention distance best predicts accuracy under partial
 *         head quantization.
 */

#include <dfq/distill.hpp>
#include <dfq/log.hpp>

#include <iomanip>
#include <sstream>

namespace dfq {

namespace {

std::vector<std::vector<bool>> random_mask(Rng &rng, std::size_t layers,
                                           std::size_t heads) {
  std::vector<std::vector<bool>> mask(layers, std::vector<bool>(heads, false));
  for (auto &row : mask) {
    const std::size_t k = rng.index(heads + 1);
    std::vector<std::size_t> order(heads);
    for (std::size_t h = 0; h < heads; ++h)
      order[h] = h;
    rng.shuffle(order);
    for (std::size_t i = 0; i < k; ++i)
      row[order[i]] = true;
  }
  return mask;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

} // namespace

std::string CorrStudy::table_csv() const {
  std::string out = "metric,spearman_abs,kendall_abs\n";
  for (const auto &r : rows)
    out += to_string(r.metric) + "," +
           (r.spearman_abs ? fmt(*r.spearman_abs) : "degenerate") + "," +
           (r.kendall_abs ? fmt(*r.kendall_abs) : "degenerate") + "\n";
  return out;
}

std::string CorrStudy::scatter_csv() const {
  std::string out = "config,quantized_heads,accuracy";
  for (Metric m : metrics)
    out += "," + to_string(m);
  out += "\n";
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto &s = samples[i];
    std::size_t q = 0;
    for (const auto &row : s.mask)
      for (bool b : row)
        q += b ? 1 : 0;
    out += std::to_string(i) + "," + std::to_string(q) + "," + fmt(s.accuracy);
    for (double d : s.distance)
      out += "," + fmt(d);
    out += "\n";
  }
  return out;
}

CorrStudy head_quant_corr_study(
    const MicroViT &teacher, const LabeledImages &eval,
    const CorrStudyConfig &cfg,
    const std::vector<std::vector<std::vector<bool>>> *fixed_masks) {
  if (eval.size() == 0)
    throw std::invalid_argument("head_quant_corr_study: eval set is empty");
  const std::size_t n_configs = fixed_masks ? fixed_masks->size() : cfg.n_configs;
  if (n_configs == 0)
    throw std::invalid_argument("head_quant_corr_study: no configurations");
  if (cfg.metrics.empty())
    throw std::invalid_argument("head_quant_corr_study: no metrics");
  const auto &vc = teacher.config();
  MicroViT fp = teacher.clone();
  fp.set_requires_grad(false);

  constexpr std::size_t kChunk = 128;
  std::vector<AttentionStack> fp_attn;
  for (std::size_t s = 0; s < eval.size(); s += kChunk) {
    const std::size_t n = std::min(kChunk, eval.size() - s);
    fp_attn.push_back(*fp.forward(slice(eval.images, 0, s, n), true).attention);
  }
  const Tensor calib = slice(eval.images, 0, 0,
                             std::min(cfg.calibration_images, eval.size()));

  CorrStudy study;
  study.metrics = cfg.metrics;
  Rng rng(cfg.seed);
  for (std::size_t c = 0; c < n_configs; ++c) {
    CorrSample sample;
    sample.mask = fixed_masks ? (*fixed_masks)[c]
                              : random_mask(rng, vc.layers, vc.heads);
    QuantizedViT q(fp.clone(), cfg.bits, cfg.mode);
    q.set_head_mask(sample.mask);
    q.calibrate(calib, 64);
    std::vector<double> dist(cfg.metrics.size(), 0.0);
    std::size_t correct = 0;
    for (std::size_t s = 0, chunk = 0; s < eval.size(); s += kChunk, ++chunk) {
      const std::size_t n = std::min(kChunk, eval.size() - s);
      auto out = q.forward(slice(eval.images, 0, s, n), true);
      for (std::size_t m = 0; m < cfg.metrics.size(); ++m)
        dist[m] += loss_had(fp_attn[chunk], *out.attention, cfg.metrics[m])
                       .item() *
                   static_cast<double>(n);
      const auto v = out.logits.data();
      for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < vc.classes; ++j)
          if (v[i * vc.classes + j] > v[i * vc.classes + best])
            best = j;
        correct += static_cast<int>(best) == eval.labels[s + i] ? 1 : 0;
      }
    }
    for (auto &d : dist)
      d /= static_cast<double>(eval.size());
    sample.distance = std::move(dist);
    sample.accuracy =
        static_cast<double>(correct) / static_cast<double>(eval.size());
    study.samples.push_back(std::move(sample));
  }

  std::vector<double> acc;
  for (const auto &s : study.samples)
    acc.push_back(s.accuracy);
  for (std::size_t m = 0; m < cfg.metrics.size(); ++m) {
    std::vector<double> d;
    for (const auto &s : study.samples)
      d.push_back(s.distance[m]);
    CorrRow row{cfg.metrics[m], std::nullopt, std::nullopt};
    try {
      row.spearman_abs = std::abs(rank_correlation(d, acc, RankKind::Spearman));
      row.kendall_abs = std::abs(rank_correlation(d, acc, RankKind::Kendall));
    } catch (const std::domain_error &) {
      log_warning("corr study: " + to_string(cfg.metrics[m]) +
                  " correlation undefined (constant series)");
    } catch (const std::invalid_argument &) {
      log_warning("corr study: too few configurations for a correlation");
    }
    study.rows.push_back(row);
  }
  return study;
}

} // namespace dfq
