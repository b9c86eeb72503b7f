// SPDX-License-Identifier: Apache-2.0
/**
 * @file   studies.cpp
 * @brief  Coherency-stratified subsets and bit-width sweeps.
 */

#include <dfq/log.hpp>
#include <dfq/studies.hpp>

#include <algorithm>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>

namespace dfq {

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

double mean_of(const std::vector<double> &v) {
  if (v.empty())
    return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

LabeledImages take(const LabeledImages &d, std::size_t from, std::size_t to) {
  std::vector<std::size_t> idx(to - from);
  std::iota(idx.begin(), idx.end(), from);
  return d.subset(idx);
}

constexpr std::size_t kBins = 20;

} // namespace

std::uint64_t repeat_seed(std::uint64_t base, std::size_t i) {
  return Rng(base).split(i + 1).next_u64();
}

EvalSplit split_heldout(const LabeledImages &heldout, std::size_t select_images) {
  if (select_images >= heldout.size())
    throw std::invalid_argument("split_heldout: selection part (" +
                                std::to_string(select_images) +
                                ") leaves nothing to report on (" +
                                std::to_string(heldout.size()) + " held out)");
  return {take(heldout, 0, select_images),
          take(heldout, select_images, heldout.size())};
}

StudentRun train_student(const MicroViT &teacher, const Tensor &data,
                         const DistillConfig &cfg, const EvalSplit &split) {
  const LabeledImages *select = split.select.size() ? &split.select : nullptr;
  DistillResult r = run_distillation(teacher, data, cfg, select);
  StudentRun out;
  out.accuracy = accuracy(r.student.model(), split.report, 128, &r.student);
  out.best_epoch = r.best_epoch;
  out.log = std::move(r.log);
  return out;
}

double SubsetResult::mean_accuracy() const { return mean_of(accuracy); }
double SubsetResult::mean_coherency() const { return mean_of(coherency); }

const SubsetResult &MotivStudy::subset(std::string_view name) const {
  for (const auto &s : subsets)
    if (s.name == name)
      return s;
  throw std::out_of_range("MotivStudy: no subset '" + std::string(name) + "'");
}

std::string MotivStudy::histogram_csv() const {
  std::string out = "bin_center,count,subset,accuracy\n";
  for (const auto &r : histogram)
    out += fmt(r.bin_center) + "," + std::to_string(r.count) + "," + r.subset +
           "," + fmt(r.accuracy) + "\n";
  return out;
}

std::string MotivStudy::subsets_csv() const {
  std::string out = "subset,seed,accuracy,mean_coherency\n";
  for (const auto &s : subsets)
    for (std::size_t i = 0; i < s.accuracy.size(); ++i)
      out += s.name + "," + std::to_string(i) + "," + fmt(s.accuracy[i]) + "," +
             fmt(s.mean_coherency()) + "\n";
  return out;
}

MotivStudy motiv_study(const MicroViT &teacher, const SynthDataset &base,
                       const SynthDataset &mimiq, const EvalSplit &split,
                       const MotivConfig &cfg, const DistillConfig &distill) {
  if (cfg.seeds == 0)
    throw std::invalid_argument("motiv_study: seeds must be >= 1");
  const LabeledImages base_set = base.as_labeled();
  const LabeledImages mimiq_set = mimiq.as_labeled();
  const std::vector<double> base_scores = base.coherency_scores();
  const std::vector<double> mimiq_scores = mimiq.coherency_scores();

  const Strata strata = stratify_by_coherency(base_scores, cfg.fraction,
                                              repeat_seed(distill.seed, 0));
  const std::size_t k = strata.high.size();
  if (k < distill.batch)
    throw std::invalid_argument(
        "motiv_study: subsets of " + std::to_string(k) +
        " images are smaller than the distillation batch (" +
        std::to_string(distill.batch) + ")");
  if (mimiq_set.size() < k)
    throw std::invalid_argument("motiv_study: full-objective pool has " +
                                std::to_string(mimiq_set.size()) +
                                " images, need " + std::to_string(k));
  std::vector<std::size_t> mimiq_idx(mimiq_set.size());
  std::iota(mimiq_idx.begin(), mimiq_idx.end(), std::size_t{0});
  Rng pick(repeat_seed(distill.seed, 1));
  pick.shuffle(mimiq_idx);
  mimiq_idx.resize(k);

  struct Source {
    std::string name;
    const LabeledImages *pool;
    const std::vector<double> *scores;
    const std::vector<std::size_t> *idx;
  };
  const std::vector<Source> sources = {
      {"high", &base_set, &base_scores, &strata.high},
      {"low", &base_set, &base_scores, &strata.low},
      {"random", &base_set, &base_scores, &strata.random},
      {"mimiq", &mimiq_set, &mimiq_scores, &mimiq_idx}};

  MotivStudy out;
  out.base_mean_coherency = base.mean_coherency();
  out.mimiq_mean_coherency = mimiq.mean_coherency();
  for (const auto &src : sources) {
    SubsetResult r;
    r.name = src.name;
    for (std::size_t i : *src.idx)
      r.coherency.push_back((*src.scores)[i]);
    const Tensor images = src.pool->subset(*src.idx).images;
    for (std::size_t s = 0; s < cfg.seeds; ++s) {
      DistillConfig dc = distill;
      dc.seed = repeat_seed(distill.seed, 100 + s);
      r.accuracy.push_back(train_student(teacher, images, dc, split).accuracy);
      log_info("motiv " + r.name + " seed " + std::to_string(s) + " accuracy " +
               fmt(r.accuracy.back()));
    }
    out.subsets.push_back(std::move(r));
  }

  double lo = out.subsets[0].coherency[0], hi = lo;
  for (const auto &s : out.subsets)
    for (double c : s.coherency) {
      lo = std::min(lo, c);
      hi = std::max(hi, c);
    }
  const double width = hi > lo ? (hi - lo) / kBins : 1.0;
  for (const auto &s : out.subsets) {
    std::vector<std::size_t> count(kBins, 0);
    for (double c : s.coherency) {
      const auto b = static_cast<std::size_t>((c - lo) / width);
      ++count[std::min(b, kBins - 1)];
    }
    for (std::size_t b = 0; b < kBins; ++b)
      out.histogram.push_back({lo + (static_cast<double>(b) + 0.5) * width,
                               count[b], s.name, s.mean_accuracy()});
  }
  return out;
}

double SweepPoint::mean_accuracy() const { return mean_of(accuracy); }

double SweepTable::delta(std::string_view axis) const {
  const SweepPoint *first = nullptr, *last = nullptr;
  for (const auto &p : points)
    if (p.axis == axis) {
      if (!first)
        first = &p;
      last = &p;
    }
  if (!first)
    throw std::out_of_range("SweepTable: no axis '" + std::string(axis) + "'");
  return last->mean_accuracy() - first->mean_accuracy();
}

std::string SweepTable::csv() const {
  std::string out = "axis,weight_bits,activation_bits,seed,accuracy\n";
  for (const auto &p : points)
    for (std::size_t i = 0; i < p.accuracy.size(); ++i)
      out += p.axis + "," + std::to_string(p.bits.weight_bits) + "," +
             std::to_string(p.bits.activation_bits) + "," + std::to_string(i) +
             "," + fmt(p.accuracy[i]) + "\n";
  return out;
}

SweepTable sweep_bits(const MicroViT &teacher, const Tensor &data,
                      const EvalSplit &split, const SweepConfig &cfg,
                      const DistillConfig &distill) {
  if (cfg.bits.empty() || cfg.seeds == 0)
    throw std::invalid_argument("sweep_bits: need at least one width and seed");
  std::vector<int> widths = cfg.bits;
  std::sort(widths.begin(), widths.end());
  widths.erase(std::unique(widths.begin(), widths.end()), widths.end());
  const int k0 = widths.front();

  std::map<std::pair<int, int>, std::vector<double>> done;
  auto run = [&](BitSetting bits) {
    auto key = std::make_pair(bits.weight_bits, bits.activation_bits);
    if (auto it = done.find(key); it != done.end())
      return it->second;
    std::vector<double> acc;
    for (std::size_t s = 0; s < cfg.seeds; ++s) {
      DistillConfig dc = distill;
      dc.bits = bits;
      dc.seed = repeat_seed(distill.seed, 200 + s);
      acc.push_back(train_student(teacher, data, dc, split).accuracy);
      log_info("sweep " + bits.label() + " seed " + std::to_string(s) +
               " accuracy " + fmt(acc.back()));
    }
    done.emplace(key, acc);
    return acc;
  };

  SweepTable out;
  for (int k : widths)
    out.points.push_back({"weight", {k, k0}, run({k, k0})});
  for (int k : widths)
    out.points.push_back({"activation", {k0, k}, run({k0, k})});
  return out;
}

} // namespace dfq
