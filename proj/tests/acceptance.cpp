// SPDX-License-Identifier: Apache-2.0
/**
 * @file   acceptance.cpp
 * @brief  End-to-end acceptance run: one PASS/FAIL line per criterion.
 *
 * Criteria 4-7 share one teacher and one pair of synthetic pools per seed;
 * they are built on first use. Results and tables land in --work.
 */

#include "gradcheck.hpp"
#include "quant_oracle.hpp"
#include "ssim_oracle.hpp"

#include <dfq/checkpoint.hpp>
#include <dfq/log.hpp>
#include <dfq/studies.hpp>

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

using namespace dfq;
using dfq::testing::gradient_error;
using dfq::testing::random_tensor;
using dfq::testing::weighted_sum;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << std::fixed << v;
  return os.str();
}

std::string sci(double v) {
  std::ostringstream os;
  os << std::setprecision(2) << std::scientific << v;
  return os.str();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

// ------------------------------------------------------------ criterion 1

/// Worst relative error over `instances` random draws of one check.
template <typename Make>
double worst(std::size_t instances, std::uint64_t seed, Make make) {
  double w = 0.0;
  for (std::size_t i = 0; i < instances; ++i) {
    Rng rng(seed * 1000 + i);
    auto [fn, leaves] = make(rng, seed * 1000 + i);
    w = std::max(w, gradient_error(fn, leaves));
  }
  return w;
}

using Make = std::function<std::pair<testing::LossFn, std::vector<Tensor>>(
    Rng &, std::uint64_t)>;

Make unary(std::function<Tensor(const Tensor &)> op, Shape shape = {2, 3, 4}) {
  return [op, shape](Rng &rng, std::uint64_t s) {
    testing::LossFn fn = [op, s](const std::vector<Tensor> &p) {
      Tensor out = op(p[0]);
      return out.size() == 1 ? out : weighted_sum(out, s);
    };
    return std::make_pair(fn, std::vector<Tensor>{random_tensor(rng, shape)});
  };
}

Make binary(std::function<Tensor(const Tensor &, const Tensor &)> op, Shape a,
            Shape b) {
  return [op, a, b](Rng &rng, std::uint64_t s) {
    testing::LossFn fn = [op, s](const std::vector<Tensor> &p) {
      return weighted_sum(op(p[0], p[1]), s);
    };
    return std::make_pair(
        fn, std::vector<Tensor>{random_tensor(rng, a), random_tensor(rng, b)});
  };
}

ViTConfig grad_vit() {
  ViTConfig c;
  c.image_side = 8;
  c.patch_side = 2;
  c.embed_dim = 8;
  c.heads = 2;
  c.layers = 2;
  c.classes = 3;
  return c;
}

AttentionStack stack_of(const std::vector<Tensor> &logits) {
  AttentionStack s;
  for (const auto &l : logits)
    s.layers.push_back({l, softmax(l), Tensor()});
  return s;
}

Outcome criterion1() {
  constexpr std::size_t kInstances = 20;
  std::vector<std::pair<std::string, Make>> checks = {
      {"scale", unary([](const Tensor &a) { return scale(a, -1.7); })},
      {"add_scalar", unary([](const Tensor &a) { return add_scalar(a, 0.3); })},
      {"transpose", unary([](const Tensor &a) { return transpose(a); })},
      {"permute", unary([](const Tensor &a) { return permute(a, {2, 0, 1}); })},
      {"reshape", unary([](const Tensor &a) { return reshape(a, {6, 4}); })},
      {"slice", unary([](const Tensor &a) { return slice(a, 1, 1, 2); })},
      {"index_select",
       unary([](const Tensor &a) { return index_select(a, 2, {3, 0, 0, 2}); })},
      {"softmax", unary([](const Tensor &a) { return softmax(a); })},
      {"log_softmax", unary([](const Tensor &a) { return log_softmax(a); })},
      {"gelu", unary([](const Tensor &a) { return gelu(a); })},
      {"exp", unary([](const Tensor &a) { return exp(a); })},
      {"log",
       unary([](const Tensor &a) { return log(add_scalar(square(a), 0.5)); })},
      {"abs", unary([](const Tensor &a) { return abs(a); })},
      {"square", unary([](const Tensor &a) { return square(a); })},
      {"sum", unary([](const Tensor &a) { return sum(a); })},
      {"mean", unary([](const Tensor &a) { return mean(a); })},
      {"sum_axis", unary([](const Tensor &a) { return sum(a, 1); })},
      {"mean_axis", unary([](const Tensor &a) { return mean(a, 2); })},
      {"clamp", unary([](const Tensor &a) { return clamp(a, -0.8, 0.9); })},
      {"add", binary([](const Tensor &a, const Tensor &b) { return add(a, b); },
                     {3, 4}, {3, 4})},
      {"add_broadcast",
       binary([](const Tensor &a, const Tensor &b) { return add(a, b); },
              {2, 3, 4}, {4})},
      {"sub", binary([](const Tensor &a, const Tensor &b) { return sub(a, b); },
                     {3, 4}, {3, 4})},
      {"mul", binary([](const Tensor &a, const Tensor &b) { return mul(a, b); },
                     {2, 3, 4}, {3, 4})},
      {"matmul",
       binary([](const Tensor &a, const Tensor &b) { return matmul(a, b); },
              {2, 3, 4}, {4, 5})},
      {"matmul_batched",
       binary([](const Tensor &a, const Tensor &b) { return matmul(a, b); },
              {2, 3, 4}, {2, 4, 2})},
      {"concat", binary([](const Tensor &a,
                           const Tensor &b) { return concat({a, b, a}, 1); },
                        {2, 3, 4}, {2, 1, 4})},
      {"layer_norm",
       [](Rng &rng, std::uint64_t s) {
         testing::LossFn fn = [s](const std::vector<Tensor> &p) {
           return weighted_sum(layer_norm(p[0], p[1], p[2]), s);
         };
         return std::make_pair(fn, std::vector<Tensor>{random_tensor(rng, {3, 5}),
                                                       random_tensor(rng, {5}),
                                                       random_tensor(rng, {5})});
       }},
      {"ssim_rows",
       binary([](const Tensor &a, const Tensor &b) { return ssim_rows(a, b); },
              {3, 16}, {3, 16})},
      {"L_CL",
       [](Rng &rng, std::uint64_t) {
         std::vector<int> labels = {static_cast<int>(rng.index(4)),
                                    static_cast<int>(rng.index(4)),
                                    static_cast<int>(rng.index(4))};
         testing::LossFn fn = [labels](const std::vector<Tensor> &p) {
           return loss_cl(p[0], labels);
         };
         return std::make_pair(fn, std::vector<Tensor>{random_tensor(rng, {3, 4})});
       }},
      {"L_TV", unary([](const Tensor &a) { return loss_tv(a); }, {2, 2, 4, 4})},
      {"L_IHC",
       [](Rng &rng, std::uint64_t) {
         testing::LossFn fn = [](const std::vector<Tensor> &p) {
           AttentionStack s = stack_of({p[0], p[1]});
           s.has_class_token = true;
           return coherency(s).loss;
         };
         return std::make_pair(fn,
                               std::vector<Tensor>{random_tensor(rng, {2, 3, 5, 5}),
                                                   random_tensor(rng, {2, 3, 5, 5})});
       }},
      {"L_KL",
       binary([](const Tensor &a, const Tensor &b) { return loss_kl(a, b); },
              {3, 4}, {3, 4})},
  };
  for (Metric m : {Metric::Dssim, Metric::Mse, Metric::L1, Metric::Kl})
    checks.push_back(
        {"L_HAD/" + to_string(m), [m](Rng &rng, std::uint64_t) {
           testing::LossFn fn = [m](const std::vector<Tensor> &p) {
             return loss_had(stack_of({p[0], p[1]}), stack_of({p[2], p[3]}), m);
           };
           std::vector<Tensor> leaves;
           for (int i = 0; i < 4; ++i)
             leaves.push_back(random_tensor(rng, {2, 2, 5, 5}));
           return std::make_pair(fn, leaves);
         }});

  std::string failures;
  double worst_all = 0.0;
  std::uint64_t seed = 1;
  for (const auto &[name, make] : checks) {
    const double e = worst(kInstances, seed++, make);
    worst_all = std::max(worst_all, e);
    if (!(e < 1e-4))
      failures += " " + name + "=" + std::to_string(e);
  }

  // L_IHC through the whole micro ViT, with respect to the input image.
  double ihc_vit = 0.0;
  for (std::size_t i = 0; i < kInstances; ++i) {
    MicroViT model(grad_vit(), 500 + i);
    Rng rng(600 + i);
    ihc_vit = std::max(
        ihc_vit,
        gradient_error(
            [&model](const std::vector<Tensor> &p) {
              return coherency(*model.forward(p[0], true).attention).loss;
            },
            {random_tensor(rng, {1, 1, 8, 8})}, 1e-5, 1e-8));
  }
  if (!(ihc_vit < 1e-3))
    failures += " L_IHC/vit=" + std::to_string(ihc_vit);
  return {failures.empty(),
          std::to_string(checks.size()) + " checks x " + std::to_string(kInstances) +
              " instances, worst rel err " + sci(worst_all) +
              " (< 1e-4); L_IHC through ViT " + sci(ihc_vit) + " (< 1e-3)" +
              failures};
}

// ------------------------------------------------------------ criterion 2

/// Every code, every rounding boundary and its neighbours, and points past
/// both clamps.
std::vector<double> exhaustive_grid(double lo, double hi, int k) {
  const auto [s, z] = oracle::asymmetric_params(lo, hi, k);
  const double qmin = -std::pow(2.0, k - 1), qmax = std::pow(2.0, k - 1) - 1;
  std::vector<double> xs = {lo, hi};
  for (double q = qmin - 2; q <= qmax + 2; q += 1.0)
    for (double off : {-0.5, -0.25, 0.0, 0.25, 0.5}) {
      const double x = (q + off + z) / s;
      xs.push_back(x);
      xs.push_back(std::nextafter(x, -1e300));
      xs.push_back(std::nextafter(x, 1e300));
    }
  // The range must come from lo/hi, so keep the grid inside a margin that
  // does not move the extremes: clamp candidates to [lo, hi] for fitting and
  // test overflow separately.
  std::vector<double> inside;
  for (double x : xs)
    inside.push_back(std::min(std::max(x, lo), hi));
  return inside;
}

Outcome criterion2() {
  std::size_t compared = 0;
  std::string failures;
  for (int k : {2, 4, 8}) {
    // Activations: per-tensor asymmetric min-max.
    for (auto [lo, hi] : {std::pair{-1.3, 2.1}, std::pair{0.0, 1.0},
                          std::pair{-5.0, -0.25}}) {
      const std::vector<double> grid = exhaustive_grid(lo, hi, k);
      Tensor x = Tensor::from({grid.size()}, grid);
      const QuantSpec spec = QuantSpec::activation(k);
      const QuantParams p = minmax_fit(x, spec);
      const auto [s, z] = oracle::asymmetric_params(lo, hi, k);
      if (p.scale.item() != s || p.zero_point.item() != z)
        failures += " fit(k=" + std::to_string(k) + ")";
      // Values beyond the fitted range exercise both clamps.
      std::vector<double> probe = grid;
      for (double d : {0.5, 1.0, 10.0}) {
        probe.push_back(lo - d);
        probe.push_back(hi + d);
      }
      Tensor y = fake_quant(Tensor::from({probe.size()}, probe), p, spec);
      Tensor yy = fake_quant(y, p, spec);
      std::set<double> levels;
      for (std::size_t i = 0; i < probe.size(); ++i) {
        ++compared;
        if (y.data()[i] != oracle::fake_quantize(probe[i], s, z, k))
          failures += " value(k=" + std::to_string(k) + ",x=" +
                      std::to_string(probe[i]) + ")";
        if (yy.data()[i] != y.data()[i])
          failures += " idempotence(k=" + std::to_string(k) + ")";
        levels.insert(y.data()[i]);
      }
      if (levels.size() > (std::size_t{1} << k))
        failures += " cardinality(k=" + std::to_string(k) + ")";
    }
    // Weights: per-channel symmetric min-max, channels on the last axis.
    const std::vector<double> amax = {0.3, 1.0, 2.75};
    std::vector<std::vector<double>> cols;
    std::size_t rows = 0;
    for (double a : amax) {
      cols.push_back(exhaustive_grid(-a, a, k));
      rows = std::max(rows, cols.back().size());
    }
    std::vector<double> w(rows * amax.size());
    for (std::size_t c = 0; c < amax.size(); ++c)
      for (std::size_t r = 0; r < rows; ++r)
        w[r * amax.size() + c] = cols[c][r % cols[c].size()];
    Tensor wt = Tensor::from({rows, amax.size()}, w);
    const QuantSpec spec = QuantSpec::weight(k);
    const QuantParams p = minmax_fit(wt, spec);
    Tensor y = fake_quant(wt, p, spec);
    Tensor yy = fake_quant(y, p, spec);
    for (std::size_t c = 0; c < amax.size(); ++c) {
      const double s = oracle::symmetric_scale(amax[c], k);
      if (p.scale.data()[c] != s || p.zero_point.data()[c] != 0.0)
        failures += " weight_fit(k=" + std::to_string(k) + ")";
      std::set<double> levels;
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t i = r * amax.size() + c;
        ++compared;
        if (y.data()[i] != oracle::fake_quantize(w[i], s, 0.0, k))
          failures += " weight_value(k=" + std::to_string(k) + ")";
        if (yy.data()[i] != y.data()[i])
          failures += " weight_idempotence(k=" + std::to_string(k) + ")";
        levels.insert(y.data()[i]);
      }
      if (levels.size() > (std::size_t{1} << k))
        failures += " weight_cardinality(k=" + std::to_string(k) + ")";
    }
  }
  if (failures.size() > 300)
    failures = failures.substr(0, 300) + " ...";
  return {failures.empty(),
          std::to_string(compared) + " grid values bit-exact vs scalar oracle, "
                                     "idempotent, <= 2^k levels" +
              failures};
}

// ------------------------------------------------------------ criterion 3

Outcome criterion3() {
  Rng rng(3);
  auto random_map = [&](bool softmaxed) {
    std::vector<double> v(64);
    for (auto &x : v)
      x = rng.normal() * (softmaxed ? 2.0 : 1.0);
    if (softmaxed) {
      double z = 0.0;
      for (auto &x : v)
        z += (x = std::exp(x));
      for (auto &x : v)
        x /= z;
    }
    return v;
  };
  double worst_oracle = 0.0;
  for (int i = 0; i < 50; ++i) {
    const bool soft = i % 2 == 0;
    const auto a = random_map(soft), b = random_map(soft);
    const double ref = oracle::ssim(a, b);
    worst_oracle = std::max(worst_oracle, std::abs(ssim(a, b) - ref));
    const double rows =
        ssim_rows(Tensor::from({1, 64}, a), Tensor::from({1, 64}, b)).item();
    worst_oracle = std::max(worst_oracle, std::abs(rows - ref));
  }
  double worst_bound = 0.0, worst_sym = 0.0, worst_id = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const bool soft = i % 2 == 0;
    const auto a = random_map(soft);
    auto b = random_map(soft);
    // A third of the pairs are near-copies, a third near-negatives, so the
    // bound is probed close to +1 and -1.
    if (i % 3 != 0) {
      const double sign = i % 3 == 1 ? 1.0 : -1.0;
      for (std::size_t k = 0; k < a.size(); ++k)
        b[k] = sign * a[k] + 0.05 * b[k];
    }
    const double ab = ssim(a, b);
    worst_bound = std::max(worst_bound, std::abs(ab));
    worst_sym = std::max(worst_sym, std::abs(ab - ssim(b, a)));
    worst_id = std::max(worst_id, std::abs(ssim(a, a) - 1.0));
  }
  const bool pass = worst_oracle <= 1e-12 && worst_bound <= 1.0 &&
                    worst_sym <= 1e-15 && worst_id <= 1e-12;
  return {pass, "oracle max diff " + sci(worst_oracle) +
                    " on 50 maps; max |SSIM| " + fmt(worst_bound, 6) +
                    ", symmetry " + sci(worst_sym) + ", identity " +
                    sci(worst_id) + " on 1000 pairs"};
}

// ------------------------------------------------------------ shared state

class Lab {
public:
  explicit Lab(fs::path work) : work_(std::move(work)), cfg_(default_lab_config()) {
    fs::create_directories(work_);
  }

  const LabConfig &config() const { return cfg_; }
  const fs::path &work() const { return work_; }

  const MicroViT &teacher() {
    if (!teacher_) {
      const auto t0 = Clock::now();
      const ToyShapes ds = make_toy_shapes(cfg_.data);
      split_ = split_heldout(ds.heldout, cfg_.select_images);
      TeacherResult r = train_teacher(cfg_.vit, ds.train, split_->select, cfg_.teacher);
      round_to_storage(r.model);
      save_checkpoint(work_ / "teacher.ck", model_checkpoint(r.model));
      teacher_accuracy_ = accuracy(r.model, split_->report);
      teacher_ = std::move(r.model);
      teacher_seconds_ = seconds_since(t0);
      std::cout << "  teacher: report accuracy " << fmt(teacher_accuracy_)
                << " (" << fmt(teacher_seconds_, 0) << " s)" << std::endl;
    }
    return *teacher_;
  }
  double teacher_accuracy() {
    teacher();
    return teacher_accuracy_;
  }
  const EvalSplit &split() {
    teacher();
    return *split_;
  }

  /// Synthetic pool for repeat `i`; `full` selects the complete objective.
  const SynthDataset &pool(std::size_t i, bool full) {
    const auto key = std::make_pair(i, full);
    if (auto it = pools_.find(key); it != pools_.end())
      return it->second;
    SynthConfig sc = cfg_.synth;
    sc.use_ihc = full;
    sc.seed = repeat_seed(cfg_.synth.seed, i);
    const auto t0 = Clock::now();
    SynthDataset ds = synthesize(teacher(), sc);
    std::cout << "  pool " << i << (full ? " full" : " base") << ": "
              << ds.size() << " images, coherency " << fmt(ds.mean_coherency())
              << " (" << fmt(seconds_since(t0), 0) << " s)" << std::endl;
    return pools_.emplace(key, std::move(ds)).first->second;
  }

  DistillConfig distill(BitSetting bits, double gamma, std::size_t i) const {
    DistillConfig dc = cfg_.distill;
    dc.bits = bits;
    dc.gamma = gamma;
    dc.seed = repeat_seed(cfg_.distill.seed, i);
    return dc;
  }

  void write(const std::string &name, const std::string &text) const {
    std::ofstream(work_ / name, std::ios::binary | std::ios::trunc) << text;
  }

private:
  fs::path work_;
  LabConfig cfg_;
  std::optional<MicroViT> teacher_;
  std::optional<EvalSplit> split_;
  double teacher_accuracy_ = 0.0;
  double teacher_seconds_ = 0.0;
  std::map<std::pair<std::size_t, bool>, SynthDataset> pools_;
};

double mean(const std::vector<double> &v) {
  double s = 0.0;
  for (double x : v)
    s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

std::string list(const std::vector<double> &v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i)
    s += (i ? " " : "") + fmt(v[i]);
  return s + "]";
}

// ------------------------------------------------------------ criteria 4-7

Outcome criterion4(Lab &lab) {
  const MicroViT &teacher = lab.teacher();
  const auto t0 = Clock::now();
  CorrStudyConfig cc = lab.config().corr;
  cc.n_configs = 500;
  const CorrStudy st = head_quant_corr_study(teacher, lab.split().report, cc);
  const double secs = seconds_since(t0);
  lab.write("corr_table.csv", st.table_csv());
  lab.write("corr_scatter.csv", st.scatter_csv());
  std::map<Metric, double> rho;
  for (const auto &r : st.rows)
    rho[r.metric] = r.spearman_abs.value_or(-1.0);
  const double d = rho.at(Metric::Dssim);
  bool pass = d >= 0.6 && secs < 15 * 60;
  for (Metric m : {Metric::Mse, Metric::L1, Metric::Kl})
    pass = pass && d >= rho.at(m);
  return {pass, "|Spearman| dssim " + fmt(d) + ", mse " + fmt(rho.at(Metric::Mse)) +
                    ", l1 " + fmt(rho.at(Metric::L1)) + ", kl " +
                    fmt(rho.at(Metric::Kl)) + "; " + fmt(secs, 0) + " s"};
}

Outcome criterion5(Lab &lab) {
  const MicroViT &teacher = lab.teacher();
  const auto t0 = Clock::now();
  const SynthDataset &base = lab.pool(0, false);
  const SynthDataset &full = lab.pool(0, true);
  const MotivStudy st = motiv_study(teacher, base, full, lab.split(),
                                    lab.config().motiv,
                                    lab.distill({4, 4}, lab.config().distill.gamma, 0));
  const double secs = seconds_since(t0);
  lab.write("motiv_histogram.csv", st.histogram_csv());
  lab.write("motiv_subsets.csv", st.subsets_csv());
  const auto &hi = st.subset("high"), &lo = st.subset("low"),
             &rnd = st.subset("random"), &mq = st.subset("mimiq");
  const bool pass = hi.mean_accuracy() > lo.mean_accuracy() &&
                    st.mimiq_mean_coherency > st.base_mean_coherency &&
                    secs < 30 * 60;
  return {pass, "W4A4 mean acc high " + fmt(hi.mean_accuracy()) + " " +
                    list(hi.accuracy) + " vs low " + fmt(lo.mean_accuracy()) +
                    " " + list(lo.accuracy) + " (random " +
                    fmt(rnd.mean_accuracy()) + ", mimiq " +
                    fmt(mq.mean_accuracy()) + "); coherency full " +
                    fmt(st.mimiq_mean_coherency) + " vs base " +
                    fmt(st.base_mean_coherency) + "; " + fmt(secs, 0) + " s"};
}

Outcome criterion6(Lab &lab) {
  const MicroViT &teacher = lab.teacher();
  const double teacher_acc = lab.teacher_accuracy();
  const auto t0 = Clock::now();
  const double gamma = lab.config().distill.gamma;
  std::vector<double> full4, base4, full8;
  std::string csv = "seed,pipeline,bits,accuracy\n";
  for (std::size_t i = 0; i < 3; ++i) {
    const Tensor full = lab.pool(i, true).as_labeled().images;
    const Tensor base = lab.pool(i, false).as_labeled().images;
    full4.push_back(train_student(teacher, full, lab.distill({4, 4}, gamma, i),
                                  lab.split()).accuracy);
    base4.push_back(train_student(teacher, base, lab.distill({4, 4}, 0.0, i),
                                  lab.split()).accuracy);
    full8.push_back(train_student(teacher, full, lab.distill({8, 8}, gamma, i),
                                  lab.split()).accuracy);
    csv += std::to_string(i) + ",full,W4A4," + fmt(full4.back()) + "\n" +
           std::to_string(i) + ",base,W4A4," + fmt(base4.back()) + "\n" +
           std::to_string(i) + ",full,W8A8," + fmt(full8.back()) + "\n";
    std::cout << "  seed " << i << ": W4A4 full " << fmt(full4.back())
              << " base " << fmt(base4.back()) << ", W8A8 full "
              << fmt(full8.back()) << std::endl;
  }
  const double secs = seconds_since(t0);
  lab.write("pipeline.csv", csv);
  const double gap = mean(full4) - mean(base4);
  const double w8_gap = std::abs(mean(full8) - teacher_acc);
  const bool pass = teacher_acc >= 0.95 && gap >= 0.05 && w8_gap <= 0.01 &&
                    secs < 45 * 60;
  return {pass, "teacher " + fmt(teacher_acc) + "; W4A4 full " + fmt(mean(full4)) +
                    " " + list(full4) + " vs base " + fmt(mean(base4)) + " " +
                    list(base4) + " (gap " + fmt(gap) + ", need >= 0.05); W8A8 " +
                    fmt(mean(full8)) + " " + list(full8) + " (|gap| " +
                    fmt(w8_gap) + ", need <= 0.01); " + fmt(secs, 0) + " s"};
}

Outcome criterion7(Lab &lab) {
  const MicroViT &teacher = lab.teacher();
  const auto t0 = Clock::now();
  const Tensor data = lab.pool(0, true).as_labeled().images;
  const SweepTable t = sweep_bits(teacher, data, lab.split(), lab.config().sweep,
                                  lab.distill({4, 4}, lab.config().distill.gamma, 0));
  lab.write("sweep.csv", t.csv());
  const double dw = t.delta("weight"), da = t.delta("activation");
  std::string points;
  for (const auto &p : t.points)
    points += " " + p.bits.label() + "=" + fmt(p.mean_accuracy());
  return {da > dw, "activation delta " + fmt(da) + " vs weight delta " + fmt(dw) +
                       ";" + points + "; " + fmt(seconds_since(t0), 0) + " s"};
}

// ------------------------------------------------------------ criterion 8

constexpr const char *kCliConfig = R"([lab]
seed = 5
select_images = 20
[data]
samples = 240
side = 16
[vit]
image_side = 16
patch_side = 4
embed_dim = 16
heads = 2
layers = 2
[teacher]
epochs = 3
batch = 32
[synth]
samples_total = 32
batch = 16
steps_per_batch = 8
[distill]
epochs = 2
batch = 8
[corr]
n_configs = 12
calibration_images = 8
[motiv]
pool = 32
seeds = 1
[sweep]
bits = 4,8
seeds = 1
)";

std::map<std::string, std::string> read_tree(const fs::path &dir) {
  std::map<std::string, std::string> files;
  for (const auto &e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) {
      std::ifstream in(e.path(), std::ios::binary);
      std::ostringstream ss;
      ss << in.rdbuf();
      files[fs::relative(e.path(), dir).generic_string()] = ss.str();
    }
  return files;
}

Outcome criterion8(const fs::path &cli_arg, const fs::path &work_arg) {
  if (cli_arg.empty() || !fs::exists(cli_arg))
    return {false, "dfqlab binary not found (--cli)"};
  const fs::path cli = fs::absolute(cli_arg), work = fs::absolute(work_arg);
  const std::vector<std::string> commands = {
      "train-teacher --out t",
      "synth --teacher t/teacher.ck --out s",
      "dfq --teacher t/teacher.ck --data s/synth --quant W4A4 --gamma 1 --out d",
      "eval --checkpoint d/student.ck --out e",
      "corr-study --teacher t/teacher.ck --n 12 --seed 7 --out c",
      "motiv-study --teacher t/teacher.ck --out m",
      "sweep-bits --teacher t/teacher.ck --data s/synth --out w",
      "report --out .",
  };
  std::map<std::string, std::string> runs[2];
  for (int r = 0; r < 2; ++r) {
    const fs::path dir = work / ("cli_run_" + std::to_string(r));
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::ofstream(dir / "lab.ini") << kCliConfig;
    for (const auto &c : commands) {
      const bool report = c.rfind("report", 0) == 0;
      const std::string line = "cd '" + dir.string() + "' && '" + cli.string() +
                               "' " + c + (report ? "" : " --config lab.ini") +
                               " > /dev/null";
      if (std::system(line.c_str()) != 0)
        return {false, "command failed: " + c};
    }
    runs[r] = read_tree(dir);
  }
  std::size_t reports = 0, checkpoints = 0;
  std::string differ;
  for (const auto &[name, bytes] : runs[0]) {
    reports += name.ends_with("report.json") ? 1 : 0;
    checkpoints += name.ends_with(".ck") ? 1 : 0;
    auto it = runs[1].find(name);
    if (it == runs[1].end() || it->second != bytes)
      differ += " " + name;
  }
  if (runs[0].size() != runs[1].size())
    differ += " <file sets differ>";
  return {differ.empty(), std::to_string(commands.size()) + " commands twice: " +
                              std::to_string(runs[0].size()) + " files (" +
                              std::to_string(reports) + " reports, " +
                              std::to_string(checkpoints) + " checkpoints) " +
                              (differ.empty() ? "byte-identical" : "differ:" + differ)};
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  std::string cli, work = "acceptance_work";
  bool verbose = false, report_only = false;
  app.add_option("--only", only, "Run only these criteria")->delimiter(',');
  app.add_option("--cli", cli, "Path to the dfqlab binary");
  app.add_option("--work", work, "Scratch and result directory");
  app.add_flag("-v,--verbose", verbose, "Training progress on stderr");
  app.add_flag("--report-only", report_only,
               "Exit status reflects harness errors only, not FAIL verdicts");
  CLI11_PARSE(app, argc, argv);
  set_verbose(verbose);

  Lab lab(work);
  const std::vector<std::pair<int, std::function<Outcome()>>> criteria = {
      {1, criterion1},
      {2, criterion2},
      {3, criterion3},
      {4, [&] { return criterion4(lab); }},
      {5, [&] { return criterion5(lab); }},
      {6, [&] { return criterion6(lab); }},
      {7, [&] { return criterion7(lab); }},
      {8, [&] { return criterion8(cli, fs::path(work)); }},
  };
  std::string summary;
  bool all = true, errored = false;
  for (const auto &[id, run] : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end())
      continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = run();
    } catch (const std::exception &e) {
      o = {false, std::string("exception: ") + e.what()};
      errored = true;
    }
    const std::string line = "criterion " + std::to_string(id) + ": " +
                             (o.pass ? "PASS" : "FAIL") + " - " + o.detail +
                             " [" + fmt(seconds_since(t0), 1) + " s]";
    std::cout << line << std::endl;
    summary += line + "\n";
    all = all && o.pass;
  }
  lab.write("acceptance.txt", summary);
  if (report_only)
    return errored ? 1 : 0;
  return all ? 0 : 1;
}
