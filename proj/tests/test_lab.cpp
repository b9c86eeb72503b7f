// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gradcheck.hpp"

#include <dfq/checkpoint.hpp>
#include <dfq/config.hpp>
#include <dfq/studies.hpp>
#include <dfq/toy_shapes.hpp>

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <numeric>

using namespace dfq;
namespace fs = std::filesystem;

namespace {

ViTConfig tiny() {
  ViTConfig c;
  c.image_side = 8;
  c.patch_side = 2;
  c.embed_dim = 8;
  c.heads = 2;
  c.layers = 2;
  c.classes = 3;
  return c;
}

fs::path scratch(const std::string &name) {
  fs::path dir = fs::temp_directory_path() / "dfq_test_lab";
  fs::create_directories(dir);
  return dir / name;
}

} // namespace

TEST_CASE("toy shapes are balanced, split and reproducible") {
  ToyShapesConfig cfg;
  cfg.samples = 200;
  cfg.seed = 3;
  auto a = make_toy_shapes(cfg);
  auto b = make_toy_shapes(cfg);
  CHECK(a.train.size() == 160);
  CHECK(a.heldout.size() == 40);
  CHECK(a.train.images.shape() == Shape{160, 1, 32, 32});
  CHECK(std::equal(a.train.images.data().begin(), a.train.images.data().end(),
                   b.train.images.data().begin()));
  CHECK(a.heldout.labels == b.heldout.labels);
  for (const auto *split : {&a.train, &a.heldout}) {
    std::vector<int> count(4, 0);
    for (int y : split->labels)
      ++count[static_cast<std::size_t>(y)];
    for (int c : count)
      CHECK(c == static_cast<int>(split->size() / 4));
  }
  // Standardized training pixels: zero mean, unit variance.
  const auto v = a.train.images.data();
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
  double var = 0.0;
  for (double x : v)
    var += (x - mean) * (x - mean) / v.size();
  CHECK(std::abs(mean) < 1e-12);
  CHECK(std::abs(var - 1.0) < 1e-12);

  cfg.seed = 4;
  auto c = make_toy_shapes(cfg);
  CHECK_FALSE(std::equal(a.train.images.data().begin(),
                         a.train.images.data().end(),
                         c.train.images.data().begin()));
  cfg.classes = 3;
  CHECK_THROWS_AS(make_toy_shapes(cfg), std::invalid_argument);
}

TEST_CASE("shape rendering") {
  auto disk = render_shape(Shape2d::Disk, 32, 16, 16, 8, 0.0);
  double area = 0.0;
  for (double v : disk)
    area += v;
  CHECK(area == doctest::Approx(M_PI * 64).epsilon(0.05));
  // A disk is rotation invariant.
  auto turned = render_shape(Shape2d::Disk, 32, 16, 16, 8, 1.234);
  CHECK(disk == turned);
  auto square = render_shape(Shape2d::Square, 32, 16, 16, 10, 0.0);
  CHECK(std::accumulate(square.begin(), square.end(), 0.0) ==
        doctest::Approx(256.0).epsilon(0.02));
  CHECK(render_shape(Shape2d::Triangle, 32, 16, 16, 8, 0.0) !=
        render_shape(Shape2d::Triangle, 32, 16, 16, 8, M_PI));
}

TEST_CASE("checkpoint round trip is bit-exact at 32 bits") {
  MicroViT m(tiny(), 5);
  round_to_storage(m);
  const fs::path path = scratch("model.ck");
  save_checkpoint(path, model_checkpoint(m));
  MicroViT back = model_from_checkpoint(load_checkpoint(path));
  auto a = m.named_parameters(), b = back.named_parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    CHECK(a[i].second.shape() == b[i].second.shape());
    CHECK(std::equal(a[i].second.data().begin(), a[i].second.data().end(),
                     b[i].second.data().begin()));
  }
  CHECK(back.config().heads == 2);
  // Re-encoding a loaded checkpoint reproduces the file byte for byte.
  CHECK(encode_checkpoint(model_checkpoint(back)) ==
        encode_checkpoint(model_checkpoint(m)));
}

TEST_CASE("checkpoint layout") {
  Checkpoint ck;
  ck.tensors.emplace_back("ab", Tensor::from({2}, {1.0, -2.0}));
  ck.config = "xyz";
  const std::string bytes = encode_checkpoint(ck);
  // magic 8 + version 2 + count 4 + (2 + 2 + 1 + 4 + 8) + 4 + 3
  REQUIRE(bytes.size() == 8 + 2 + 4 + 17 + 4 + 3);
  CHECK(bytes.substr(0, 8) == "DFQVITCK");
  CHECK(bytes[8] == 1);
  CHECK(bytes[9] == 0);
  CHECK(bytes[10] == 1);
  CHECK(bytes.substr(16, 2) == "ab");
  CHECK(bytes[18] == 1);
  CHECK(bytes[19] == 2);
  const std::uint32_t one = std::bit_cast<std::uint32_t>(1.0f);
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i)
    stored |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[23 + i]))
              << (8 * i);
  CHECK(stored == one);
  CHECK(bytes.substr(bytes.size() - 3) == "xyz");
}

TEST_CASE("down-conversion rounds to nearest, ties to even") {
  const double ulp = std::ldexp(1.0, -23);        // float spacing at 1
  const double tie_down = 1.0 + 0.5 * ulp;        // between 1 and 1+ulp
  const double tie_up = 1.0 + 1.5 * ulp;          // between 1+ulp and 1+2ulp
  const double above = 1.0 + 0.5 * ulp + 1e-12;
  Checkpoint ck;
  ck.tensors.emplace_back("v", Tensor::from({3}, {tie_down, tie_up, above}));
  const Checkpoint loaded = decode_checkpoint(encode_checkpoint(ck));
  const auto back = loaded.at("v").data();
  CHECK(back[0] == 1.0);
  CHECK(back[1] == 1.0 + 2 * ulp);
  CHECK(back[2] == 1.0 + ulp);
}

TEST_CASE("corrupt and missing checkpoints") {
  CHECK_THROWS_AS(load_checkpoint(scratch("absent.ck")), CheckpointNotFound);
  CHECK_THROWS_AS(decode_checkpoint("NOTACKPT"), CheckpointError);
  Checkpoint ck;
  ck.tensors.emplace_back("w", Tensor::from({2, 2}, {1, 2, 3, 4}));
  std::string bytes = encode_checkpoint(ck);
  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 6)),
                  CheckpointError);
  CHECK_THROWS_AS(decode_checkpoint(bytes + "x"), CheckpointError);
  std::string bad_version = bytes;
  bad_version[8] = 9;
  CHECK_THROWS_AS(decode_checkpoint(bad_version), CheckpointError);
  CHECK_THROWS_AS(model_from_checkpoint(ck), CheckpointError);
}

TEST_CASE("student checkpoints restore identical inference") {
  MicroViT m(tiny(), 6);
  round_to_storage(m);
  Rng rng(7);
  Tensor x = testing::random_tensor(rng, {5, 1, 8, 8});
  for (QuantMode mode : {QuantMode::MinMax, QuantMode::Lsq}) {
    QuantizedViT q(m.clone(), {4, 4}, mode);
    q.calibrate(x);
    // Storage precision for every quantizer field.
    Checkpoint ck = decode_checkpoint(encode_checkpoint(student_checkpoint(q)));
    QuantizedViT r = student_from_checkpoint(ck);
    CHECK(r.bits().label() == "W4A4");
    CHECK(r.mode() == mode);
    // Loaded state re-encodes to the same bytes.
    CHECK(encode_checkpoint(student_checkpoint(r)) == encode_checkpoint(ck));
    // And inference agrees with the original to storage precision.
    const Tensor a = r.forward(x, false).logits;
    const Tensor b = q.forward(x, false).logits;
    for (std::size_t i = 0; i < a.size(); ++i)
      CHECK(std::abs(a.data()[i] - b.data()[i]) < 0.05);
    CHECK(r.activation_params().size() == q.activation_params().size());
  }
}

TEST_CASE("config parsing, echo and errors") {
  LabConfig c = parse_config("[lab]\nseed = 9\n[distill]\ngamma = 10\n"
                             "quant = W8A4\nquant_mode = minmax\n");
  CHECK(c.seed == 9);
  CHECK(c.distill.gamma == 10.0);
  CHECK(c.distill.bits.weight_bits == 8);
  CHECK(c.distill.bits.activation_bits == 4);
  CHECK(c.distill.mode == QuantMode::MinMax);
  LabConfig d = default_lab_config();
  d.reseed(9);
  CHECK(c.synth.seed == d.synth.seed);

  // The echo reproduces the effective configuration exactly.
  c.synth.beta = 2.5e-5;
  c.distill.lr = 0.1 + 0.2;
  const std::string echo = to_ini(c);
  CHECK(to_ini(parse_config(echo)) == echo);
  CHECK(parse_config(echo).distill.lr == 0.1 + 0.2);

  // Component seeds given explicitly win over the derived ones.
  CHECK(parse_config("[synth]\nseed = 5\n[lab]\nseed = 1\n").synth.seed == 5);

  auto key_of = [](const std::string &ini) {
    try {
      parse_config(ini);
    } catch (const ConfigError &e) {
      return e.key();
    }
    return std::string("<none>");
  };
  CHECK(key_of("[distill]\ngama = 1\n") == "distill.gama");
  CHECK(key_of("[synth]\nalpha = fast\n") == "synth.alpha");
  CHECK(key_of("[synth]\nalpha = -1\n") == "synth");
  CHECK(key_of("[distill]\nquant = W9A4\n") == "distill.quant");
  CHECK(key_of("[vit]\nheads = 5\n") == "vit");
  CHECK(key_of("[vit]\nclasses = 2\n") == "vit.classes");
  CHECK(key_of("[corr]\nmetrics = dssim,cosine\n") == "corr.metrics");
  CHECK(key_of("[sweep]\nbits = 4,9\n") == "sweep.bits");
  CHECK(key_of("[motiv]\nfraction = 0.9\n") == "motiv.fraction");
  CHECK(key_of("[lab\nseed = 1\n").rfind("<syntax", 0) == 0);

  ViTConfig v = tiny();
  CHECK(vit_from_ini(vit_to_ini(v)).embed_dim == 8);
}

TEST_CASE("held-out split is disjoint and ordered") {
  ToyShapesConfig cfg;
  cfg.samples = 100;
  const auto ds = make_toy_shapes(cfg);
  const EvalSplit s = split_heldout(ds.heldout, 8);
  CHECK(s.select.size() == 8);
  CHECK(s.report.size() == 12);
  CHECK(s.report.labels.front() == ds.heldout.labels[8]);
  CHECK(split_heldout(ds.heldout, 0).report.size() == 20);
  CHECK_THROWS_AS(split_heldout(ds.heldout, 20), std::invalid_argument);
}

TEST_CASE("synthetic sets round-trip through shards") {
  MicroViT teacher(tiny(), 20);
  SynthConfig sc;
  sc.samples_total = 5;
  sc.batch = 2;
  sc.steps_per_batch = 3;
  sc.seed = 21;
  const SynthDataset ds = synthesize(teacher, sc);
  const fs::path dir = scratch("synth_rt");
  fs::remove_all(dir);
  save_synth_dataset(dir, ds);
  CHECK(fs::exists(dir / "shard_002.ck"));
  const SynthDataset back = load_synth_dataset(dir);
  REQUIRE(back.batches.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto &a = ds.batches[i], &b = back.batches[i];
    CHECK(a.labels == b.labels);
    CHECK(a.seed == b.seed);
    CHECK(a.final_ihc == b.final_ihc);
    for (std::size_t k = 0; k < a.images.size(); ++k)
      CHECK(b.images.data()[k] ==
            static_cast<double>(static_cast<float>(a.images.data()[k])));
  }
  CHECK_THROWS_AS(load_synth_dataset(scratch("no_such_set")), CheckpointNotFound);
}

TEST_CASE("studies: histogram layout, shared sweep endpoints, subset size") {
  MicroViT teacher(tiny(), 22);
  Rng rng(23);
  LabeledImages held{testing::random_tensor(rng, {12, 1, 8, 8}), {}};
  for (int i = 0; i < 12; ++i)
    held.labels.push_back(i % 3);
  const EvalSplit split = split_heldout(held, 4);

  SynthConfig sc;
  sc.samples_total = 16;
  sc.batch = 8;
  sc.steps_per_batch = 2;
  sc.use_ihc = false;
  const SynthDataset base = synthesize(teacher, sc);
  sc.use_ihc = true;
  const SynthDataset full = synthesize(teacher, sc);

  DistillConfig dc;
  dc.epochs = 1;
  dc.batch = 4;
  MotivConfig mc;
  mc.fraction = 0.25;
  mc.seeds = 2;
  const MotivStudy st = motiv_study(teacher, base, full, split, mc, dc);
  CHECK(st.subsets.size() == 4);
  CHECK(st.histogram.size() == 4 * 20);
  for (const auto &s : st.subsets) {
    CHECK(s.accuracy.size() == 2);
    std::size_t n = 0;
    for (const auto &row : st.histogram)
      if (row.subset == s.name) {
        n += row.count;
        CHECK(row.accuracy == s.mean_accuracy());
      }
    CHECK(n == 4);
  }
  CHECK(st.histogram_csv().rfind("bin_center,count,subset,accuracy\n", 0) == 0);
  dc.batch = 8;
  CHECK_THROWS_AS(motiv_study(teacher, base, full, split, mc, dc),
                  std::invalid_argument);

  dc.batch = 4;
  SweepConfig sw;
  sw.bits = {8, 4};
  const SweepTable t = sweep_bits(teacher, base.as_labeled().images, split, sw, dc);
  REQUIRE(t.points.size() == 4);
  CHECK(t.points[0].bits.label() == "W4A4");
  CHECK(t.points[2].bits.label() == "W4A4");
  CHECK(t.points[0].accuracy == t.points[2].accuracy);
  CHECK(t.points[1].bits.label() == "W8A4");
  CHECK(t.points[3].bits.label() == "W4A8");
  CHECK(t.delta("weight") ==
        t.points[1].mean_accuracy() - t.points[0].mean_accuracy());
}
