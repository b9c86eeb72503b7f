// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gradcheck.hpp"
#include "vit_fixture.hpp"

#include <dfq/attnsim.hpp>
#include <dfq/vit.hpp>

#include <cmath>
#include <fstream>
#include <map>

using namespace dfq;
using dfq::testing::random_tensor;

namespace {

ViTConfig small_config() {
  ViTConfig c;
  c.image_side = 8;
  c.patch_side = 2;
  c.embed_dim = 8;
  c.heads = 2;
  c.layers = 2;
  c.classes = 3;
  return c;
}

double max_abs_diff(const Tensor &a, const Tensor &b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

/// Records every linear site's input and output.
struct Recorder : LinearHook {
  std::map<std::string, std::pair<Tensor, Tensor>, std::less<>> seen;
  Tensor linear(std::string_view site, const Tensor &x, const Tensor &w,
                const Tensor &b) override {
    Tensor y = add(matmul(x, w), b);
    seen[std::string(site)] = {x, y};
    return y;
  }
};

} // namespace

TEST_CASE("config validation") {
  ViTConfig c;
  c.patch_side = 5;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = ViTConfig{};
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = ViTConfig{};
  c.image_side = 128;
  c.patch_side = 8;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  CHECK(ViTConfig{}.tokens() == 17);
}

TEST_CASE("forward shapes, capture and attention invariants") {
  MicroViT m(small_config(), 3);
  Rng rng(4);
  Tensor x = random_tensor(rng, {3, 1, 8, 8});
  auto plain = m.forward(x, false);
  auto cap = m.forward(x, true);
  CHECK(plain.logits.shape() == Shape{3, 3});
  CHECK_FALSE(plain.attention.has_value());
  REQUIRE(cap.attention.has_value());
  // Capture must not perturb the numbers at all.
  CHECK(max_abs_diff(plain.logits, cap.logits) == 0.0);
  const auto &st = *cap.attention;
  CHECK(st.depth() == 2);
  CHECK(st.width() == 2);
  for (const auto &layer : st.layers) {
    CHECK(layer.probs.shape() == Shape{3, 2, 17, 17});
    CHECK(layer.heads.shape() == Shape{3, 2, 17, 4});
    const auto p = layer.probs.data();
    for (std::size_t r = 0; r < p.size() / 17; ++r) {
      double s = 0.0;
      for (std::size_t k = 0; k < 17; ++k)
        s += p[r * 17 + k];
      CHECK(std::abs(s - 1.0) < 1e-9);
    }
  }
  CHECK_THROWS_AS(m.forward(random_tensor(rng, {1, 1, 6, 6}), false),
                  DimensionError);
  CHECK_THROWS_AS(m.forward(random_tensor(rng, {1, 2, 8, 8}), false),
                  DimensionError);
}

TEST_CASE("per-head weight matrices are d x d/N") {
  MicroViT m(small_config(), 1);
  for (QkvPart part : {QkvPart::Query, QkvPart::Key, QkvPart::Value})
    CHECK(m.head_weight(1, 1, part).shape() == Shape{8, 4});
  CHECK_THROWS_AS(m.head_weight(2, 0, QkvPart::Query), std::out_of_range);
}

TEST_CASE("zero input and zero query/key weights give uniform attention") {
  MicroViT m(small_config(), 5);
  for (double &v : m.pos_embed.mutable_data())
    v = 0.0;
  for (double &v : m.class_token.mutable_data())
    v = 0.0;
  const std::size_t d = 8;
  for (auto &b : m.blocks) {
    auto w = b.qkv_weight.mutable_data();
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t c = 0; c < 2 * d; ++c)
        w[r * 3 * d + c] = 0.0;
  }
  auto out = m.forward(Tensor::zeros({2, 1, 8, 8}), true);
  for (const auto &layer : out.attention->layers)
    for (double p : layer.probs.data())
      CHECK(std::abs(p - 1.0 / 17.0) < 1e-15);
}

TEST_CASE("concatenated head outputs times W^O equal the MSA output") {
  MicroViT m(small_config(), 6);
  Rng rng(7);
  Recorder rec;
  auto out = m.forward(random_tensor(rng, {2, 1, 8, 8}), true, &rec);
  for (std::size_t l = 0; l < 2; ++l) {
    const Tensor &heads = out.attention->layers[l].heads; // [B, N, T, dh]
    // Independent concatenation: token t row = [H_0[t] | H_1[t]].
    std::vector<double> cat(2 * 17 * 8);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t t = 0; t < 17; ++t)
        for (std::size_t h = 0; h < 2; ++h)
          for (std::size_t j = 0; j < 4; ++j)
            cat[(b * 17 + t) * 8 + h * 4 + j] = heads.at({b, h, t, j});
    const auto &[x, y] = rec.seen.at(MicroViT::site_proj(l));
    Tensor expect = add(matmul(Tensor::from({2, 17, 8}, cat),
                               m.blocks[l].proj_weight),
                        m.blocks[l].proj_bias);
    CHECK(max_abs_diff(expect, y) < 1e-9);
  }
  CHECK(rec.seen.size() == 2 + 4 * 2);
}

TEST_CASE("permuting heads together with W^O rows leaves logits unchanged") {
  const ViTConfig c = [] {
    ViTConfig v = small_config();
    v.heads = 4;
    return v;
  }();
  MicroViT m(c, 8);
  MicroViT p = m.clone();
  const std::vector<std::size_t> perm = {2, 0, 3, 1};
  const std::size_t d = 8, dh = 2;
  for (std::size_t l = 0; l < c.layers; ++l) {
    const auto w = m.blocks[l].qkv_weight.data();
    const auto bias = m.blocks[l].qkv_bias.data();
    const auto o = m.blocks[l].proj_weight.data();
    auto pw = p.blocks[l].qkv_weight.mutable_data();
    auto pb = p.blocks[l].qkv_bias.mutable_data();
    auto po = p.blocks[l].proj_weight.mutable_data();
    for (std::size_t part = 0; part < 3; ++part)
      for (std::size_t h = 0; h < 4; ++h)
        for (std::size_t j = 0; j < dh; ++j) {
          const std::size_t dst = part * d + h * dh + j;
          const std::size_t src = part * d + perm[h] * dh + j;
          for (std::size_t r = 0; r < d; ++r)
            pw[r * 3 * d + dst] = w[r * 3 * d + src];
          pb[dst] = bias[src];
        }
    for (std::size_t h = 0; h < 4; ++h)
      for (std::size_t j = 0; j < dh; ++j)
        for (std::size_t col = 0; col < d; ++col)
          po[(h * dh + j) * d + col] = o[(perm[h] * dh + j) * d + col];
  }
  Rng rng(9);
  Tensor x = random_tensor(rng, {3, 1, 8, 8});
  CHECK(max_abs_diff(m.forward(x, false).logits, p.forward(x, false).logits) <
        1e-9);
}

TEST_CASE("golden logits") {
  MicroViT m(testing::golden_config(), testing::kGoldenSeed);
  auto logits = m.forward(testing::golden_input(), false).logits;
  std::ifstream in(DFQ_TEST_DATA_DIR "/vit_golden_logits.txt");
  REQUIRE(in);
  std::vector<double> golden;
  for (double v; in >> v;)
    golden.push_back(v);
  REQUIRE(golden.size() == logits.size());
  for (std::size_t i = 0; i < golden.size(); ++i)
    CHECK(std::abs(logits.data()[i] - golden[i]) < 1e-12);
}

TEST_CASE("clone is deep") {
  MicroViT m(small_config(), 10);
  MicroViT c = m.clone();
  c.patch_weight.mutable_data()[0] += 1.0;
  CHECK(m.patch_weight.data()[0] != c.patch_weight.data()[0]);
  CHECK(m.named_parameters().size() == c.named_parameters().size());
}

TEST_CASE("cross entropy edge cases") {
  Tensor logits = Tensor::from({2, 1}, {3.0, -1.0});
  CHECK(cross_entropy(logits, {0, 0}).item() == 0.0);
  CHECK_THROWS_AS(cross_entropy(Tensor::zeros({1, 4}), {4}), std::out_of_range);
  CHECK(cross_entropy(Tensor::zeros({2, 4}), {1, 3}).item() ==
        doctest::Approx(std::log(4.0)).epsilon(1e-15));
}

TEST_CASE("single class: zero loss, perfect accuracy") {
  ViTConfig c = small_config();
  c.classes = 1;
  Rng rng(11);
  LabeledImages data{random_tensor(rng, {4, 1, 8, 8}), {0, 0, 0, 0}};
  OptimizerConfig opt;
  opt.epochs = 2;
  opt.batch = 2;
  auto r = train_teacher(c, data, data, opt);
  CHECK(r.heldout_accuracy == 1.0);
  for (const auto &e : r.log)
    CHECK(e.train_loss == 0.0);
}

TEST_CASE("a single sample is memorized") {
  ViTConfig c = small_config();
  Rng rng(12);
  LabeledImages data{random_tensor(rng, {1, 1, 8, 8}), {2}};
  OptimizerConfig opt;
  opt.epochs = 30;
  opt.batch = 1;
  opt.weight_decay = 0.0;
  auto r = train_teacher(c, data, data, opt);
  CHECK(r.log.back().train_accuracy == 1.0);
  CHECK(accuracy(r.model, data) == 1.0);
}

TEST_CASE("training rejects bad inputs") {
  ViTConfig c = small_config();
  Rng rng(13);
  LabeledImages data{random_tensor(rng, {2, 1, 8, 8}), {0, 5}};
  CHECK_THROWS_AS(train_teacher(c, data, data, {}), std::out_of_range);
  LabeledImages empty{Tensor::zeros({0, 1, 8, 8}), {}};
  CHECK_THROWS_AS(train_teacher(c, empty, data, {}), std::invalid_argument);
}

TEST_CASE("model gradients through capture match finite differences") {
  MicroViT m(small_config(), 14);
  m.set_requires_grad(true);
  Rng rng(15);
  Tensor x = random_tensor(rng, {2, 1, 8, 8});
  auto params = m.parameters();
  std::vector<Tensor> leaves = {params[0], m.blocks[0].qkv_weight,
                                m.blocks[1].fc2_weight, m.classifier_weight};
  const double err = testing::gradient_error(
      [&](const std::vector<Tensor> &) {
        auto out = m.forward(x, true);
        return add(cross_entropy(out.logits, {0, 2}),
                   coherency(*out.attention).loss);
      },
      leaves);
  CHECK(err < 1e-4);
}
