// SPDX-License-Identifier: Apache-2.0
/**
 * @file   vit.cpp
 * @brief  Micro ViT construction and forward pass.
 */

#include <dfq/vit.hpp>

#include <cmath>
#include <stdexcept>

namespace dfq {

namespace {

Tensor xavier(Rng &rng, std::size_t fan_in, std::size_t fan_out) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> w(fan_in * fan_out);
  for (auto &v : w)
    v = rng.uniform(-a, a);
  return Tensor::from({fan_in, fan_out}, std::move(w));
}

Tensor normal(Rng &rng, Shape shape, double stddev) {
  std::vector<double> w(numel(shape));
  for (auto &v : w)
    v = stddev * rng.normal();
  return Tensor::from(std::move(shape), std::move(w));
}

/// Direct `x W + b` used when no hook is installed.
Tensor plain_linear(const Tensor &x, const Tensor &w, const Tensor &b) {
  return add(matmul(x, w), b);
}

} // namespace

void ViTConfig::validate() const {
  auto fail = [](const std::string &m) { throw std::invalid_argument(m); };
  if (image_side == 0 || patch_side == 0 || channels == 0)
    fail("image_side, patch_side and channels must be positive");
  if (image_side % patch_side != 0)
    fail("image_side " + std::to_string(image_side) +
         " is not divisible by patch_side " + std::to_string(patch_side));
  if (image_side > 64)
    fail("image_side above 64 is not supported");
  if (heads == 0 || embed_dim == 0 || embed_dim % heads != 0)
    fail("embed_dim " + std::to_string(embed_dim) +
         " must be a positive multiple of heads " + std::to_string(heads));
  if (layers == 0)
    fail("layers must be positive");
  if (!(mlp_ratio > 0.0) || mlp_dim() == 0)
    fail("mlp_ratio must be positive");
  if (classes == 0)
    fail("classes must be positive");
}

std::size_t ViTConfig::mlp_dim() const {
  return static_cast<std::size_t>(
      std::lround(static_cast<double>(embed_dim) * mlp_ratio));
}

std::string MicroViT::site_qkv(std::size_t l) {
  return "blocks." + std::to_string(l) + ".qkv";
}
std::string MicroViT::site_proj(std::size_t l) {
  return "blocks." + std::to_string(l) + ".proj";
}
std::string MicroViT::site_fc1(std::size_t l) {
  return "blocks." + std::to_string(l) + ".fc1";
}
std::string MicroViT::site_fc2(std::size_t l) {
  return "blocks." + std::to_string(l) + ".fc2";
}

MicroViT::MicroViT(const ViTConfig &config, std::uint64_t seed)
    : config_(config) {
  config_.validate();
  Rng rng(seed);
  const std::size_t d = config_.embed_dim;
  const std::size_t h = config_.mlp_dim();
  patch_weight = xavier(rng, config_.patch_features(), d);
  patch_bias = Tensor::zeros({d});
  class_token = normal(rng, {1, 1, d}, 0.02);
  pos_embed = normal(rng, {config_.tokens(), d}, 0.02);
  for (std::size_t l = 0; l < config_.layers; ++l) {
    VitBlock b;
    b.ln1_gamma = Tensor::full({d}, 1.0);
    b.ln1_beta = Tensor::zeros({d});
    b.qkv_weight = xavier(rng, d, 3 * d);
    b.qkv_bias = Tensor::zeros({3 * d});
    b.proj_weight = xavier(rng, d, d);
    b.proj_bias = Tensor::zeros({d});
    b.ln2_gamma = Tensor::full({d}, 1.0);
    b.ln2_beta = Tensor::zeros({d});
    b.fc1_weight = xavier(rng, d, h);
    b.fc1_bias = Tensor::zeros({h});
    b.fc2_weight = xavier(rng, h, d);
    b.fc2_bias = Tensor::zeros({d});
    blocks.push_back(std::move(b));
  }
  norm_gamma = Tensor::full({d}, 1.0);
  norm_beta = Tensor::zeros({d});
  classifier_weight = xavier(rng, d, config_.classes);
  classifier_bias = Tensor::zeros({config_.classes});
}

std::vector<NamedTensor> MicroViT::named_parameters() const {
  std::vector<NamedTensor> out;
  out.emplace_back("patch_embed.weight", patch_weight);
  out.emplace_back("patch_embed.bias", patch_bias);
  if (config_.use_class_token)
    out.emplace_back("class_token", class_token);
  out.emplace_back("pos_embed", pos_embed);
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const auto &b = blocks[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    out.emplace_back(p + "ln1.gamma", b.ln1_gamma);
    out.emplace_back(p + "ln1.beta", b.ln1_beta);
    out.emplace_back(p + "qkv.weight", b.qkv_weight);
    out.emplace_back(p + "qkv.bias", b.qkv_bias);
    out.emplace_back(p + "proj.weight", b.proj_weight);
    out.emplace_back(p + "proj.bias", b.proj_bias);
    out.emplace_back(p + "ln2.gamma", b.ln2_gamma);
    out.emplace_back(p + "ln2.beta", b.ln2_beta);
    out.emplace_back(p + "fc1.weight", b.fc1_weight);
    out.emplace_back(p + "fc1.bias", b.fc1_bias);
    out.emplace_back(p + "fc2.weight", b.fc2_weight);
    out.emplace_back(p + "fc2.bias", b.fc2_bias);
  }
  out.emplace_back("norm.gamma", norm_gamma);
  out.emplace_back("norm.beta", norm_beta);
  out.emplace_back("head.weight", classifier_weight);
  out.emplace_back("head.bias", classifier_bias);
  return out;
}

std::vector<Tensor> MicroViT::parameters() const {
  std::vector<Tensor> out;
  for (auto &[name, t] : named_parameters())
    out.push_back(t);
  return out;
}

void MicroViT::set_requires_grad(bool v) {
  for (auto &[name, t] : named_parameters()) {
    Tensor handle = t;
    handle.set_requires_grad(v);
  }
}

MicroViT MicroViT::clone() const {
  MicroViT m;
  m.config_ = config_;
  m.patch_weight = patch_weight.clone();
  m.patch_bias = patch_bias.clone();
  m.class_token = class_token.clone();
  m.pos_embed = pos_embed.clone();
  for (const auto &b : blocks) {
    VitBlock c;
    c.ln1_gamma = b.ln1_gamma.clone();
    c.ln1_beta = b.ln1_beta.clone();
    c.qkv_weight = b.qkv_weight.clone();
    c.qkv_bias = b.qkv_bias.clone();
    c.proj_weight = b.proj_weight.clone();
    c.proj_bias = b.proj_bias.clone();
    c.ln2_gamma = b.ln2_gamma.clone();
    c.ln2_beta = b.ln2_beta.clone();
    c.fc1_weight = b.fc1_weight.clone();
    c.fc1_bias = b.fc1_bias.clone();
    c.fc2_weight = b.fc2_weight.clone();
    c.fc2_bias = b.fc2_bias.clone();
    m.blocks.push_back(std::move(c));
  }
  m.norm_gamma = norm_gamma.clone();
  m.norm_beta = norm_beta.clone();
  m.classifier_weight = classifier_weight.clone();
  m.classifier_bias = classifier_bias.clone();
  return m;
}

Tensor MicroViT::head_weight(std::size_t layer, std::size_t head,
                             QkvPart part) const {
  if (layer >= blocks.size() || head >= config_.heads)
    throw std::out_of_range("head_weight: layer/head out of range");
  const std::size_t d = config_.embed_dim;
  const std::size_t dh = config_.head_dim();
  const std::size_t col0 = static_cast<std::size_t>(part) * d + head * dh;
  return slice(blocks[layer].qkv_weight.detach(), 1, col0, dh);
}

Tensor patchify(const Tensor &images, std::size_t p) {
  if (images.rank() != 4 || images.dim(2) != images.dim(3) ||
      images.dim(2) % p != 0)
    throw DimensionError("patchify", "expected [B, C, S, S] with S divisible "
                                     "by " + std::to_string(p) + ", got " +
                                         to_string(images.shape()));
  const std::size_t B = images.dim(0), C = images.dim(1);
  const std::size_t g = images.dim(2) / p;
  Tensor t = reshape(images, {B, C, g, p, g, p});
  t = permute(t, {0, 2, 4, 1, 3, 5});
  return reshape(t, {B, g * g, C * p * p});
}

ForwardResult MicroViT::forward(const Tensor &images, bool capture,
                                LinearHook *hook) const {
  const auto &c = config_;
  if (images.rank() != 4 || images.dim(1) != c.channels ||
      images.dim(2) != c.image_side || images.dim(3) != c.image_side)
    throw DimensionError("MicroViT::forward",
                         "expected [B, " + std::to_string(c.channels) + ", " +
                             std::to_string(c.image_side) + ", " +
                             std::to_string(c.image_side) + "], got " +
                             to_string(images.shape()));
  auto linear = [hook](std::string_view site, const Tensor &x,
                       const Tensor &w, const Tensor &b) {
    return hook ? hook->linear(site, x, w, b) : plain_linear(x, w, b);
  };

  const std::size_t B = images.dim(0);
  const std::size_t d = c.embed_dim, N = c.heads, dh = c.head_dim();
  const std::size_t T = c.tokens();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

  Tensor x = linear(site_patch(), patchify(images, c.patch_side), patch_weight,
                    patch_bias); // [B, P, d]
  if (c.use_class_token) {
    std::vector<Tensor> cls(B, class_token);
    x = concat({concat(cls, 0), x}, 1);
  }
  x = add(x, pos_embed);

  ForwardResult result;
  AttentionStack stack;
  stack.has_class_token = c.use_class_token;
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const VitBlock &blk = blocks[l];
    Tensor h = layer_norm(x, blk.ln1_gamma, blk.ln1_beta);
    Tensor qkv = linear(site_qkv(l), h, blk.qkv_weight, blk.qkv_bias);
    qkv = permute(reshape(qkv, {B, T, 3, N, dh}), {2, 0, 3, 1, 4});
    Tensor q = reshape(slice(qkv, 0, 0, 1), {B, N, T, dh});
    Tensor k = reshape(slice(qkv, 0, 1, 1), {B, N, T, dh});
    Tensor v = reshape(slice(qkv, 0, 2, 1), {B, N, T, dh});
    Tensor logits = scale(matmul(q, transpose(k)), inv_sqrt_d);
    Tensor probs = softmax(logits);
    Tensor heads = matmul(probs, v); // [B, N, T, dh]
    Tensor merged = reshape(permute(heads, {0, 2, 1, 3}), {B, T, d});
    x = add(x, linear(site_proj(l), merged, blk.proj_weight, blk.proj_bias));
    if (capture)
      stack.layers.push_back({logits, probs, heads});

    Tensor m = layer_norm(x, blk.ln2_gamma, blk.ln2_beta);
    m = gelu(linear(site_fc1(l), m, blk.fc1_weight, blk.fc1_bias));
    x = add(x, linear(site_fc2(l), m, blk.fc2_weight, blk.fc2_bias));
  }
  x = layer_norm(x, norm_gamma, norm_beta);
  Tensor pooled = c.use_class_token ? reshape(slice(x, 1, 0, 1), {B, d})
                                    : mean(x, 1);
  result.logits =
      linear(site_head(), pooled, classifier_weight, classifier_bias);
  if (capture)
    result.attention = std::move(stack);
  return result;
}

LabeledImages LabeledImages::subset(const std::vector<std::size_t> &idx) const {
  LabeledImages out;
  out.images = index_select(images.detach(), 0, idx);
  out.labels.reserve(idx.size());
  for (auto i : idx)
    out.labels.push_back(labels.at(i));
  return out;
}

Tensor cross_entropy(const Tensor &logits, const std::vector<int> &labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size())
    throw DimensionError("cross_entropy",
                         "logits " + to_string(logits.shape()) + " for " +
                             std::to_string(labels.size()) + " labels");
  const std::size_t B = logits.dim(0), C = logits.dim(1);
  std::vector<double> onehot(B * C, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= C)
      throw std::out_of_range("cross_entropy: label " +
                              std::to_string(labels[b]) + " outside [0, " +
                              std::to_string(C) + ")");
    onehot[b * C + static_cast<std::size_t>(labels[b])] = 1.0;
  }
  Tensor target = Tensor::from({B, C}, std::move(onehot));
  return scale(sum(mul(log_softmax(logits), target)),
               -1.0 / static_cast<double>(B));
}

double accuracy(const MicroViT &model, const LabeledImages &data,
                std::size_t batch, LinearHook *hook) {
  if (data.size() == 0)
    throw std::invalid_argument("accuracy: empty dataset");
  std::size_t correct = 0;
  const std::size_t C = model.config().classes;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    const std::size_t n = std::min(batch, data.size() - start);
    Tensor x = slice(data.images, 0, start, n);
    Tensor logits = model.forward(x, false, hook).logits;
    const auto v = logits.data();
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < C; ++j)
        if (v[i * C + j] > v[i * C + best])
          best = j;
      if (static_cast<int>(best) == data.labels[start + i])
        ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

} // namespace dfq
