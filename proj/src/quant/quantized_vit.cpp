// SPDX-License-Identifier: Apache-2.0
/**
 * @file   quantized_vit.cpp
 * @brief  LinearHook that fake-quantizes every linear site of a MicroViT.
 */

#include <dfq/quant.hpp>

#include <charconv>

namespace dfq {

QuantizedViT::QuantizedViT(MicroViT model, BitSetting bits, QuantMode mode,
                           double ema_momentum)
    : model_(std::move(model)), bits_(bits), mode_(mode),
      ema_momentum_(ema_momentum) {
  if (bits_.weights_enabled())
    QuantSpec::weight(bits_.weight_bits, mode_).validate();
  if (bits_.activations_enabled())
    QuantSpec::activation(bits_.activation_bits, mode_).validate();
}

void QuantizedViT::set_head_mask(std::vector<std::vector<bool>> mask) {
  if (!mask.empty()) {
    const auto &c = model_.config();
    if (mask.size() != c.layers)
      throw std::invalid_argument("head mask needs one row per layer");
    for (const auto &row : mask)
      if (row.size() != c.heads)
        throw std::invalid_argument("head mask needs one flag per head");
  }
  head_mask_ = std::move(mask);
}

void QuantizedViT::restore_params(QuantTarget target, const std::string &site,
                                  QuantParams params) {
  auto &dst = target == QuantTarget::Weight ? weight_params_ : act_params_;
  dst[site] = std::move(params);
}

QuantizedViT QuantizedViT::clone() const {
  QuantizedViT q(model_.clone(), bits_, mode_, ema_momentum_);
  q.training_ = training_;
  q.head_mask_ = head_mask_;
  auto copy = [](const std::map<std::string, QuantParams, std::less<>> &src) {
    auto dst = src;
    for (auto &[site, p] : dst) {
      p.scale = p.scale.clone();
      p.zero_point = p.zero_point.clone();
    }
    return dst;
  };
  q.weight_params_ = copy(weight_params_);
  q.act_params_ = copy(act_params_);
  return q;
}

ForwardResult QuantizedViT::forward(const Tensor &images, bool capture) {
  return model_.forward(images, capture, this);
}

void QuantizedViT::calibrate(const Tensor &images, std::size_t batch) {
  const bool prev = training_;
  training_ = true;
  for (std::size_t start = 0; start < images.dim(0); start += batch) {
    const std::size_t n = std::min(batch, images.dim(0) - start);
    forward(slice(images, 0, start, n), false);
  }
  training_ = prev;
}

std::vector<Tensor> QuantizedViT::quantizer_parameters() const {
  std::vector<Tensor> out;
  for (const auto *params : {&weight_params_, &act_params_})
    for (const auto &[site, p] : *params) {
      if (!p.trainable)
        continue;
      if (p.scale.requires_grad())
        out.push_back(p.scale);
      if (p.zero_point.requires_grad())
        out.push_back(p.zero_point);
    }
  return out;
}

std::vector<Tensor> QuantizedViT::trainable_parameters() const {
  std::vector<Tensor> out = model_.parameters();
  for (auto &t : quantizer_parameters())
    out.push_back(t);
  return out;
}

void QuantizedViT::project_scales(double floor) {
  for (auto *params : {&weight_params_, &act_params_})
    for (auto &[site, p] : *params)
      if (p.trainable)
        for (double &s : p.scale.mutable_data())
          s = std::max(s, floor);
}

std::vector<NamedTensor> QuantizedViT::quantized_weights() const {
  std::vector<NamedTensor> out;
  for (const auto &[name, w] : model_.named_parameters()) {
    const auto dot = name.rfind(".weight");
    const std::string site =
        dot == std::string::npos ? std::string() : name.substr(0, dot);
    auto it = weight_params_.find(site);
    if (it == weight_params_.end() || !bits_.weights_enabled()) {
      out.emplace_back(name, w.detach());
      continue;
    }
    out.emplace_back(name, fake_quant(w.detach(), it->second.scale.detach(),
                                      it->second.zero_point.detach(),
                                      QuantSpec::weight(bits_.weight_bits,
                                                        mode_),
                                      site));
  }
  return out;
}

Tensor QuantizedViT::quantize_weight(std::string_view site, const Tensor &w) {
  if (!bits_.weights_enabled())
    return w;
  const QuantSpec spec = QuantSpec::weight(bits_.weight_bits, mode_);
  auto it = weight_params_.find(site);
  if (mode_ == QuantMode::MinMax) {
    QuantParams p = minmax_fit(w.detach(), spec);
    if (it == weight_params_.end())
      it = weight_params_.emplace(std::string(site), p).first;
    else
      it->second = p;
    return fake_quant(w, p, spec, site);
  }
  if (it == weight_params_.end()) {
    QuantParams p = minmax_fit(w.detach(), spec);
    p.trainable = true;
    p.scale.set_requires_grad(true);
    it = weight_params_.emplace(std::string(site), p).first;
  }
  const QuantParams &p = it->second;
  const double g = lsq_grad_scale(w.size() / p.channels(), spec.bits);
  return fake_quant(w, grad_scale(p.scale, g), p.zero_point, spec, site);
}

Tensor QuantizedViT::quantize_activation(std::string_view site,
                                         const Tensor &x) {
  if (!bits_.activations_enabled())
    return x;
  const QuantSpec spec = QuantSpec::activation(bits_.activation_bits, mode_);
  auto it = act_params_.find(site);
  if (mode_ == QuantMode::MinMax) {
    if (it == act_params_.end())
      it = act_params_.emplace(std::string(site), QuantParams{}).first;
    QuantParams &p = it->second;
    if (training_ || !p.ema_initialized)
      p = ema_update(p, x.detach(), ema_momentum_, spec);
    return fake_quant(x, p, spec, site);
  }
  if (it == act_params_.end()) {
    QuantParams p = minmax_fit(x.detach(), spec);
    p.trainable = true;
    p.scale.set_requires_grad(true);
    p.zero_point.set_requires_grad(true);
    it = act_params_.emplace(std::string(site), p).first;
  }
  const QuantParams &p = it->second;
  const double g = lsq_grad_scale(x.size(), spec.bits);
  return fake_quant(x, grad_scale(p.scale, g), grad_scale(p.zero_point, g),
                    spec, site);
}

std::optional<std::size_t> QuantizedViT::masked_layer(std::string_view site,
                                                      bool &is_qkv) const {
  constexpr std::string_view prefix = "blocks.";
  if (site.substr(0, prefix.size()) != prefix)
    return std::nullopt;
  site.remove_prefix(prefix.size());
  std::size_t layer = 0;
  auto [ptr, ec] = std::from_chars(site.data(), site.data() + site.size(), layer);
  if (ec != std::errc())
    return std::nullopt;
  const std::string_view rest(ptr, site.data() + site.size() - ptr);
  if (rest == ".qkv")
    is_qkv = true;
  else if (rest == ".proj")
    is_qkv = false;
  else
    return std::nullopt;
  return layer;
}

Tensor QuantizedViT::linear(std::string_view site, const Tensor &x,
                            const Tensor &weight, const Tensor &bias) {
  if (head_mask_.empty())
    return add(matmul(quantize_activation(site, x),
                      quantize_weight(site, weight)),
               bias);

  bool is_qkv = false;
  const auto layer = masked_layer(site, is_qkv);
  if (!layer)
    return add(matmul(x, weight), bias);
  const auto &mask = head_mask_.at(*layer);
  if (std::none_of(mask.begin(), mask.end(), [](bool b) { return b; }))
    return add(matmul(x, weight), bias);

  const auto &c = model_.config();
  const std::size_t d = c.embed_dim, dh = c.head_dim();
  if (is_qkv) {
    std::vector<double> cols(3 * d, 0.0);
    for (std::size_t part = 0; part < 3; ++part)
      for (std::size_t h = 0; h < c.heads; ++h)
        if (mask[h])
          std::fill_n(cols.begin() + static_cast<long>(part * d + h * dh), dh,
                      1.0);
    Tensor colmask = Tensor::from({3 * d}, std::move(cols));
    Tensor fp = add(matmul(x, weight), bias);
    Tensor q = add(matmul(quantize_activation(site, x),
                          quantize_weight(site, weight)),
                   bias);
    return add(fp, mul(sub(q, fp), colmask));
  }
  // W^O: head h owns input columns / weight rows [h*dh, (h+1)*dh).
  std::vector<double> cols(d, 0.0);
  for (std::size_t h = 0; h < c.heads; ++h)
    if (mask[h])
      std::fill_n(cols.begin() + static_cast<long>(h * dh), dh, 1.0);
  std::vector<double> rows(d * weight.dim(1), 0.0);
  for (std::size_t r = 0; r < d; ++r)
    if (cols[r] != 0.0)
      std::fill_n(rows.begin() + static_cast<long>(r * weight.dim(1)),
                  weight.dim(1), 1.0);
  Tensor colmask = Tensor::from({d}, std::move(cols));
  Tensor rowmask = Tensor::from(weight.shape(), std::move(rows));
  Tensor xq = add(x, mul(sub(quantize_activation(site, x), x), colmask));
  Tensor wq = add(weight, mul(sub(quantize_weight(site, weight), weight), rowmask));
  return add(matmul(xq, wq), bias);
}

} // namespace dfq
