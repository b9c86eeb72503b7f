// SPDX-License-Identifier: Apache-2.0
/**
 * @file   coherency.cpp
 * @brief  Inter-head attention coherency D_{l,q} and the L_IHC loss.
 */

#include <dfq/attnsim.hpp>

namespace dfq {

CoherencyReport coherency(const AttentionStack &attn,
                          const CoherencyOptions &opt) {
  if (attn.layers.empty())
    throw std::invalid_argument("coherency: attention stack is empty "
                                "(was capture enabled?)");
  std::vector<Tensor> per_layer;
  per_layer.reserve(attn.depth());
  for (const auto &layer : attn.layers) {
    const Tensor &src = opt.post_softmax ? layer.probs : layer.logits;
    if (!src.defined())
      throw std::invalid_argument("coherency: attention maps missing");
    Tensor maps = spatial_maps(src, attn.has_class_token); // [B, N, P, P]
    const std::size_t B = maps.dim(0), N = maps.dim(1), P = maps.dim(2);
    // [B, P(query), N(head), P(key)]
    Tensor by_query = permute(maps, {0, 2, 1, 3});
    // Self-pairs are identically 1 (|SSIM(x, x)| = 1), so they enter as a
    // constant: differentiating them would only inject rounding noise.
    Tensor d;
    if (N == 1) {
      d = Tensor::full({B, P}, 1.0);
    } else {
      std::vector<std::size_t> first, second;
      first.reserve(N * (N - 1));
      second.reserve(N * (N - 1));
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < N; ++j)
          if (i != j) {
            first.push_back(i);
            second.push_back(j);
          }
      Tensor s = ssim_rows(index_select(by_query, 2, first),
                           index_select(by_query, 2, second)); // [B, P, N(N-1)]
      const double n2 = static_cast<double>(N * N);
      d = add_scalar(scale(sum(abs(s), 2), 1.0 / n2),
                     static_cast<double>(N) / n2); // [B, P]
    }
    per_layer.push_back(reshape(d, {1, B, P}));
  }
  CoherencyReport report;
  report.d_values = concat(per_layer, 0); // [L, B, P]
  const std::size_t L = report.d_values.dim(0), B = report.d_values.dim(1),
                    P = report.d_values.dim(2);
  report.loss = sub(Tensor::scalar(1.0), mean(report.d_values));
  report.per_image_similarity =
      mean(reshape(permute(report.d_values, {1, 0, 2}), {B, L * P}), 1);
  return report;
}

} // namespace dfq
