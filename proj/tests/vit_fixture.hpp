// SPDX-License-Identifier: Apache-2.0
/**
 * @file   vit_fixture.hpp
 * @brief  Frozen model/input pair behind the golden logits file.
 */
#pragma once

#include <dfq/vit.hpp>

namespace dfq::testing {

inline ViTConfig golden_config() {
  ViTConfig c; // 32 px, 8 px patches -> 16 patches
  c.layers = 2;
  c.heads = 4;
  c.embed_dim = 32;
  c.classes = 4;
  return c;
}

inline Tensor golden_input() {
  Rng rng(20240607);
  std::vector<double> v(2 * 32 * 32);
  for (auto &x : v)
    x = rng.normal();
  return Tensor::from({2, 1, 32, 32}, std::move(v));
}

inline constexpr std::uint64_t kGoldenSeed = 1234;

} // namespace dfq::testing
