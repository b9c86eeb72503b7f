// SPDX-License-Identifier: Apache-2.0
#include <dfq/toy_shapes.hpp>

#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace dfq {

namespace {

bool inside(Shape2d shape, double u, double v) {
  switch (shape) {
  case Shape2d::Disk:
    return u * u + v * v <= 1.0;
  case Shape2d::Square:
    return std::abs(u) <= 0.8 && std::abs(v) <= 0.8;
  case Shape2d::Cross:
    return (std::abs(u) <= 1.0 && std::abs(v) <= 0.3) ||
           (std::abs(u) <= 0.3 && std::abs(v) <= 1.0);
  case Shape2d::Triangle: {
    // Equilateral, circumradius 1, apex up: three half-planes at distance 1/2.
    for (int k = 0; k < 3; ++k) {
      const double a = std::numbers::pi / 2.0 + 2.0 * std::numbers::pi * k / 3.0;
      if (-(u * std::cos(a) + v * std::sin(a)) > 0.5)
        return false;
    }
    return true;
  }
  }
  return false;
}

} // namespace

void ToyShapesConfig::validate() const {
  if (classes != 2 && classes != 4)
    throw std::invalid_argument("toy shapes: classes must be 2 or 4");
  if (side < 8 || side > 64)
    throw std::invalid_argument("toy shapes: side must be in [8, 64]");
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw std::invalid_argument("toy shapes: train_fraction must be in (0, 1)");
  if (samples < 2)
    throw std::invalid_argument("toy shapes: need at least 2 samples");
  if (!(noise >= 0.0))
    throw std::invalid_argument("toy shapes: noise must be >= 0");
}

std::vector<double> render_shape(Shape2d shape, std::size_t side, double cx,
                                 double cy, double radius, double angle) {
  std::vector<double> img(side * side, 0.0);
  const double c = std::cos(angle), s = std::sin(angle);
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x) {
      int hits = 0;
      for (int sy = 0; sy < 2; ++sy)
        for (int sx = 0; sx < 2; ++sx) {
          const double px = static_cast<double>(x) + 0.25 + 0.5 * sx - cx;
          const double py = static_cast<double>(y) + 0.25 + 0.5 * sy - cy;
          // Rotate into the shape frame; v grows upwards.
          const double u = (c * px + s * py) / radius;
          const double v = (s * px - c * py) / radius;
          hits += inside(shape, u, v) ? 1 : 0;
        }
      img[y * side + x] = 0.25 * hits;
    }
  return img;
}

ToyShapes make_toy_shapes(const ToyShapesConfig &cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const std::size_t n = cfg.samples, side = cfg.side, px = side * side;
  const double fs = static_cast<double>(side);
  std::vector<double> pixels(n * px);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = static_cast<int>(i % cfg.classes);
    const auto shape = static_cast<Shape2d>(labels[i]);
    const double radius = rng.uniform(0.18, 0.3) * fs;
    const double cx = rng.uniform(0.35, 0.65) * fs;
    const double cy = rng.uniform(0.35, 0.65) * fs;
    const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
    auto img = render_shape(shape, side, cx, cy, radius, angle);
    for (std::size_t k = 0; k < px; ++k)
      pixels[i * px + k] = img[k] + cfg.noise * rng.normal();
  }

  // Stratified split keeps both halves class-balanced.
  std::vector<std::size_t> train_idx, held_idx;
  for (std::size_t c = 0; c < cfg.classes; ++c) {
    std::vector<std::size_t> members;
    for (std::size_t i = c; i < n; i += cfg.classes)
      members.push_back(i);
    rng.shuffle(members);
    const auto k = static_cast<std::size_t>(
        std::llround(cfg.train_fraction * static_cast<double>(members.size())));
    train_idx.insert(train_idx.end(), members.begin(),
                     members.begin() + static_cast<long>(k));
    held_idx.insert(held_idx.end(), members.begin() + static_cast<long>(k),
                    members.end());
  }
  rng.shuffle(train_idx);
  rng.shuffle(held_idx);
  if (train_idx.empty() || held_idx.empty())
    throw std::invalid_argument("toy shapes: split leaves an empty side");

  ToyShapes out;
  if (cfg.standardize) {
    double sum = 0.0, sq = 0.0;
    for (std::size_t i : train_idx)
      for (std::size_t k = 0; k < px; ++k)
        sum += pixels[i * px + k];
    const double count = static_cast<double>(train_idx.size() * px);
    out.pixel_mean = sum / count;
    for (std::size_t i : train_idx)
      for (std::size_t k = 0; k < px; ++k) {
        const double d = pixels[i * px + k] - out.pixel_mean;
        sq += d * d;
      }
    out.pixel_std = std::sqrt(sq / count);
    for (double &v : pixels)
      v = (v - out.pixel_mean) / out.pixel_std;
  }
  LabeledImages all{Tensor::from({n, 1, side, side}, std::move(pixels)),
                    std::move(labels)};
  out.train = all.subset(train_idx);
  out.heldout = all.subset(held_idx);
  return out;
}

} // namespace dfq
