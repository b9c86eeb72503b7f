// SPDX-License-Identifier: Apache-2.0
#include <dfq/attnsim.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace dfq {

std::vector<double> average_ranks(std::span<const double> xs) {
  std::vector<std::size_t> order(xs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(xs.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && xs[order[j + 1]] == xs[order[i]])
      ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k)
      ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

namespace {

double pearson(const std::vector<double> &a, const std::vector<double> &b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

double kendall_tau_b(std::span<const double> xs, std::span<const double> ys) {
  long long concordant = 0, discordant = 0, ties_x = 0, ties_y = 0;
  const std::size_t n = xs.size();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double dx = xs[i] - xs[j];
      const double dy = ys[i] - ys[j];
      if (dx == 0.0 && dy == 0.0)
        continue;
      if (dx == 0.0)
        ++ties_x;
      else if (dy == 0.0)
        ++ties_y;
      else if ((dx > 0) == (dy > 0))
        ++concordant;
      else
        ++discordant;
    }
  const double nc = static_cast<double>(concordant);
  const double nd = static_cast<double>(discordant);
  return (nc - nd) / std::sqrt((nc + nd + static_cast<double>(ties_x)) *
                               (nc + nd + static_cast<double>(ties_y)));
}

bool constant(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [&](double x) { return x == v[0]; });
}

} // namespace

double rank_correlation(std::span<const double> xs, std::span<const double> ys,
                        RankKind kind) {
  if (xs.size() != ys.size())
    throw DimensionError("rank_correlation", Shape{xs.size()}, Shape{ys.size()});
  if (xs.size() < 2)
    throw std::invalid_argument("rank_correlation: need at least 2 samples");
  if (constant(xs) || constant(ys))
    throw std::domain_error("rank_correlation: undefined for a constant "
                            "series");
  if (kind == RankKind::Spearman)
    return pearson(average_ranks(xs), average_ranks(ys));
  return kendall_tau_b(xs, ys);
}

} // namespace dfq
