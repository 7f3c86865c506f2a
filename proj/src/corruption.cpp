// SPDX-License-Identifier: Apache-2.0
#include "mstream/corruption.hpp"

#include <cmath>
#include <numeric>

namespace mstream::corrupt {

namespace {

void check_grid(const tok::TokenGrid& grid) {
  if (grid.codebook <= 0) raise(Err::ConfigError, "token grid has no codebook size");
  if (grid.idx.size() != size_t(grid.steps) * grid.layers * grid.parts)
    raise(Err::DimensionError, "token grid index buffer does not match its shape");
}

}  // namespace

tok::TokenGrid corrupt_uniform(const tok::TokenGrid& grid, const CorruptionSpec& spec) {
  spec.validate();
  check_grid(grid);
  Rng rng(spec.seed);
  tok::TokenGrid out = grid;
  for (auto& cell : out.idx)
    if (rng.uniform() < spec.rate) cell = uint16_t(rng.uniform_int(grid.codebook));
  return out;
}

tok::TokenGrid corrupt_hierarchical(const tok::TokenGrid& grid, const CorruptionSpec& spec) {
  spec.validate();
  check_grid(grid);
  Rng rng(spec.seed);
  tok::TokenGrid out = grid;
  const int T = grid.steps, Q = grid.layers, P = grid.parts;
  if (T == 0 || Q == 0) return out;
  // Epsilon guards decimal rates whose double form sits a hair under an
  // integer product; the count must be the exact floor of rate * T.
  const int selected = int(std::floor(spec.rate * double(T) + 1e-9));

  std::vector<int> order(T);
  std::iota(order.begin(), order.end(), 0);
  for (int i = 0; i < selected; ++i) {
    const int j = i + rng.uniform_int(T - i);
    std::swap(order[i], order[j]);
  }
  for (int i = 0; i < selected; ++i) {
    const int t = order[i];
    const int cascade = rng.uniform_int(Q);  // coarsest resampled layer
    for (int q = cascade; q < Q; ++q)
      for (int p = 0; p < P; ++p) out.at(t, q, p) = uint16_t(rng.uniform_int(grid.codebook));
  }
  return out;
}

void CrossroadWorld::validate() const {
  if (paths < 2) raise(Err::ConfigError, "crossroad world needs at least two paths");
  if (history_len < min_fillers() + 1 || cont_len < 1 || history_vocab < 2)
    raise(Err::ConfigError, "crossroad world needs fillers, a marker, and a continuation");
  if (leak_prob < 0.0 || leak_prob >= 1.0 || noise < 0.0 || noise >= 1.0 || null_prob < 0.0 ||
      null_prob >= 1.0 || stray_prob < 0.0 || stray_prob >= 1.0)
    raise(Err::ConfigError, "leak_prob, noise, stray_prob, and null_prob must lie in [0, 1)");
  if (!path_probs.empty()) {
    if (int(path_probs.size()) != paths)
      raise(Err::DimensionError, "path_probs size does not match path count");
    double sum = 0;
    for (double p : path_probs) {
      if (p <= 0) raise(Err::ConfigError, "path probabilities must be positive");
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9) raise(Err::ConfigError, "path probabilities must sum to 1");
  }
}

}  // namespace mstream::corrupt
