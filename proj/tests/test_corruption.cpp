// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <set>

#include "doctest.h"
#include "mstream/corruption.hpp"

using namespace mstream;
using namespace mstream::corrupt;

namespace {

tok::TokenGrid make_grid(int t, int q, int p, int k, uint64_t seed) {
  tok::TokenGrid grid(t, q, p, k);
  Rng rng(seed);
  for (auto& cell : grid.idx) cell = uint16_t(rng.uniform_int(k));
  return grid;
}

bool step_differs(const tok::TokenGrid& a, const tok::TokenGrid& b, int t) {
  for (int q = 0; q < a.layers; ++q)
    for (int p = 0; p < a.parts; ++p)
      if (a.at(t, q, p) != b.at(t, q, p)) return true;
  return false;
}

}  // namespace

TEST_CASE("uniform corruption at rate zero is the identity") {
  auto grid = make_grid(50, 2, 3, 64, 11);
  CorruptionSpec spec{CorruptionSpec::Mode::uniform, 0.0, 5};
  auto out = corrupt_uniform(grid, spec);
  CHECK(out.idx == grid.idx);
  CHECK(out.steps == grid.steps);
  CHECK(out.layers == grid.layers);
  CHECK(out.parts == grid.parts);
  CHECK(out.codebook == grid.codebook);
}

TEST_CASE("uniform corruption is seed-deterministic") {
  auto grid = make_grid(200, 2, 3, 64, 12);
  CorruptionSpec spec{CorruptionSpec::Mode::uniform, 0.5, 99};
  auto a = corrupt_uniform(grid, spec);
  auto b = corrupt_uniform(grid, spec);
  CHECK(a.idx == b.idx);
  spec.seed = 100;
  auto c = corrupt_uniform(grid, spec);
  CHECK(a.idx != c.idx);
}

TEST_CASE("uniform corruption keeps indices in range") {
  auto grid = make_grid(100, 3, 2, 7, 13);
  CorruptionSpec spec{CorruptionSpec::Mode::uniform, 1.0, 4};
  auto out = corrupt_uniform(grid, spec);
  for (auto cell : out.idx) CHECK(cell < 7);
}

TEST_CASE("uniform corruption resamples may repeat the original token") {
  // At rate 1 every cell is redrawn, so matches occur at the 1/K collision
  // rate rather than never.
  const int K = 16;
  auto grid = make_grid(2500, 5, 8, K, 14);  // 1e5 cells
  CorruptionSpec spec{CorruptionSpec::Mode::uniform, 1.0, 21};
  auto out = corrupt_uniform(grid, spec);
  const double n = double(grid.idx.size());
  int same = 0;
  for (size_t i = 0; i < grid.idx.size(); ++i) same += out.idx[i] == grid.idx[i];
  const double p = 1.0 / K;
  const double sigma = std::sqrt(n * p * (1 - p));
  CHECK(std::abs(same - n * p) < 3 * sigma);
}

TEST_CASE("uniform corruption mismatch fraction tracks the rate") {
  const int K = 16;
  const double rho = 0.4;
  auto grid = make_grid(2500, 5, 8, K, 15);
  CorruptionSpec spec{CorruptionSpec::Mode::uniform, rho, 22};
  auto out = corrupt_uniform(grid, spec);
  const double n = double(grid.idx.size());
  int diff = 0;
  for (size_t i = 0; i < grid.idx.size(); ++i) diff += out.idx[i] != grid.idx[i];
  const double p = rho * (1.0 - 1.0 / K);
  const double sigma = std::sqrt(n * p * (1 - p));
  CHECK(std::abs(diff - n * p) < 3 * sigma);
}

TEST_CASE("hierarchical corruption at rate zero is the identity") {
  auto grid = make_grid(64, 2, 3, 64, 16);
  CorruptionSpec spec{CorruptionSpec::Mode::hierarchical, 0.0, 5};
  auto out = corrupt_hierarchical(grid, spec);
  CHECK(out.idx == grid.idx);
}

TEST_CASE("hierarchical corruption hits exactly floor(rate * steps) timesteps") {
  // Huge codebook makes an accidental resample collision vanishingly rare,
  // so changed timesteps are exactly the selected ones.
  auto grid = make_grid(400, 3, 1, 60000, 17);
  CorruptionSpec spec{CorruptionSpec::Mode::hierarchical, 0.25, 31};
  auto out = corrupt_hierarchical(grid, spec);
  int changed = 0;
  for (int t = 0; t < grid.steps; ++t) changed += step_differs(grid, out, t);
  CHECK(changed == 100);

  SUBCASE("decimal rates floor exactly") {
    auto g2 = make_grid(100, 1, 1, 60000, 18);
    CorruptionSpec s2{CorruptionSpec::Mode::hierarchical, 0.29, 32};
    auto o2 = corrupt_hierarchical(g2, s2);
    int c2 = 0;
    for (int t = 0; t < g2.steps; ++t) c2 += step_differs(g2, o2, t);
    CHECK(c2 == 29);
  }

  SUBCASE("a rate too small to select one timestep is the identity") {
    auto g3 = make_grid(10, 2, 2, 64, 19);
    CorruptionSpec s3{CorruptionSpec::Mode::hierarchical, 0.05, 33};
    auto o3 = corrupt_hierarchical(g3, s3);
    CHECK(o3.idx == g3.idx);
  }
}

TEST_CASE("hierarchical corruption changes suffixes of layers only") {
  auto grid = make_grid(500, 4, 2, 60000, 20);
  CorruptionSpec spec{CorruptionSpec::Mode::hierarchical, 0.5, 34};
  auto out = corrupt_hierarchical(grid, spec);
  int changed_steps = 0;
  for (int t = 0; t < grid.steps; ++t) {
    int lowest = grid.layers;
    for (int q = 0; q < grid.layers; ++q)
      for (int p = 0; p < grid.parts; ++p)
        if (grid.at(t, q, p) != out.at(t, q, p)) {
          lowest = std::min(lowest, q);
          goto found;
        }
  found:
    if (lowest == grid.layers) continue;
    ++changed_steps;
    // Every layer from the lowest changed one onward was resampled across
    // all parts; with K = 60000 collisions with the original are negligible.
    for (int q = lowest; q < grid.layers; ++q)
      for (int p = 0; p < grid.parts; ++p) CHECK(grid.at(t, q, p) != out.at(t, q, p));
  }
  CHECK(changed_steps == 250);
}

TEST_CASE("hierarchical corruption is seed-deterministic") {
  auto grid = make_grid(300, 2, 3, 64, 23);
  CorruptionSpec spec{CorruptionSpec::Mode::hierarchical, 0.5, 77};
  auto a = corrupt_hierarchical(grid, spec);
  auto b = corrupt_hierarchical(grid, spec);
  CHECK(a.idx == b.idx);
  spec.seed = 78;
  auto c = corrupt_hierarchical(grid, spec);
  CHECK(a.idx != c.idx);
}

TEST_CASE("hierarchical per-layer rate is rate * (q+1) / layers") {
  const int T = 10000, Q = 3;
  const double rho = 0.6;
  auto grid = make_grid(T, Q, 2, 60000, 24);
  CorruptionSpec spec{CorruptionSpec::Mode::hierarchical, rho, 35};
  auto out = corrupt_hierarchical(grid, spec);
  for (int q = 0; q < Q; ++q) {
    int hit = 0;
    for (int t = 0; t < T; ++t) {
      bool diff = false;
      for (int p = 0; p < grid.parts; ++p) diff = diff || grid.at(t, q, p) != out.at(t, q, p);
      hit += diff;
    }
    const double p = rho * double(q + 1) / Q;
    const double sigma = std::sqrt(T * p * (1 - p));
    CHECK(std::abs(hit - T * p) < 3 * sigma);
  }
}

TEST_CASE("corruption rejects invalid specs and grids") {
  auto grid = make_grid(10, 2, 2, 16, 25);
  CorruptionSpec bad{CorruptionSpec::Mode::uniform, 1.5, 0};
  CHECK_THROWS_AS(corrupt_uniform(grid, bad), Error);
  bad.rate = -0.1;
  CHECK_THROWS_AS(corrupt_hierarchical(grid, bad), Error);

  tok::TokenGrid broken = grid;
  broken.idx.pop_back();
  CorruptionSpec ok{CorruptionSpec::Mode::uniform, 0.5, 0};
  CHECK_THROWS_AS(corrupt_uniform(broken, ok), Error);
}

TEST_CASE("crossroad world validation") {
  CrossroadWorld w;
  w.paths = 1;
  CHECK_THROWS_AS(w.validate(), Error);
  w.paths = 4;
  w.path_probs = {0.5, 0.5};
  CHECK_THROWS_AS(w.validate(), Error);
  w.path_probs = {0.4, 0.3, 0.2, 0.2};
  CHECK_THROWS_AS(w.validate(), Error);
  w.path_probs = {0.4, 0.3, 0.2, 0.1};
  CHECK_NOTHROW(w.validate());
  w.path_probs.clear();
  CHECK_NOTHROW(w.validate());

  // Token layout partitions the vocabulary: conditions, fillers, marker,
  // leaks, path tokens, mask, with no overlaps and no gaps.
  std::set<int> ids;
  for (int k = 0; k < w.paths; ++k) ids.insert(k);
  for (int v = 0; v < w.history_vocab; ++v) ids.insert(w.filler_token(v));
  ids.insert(w.marker_id());
  for (int k = 0; k < w.paths; ++k) ids.insert(w.leak_token(k));
  for (int k = 0; k < w.paths; ++k)
    for (int j = 0; j < w.cont_len; ++j) ids.insert(w.path_token(k, j));
  ids.insert(w.mask_id());
  CHECK(int(ids.size()) == w.vocab());
  CHECK(*ids.begin() == 0);
  CHECK(*ids.rbegin() == w.vocab() - 1);
  CHECK(w.mask_id() == w.vocab() - 1);
  CHECK(w.min_fillers() >= 1);
  CHECK(w.max_fillers() > w.fillers());
}

TEST_CASE("crossroad probe learns the path prior through context alone") {
  // Short directional run; the precise slope bands live in the acceptance
  // suite with full-length training.
  CrossroadWorld world;
  world.path_probs = {8.0 / 15, 4.0 / 15, 2.0 / 15, 1.0 / 15};
  world.null_prob = 0.3;
  CrossroadConfig cfg;
  cfg.steps = 400;
  cfg.batch = 32;
  cfg.probe_samples = 32;
  auto rep = crossroad_train_and_probe(world, 0.0, 123, cfg);

  CHECK(rep.converged);
  CHECK(rep.final_ce < 0.9 * std::log(double(world.vocab())));
  // The floor forms early: masked-context logits track the prior.
  CHECK(rep.slope > 0.5);
  CHECK(rep.slope < 1.5);
  // Most and least likely paths keep their order in the context logits.
  CHECK(rep.context_logits[0] > rep.context_logits[3]);

  double mass = 0;
  for (double m : rep.restricted_mass) mass += m;
  CHECK(mass == doctest::Approx(1.0).epsilon(1e-9));
  for (double m : rep.match_prob) {
    CHECK(m >= 0.0);
    CHECK(m <= 1.0);
  }
  // Condition routing forms much later than the floor; at this length it
  // only has to not sit below chance.
  CHECK(rep.mean_match > 0.2);
}

TEST_CASE("crossroad harness is reproducible and validates rates") {
  CrossroadWorld world;
  CrossroadConfig cfg;
  cfg.steps = 60;
  cfg.batch = 8;
  cfg.probe_samples = 8;
  // Same seed, same results up to allocation-alignment jitter in the last
  // float bits (amplified slightly by training).
  auto a = crossroad_train_and_probe(world, 0.3, 42, cfg);
  auto b = crossroad_train_and_probe(world, 0.3, 42, cfg);
  CHECK(a.slope == doctest::Approx(b.slope).epsilon(1e-6));
  CHECK(a.final_ce == doctest::Approx(b.final_ce).epsilon(1e-6));
  for (int k = 0; k < world.paths; ++k) {
    CHECK(a.context_logits[size_t(k)] ==
          doctest::Approx(b.context_logits[size_t(k)]).epsilon(1e-6));
  }

  CHECK_THROWS_AS(crossroad_train_and_probe(world, -0.1, 1, cfg), Error);
  CHECK_THROWS_AS(crossroad_train_and_probe(world, 1.5, 1, cfg), Error);
  CrossroadConfig bad = cfg;
  bad.train_rho = 2.0;
  CHECK_THROWS_AS(crossroad_train_and_probe(world, 0.0, 1, bad), Error);
}
