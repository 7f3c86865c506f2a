// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "mstream/rng.hpp"
#include "mstream/tokenizer.hpp"

namespace mstream::corrupt {

struct CorruptionSpec {
  enum class Mode { uniform, hierarchical };
  Mode mode = Mode::uniform;
  double rate = 0.0;  // rho
  uint64_t seed = 0;

  void validate() const {
    if (rate < 0.0 || rate > 1.0) raise(Err::ConfigError, "corruption rate outside [0,1]");
  }
};

// Each cell (t, q, p) is independently resampled from Uniform[0, K) with
// probability rate. The draw may equal the original token.
tok::TokenGrid corrupt_uniform(const tok::TokenGrid& grid, const CorruptionSpec& spec);

// Exactly floor(rate * steps) timesteps are selected without replacement.
// Each selected timestep draws a cascade start q* ~ Uniform[0, Q) and
// resamples every layer q >= q* across all parts; layers below q* and all
// non-selected timesteps are untouched.
tok::TokenGrid corrupt_hierarchical(const tok::TokenGrid& grid, const CorruptionSpec& spec);

// Crossroad worlds: K trajectories cross at an intersection marked by one
// distinctive token. Sequences look like
//   [condition] [filler .. filler] [marker] [continuation tokens]
// with a path k drawn from the prior each time. Fillers are iid and their
// count varies per draw, so depth carries no signal and the crossroad is
// recognizable only from the marker content; that is what lets context
// corruption attenuate it. With probability leak_prob one uniformly chosen
// filler position instead carries the path's leak token, making the
// condition redundant with clean context; a single copy means corruption
// destroys the shortcut at the per-position rate. The continuation follows path k with probability
// 1 - noise, else an independent prior draw, which keeps optimal logits
// finite. With probability stray_prob the trajectory misses the junction:
// no marker appears and the continuation is a uniformly random path, which
// pins the no-evidence response flat instead of leaving it untrained. With
// probability null_prob the condition is hidden behind the mask token, so
// the masked probe reads a trained, condition-free pathway. There is no
// positional encoding.
struct CrossroadWorld {
  int paths = 4;
  std::vector<double> path_probs;  // defaults to uniform when empty
  int history_len = 6;             // probe-time filler positions plus the marker
  int history_vocab = 4;
  int cont_len = 4;
  double leak_prob = 0.0;
  double noise = 0.2;
  double stray_prob = 0.1;
  double null_prob = 0.15;

  int fillers() const { return history_len - 1; }
  int min_fillers() const { return 2; }
  int max_fillers() const { return fillers() + 3; }
  int vocab() const { return paths + history_vocab + 1 + paths + paths * cont_len + 1; }
  int mask_id() const { return vocab() - 1; }  // doubles as the null condition
  int filler_token(int v) const { return paths + v; }
  int marker_id() const { return paths + history_vocab; }
  int leak_token(int k) const { return paths + history_vocab + 1 + k; }
  int path_token(int k, int j) const {
    return paths + history_vocab + 1 + paths + k * cont_len + j;
  }
  void validate() const;
};

struct CrossroadConfig {
  int steps = 2000;
  int batch = 64;
  int model_dim = 32;
  int heads = 2;
  double lr = 3e-3;
  int probe_samples = 128;  // corrupted-history draws averaged per probe
  // Training-time context corruption. The rho argument of the harness is the
  // probe rate: attenuation of the settled context logits is measured by
  // corrupting the probe inputs of a model trained at train_rho (clean by
  // default, which is the regime where the floor forms).
  double train_rho = 0.0;
};

struct CrossroadReport {
  bool converged = false;
  double final_ce = 0;
  double slope = 0;  // d(context logit) / d(log pi), condition masked
  std::vector<double> context_logits;    // per path, corruption-averaged
  std::vector<double> restricted_mass;   // softmax of context_logits over paths
  std::vector<double> match_prob;        // P(path k token | condition k, clean history)
  double mean_match = 0;
};

// Trains a one-block causal model on the world's sequences with context
// corruption at the given rate, then probes the crossroad position.
CrossroadReport crossroad_train_and_probe(const CrossroadWorld& world, double rho, uint64_t seed,
                                          const CrossroadConfig& cfg = {});

}  // namespace mstream::corrupt
