// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "mstream/corruption.hpp"
#include "mstream/errors.hpp"
#include "mstream/nn.hpp"
#include "mstream/rng.hpp"

namespace mstream::corrupt {
namespace {

using nn::Graph;
using nn::TP;

// Single-block causal attention model over token ids. There is deliberately
// no positional encoding: the crossroad must be recognized from the marker
// content alone, so corrupting the context genuinely removes the evidence
// instead of leaving a positional shortcut.
struct HarnessModel {
  nn::ParamStore ps;
  nn::Block block;
  TP embed, head_w, head_b;
  int heads;
  int vocab;

  HarnessModel(const CrossroadWorld& world, const CrossroadConfig& cfg, Rng& rng)
      : heads(cfg.heads), vocab(world.vocab()) {
    embed = ps.add_normal("embed", vocab, cfg.model_dim, rng, 0.02);
    block = nn::make_block(ps, "blk", cfg.model_dim, 2 * cfg.model_dim, rng);
    // Zero head: an untrained model emits uniform logits, so the first-step
    // cross entropy equals log(vocab) and convergence checks have a baseline.
    head_w = ps.add("head.w", cfg.model_dim, vocab);
    head_b = ps.add("head.b", 1, vocab);
  }

  TP forward(Graph& g, const std::vector<int>& ids, int batch, int time) {
    TP x = g.embed(embed, ids);
    x = nn::apply_block(g, block, x, batch, time, heads, 0, true, false);
    return g.linear(x, head_w, head_b);
  }
};

int sample_path(const CrossroadWorld& world, Rng& rng) {
  if (world.path_probs.empty()) return int(rng.uniform_int(uint64_t(world.paths)));
  double u = rng.uniform(), cum = 0.0;
  for (int k = 0; k < world.paths; ++k) {
    cum += world.path_probs[size_t(k)];
    if (u < cum) return k;
  }
  return world.paths - 1;
}

// One sequence with `fill` filler positions:
//   [condition] [fill fillers] [marker] [cont_len continuation tokens]
// Stray draws skip the marker and continue straight onto a uniform path, so
// the model's response to path tokens after a marker-free history is an
// actively trained flat floor rather than frozen initialization noise.
// Returns the drawn path. The filler count varies across batches so that
// depth carries no information about where the crossroad sits.
int draw_sequence(const CrossroadWorld& world, int fill, Rng& rng, std::vector<int>& out) {
  const int k = sample_path(world, rng);
  out.clear();
  out.push_back(rng.uniform() < world.null_prob ? world.mask_id() : k);
  // At most one filler slot carries the leak. A single copy is destroyed by
  // context corruption at the per-position rate, so the fraction of training
  // sequences whose only path evidence is the condition grows linearly with
  // the training corruption rate instead of saturating.
  const int leak_at = rng.uniform() < world.leak_prob && fill > 0
                          ? int(rng.uniform_int(uint64_t(fill)))
                          : -1;
  for (int j = 0; j < fill; ++j) {
    if (j == leak_at) {
      out.push_back(world.leak_token(k));
    } else {
      out.push_back(world.filler_token(int(rng.uniform_int(uint64_t(world.history_vocab)))));
    }
  }
  if (rng.uniform() < world.stray_prob) {
    const int u = int(rng.uniform_int(uint64_t(world.paths)));
    for (int j = 0; j < world.cont_len; ++j) out.push_back(world.path_token(u, j));
    out.push_back(world.filler_token(int(rng.uniform_int(uint64_t(world.history_vocab)))));
    return k;
  }
  out.push_back(world.marker_id());
  const int follow = rng.uniform() < world.noise ? sample_path(world, rng) : k;
  for (int j = 0; j < world.cont_len; ++j) out.push_back(world.path_token(follow, j));
  return k;
}

// Probe prefix ending right at the marker: condition, leak-free iid fillers
// at the nominal depth, then the marker. The next-token readout at the last
// position is the crossroad decision.
void probe_prefix(const CrossroadWorld& world, int condition, Rng& rng, std::vector<int>& out) {
  out.clear();
  out.push_back(condition);
  for (int j = 0; j < world.fillers(); ++j) {
    out.push_back(world.filler_token(int(rng.uniform_int(uint64_t(world.history_vocab)))));
  }
  out.push_back(world.marker_id());
}

// Context corruption for the harness: every position after the condition is
// independently resampled into the filler alphabet with probability rho.
// Replacements stay inside the ordinary context vocabulary, mirroring grid
// corruption that stays inside the motion codebook; resampling into path,
// leak, or condition ids would fabricate evidence instead of destroying it,
// and resampling into the marker would partially preserve the crossroad.
// Training-time corruption spares the marker the way grid corruption spares
// structural separators: content scrambles, but the model always knows where
// the junction sits, so credit assignment matches the streaming setup. Probe
// corruption hits the marker too, because the attenuation being measured is
// precisely the junction becoming unrecognizable from corrupted content.
void corrupt_context(const CrossroadWorld& world, double rho, Rng& rng, std::vector<int>& ids,
                     bool spare_marker) {
  for (size_t i = 1; i < ids.size(); ++i) {
    if (spare_marker && ids[i] == world.marker_id()) continue;
    if (rng.uniform() < rho) {
      ids[i] = world.filler_token(int(rng.uniform_int(uint64_t(world.history_vocab))));
    }
  }
}

std::vector<double> softmax_of(const std::vector<double>& z) {
  double zmax = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double sum = 0.0;
  for (size_t i = 0; i < z.size(); ++i) sum += (p[i] = std::exp(z[i] - zmax));
  for (double& v : p) v /= sum;
  return p;
}

}  // namespace

CrossroadReport crossroad_train_and_probe(const CrossroadWorld& world, double rho, uint64_t seed,
                                          const CrossroadConfig& cfg) {
  world.validate();
  if (rho < 0.0 || rho > 1.0) raise(Err::ConfigError, "probe rate must lie in [0, 1]");
  if (cfg.train_rho < 0.0 || cfg.train_rho > 1.0)
    raise(Err::ConfigError, "training rate must lie in [0, 1]");
  std::vector<double> probs = world.path_probs;
  if (probs.empty()) probs.assign(size_t(world.paths), 1.0 / world.paths);

  Rng rng(seed);
  HarnessModel model(world, cfg, rng);
  Rng probe_rng = rng.fork(7919);
  nn::AdamConfig adam;

  CrossroadReport rep;
  std::vector<int> seq, dirty, ids, targets;
  std::vector<double> weights, tail;
  for (int step = 0; step < cfg.steps; ++step) {
    // Shared filler count per batch keeps rows the same length while the
    // marker depth still varies across batches.
    const int fill =
        world.min_fillers() +
        int(rng.uniform_int(uint64_t(world.max_fillers() - world.min_fillers() + 1)));
    const int time = 2 + fill + world.cont_len;
    ids.clear();
    targets.clear();
    weights.clear();
    for (int b = 0; b < cfg.batch; ++b) {
      draw_sequence(world, fill, rng, seq);
      // The model reads the corrupted stream but the supervision stays
      // clean, exactly like teacher forcing over corrupted motion context.
      dirty = seq;
      corrupt_context(world, cfg.train_rho, rng, dirty, /*spare_marker=*/true);
      for (int t = 0; t < time; ++t) {
        ids.push_back(dirty[size_t(t)]);
        targets.push_back(t + 1 < time ? seq[size_t(t) + 1] : 0);
        weights.push_back(t + 1 < time ? 1.0 : 0.0);
      }
    }
    Graph g;
    TP logits = model.forward(g, ids, cfg.batch, time);
    TP loss = g.ce_loss(logits, targets, weights);
    model.ps.zero_grad();
    g.backward(loss);
    // Linear decay to zero so probes read a settled optimum rather than
    // stationary optimizer jitter.
    adam.lr = cfg.lr * (1.0 - double(step) / cfg.steps);
    model.ps.adam_step(adam);
    tail.push_back(loss->v[0]);
    if (tail.size() > 50) tail.erase(tail.begin());
  }
  double ce_tail = 0.0;
  for (double v : tail) ce_tail += v;
  ce_tail /= tail.empty() ? 1.0 : double(tail.size());
  rep.final_ce = ce_tail;
  rep.converged = std::isfinite(ce_tail) && ce_tail < 0.9 * std::log(double(model.vocab));

  // Context readout: mask the condition, corrupt the context at the probe
  // rate, and average the first-continuation logits over draws.
  const int probe_len = 2 + world.fillers();
  rep.context_logits.assign(size_t(world.paths), 0.0);
  for (int s = 0; s < cfg.probe_samples; ++s) {
    probe_prefix(world, world.mask_id(), probe_rng, seq);
    corrupt_context(world, rho, probe_rng, seq, /*spare_marker=*/false);
    Graph g;
    TP logits = model.forward(g, seq, 1, probe_len);
    for (int k = 0; k < world.paths; ++k) {
      rep.context_logits[size_t(k)] += logits->at(probe_len - 1, world.path_token(k, 0));
    }
  }
  for (double& v : rep.context_logits) v /= double(cfg.probe_samples);
  rep.restricted_mass = softmax_of(rep.context_logits);

  // Slope of measured context logits against log prior, both centered.
  double xbar = 0.0, ybar = 0.0;
  for (int k = 0; k < world.paths; ++k) {
    xbar += std::log(probs[size_t(k)]);
    ybar += rep.context_logits[size_t(k)];
  }
  xbar /= world.paths;
  ybar /= world.paths;
  double sxx = 0.0, sxy = 0.0;
  for (int k = 0; k < world.paths; ++k) {
    const double dx = std::log(probs[size_t(k)]) - xbar;
    sxy += dx * (rep.context_logits[size_t(k)] - ybar);
    sxx += dx * dx;
  }
  rep.slope = sxx <= 1e-12 ? 0.0 : sxy / sxx;

  // Conditioned readout: clean prefix with the true condition visible; how
  // much restricted probability lands on the conditioned path.
  rep.match_prob.assign(size_t(world.paths), 0.0);
  const int match_draws = std::max(1, cfg.probe_samples / 4);
  for (int k = 0; k < world.paths; ++k) {
    for (int s = 0; s < match_draws; ++s) {
      probe_prefix(world, k, probe_rng, seq);
      Graph g;
      TP logits = model.forward(g, seq, 1, probe_len);
      std::vector<double> z(size_t(world.paths));
      for (int j = 0; j < world.paths; ++j) {
        z[size_t(j)] = logits->at(probe_len - 1, world.path_token(j, 0));
      }
      rep.match_prob[size_t(k)] += softmax_of(z)[size_t(k)];
    }
    rep.match_prob[size_t(k)] /= double(match_draws);
    rep.mean_match += rep.match_prob[size_t(k)] / double(world.paths);
  }
  return rep;
}

}  // namespace mstream::corrupt
