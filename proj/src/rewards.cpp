// SPDX-License-Identifier: Apache-2.0
#include "mstream/rewards.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace mstream::reward {

namespace {

constexpr double kGridEps = 1e-9;

// Tiled sinusoid positions added to every item of a batch.
nn::TP with_positions(nn::Graph& g, nn::TP x, int batch, int time, int dim) {
  const std::vector<double> pos = nn::sinusoid_positions(time, dim);
  std::vector<double> tiled(size_t(batch) * time * dim);
  for (int b = 0; b < batch; ++b) {
    std::copy(pos.begin(), pos.end(), tiled.begin() + size_t(b) * pos.size());
  }
  return g.add_const(x, tiled);
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

// Positive sets seen from the other direction: who lists j as a match.
std::vector<std::vector<int>> transpose_sets(const std::vector<std::vector<int>>& sets) {
  std::vector<std::vector<int>> out(sets.size());
  for (size_t i = 0; i < sets.size(); ++i) {
    for (int j : sets[i]) out[size_t(j)].push_back(int(i));
  }
  return out;
}

void check_positive_sets(const std::vector<std::vector<int>>& sets, size_t n) {
  if (sets.size() != n) raise(Err::DimensionError, "one positive set per batch item required");
  for (const std::vector<int>& s : sets) {
    if (s.empty()) raise(Err::LabelError, "empty positive set");
    for (int j : s) {
      if (j < 0 || size_t(j) >= n) raise(Err::LabelError, "positive index outside the batch");
    }
  }
}

// Flat row-major soft labels: each row spreads unit mass over its set.
std::vector<double> soft_labels(const std::vector<std::vector<int>>& sets) {
  const size_t n = sets.size();
  std::vector<double> y(n * n, 0.0);
  for (size_t i = 0; i < n; ++i) {
    const double w = 1.0 / double(sets[i].size());
    for (int j : sets[i]) y[i * n + size_t(j)] = w;
  }
  return y;
}

// 1-based rank of the true match under (similarity desc, index asc order).
int rank_of_match(const std::vector<double>& sims, int truth) {
  int r = 1;
  for (int j = 0; j < int(sims.size()); ++j) {
    if (j == truth) continue;
    if (sims[size_t(j)] > sims[size_t(truth)] ||
        (sims[size_t(j)] == sims[size_t(truth)] && j < truth)) {
      ++r;
    }
  }
  return r;
}

RetrievalStats stats_from_ranks(std::vector<int> ranks) {
  RetrievalStats st;
  const double n = double(ranks.size());
  for (int r : ranks) {
    st.r1 += r <= 1 ? 100.0 / n : 0.0;
    st.r3 += r <= 3 ? 100.0 / n : 0.0;
    st.r5 += r <= 5 ? 100.0 / n : 0.0;
    st.r10 += r <= 10 ? 100.0 / n : 0.0;
    st.mrr += 1.0 / (r * n);
  }
  std::sort(ranks.begin(), ranks.end());
  const size_t mid = ranks.size() / 2;
  st.medr = ranks.size() % 2 == 1 ? ranks[mid] : 0.5 * (ranks[mid - 1] + ranks[mid]);
  return st;
}

}  // namespace

QualityScoreTable QualityScoreTable::defaults() {
  QualityScoreTable t;
  t.hierarchical = {0.88, 0.84, 0.79, 0.75, 0.70, 0.64, 0.57, 0.52, 0.46, 0.40};
  t.uniform = {0.76, 0.58, 0.36, 0.30, 0.24, 0.18, 0.12, 0.06, 0.02, 0.00};
  return t;
}

double QualityScoreTable::target(corrupt::CorruptionSpec::Mode mode, double rate) const {
  const double scaled = rate * 10.0;
  const int idx = int(std::lround(scaled)) - 1;
  if (std::fabs(scaled - std::lround(scaled)) > kGridEps || idx < 0 ||
      idx >= int(hierarchical.size())) {
    raise(Err::ConfigError, "rate off the 0.1 score grid");
  }
  return mode == corrupt::CorruptionSpec::Mode::uniform ? uniform[size_t(idx)]
                                                        : hierarchical[size_t(idx)];
}

void QualityScoreTable::validate() const {
  if (hierarchical.size() != uniform.size() || hierarchical.empty()) {
    raise(Err::ConfigError, "score table modes must cover the same rates");
  }
  auto in_range = [](double s) { return s >= 0.0 && s <= 1.0; };
  if (!in_range(ground_truth) || !in_range(reconstruction)) {
    raise(Err::ConfigError, "scores must lie in [0, 1]");
  }
  for (size_t i = 0; i < hierarchical.size(); ++i) {
    if (!in_range(hierarchical[i]) || !in_range(uniform[i])) {
      raise(Err::ConfigError, "scores must lie in [0, 1]");
    }
    if (uniform[i] > hierarchical[i]) {
      raise(Err::ConfigError, "uniform corruption cannot outscore hierarchical");
    }
    if (i > 0 && (hierarchical[i] >= hierarchical[i - 1] || uniform[i] >= uniform[i - 1])) {
      raise(Err::ConfigError, "scores must strictly decrease with the rate");
    }
  }
}

void QualityConfig::validate() const {
  if (channels < 1) raise(Err::ConfigError, "motion channel count required");
  if (model_dim < 1 || heads < 1 || model_dim % heads != 0 || blocks < 1 || mlp_hidden < 1) {
    raise(Err::ConfigError, "quality model shape invalid");
  }
  if (min_frames < 1 || lr <= 0.0) raise(Err::ConfigError, "quality training settings invalid");
}

QualityModel::QualityModel(const QualityConfig& cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  proj_w_ = ps_.add_normal("q.proj.w", cfg_.channels, cfg_.model_dim, rng, 0.02);
  proj_b_ = ps_.add("q.proj.b", 1, cfg_.model_dim);
  for (int i = 0; i < cfg_.blocks; ++i) {
    blocks_.push_back(
        nn::make_block(ps_, "q.blk" + std::to_string(i), cfg_.model_dim, 2 * cfg_.model_dim, rng));
  }
  mlp_w1_ = ps_.add_normal("q.mlp.w1", cfg_.model_dim, cfg_.mlp_hidden, rng, 0.02);
  mlp_b1_ = ps_.add("q.mlp.b1", 1, cfg_.mlp_hidden);
  // Zero head: an untrained model scores everything at sigmoid(0) = 0.5.
  mlp_w2_ = ps_.add("q.mlp.w2", cfg_.mlp_hidden, 1);
  mlp_b2_ = ps_.add("q.mlp.b2", 1, 1);
  adam_.lr = cfg_.lr;
}

nn::TP QualityModel::forward(nn::Graph& g, const std::vector<const kin::Clip*>& clips) const {
  const int B = int(clips.size());
  const int T = clips[0]->frames;
  std::vector<double> xall;
  xall.reserve(size_t(B) * T * cfg_.channels);
  for (const kin::Clip* c : clips) xall.insert(xall.end(), c->data.begin(), c->data.end());
  nn::TP x = g.linear(g.constant(xall, B * T, cfg_.channels), proj_w_, proj_b_);
  x = with_positions(g, x, B, T, cfg_.model_dim);
  for (const nn::Block& blk : blocks_) {
    x = nn::apply_block(g, blk, x, B, T, cfg_.heads, 0, /*causal=*/false, /*alibi=*/false);
  }
  x = g.pool_rows(x, T);
  x = g.gelu(g.linear(x, mlp_w1_, mlp_b1_));
  return g.sigmoid(g.linear(x, mlp_w2_, mlp_b2_));
}

double QualityModel::score(const kin::Clip& clip) const {
  if (clip.frames < cfg_.min_frames) raise(Err::TooShort, "clip below the encoder minimum");
  if (clip.channels != cfg_.channels) raise(Err::DimensionError, "clip channel mismatch");
  nn::Graph g;
  return forward(g, {&clip})->v[0];
}

double QualityModel::train_step(const std::vector<kin::Clip>& clips,
                                const std::vector<double>& targets) {
  if (clips.empty() || clips.size() != targets.size()) {
    raise(Err::DimensionError, "one target per clip required");
  }
  std::vector<const kin::Clip*> ptrs;
  for (const kin::Clip& c : clips) {
    if (c.frames < cfg_.min_frames) raise(Err::TooShort, "clip below the encoder minimum");
    if (c.channels != cfg_.channels || c.frames != clips[0].frames) {
      raise(Err::DimensionError, "clips in a batch must share shape");
    }
    ptrs.push_back(&c);
  }
  nn::Graph g;
  nn::TP loss = g.smooth_l1(forward(g, ptrs), targets, 1.0);
  ps_.zero_grad();
  g.backward(loss);
  ps_.adam_step(adam_);
  return loss->v[0];
}

double infonce_loss(const std::vector<EmbeddingPair>& batch, double tau,
                    const std::vector<std::vector<int>>& positives) {
  if (batch.empty()) raise(Err::DimensionError, "empty batch");
  if (tau <= 0.0) raise(Err::ConfigError, "temperature must be positive");
  const size_t B = batch.size();
  const size_t d = batch[0].audio.size();
  for (const EmbeddingPair& p : batch) {
    if (p.audio.size() != d || p.motion.size() != d) {
      raise(Err::DimensionError, "embedding widths differ");
    }
    if (std::fabs(norm(p.audio) - 1.0) > 1e-6 || std::fabs(norm(p.motion) - 1.0) > 1e-6) {
      raise(Err::NumericalError, "embeddings must be L2-normalized");
    }
  }
  check_positive_sets(positives, B);
  const std::vector<std::vector<int>> rev = transpose_sets(positives);
  for (const std::vector<int>& s : rev) {
    if (s.empty()) raise(Err::LabelError, "item is nobody's positive");
  }

  std::vector<double> S(B * B);
  for (size_t i = 0; i < B; ++i) {
    for (size_t j = 0; j < B; ++j) S[i * B + j] = tau * dot(batch[i].audio, batch[j].motion);
  }
  auto direction = [&](const std::vector<std::vector<int>>& sets, bool rows) {
    double total = 0;
    for (size_t i = 0; i < B; ++i) {
      double mx = -1e300;
      for (size_t k = 0; k < B; ++k) mx = std::max(mx, rows ? S[i * B + k] : S[k * B + i]);
      double lse = 0;
      for (size_t k = 0; k < B; ++k) lse += std::exp((rows ? S[i * B + k] : S[k * B + i]) - mx);
      lse = mx + std::log(lse);
      const double w = 1.0 / double(sets[i].size());
      for (int j : sets[i]) {
        total -= w * ((rows ? S[i * B + size_t(j)] : S[size_t(j) * B + i]) - lse);
      }
    }
    return total / double(B);
  };
  return 0.5 * (direction(positives, true) + direction(rev, false));
}

double alignment_reward(const std::vector<double>& audio, const std::vector<double>& motion) {
  if (audio.size() != motion.size() || audio.empty()) {
    raise(Err::DimensionError, "embedding widths differ");
  }
  const double na = norm(audio), nv = norm(motion);
  if (na < 1e-12 || nv < 1e-12) raise(Err::DegenerateEmbedding, "zero embedding");
  return dot(audio, motion) / (na * nv);
}

RetrievalReport retrieval_eval(const std::vector<std::vector<double>>& audio,
                               const std::vector<std::vector<double>>& motion) {
  if (audio.empty() || audio.size() != motion.size()) {
    raise(Err::DimensionError, "audio and motion counts differ");
  }
  const size_t n = audio.size();
  const size_t d = audio[0].size();
  std::vector<std::vector<double>> a = audio, v = motion;
  for (size_t i = 0; i < n; ++i) {
    if (a[i].size() != d || v[i].size() != d) raise(Err::DimensionError, "embedding widths differ");
    const double na = norm(a[i]), nv = norm(v[i]);
    if (na < 1e-12 || nv < 1e-12) raise(Err::DegenerateEmbedding, "zero embedding");
    for (double& x : a[i]) x /= na;
    for (double& x : v[i]) x /= nv;
  }

  std::vector<int> ranks_a2m, ranks_m2a;
  std::vector<double> sims(n);
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = 0; j < n; ++j) sims[j] = dot(a[i], v[j]);
    ranks_a2m.push_back(rank_of_match(sims, int(i)));
  }
  for (size_t j = 0; j < n; ++j) {
    for (size_t i = 0; i < n; ++i) sims[i] = dot(a[i], v[j]);
    ranks_m2a.push_back(rank_of_match(sims, int(j)));
  }
  RetrievalReport rep;
  rep.a2m = stats_from_ranks(std::move(ranks_a2m));
  rep.m2a = stats_from_ranks(std::move(ranks_m2a));
  return rep;
}

void AlignerConfig::validate() const {
  if (audio_vocab < 1 || audio_layers < 1 || channels < 1) {
    raise(Err::ConfigError, "aligner input shapes required");
  }
  if (embed_dim < 2 || model_dim < 1 || heads < 1 || model_dim % heads != 0 ||
      motion_blocks < 1 || audio_blocks < 1) {
    raise(Err::ConfigError, "aligner model shape invalid");
  }
  if (temp_init <= 0.0 || lr <= 0.0) raise(Err::ConfigError, "aligner training settings invalid");
}

Aligner::Aligner(const AlignerConfig& cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  audio_embed_ = ps_.add_normal("al.a.embed", cfg_.audio_layers * cfg_.audio_vocab,
                                cfg_.model_dim, rng, 0.02);
  for (int i = 0; i < cfg_.audio_blocks; ++i) {
    audio_.blocks.push_back(
        nn::make_block(ps_, "al.a.blk" + std::to_string(i), cfg_.model_dim, 2 * cfg_.model_dim, rng));
  }
  audio_.out_w = ps_.add_normal("al.a.out.w", cfg_.model_dim, cfg_.embed_dim, rng, 0.02);
  audio_.out_b = ps_.add("al.a.out.b", 1, cfg_.embed_dim);
  audio_.ln_g = ps_.add_ones("al.a.ln.g", 1, cfg_.embed_dim);
  audio_.ln_b = ps_.add("al.a.ln.b", 1, cfg_.embed_dim);

  motion_.proj_w = ps_.add_normal("al.m.proj.w", cfg_.channels, cfg_.model_dim, rng, 0.02);
  motion_.proj_b = ps_.add("al.m.proj.b", 1, cfg_.model_dim);
  for (int i = 0; i < cfg_.motion_blocks; ++i) {
    motion_.blocks.push_back(
        nn::make_block(ps_, "al.m.blk" + std::to_string(i), cfg_.model_dim, 2 * cfg_.model_dim, rng));
  }
  motion_.out_w = ps_.add_normal("al.m.out.w", cfg_.model_dim, cfg_.embed_dim, rng, 0.02);
  motion_.out_b = ps_.add("al.m.out.b", 1, cfg_.embed_dim);
  motion_.ln_g = ps_.add_ones("al.m.ln.g", 1, cfg_.embed_dim);
  motion_.ln_b = ps_.add("al.m.ln.b", 1, cfg_.embed_dim);

  logtau_ = ps_.add("al.logtau", 1, 1);
  logtau_->v[0] = std::log(cfg_.temp_init);
  adam_.lr = cfg_.lr;
}

double Aligner::temperature() const { return std::exp(logtau_->v[0]); }

nn::TP Aligner::tower_tail(nn::Graph& g, const Tower& t, nn::TP x, int batch, int time) const {
  for (const nn::Block& blk : t.blocks) {
    x = nn::apply_block(g, blk, x, batch, time, cfg_.heads, 0, /*causal=*/false, /*alibi=*/false);
  }
  x = g.pool_rows(x, time);
  x = g.layernorm(g.linear(x, t.out_w, t.out_b), t.ln_g, t.ln_b);
  return g.l2_normalize_rows(x);
}

nn::TP Aligner::audio_forward(nn::Graph& g, const std::vector<gen::AudioTokens>& batch) const {
  if (batch.empty()) raise(Err::DimensionError, "empty batch");
  const int steps = batch[0].steps;
  std::vector<int> ids;
  for (const gen::AudioTokens& a : batch) {
    if (a.steps != steps || a.layers != cfg_.audio_layers) {
      raise(Err::DimensionError, "audio windows in a batch must share shape");
    }
    for (int t = 0; t < steps; ++t) {
      for (int l = 0; l < a.layers; ++l) {
        const int id = a.at(t, l);
        if (id >= cfg_.audio_vocab) raise(Err::TokenError, "audio id outside codec range");
        ids.push_back(l * cfg_.audio_vocab + id);
      }
    }
  }
  const int time = steps * cfg_.audio_layers;
  nn::TP x = g.embed(audio_embed_, ids);
  x = with_positions(g, x, int(batch.size()), time, cfg_.model_dim);
  return tower_tail(g, audio_, x, int(batch.size()), time);
}

nn::TP Aligner::motion_forward(nn::Graph& g, const std::vector<kin::Clip>& batch) const {
  if (batch.empty()) raise(Err::DimensionError, "empty batch");
  const int T = batch[0].frames;
  const int B = int(batch.size());
  std::vector<double> xall;
  xall.reserve(size_t(B) * T * cfg_.channels);
  for (const kin::Clip& c : batch) {
    if (c.frames != T || c.channels != cfg_.channels) {
      raise(Err::DimensionError, "clips in a batch must share shape");
    }
    xall.insert(xall.end(), c.data.begin(), c.data.end());
  }
  nn::TP x = g.linear(g.constant(xall, B * T, cfg_.channels), motion_.proj_w, motion_.proj_b);
  x = with_positions(g, x, B, T, cfg_.model_dim);
  return tower_tail(g, motion_, x, B, T);
}

std::vector<std::vector<double>> Aligner::embed_audio(
    const std::vector<gen::AudioTokens>& batch) const {
  nn::Graph g;
  nn::TP e = audio_forward(g, batch);
  std::vector<std::vector<double>> out(batch.size());
  for (size_t i = 0; i < batch.size(); ++i) {
    out[i].assign(e->v.begin() + i * size_t(cfg_.embed_dim),
                  e->v.begin() + (i + 1) * size_t(cfg_.embed_dim));
  }
  return out;
}

std::vector<std::vector<double>> Aligner::embed_motion(const std::vector<kin::Clip>& batch) const {
  nn::Graph g;
  nn::TP e = motion_forward(g, batch);
  std::vector<std::vector<double>> out(batch.size());
  for (size_t i = 0; i < batch.size(); ++i) {
    out[i].assign(e->v.begin() + i * size_t(cfg_.embed_dim),
                  e->v.begin() + (i + 1) * size_t(cfg_.embed_dim));
  }
  return out;
}

double Aligner::train_step(const std::vector<gen::AudioTokens>& audio,
                           const std::vector<kin::Clip>& motion,
                           const std::vector<std::vector<int>>& positives) {
  if (audio.empty() || audio.size() != motion.size()) {
    raise(Err::DimensionError, "audio and motion counts differ");
  }
  check_positive_sets(positives, audio.size());
  const std::vector<std::vector<int>> rev = transpose_sets(positives);
  for (const std::vector<int>& s : rev) {
    if (s.empty()) raise(Err::LabelError, "item is nobody's positive");
  }

  nn::Graph g;
  nn::TP A = audio_forward(g, audio);
  nn::TP V = motion_forward(g, motion);
  nn::TP S = g.mul_scalar_node(g.matmul_nt(A, V), g.exp_(logtau_));
  nn::TP loss = g.add_scaled(g.soft_ce(S, soft_labels(positives)), 0.5,
                             g.soft_ce(g.transpose(S), soft_labels(rev)), 0.5);
  if (!std::isfinite(loss->v[0])) raise(Err::NumericalError, "non-finite contrastive loss");
  ps_.zero_grad();
  g.backward(loss);
  ps_.adam_step(adam_);
  return loss->v[0];
}

}  // namespace mstream::reward
