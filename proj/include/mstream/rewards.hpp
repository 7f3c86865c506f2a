// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "mstream/corruption.hpp"
#include "mstream/kinematics.hpp"
#include "mstream/nn.hpp"
#include "mstream/rng.hpp"
#include "mstream/vocab.hpp"

namespace mstream::reward {

// Quality supervision calibrated by corruption severity: each (mode, rate)
// row carries the score a clip corrupted that way is trained to receive.
// Rates run 0.1 .. 1.0 in steps of 0.1.
struct QualityScoreTable {
  double ground_truth = 0.97;
  double reconstruction = 0.91;
  std::vector<double> hierarchical;
  std::vector<double> uniform;

  static QualityScoreTable defaults();

  // Target for a corrupted clip; rate must sit on the 0.1 grid.
  double target(corrupt::CorruptionSpec::Mode mode, double rate) const;

  // Scores strictly decrease with the rate within each mode, and uniform
  // corruption never scores above hierarchical at the same rate.
  void validate() const;
};

struct QualityConfig {
  int channels = 0;  // motion feature dimension
  int model_dim = 64;
  int heads = 4;
  int blocks = 4;
  int mlp_hidden = 128;
  int min_frames = 4;
  double lr = 1e-3;

  void validate() const;
};

// Bidirectional encoder over motion frames, mean-pooled into a sigmoid
// head. Scores land in (0, 1) by construction.
class QualityModel {
 public:
  QualityModel(const QualityConfig& cfg, uint64_t seed);

  const QualityConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return ps_; }
  const nn::ParamStore& params() const { return ps_; }

  // TooShort below min_frames; DimensionError on a channel mismatch.
  double score(const kin::Clip& clip) const;

  // One SmoothL1 step toward per-clip targets. Clips in a batch must share
  // frame count and channels.
  double train_step(const std::vector<kin::Clip>& clips, const std::vector<double>& targets);

 private:
  nn::TP forward(nn::Graph& g, const std::vector<const kin::Clip*>& clips) const;

  QualityConfig cfg_;
  nn::ParamStore ps_;
  nn::TP proj_w_, proj_b_, mlp_w1_, mlp_b1_, mlp_w2_, mlp_b2_;
  std::vector<nn::Block> blocks_;
  nn::AdamConfig adam_;
};

// One audio-motion pair in the shared embedding space, rows L2-normalized.
struct EmbeddingPair {
  std::vector<double> audio;
  std::vector<double> motion;
};

// Soft-label InfoNCE over tau-scaled cosine similarities, averaged over the
// audio-to-motion and motion-to-audio directions. positives[i] lists the
// indices counted as matches for item i (every item should list itself);
// each row shares label mass equally over its positives. LabelError on an
// empty positive set, NumericalError on unnormalized embeddings.
double infonce_loss(const std::vector<EmbeddingPair>& batch, double tau,
                    const std::vector<std::vector<int>>& positives);

// Cosine similarity of raw (not necessarily normalized) embeddings.
// DegenerateEmbedding on a zero vector.
double alignment_reward(const std::vector<double>& audio, const std::vector<double>& motion);

struct RetrievalStats {
  double r1 = 0, r3 = 0, r5 = 0, r10 = 0;  // percentages
  double medr = 0;                         // median 1-based rank
  double mrr = 0;                          // mean reciprocal rank
};

struct RetrievalReport {
  RetrievalStats a2m, m2a;
};

// Ranks every query against all candidates by cosine similarity, ties
// broken toward the lower index; row i of each set is ground-truth matched
// with row i of the other. DimensionError on count or width mismatch.
RetrievalReport retrieval_eval(const std::vector<std::vector<double>>& audio,
                               const std::vector<std::vector<double>>& motion);

struct AlignerConfig {
  int audio_vocab = 24;  // toy codec ids per layer
  int audio_layers = 2;
  int channels = 0;  // motion feature dimension
  int embed_dim = 32;
  int model_dim = 64;
  int heads = 4;
  int motion_blocks = 4;
  int audio_blocks = 2;
  double temp_init = 1.0 / 0.07;
  double lr = 1e-3;

  void validate() const;
};

// Two-tower contrastive model: a token encoder over toy-codec audio and a
// frame encoder over motion, projected into one space and trained with the
// bidirectional soft-label InfoNCE above. The temperature is exp(theta),
// learnable and always positive.
class Aligner {
 public:
  Aligner(const AlignerConfig& cfg, uint64_t seed);

  const AlignerConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return ps_; }
  const nn::ParamStore& params() const { return ps_; }
  double temperature() const;

  // Normalized embeddings, one row per item. Items must share shape.
  std::vector<std::vector<double>> embed_audio(const std::vector<gen::AudioTokens>& batch) const;
  std::vector<std::vector<double>> embed_motion(const std::vector<kin::Clip>& batch) const;

  // One optimizer step; returns the loss. positives as in infonce_loss.
  double train_step(const std::vector<gen::AudioTokens>& audio,
                    const std::vector<kin::Clip>& motion,
                    const std::vector<std::vector<int>>& positives);

 private:
  struct Tower {
    std::vector<nn::Block> blocks;
    nn::TP proj_w, proj_b, out_w, out_b, ln_g, ln_b;
  };
  nn::TP audio_forward(nn::Graph& g, const std::vector<gen::AudioTokens>& batch) const;
  nn::TP motion_forward(nn::Graph& g, const std::vector<kin::Clip>& batch) const;
  nn::TP tower_tail(nn::Graph& g, const Tower& t, nn::TP x, int batch, int time) const;

  AlignerConfig cfg_;
  nn::ParamStore ps_;
  nn::TP audio_embed_, logtau_;
  Tower audio_, motion_;
  nn::AdamConfig adam_;
};

}  // namespace mstream::reward
