// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "mstream/corruption.hpp"
#include "mstream/nn.hpp"
#include "mstream/rng.hpp"
#include "mstream/tokenizer.hpp"
#include "mstream/vocab.hpp"

namespace mstream::gen {

using corrupt::CorruptionSpec;

// Decoder-only model over the unified vocabulary. A window is a chunk-wise
// interleaving [BOS][exemplar?] ([audio chunk][SEP][motion chunk])xC: block
// layout would let motion attend to future audio, breaking streaming
// causality. Audio arrives at audio_rate x audio_layers ids per second,
// motion at fps/frames_per_latent latent steps per second, each step
// flattened timestep-major then layer then part.
struct GeneratorConfig {
  VocabLayout vocab;
  double window_seconds = 4.0;
  int fps = 30;
  int frames_per_latent = 4;
  int frames_per_chunk = 8;
  int audio_rate = 75;  // audio codec frames per second
  double gamma = 0.8;   // per-layer loss decay
  int blocks = 4;
  int heads = 4;
  int model_dim = 128;
  double lr = 1e-3;
  // Curriculum phases: 1 = embeddings only (backbone frozen), 2 = full
  // training, 3 = full training with exemplar prefixes enabled.
  bool freeze_backbone = false;
  bool exemplar_enabled = false;

  int chunk_latent_steps() const { return frames_per_chunk / frames_per_latent; }
  int audio_frames_per_chunk() const { return frames_per_chunk * audio_rate / fps; }
  int chunk_motion_ids() const {
    return chunk_latent_steps() * vocab.motion_layers * vocab.parts;
  }
  int chunk_audio_ids() const { return audio_frames_per_chunk() * vocab.audio_layers; }
  int chunk_ids() const { return chunk_audio_ids() + 1 + chunk_motion_ids(); }
  int window_chunks() const {
    return int(window_seconds * fps / frames_per_chunk + 0.5);
  }
  int window_audio_ids() const { return window_chunks() * chunk_audio_ids(); }
  int window_motion_ids() const { return window_chunks() * chunk_motion_ids(); }

  void validate() const;  // ConfigError on inconsistent rates
};

// Per-position annotation of a packed sequence.
struct SegInfo {
  TokenKind kind = TokenKind::special;
  int layer = -1;  // audio layer or motion RVQ layer
  int part = -1;
  int step = -1;  // latent step (motion), codec frame (audio), or exemplar step
  bool exemplar = false;
};

struct SequencePack {
  std::vector<int> ids;
  std::vector<SegInfo> segs;
  int chunks = 0;
  int prefix = 0;  // BOS + exemplar ids preceding the first chunk
};

// Interleaves one window. The exemplar, when given, is a layers==1 grid of
// first-level codebook ids wrapped in EX_START/EX_END right after BOS.
// AlignmentError when audio and motion cover different durations or do not
// divide into whole chunks.
SequencePack pack_sequence(const GeneratorConfig& cfg, const AudioTokens& audio,
                           const tok::TokenGrid& grid,
                           const tok::TokenGrid* exemplar = nullptr);

struct Unpacked {
  AudioTokens audio;
  tok::TokenGrid grid;
  tok::TokenGrid exemplar;  // steps == 0 when absent
};
Unpacked unpack_sequence(const GeneratorConfig& cfg, const SequencePack& pack);

// Masked categorical sampling over the half-open id range [lo, hi) of one
// logits row. temperature 0 or top_k 1 is argmax; otherwise the top_k ids
// within the range are renormalized at the given temperature.
int sample_masked(const std::vector<double>& logits, int lo, int hi, double temperature,
                  int top_k, Rng& rng);

struct LossBreakdown {
  double total = 0;
  std::vector<double> per_layer;  // mean CE per RVQ layer (unweighted)
  int motion_positions = 0;
};

class Generator {
 public:
  Generator(const GeneratorConfig& cfg, uint64_t seed);

  const GeneratorConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return ps_; }
  const nn::ParamStore& params() const { return ps_; }

  // Teacher-forced step over same-length packs: corrupts context motion ids
  // per the spec, keeps targets clean, applies one optimizer step. Loss is
  // the gamma-weighted mean CE over motion targets (weights normalized to
  // sum to motion_layers across layers); audio and special positions carry
  // no loss. NumericalError on non-finite loss.
  LossBreakdown train_step(const std::vector<SequencePack>& batch, const CorruptionSpec& corr);

  // Forward logits for explicit ids (batch rows of equal time length).
  nn::TP forward(nn::Graph& g, const std::vector<int>& ids, int batch, int time) const;

  // Phase toggles; freezing covers every parameter except embeddings/head.
  void set_phase(bool freeze_backbone, bool exemplar_enabled);

 private:
  GeneratorConfig cfg_;
  nn::ParamStore ps_;
  nn::TP embed_, head_w_, head_b_;
  std::vector<nn::Block> blocks_;
  std::vector<double> layer_weight_;  // gamma^q, normalized
  nn::AdamConfig adam_;
};

// One streaming generation session: push an audio chunk, get the chunk's
// motion ids back. Sessions share frozen weights and never mutate the model.
class GenSession {
 public:
  GenSession(const Generator& gen, uint64_t seed, const tok::TokenGrid* exemplar = nullptr);

  // Generates chunk_latent_steps() x Q x P motion ids conditioned on the
  // chunk's audio. The window is left-truncated whole chunks at a time; the
  // BOS/exemplar prefix is pinned. AlignmentError on a wrong-shape chunk.
  tok::TokenGrid step(const AudioTokens& chunk_audio, double temperature, int top_k);

  // Convenience: splits a long audio stream into chunks and steps through.
  tok::TokenGrid generate(const AudioTokens& audio, double temperature, int top_k);

  const std::vector<int>& ids() const { return ids_; }

 private:
  const Generator& gen_;
  std::vector<int> ids_;
  std::vector<SegInfo> segs_;
  Rng rng_;
  int prefix_ = 0;
  int audio_steps_ = 0;   // global codec frames consumed
  int motion_steps_ = 0;  // global latent steps emitted
};

}  // namespace mstream::gen
