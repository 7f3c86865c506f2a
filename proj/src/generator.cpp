// SPDX-License-Identifier: Apache-2.0
#include "mstream/generator.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace mstream::gen {

void GeneratorConfig::validate() const {
  vocab.validate();
  if (fps < 1 || frames_per_latent < 1 || frames_per_chunk < 1 || audio_rate < 1) {
    raise(Err::ConfigError, "generator rates must be positive");
  }
  if (frames_per_chunk % frames_per_latent != 0) {
    raise(Err::ConfigError, "chunk must hold a whole number of latent steps");
  }
  if ((frames_per_chunk * audio_rate) % fps != 0) {
    raise(Err::ConfigError, "chunk must hold a whole number of audio codec frames");
  }
  const double chunks = window_seconds * fps / frames_per_chunk;
  if (window_seconds <= 0 || std::fabs(chunks - std::round(chunks)) > 1e-9 || chunks < 1) {
    raise(Err::ConfigError, "window must hold a whole positive number of chunks");
  }
  if (gamma <= 0.0 || gamma > 1.0) raise(Err::ConfigError, "layer decay must lie in (0, 1]");
  if (blocks < 1 || heads < 1 || model_dim < 1 || model_dim % heads != 0) {
    raise(Err::ConfigError, "model shape invalid");
  }
  if (lr <= 0.0) raise(Err::ConfigError, "learning rate must be positive");
}

namespace {

void check_audio(const GeneratorConfig& cfg, const AudioTokens& audio) {
  if (audio.layers != cfg.vocab.audio_layers) {
    raise(Err::DimensionError, "audio layer count does not match the layout");
  }
  if (audio.idx.size() != size_t(audio.steps) * audio.layers) {
    raise(Err::DimensionError, "audio index buffer does not match steps x layers");
  }
  for (uint16_t id : audio.idx) {
    if (int(id) >= cfg.vocab.audio_vocab) raise(Err::TokenError, "audio id outside codec range");
  }
}

void check_grid_ids(const GeneratorConfig& cfg, const tok::TokenGrid& grid) {
  if (grid.layers != cfg.vocab.motion_layers || grid.parts != cfg.vocab.parts ||
      grid.codebook != cfg.vocab.codebook) {
    raise(Err::DimensionError, "motion grid shape does not match the layout");
  }
  if (grid.idx.size() != size_t(grid.steps) * grid.layers * grid.parts) {
    raise(Err::DimensionError, "motion grid buffer does not match steps x layers x parts");
  }
  for (uint16_t id : grid.idx) {
    if (int(id) >= cfg.vocab.codebook) raise(Err::TokenError, "motion id outside codebook");
  }
}

void check_exemplar(const GeneratorConfig& cfg, const tok::TokenGrid& ex) {
  if (ex.layers != 1 || ex.parts != cfg.vocab.parts || ex.codebook != cfg.vocab.codebook) {
    raise(Err::DimensionError, "exemplar must be a first-level grid over all parts");
  }
  if (ex.idx.size() != size_t(ex.steps) * ex.parts) {
    raise(Err::DimensionError, "exemplar buffer does not match steps x parts");
  }
  for (uint16_t id : ex.idx) {
    if (int(id) >= cfg.vocab.codebook) raise(Err::TokenError, "exemplar id outside codebook");
  }
}

void push_special(SequencePack& pack, int id) {
  pack.ids.push_back(id);
  SegInfo seg;
  seg.kind = TokenKind::special;
  pack.segs.push_back(seg);
}

}  // namespace

SequencePack pack_sequence(const GeneratorConfig& cfg, const AudioTokens& audio,
                           const tok::TokenGrid& grid, const tok::TokenGrid* exemplar) {
  cfg.validate();
  check_audio(cfg, audio);
  check_grid_ids(cfg, grid);
  // Equal durations: audio.steps / audio_rate == grid.steps * F / fps.
  if (int64_t(audio.steps) * cfg.fps != int64_t(grid.steps) * cfg.frames_per_latent * cfg.audio_rate) {
    raise(Err::AlignmentError, "audio and motion cover different durations");
  }
  const int sc = cfg.chunk_latent_steps();
  const int ac = cfg.audio_frames_per_chunk();
  if (grid.steps % sc != 0 || audio.steps % ac != 0) {
    raise(Err::AlignmentError, "window does not divide into whole chunks");
  }
  const int chunks = grid.steps / sc;
  if (audio.steps / ac != chunks) raise(Err::AlignmentError, "audio and motion chunk counts differ");

  SequencePack pack;
  pack.chunks = chunks;
  push_special(pack, VocabLayout::BOS);
  if (exemplar != nullptr && exemplar->steps > 0) {
    check_exemplar(cfg, *exemplar);
    push_special(pack, VocabLayout::EX_START);
    for (int t = 0; t < exemplar->steps; ++t) {
      for (int p = 0; p < cfg.vocab.parts; ++p) {
        pack.ids.push_back(cfg.vocab.encode_motion(0, p, exemplar->at(t, 0, p)));
        SegInfo seg;
        seg.kind = TokenKind::motion;
        seg.layer = 0;
        seg.part = p;
        seg.step = t;
        seg.exemplar = true;
        pack.segs.push_back(seg);
      }
    }
    push_special(pack, VocabLayout::EX_END);
  }
  pack.prefix = int(pack.ids.size());

  for (int c = 0; c < chunks; ++c) {
    for (int f = 0; f < ac; ++f) {
      for (int l = 0; l < cfg.vocab.audio_layers; ++l) {
        const int frame = c * ac + f;
        pack.ids.push_back(cfg.vocab.encode_audio(l, audio.at(frame, l)));
        SegInfo seg;
        seg.kind = TokenKind::audio;
        seg.layer = l;
        seg.step = frame;
        pack.segs.push_back(seg);
      }
    }
    push_special(pack, VocabLayout::SEP);
    for (int t = 0; t < sc; ++t) {
      const int step = c * sc + t;
      for (int q = 0; q < cfg.vocab.motion_layers; ++q) {
        for (int p = 0; p < cfg.vocab.parts; ++p) {
          pack.ids.push_back(cfg.vocab.encode_motion(q, p, grid.at(step, q, p)));
          SegInfo seg;
          seg.kind = TokenKind::motion;
          seg.layer = q;
          seg.part = p;
          seg.step = step;
          pack.segs.push_back(seg);
        }
      }
    }
  }
  return pack;
}

Unpacked unpack_sequence(const GeneratorConfig& cfg, const SequencePack& pack) {
  if (pack.ids.size() != pack.segs.size()) {
    raise(Err::DimensionError, "pack ids and annotations differ in length");
  }
  Unpacked out;
  const int sc = cfg.chunk_latent_steps();
  const int ac = cfg.audio_frames_per_chunk();
  out.audio.steps = pack.chunks * ac;
  out.audio.layers = cfg.vocab.audio_layers;
  out.audio.vocab = cfg.vocab.audio_vocab;
  out.audio.idx.assign(size_t(out.audio.steps) * out.audio.layers, 0);
  out.grid.steps = pack.chunks * sc;
  out.grid.layers = cfg.vocab.motion_layers;
  out.grid.parts = cfg.vocab.parts;
  out.grid.codebook = cfg.vocab.codebook;
  out.grid.idx.assign(size_t(out.grid.steps) * out.grid.layers * out.grid.parts, 0);

  int ex_ids = 0;
  for (size_t i = 0; i < pack.ids.size(); ++i) {
    if (pack.segs[i].exemplar) ++ex_ids;
  }
  out.exemplar.steps = ex_ids / std::max(1, cfg.vocab.parts);
  out.exemplar.layers = ex_ids > 0 ? 1 : 0;
  out.exemplar.parts = cfg.vocab.parts;
  out.exemplar.codebook = cfg.vocab.codebook;
  out.exemplar.idx.assign(size_t(ex_ids), 0);

  for (size_t i = 0; i < pack.ids.size(); ++i) {
    const SegInfo& seg = pack.segs[i];
    const TokenInfo info = cfg.vocab.describe(pack.ids[i]);
    if (seg.kind == TokenKind::special) continue;
    if (seg.kind == TokenKind::audio) {
      if (info.kind != TokenKind::audio || info.layer != seg.layer) {
        raise(Err::TokenError, "audio annotation does not match the id");
      }
      out.audio.at(seg.step, seg.layer) = uint16_t(info.index);
      continue;
    }
    if (info.kind != TokenKind::motion || info.layer != seg.layer || info.part != seg.part) {
      raise(Err::TokenError, "motion annotation does not match the id");
    }
    if (seg.exemplar) {
      out.exemplar.at(seg.step, 0, seg.part) = uint16_t(info.index);
    } else {
      out.grid.at(seg.step, seg.layer, seg.part) = uint16_t(info.index);
    }
  }
  return out;
}

int sample_masked(const std::vector<double>& logits, int lo, int hi, double temperature,
                  int top_k, Rng& rng) {
  if (lo < 0 || hi > int(logits.size()) || lo >= hi) {
    raise(Err::MaskError, "segment mask selects no ids");
  }
  if (top_k < 1) raise(Err::ConfigError, "top_k must be at least 1");
  int best = lo;
  for (int i = lo + 1; i < hi; ++i) {
    if (logits[size_t(i)] > logits[size_t(best)]) best = i;
  }
  if (!std::isfinite(logits[size_t(best)])) raise(Err::MaskError, "all candidate logits masked");
  if (temperature <= 0.0 || top_k == 1) return best;

  std::vector<int> order;
  order.reserve(size_t(hi - lo));
  for (int i = lo; i < hi; ++i) order.push_back(i);
  const int k = std::min<int>(top_k, hi - lo);
  std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
    if (logits[size_t(a)] != logits[size_t(b)]) return logits[size_t(a)] > logits[size_t(b)];
    return a < b;
  });
  const double zmax = logits[size_t(order[0])];
  std::vector<double> cum(static_cast<size_t>(k));
  double sum = 0.0;
  for (int i = 0; i < k; ++i) {
    sum += std::exp((logits[size_t(order[size_t(i)])] - zmax) / temperature);
    cum[size_t(i)] = sum;
  }
  const double u = rng.uniform() * sum;
  for (int i = 0; i < k; ++i) {
    if (u < cum[size_t(i)]) return order[size_t(i)];
  }
  return order[size_t(k - 1)];
}

Generator::Generator(const GeneratorConfig& cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const int V = cfg_.vocab.size();
  embed_ = ps_.add_normal("embed", V, cfg_.model_dim, rng, 0.02);
  for (int i = 0; i < cfg_.blocks; ++i) {
    blocks_.push_back(
        nn::make_block(ps_, "blk" + std::to_string(i), cfg_.model_dim, 2 * cfg_.model_dim, rng));
  }
  // Zero head: untrained per-position CE is exactly log(vocab).
  head_w_ = ps_.add("head.w", cfg_.model_dim, V);
  head_b_ = ps_.add("head.b", 1, V);

  const int Q = cfg_.vocab.motion_layers;
  double norm = 0.0;
  for (int q = 0; q < Q; ++q) norm += std::pow(cfg_.gamma, q);
  layer_weight_.resize(size_t(Q));
  for (int q = 0; q < Q; ++q) layer_weight_[size_t(q)] = std::pow(cfg_.gamma, q) * Q / norm;

  adam_.lr = cfg_.lr;
  set_phase(cfg_.freeze_backbone, cfg_.exemplar_enabled);
}

void Generator::set_phase(bool freeze_backbone, bool exemplar_enabled) {
  cfg_.freeze_backbone = freeze_backbone;
  cfg_.exemplar_enabled = exemplar_enabled;
  ps_.set_frozen("blk", freeze_backbone);
}

nn::TP Generator::forward(nn::Graph& g, const std::vector<int>& ids, int batch, int time) const {
  if (ids.size() != size_t(batch) * time) raise(Err::DimensionError, "ids do not fill batch x time");
  nn::TP x = g.embed(embed_, ids);
  const std::vector<double> pos = nn::sinusoid_positions(time, cfg_.model_dim);
  std::vector<double> tiled(size_t(batch) * time * cfg_.model_dim);
  for (int b = 0; b < batch; ++b) {
    std::copy(pos.begin(), pos.end(), tiled.begin() + size_t(b) * pos.size());
  }
  x = g.add_const(x, tiled);
  for (const nn::Block& blk : blocks_) {
    x = nn::apply_block(g, blk, x, batch, time, cfg_.heads, 0, true, false);
  }
  return g.linear(x, head_w_, head_b_);
}

LossBreakdown Generator::train_step(const std::vector<SequencePack>& batch,
                                    const CorruptionSpec& corr) {
  if (batch.empty()) raise(Err::DimensionError, "empty batch");
  corr.validate();
  const int time = int(batch[0].ids.size());
  for (const SequencePack& p : batch) {
    if (int(p.ids.size()) != time) raise(Err::DimensionError, "packs in a batch must align");
  }
  const int B = int(batch.size());
  const int Q = cfg_.vocab.motion_layers;

  Rng corr_rng(corr.seed);
  std::vector<int> ids;
  std::vector<int> targets;
  std::vector<double> weights;
  ids.reserve(size_t(B) * time);
  targets.reserve(size_t(B) * time);
  weights.reserve(size_t(B) * time);
  for (const SequencePack& p : batch) {
    // Context corruption: the model reads corrupted motion ids while the
    // targets keep the clean grid. The exemplar prefix is control input,
    // not motion context, and stays clean.
    CorruptionSpec item = corr;
    item.seed = corr_rng.next_u64();
    const tok::TokenGrid clean = unpack_sequence(cfg_, p).grid;
    const tok::TokenGrid dirty = item.mode == CorruptionSpec::Mode::uniform
                                     ? corrupt::corrupt_uniform(clean, item)
                                     : corrupt::corrupt_hierarchical(clean, item);
    for (size_t i = 0; i < p.ids.size(); ++i) {
      const SegInfo& seg = p.segs[i];
      if (seg.kind == TokenKind::motion && !seg.exemplar) {
        ids.push_back(cfg_.vocab.encode_motion(seg.layer, seg.part,
                                               dirty.at(seg.step, seg.layer, seg.part)));
      } else {
        ids.push_back(p.ids[i]);
      }
      if (i + 1 < p.ids.size()) {
        const SegInfo& nxt = p.segs[i + 1];
        targets.push_back(p.ids[i + 1]);
        weights.push_back(nxt.kind == TokenKind::motion && !nxt.exemplar
                              ? layer_weight_[size_t(nxt.layer)]
                              : 0.0);
      } else {
        targets.push_back(0);
        weights.push_back(0.0);
      }
    }
  }

  nn::Graph g;
  nn::TP logits = forward(g, ids, B, time);
  std::vector<double> per_row;
  nn::TP loss = g.ce_loss(logits, targets, weights, &per_row);
  if (!std::isfinite(loss->v[0])) raise(Err::NumericalError, "non-finite generator loss");
  ps_.zero_grad();
  g.backward(loss);
  ps_.adam_step(adam_);

  LossBreakdown out;
  out.total = loss->v[0];
  out.per_layer.assign(size_t(Q), 0.0);
  std::vector<int> counts(size_t(Q), 0);
  size_t row = 0;
  for (const SequencePack& p : batch) {
    for (size_t i = 0; i < p.ids.size(); ++i, ++row) {
      if (i + 1 < p.ids.size()) {
        const SegInfo& nxt = p.segs[i + 1];
        if (nxt.kind == TokenKind::motion && !nxt.exemplar) {
          out.per_layer[size_t(nxt.layer)] += per_row[row];
          ++counts[size_t(nxt.layer)];
          ++out.motion_positions;
        }
      }
    }
  }
  for (int q = 0; q < Q; ++q) {
    if (counts[size_t(q)] > 0) out.per_layer[size_t(q)] /= counts[size_t(q)];
  }
  return out;
}

GenSession::GenSession(const Generator& gen, uint64_t seed, const tok::TokenGrid* exemplar)
    : gen_(gen), rng_(seed) {
  const GeneratorConfig& cfg = gen_.config();
  ids_.push_back(VocabLayout::BOS);
  segs_.push_back(SegInfo{});
  if (exemplar != nullptr && exemplar->steps > 0) {
    check_exemplar(cfg, *exemplar);
    ids_.push_back(VocabLayout::EX_START);
    segs_.push_back(SegInfo{});
    for (int t = 0; t < exemplar->steps; ++t) {
      for (int p = 0; p < cfg.vocab.parts; ++p) {
        ids_.push_back(cfg.vocab.encode_motion(0, p, exemplar->at(t, 0, p)));
        SegInfo seg;
        seg.kind = TokenKind::motion;
        seg.layer = 0;
        seg.part = p;
        seg.step = t;
        seg.exemplar = true;
        segs_.push_back(seg);
      }
    }
    ids_.push_back(VocabLayout::EX_END);
    segs_.push_back(SegInfo{});
  }
  prefix_ = int(ids_.size());
}

tok::TokenGrid GenSession::step(const AudioTokens& chunk_audio, double temperature, int top_k) {
  const GeneratorConfig& cfg = gen_.config();
  check_audio(cfg, chunk_audio);
  if (chunk_audio.steps != cfg.audio_frames_per_chunk()) {
    raise(Err::AlignmentError, "audio chunk must cover exactly one motion chunk");
  }

  // Left-truncate whole chunks so the window (exclusive of the pinned
  // prefix) never exceeds its configured span after this chunk arrives.
  const int per_chunk = cfg.chunk_ids();
  while (int(ids_.size()) - prefix_ >= cfg.window_chunks() * per_chunk) {
    ids_.erase(ids_.begin() + prefix_, ids_.begin() + prefix_ + per_chunk);
    segs_.erase(segs_.begin() + prefix_, segs_.begin() + prefix_ + per_chunk);
  }

  for (int f = 0; f < chunk_audio.steps; ++f) {
    for (int l = 0; l < cfg.vocab.audio_layers; ++l) {
      ids_.push_back(cfg.vocab.encode_audio(l, chunk_audio.at(f, l)));
      SegInfo seg;
      seg.kind = TokenKind::audio;
      seg.layer = l;
      seg.step = audio_steps_ + f;
      segs_.push_back(seg);
    }
  }
  audio_steps_ += chunk_audio.steps;
  ids_.push_back(VocabLayout::SEP);
  segs_.push_back(SegInfo{});

  tok::TokenGrid out;
  out.steps = cfg.chunk_latent_steps();
  out.layers = cfg.vocab.motion_layers;
  out.parts = cfg.vocab.parts;
  out.codebook = cfg.vocab.codebook;
  out.idx.assign(size_t(out.steps) * out.layers * out.parts, 0);
  std::vector<double> row(size_t(cfg.vocab.size()));
  for (int t = 0; t < out.steps; ++t) {
    for (int q = 0; q < out.layers; ++q) {
      for (int p = 0; p < out.parts; ++p) {
        nn::Graph g;
        const int time = int(ids_.size());
        nn::TP logits = gen_.forward(g, ids_, 1, time);
        for (int j = 0; j < cfg.vocab.size(); ++j) row[size_t(j)] = logits->at(time - 1, j);
        const int lo = cfg.vocab.motion_offset(q, p);
        const int id = sample_masked(row, lo, lo + cfg.vocab.codebook, temperature, top_k, rng_);
        out.at(t, q, p) = uint16_t(id - lo);
        ids_.push_back(id);
        SegInfo seg;
        seg.kind = TokenKind::motion;
        seg.layer = q;
        seg.part = p;
        seg.step = motion_steps_ + t;
        segs_.push_back(seg);
      }
    }
  }
  motion_steps_ += out.steps;
  return out;
}

tok::TokenGrid GenSession::generate(const AudioTokens& audio, double temperature, int top_k) {
  const GeneratorConfig& cfg = gen_.config();
  check_audio(cfg, audio);
  const int ac = cfg.audio_frames_per_chunk();
  if (audio.steps % ac != 0) raise(Err::AlignmentError, "audio does not divide into whole chunks");
  const int chunks = audio.steps / ac;

  tok::TokenGrid all;
  all.steps = chunks * cfg.chunk_latent_steps();
  all.layers = cfg.vocab.motion_layers;
  all.parts = cfg.vocab.parts;
  all.codebook = cfg.vocab.codebook;
  all.idx.assign(size_t(all.steps) * all.layers * all.parts, 0);
  AudioTokens chunk;
  chunk.layers = audio.layers;
  chunk.vocab = audio.vocab;
  chunk.steps = ac;
  for (int c = 0; c < chunks; ++c) {
    chunk.idx.assign(audio.idx.begin() + size_t(c) * ac * audio.layers,
                     audio.idx.begin() + size_t(c + 1) * ac * audio.layers);
    const tok::TokenGrid part = step(chunk, temperature, top_k);
    for (int t = 0; t < part.steps; ++t) {
      for (int q = 0; q < part.layers; ++q) {
        for (int p = 0; p < part.parts; ++p) {
          all.at(c * part.steps + t, q, p) = part.at(t, q, p);
        }
      }
    }
  }
  return all;
}

}  // namespace mstream::gen
