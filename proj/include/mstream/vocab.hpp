// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "mstream/errors.hpp"

namespace mstream::gen {

// Audio token stream from the toy codec: steps x layers indices.
struct AudioTokens {
  int steps = 0, layers = 0, vocab = 0;
  std::vector<uint16_t> idx;

  uint16_t at(int t, int l) const { return idx[size_t(t) * layers + l]; }
  uint16_t& at(int t, int l) { return idx[size_t(t) * layers + l]; }
};

enum class TokenKind { special, audio, motion };

// What a unified-vocabulary id means.
struct TokenInfo {
  TokenKind kind = TokenKind::special;
  int special = -1;  // index into {BOS, SEP, EX_START, EX_END, PAD}
  int layer = -1;    // audio layer or motion RVQ layer
  int part = -1;     // motion body part
  int index = -1;    // raw id within its sub-vocabulary
};

// Unified id space: specials, then per-layer audio ranges, then one motion
// range per (RVQ layer, body part). All ranges are disjoint by construction;
// describe() and the encoders round-trip every id.
struct VocabLayout {
  int audio_layers = 2;
  int audio_vocab = 24;  // per audio layer
  int motion_layers = 6;
  int parts = 3;
  int codebook = 64;  // per (layer, part)

  static constexpr int BOS = 0, SEP = 1, EX_START = 2, EX_END = 3, PAD = 4;
  static constexpr int num_special = 5;

  int audio_offset(int layer) const { return num_special + layer * audio_vocab; }
  int motion_offset(int q, int p) const {
    return num_special + audio_layers * audio_vocab + (q * parts + p) * codebook;
  }
  int size() const {
    return num_special + audio_layers * audio_vocab + motion_layers * parts * codebook;
  }

  int encode_audio(int layer, int index) const;
  int encode_motion(int q, int p, int index) const;
  TokenInfo describe(int id) const;  // TokenError for out-of-range ids
  void validate() const;
};

}  // namespace mstream::gen
