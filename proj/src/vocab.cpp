// SPDX-License-Identifier: Apache-2.0
#include "mstream/vocab.hpp"

namespace mstream::gen {

void VocabLayout::validate() const {
  if (audio_layers < 1 || audio_vocab < 1 || motion_layers < 1 || parts < 1 || codebook < 1) {
    raise(Err::ConfigError, "vocabulary layout requires positive range sizes");
  }
}

int VocabLayout::encode_audio(int layer, int index) const {
  if (layer < 0 || layer >= audio_layers || index < 0 || index >= audio_vocab) {
    raise(Err::TokenError, "audio token outside layout");
  }
  return audio_offset(layer) + index;
}

int VocabLayout::encode_motion(int q, int p, int index) const {
  if (q < 0 || q >= motion_layers || p < 0 || p >= parts || index < 0 || index >= codebook) {
    raise(Err::TokenError, "motion token outside layout");
  }
  return motion_offset(q, p) + index;
}

TokenInfo VocabLayout::describe(int id) const {
  if (id < 0 || id >= size()) raise(Err::TokenError, "id outside the unified vocabulary");
  TokenInfo info;
  if (id < num_special) {
    info.kind = TokenKind::special;
    info.special = id;
    info.index = id;
    return info;
  }
  int rest = id - num_special;
  if (rest < audio_layers * audio_vocab) {
    info.kind = TokenKind::audio;
    info.layer = rest / audio_vocab;
    info.index = rest % audio_vocab;
    return info;
  }
  rest -= audio_layers * audio_vocab;
  info.kind = TokenKind::motion;
  const int cell = rest / codebook;
  info.layer = cell / parts;
  info.part = cell % parts;
  info.index = rest % codebook;
  return info;
}

}  // namespace mstream::gen
