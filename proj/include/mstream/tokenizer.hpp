// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <memory>
#include <string>
#include <vector>

#include "mstream/kinematics.hpp"
#include "mstream/nn.hpp"
#include "mstream/rvq.hpp"

namespace mstream::tok {

struct TokenizerConfig {
  int frames_per_latent = 4;  // temporal downsample ratio
  int latent_dim = 32;
  int model_dim = 64;
  int heads = 4;
  int enc_blocks = 2;
  int dec_blocks = 2;
  int lookback = 32;    // attention window, frames for the encoder, steps for the decoder
  int rvq_layers = 2;   // Q
  int codebook = 64;    // K per layer and body part
  double eta = 0.5;     // commitment weight
  double ema_decay = 0.99;
  bool pad_incomplete = true;  // repeat-first-frame padding for odd lengths
  kin::AuxWeights aux;

  void validate() const;
};

// Anatomical partition: named channel subsets covering the clip layout.
struct PartSpec {
  std::string name;
  std::vector<int> channels;
};

// upper / lower / hands split; root channels ride with the lower body.
std::vector<PartSpec> default_partition(const kin::Skeleton& sk);

// Token indices for one clip: steps x layers x parts.
struct TokenGrid {
  int steps = 0, layers = 0, parts = 0, codebook = 0;
  std::vector<uint16_t> idx;

  TokenGrid() = default;
  TokenGrid(int n, int q, int p, int k)
      : steps(n), layers(q), parts(p), codebook(k), idx(size_t(n) * q * p, 0) {}
  uint16_t& at(int t, int q, int p) { return idx[(size_t(t) * layers + q) * parts + p]; }
  uint16_t at(int t, int q, int p) const { return idx[(size_t(t) * layers + q) * parts + p]; }
};

struct TokenizerLoss {
  double recon = 0, commit = 0, aux = 0, total = 0;
};

// Streaming encoder/decoder state: rolling windows plus absolute progress so
// chunked processing reproduces whole-clip processing bit for bit.
struct EncodeState {
  std::vector<double> frames;  // last window_cap frames, channel-major rows
  long total_frames = 0;
};
struct DecodeState {
  std::vector<double> latents;  // last window_cap quantized latents per part, concatenated rows
  long total_steps = 0;
};

class Tokenizer {
 public:
  Tokenizer(const TokenizerConfig& cfg, const kin::Skeleton& sk, uint64_t seed);
  ~Tokenizer();

  const TokenizerConfig& config() const { return cfg_; }
  const kin::Skeleton& skeleton() const { return sk_; }
  const std::vector<PartSpec>& parts() const { return parts_; }
  nn::ParamStore& params() { return ps_; }
  const nn::ParamStore& params() const { return ps_; }
  rvq::Rvq& quantizer(int part) { return *rvq_[part]; }
  const rvq::Rvq& quantizer(int part) const { return *rvq_[part]; }

  // One optimizer step over a batch of equal-length windows. Quantization
  // uses straight-through; codebooks update by EMA outside the tape.
  TokenizerLoss train_step(const std::vector<kin::Clip>& windows, const nn::AdamConfig& opt);

  // Builds the training loss without stepping. With bypass_quant the
  // quantizer is skipped (decoder sees raw latents and the commitment target
  // is the quantized value of the current latents, held constant), making
  // the whole loss differentiable for gradient checks.
  TokenizerLoss build_loss(nn::Graph& g, const std::vector<kin::Clip>& windows,
                           bool bypass_quant, nn::TP* loss_out);

  // Refreshes dead codebook entries from a pool of recent latents.
  int end_epoch(Rng& rng);

  // Whole-clip encode. Processes the clip through the same per-step machine
  // as the streaming path, so encode(clip) equals chunked encoding exactly.
  // Odd lengths are front-padded by repeating the first frame, or raise
  // PaddingRequired when padding is disabled.
  TokenGrid encode(const kin::Clip& clip) const;
  kin::Clip decode(const TokenGrid& grid) const;

  // Streaming interface. Chunks must be multiples of frames_per_latent.
  EncodeState encode_begin() const;
  TokenGrid encode_step(EncodeState& st, const kin::Clip& chunk) const;
  DecodeState decode_begin() const;
  kin::Clip decode_step(DecodeState& st, const TokenGrid& chunk) const;

  // Pre-quantization latents, parts concatenated: steps x (P * latent_dim).
  // Batched forward, intended for feature extraction, not for streaming.
  std::vector<double> encode_latents(const kin::Clip& clip) const;

  double mpjpe(const kin::Clip& a, const kin::Clip& b) const;

 private:
  struct PartNet;
  nn::TP encoder_forward(nn::Graph& g, const PartNet& net, nn::TP x, int batch, int time) const;
  nn::TP decoder_forward(nn::Graph& g, const PartNet& net, nn::TP z, int batch, int steps) const;
  std::vector<double> encode_last_step(const PartNet& net, const std::vector<double>& window,
                                       int frames, int part) const;
  std::vector<double> decode_last_step(const PartNet& net, const std::vector<double>& latents,
                                       int steps, int part) const;
  kin::Clip pad_clip(const kin::Clip& clip) const;
  // Frame cap is rounded down to whole latent steps so pooled windows stay
  // aligned; both caps cover the stacked receptive field of the blocks.
  int window_cap_frames() const {
    int f = cfg_.frames_per_latent;
    return std::max(f, 2 * cfg_.lookback / f * f);
  }
  int window_cap_steps() const { return 2 * cfg_.lookback; }

  TokenizerConfig cfg_;
  kin::Skeleton sk_;
  std::vector<PartSpec> parts_;
  nn::ParamStore ps_;
  std::vector<std::unique_ptr<rvq::Rvq>> rvq_;
  std::vector<std::unique_ptr<PartNet>> nets_;
  std::vector<std::vector<double>> latent_pool_;  // per part, for dead-code refresh
  std::vector<rvq::QuantizeResult> last_qr_;      // from the latest build_loss
  std::vector<std::vector<double>> last_z_;
};

}  // namespace mstream::tok
