// SPDX-License-Identifier: Apache-2.0
#include "mstream/tokenizer.hpp"

#include <algorithm>
#include <cmath>

namespace mstream::tok {

using nn::Graph;
using nn::TP;

void TokenizerConfig::validate() const {
  if (frames_per_latent < 1) raise(Err::ConfigError, "frames_per_latent >= 1");
  if (model_dim < heads || model_dim % heads != 0) raise(Err::ConfigError, "model_dim % heads");
  if (latent_dim < 1 || enc_blocks < 1 || dec_blocks < 1) raise(Err::ConfigError, "tokenizer shape");
  if (lookback < frames_per_latent) raise(Err::ConfigError, "lookback below one latent step");
  if (eta < 0) raise(Err::ConfigError, "negative commitment weight");
  rvq::RvqConfig rc;
  rc.layers = rvq_layers;
  rc.codebook = codebook;
  rc.dim = latent_dim;
  rc.ema_decay = ema_decay;
  rc.validate();
}

std::vector<PartSpec> default_partition(const kin::Skeleton& sk) {
  // Channel ownership: lower body carries the root channels and the root
  // and spine rotations; hands are split out so they get their own codes.
  std::vector<int> hands, upper, lower;
  for (int j = 0; j < sk.joints(); j++) {
    const std::string& n = sk.names[j];
    bool hand = n.find("hand") != std::string::npos;
    bool up = std::find(sk.upper_joints.begin(), sk.upper_joints.end(), j) != sk.upper_joints.end();
    (hand ? hands : up ? upper : lower).push_back(j);
  }
  auto channels_of = [](const std::vector<int>& joints, bool root_channels) {
    std::vector<int> c;
    if (root_channels) c = {0, 1, 2};
    for (int j : joints)
      for (int k = 0; k < 6; k++) c.push_back(3 + 6 * j + k);
    return c;
  };
  std::vector<PartSpec> parts;
  parts.push_back({"upper", channels_of(upper, false)});
  parts.push_back({"lower", channels_of(lower, true)});
  parts.push_back({"hands", channels_of(hands, false)});
  // Tiny test skeletons may lack a group; drop empty parts rather than fail.
  std::erase_if(parts, [](const PartSpec& p) { return p.channels.empty(); });
  return parts;
}

struct Tokenizer::PartNet {
  TP enc_in_w, enc_in_b;
  std::vector<nn::Block> enc_blocks;
  TP pool_w, pool_b, cat_w1, cat_b1, cat_w2, cat_b2;
  TP dec_in_w, dec_in_b;
  std::vector<nn::Block> dec_blocks;
  TP rep_w, rep_b, exp_w, exp_b, out_w, out_b;
};

Tokenizer::Tokenizer(const TokenizerConfig& cfg, const kin::Skeleton& sk, uint64_t seed)
    : cfg_(cfg), sk_(sk) {
  cfg_.validate();
  sk_.validate();
  parts_ = default_partition(sk_);
  Rng rng(seed);
  const int dm = cfg_.model_dim, d = cfg_.latent_dim, F = cfg_.frames_per_latent;
  rvq::RvqConfig rc;
  rc.layers = cfg_.rvq_layers;
  rc.codebook = cfg_.codebook;
  rc.dim = d;
  rc.ema_decay = cfg_.ema_decay;
  for (size_t p = 0; p < parts_.size(); p++) {
    const std::string pre = "tok." + parts_[p].name + ".";
    const int cp = int(parts_[p].channels.size());
    auto net = std::make_unique<PartNet>();
    net->enc_in_w = ps_.add_normal(pre + "enc.in.w", cp, dm, rng, 0.02);
    net->enc_in_b = ps_.add(pre + "enc.in.b", 1, dm);
    for (int i = 0; i < cfg_.enc_blocks; i++)
      net->enc_blocks.push_back(
          nn::make_block(ps_, pre + "enc.b" + std::to_string(i) + ".", dm, 2 * dm, rng));
    // All biases start at zero, so a zero-input clip encodes to exactly
    // zero latents: every layer maps the zero row to the zero row.
    net->pool_w = ps_.add_normal(pre + "enc.pool.w", dm, d, rng, 0.02);
    net->pool_b = ps_.add(pre + "enc.pool.b", 1, d);
    net->cat_w1 = ps_.add_normal(pre + "enc.cat.w1", F * dm, dm, rng, 0.02);
    net->cat_b1 = ps_.add(pre + "enc.cat.b1", 1, dm);
    net->cat_w2 = ps_.add_normal(pre + "enc.cat.w2", dm, d, rng, 0.02);
    net->cat_b2 = ps_.add(pre + "enc.cat.b2", 1, d);
    net->dec_in_w = ps_.add_normal(pre + "dec.in.w", d, dm, rng, 0.02);
    net->dec_in_b = ps_.add(pre + "dec.in.b", 1, dm);
    for (int i = 0; i < cfg_.dec_blocks; i++)
      net->dec_blocks.push_back(
          nn::make_block(ps_, pre + "dec.b" + std::to_string(i) + ".", dm, 2 * dm, rng));
    net->rep_w = ps_.add_normal(pre + "dec.rep.w", dm, dm, rng, 0.02);
    net->rep_b = ps_.add(pre + "dec.rep.b", 1, dm);
    net->exp_w = ps_.add_normal(pre + "dec.exp.w", dm, F * dm, rng, 0.02);
    net->exp_b = ps_.add(pre + "dec.exp.b", 1, F * dm);
    net->out_w = ps_.add(pre + "dec.out.w", dm, cp);
    net->out_b = ps_.add(pre + "dec.out.b", 1, cp);
    // Output head starts as a constant rest pose: weights zero, bias set to
    // identity rotations and a standing root so FK of an untrained decode is
    // well defined.
    std::vector<double> rest(sk_.channels(), 0.0);
    rest[2] = 0.9;
    for (int j = 0; j < sk_.joints(); j++) {
      rest[3 + 6 * j + 0] = 1.0;
      rest[3 + 6 * j + 4] = 1.0;
    }
    for (int k = 0; k < cp; k++) net->out_b->v[k] = rest[parts_[p].channels[k]];
    nets_.push_back(std::move(net));
    rvq_.push_back(std::make_unique<rvq::Rvq>(rc, rng));
  }
  latent_pool_.resize(parts_.size());
}

Tokenizer::~Tokenizer() = default;

TP Tokenizer::encoder_forward(Graph& g, const PartNet& net, TP x, int batch, int time) const {
  const int F = cfg_.frames_per_latent;
  TP h = g.linear(x, net.enc_in_w, net.enc_in_b);
  for (const auto& blk : net.enc_blocks)
    h = nn::apply_block(g, blk, h, batch, time, cfg_.heads, cfg_.lookback, true, true);
  TP a = g.linear(g.pool_rows(h, F), net.pool_w, net.pool_b);
  TP b = g.linear(g.gelu(g.linear(g.concat_group_rows(h, F), net.cat_w1, net.cat_b1)),
                  net.cat_w2, net.cat_b2);
  return g.add(a, b);
}

TP Tokenizer::decoder_forward(Graph& g, const PartNet& net, TP z, int batch, int steps) const {
  const int F = cfg_.frames_per_latent;
  TP h = g.linear(z, net.dec_in_w, net.dec_in_b);
  for (const auto& blk : net.dec_blocks)
    h = nn::apply_block(g, blk, h, batch, steps, cfg_.heads, cfg_.lookback, true, true);
  TP a = g.linear(g.repeat_rows(h, F), net.rep_w, net.rep_b);
  TP b = g.split_row_channels(g.linear(h, net.exp_w, net.exp_b), F);
  TP u = g.gelu(g.add(a, b));
  return g.linear(u, net.out_w, net.out_b);
}

TokenizerLoss Tokenizer::build_loss(Graph& g, const std::vector<kin::Clip>& windows,
                                    bool bypass_quant, TP* loss_out) {
  if (windows.empty()) raise(Err::DimensionError, "empty batch");
  const int B = int(windows.size());
  const int T = windows[0].frames;
  const int C = sk_.channels();
  const int F = cfg_.frames_per_latent;
  const int d = cfg_.latent_dim;
  const int Q = cfg_.rvq_layers;
  if (T < F || T % F != 0) raise(Err::PaddingRequired, "window must be a multiple of frames_per_latent");
  for (const auto& w : windows)
    if (w.frames != T || w.channels != C) raise(Err::DimensionError, "ragged batch");
  const int S = T / F;

  std::vector<double> xall(size_t(B) * T * C);
  for (int b = 0; b < B; b++)
    std::copy(windows[b].data.begin(), windows[b].data.end(), xall.begin() + size_t(b) * T * C);
  TP xc = g.constant(xall, B * T, C);

  last_qr_.assign(parts_.size(), {});
  last_z_.assign(parts_.size(), {});
  std::vector<TP> xhat_parts(parts_.size());
  std::vector<std::vector<int>> idx_lists(parts_.size());
  TP commit;
  for (size_t p = 0; p < parts_.size(); p++) {
    idx_lists[p] = parts_[p].channels;
    TP xp = g.gather_cols(xc, parts_[p].channels);
    TP z = encoder_forward(g, *nets_[p], xp, B, T);
    last_z_[p] = z->v;
    auto qr = rvq_[p]->quantize(z->v.data(), B * S);
    TP zq = z;
    if (!bypass_quant) {
      std::vector<double> delta(qr.quantized);
      for (size_t i = 0; i < delta.size(); i++) delta[i] -= z->v[i];
      zq = g.add_const(z, delta);  // straight-through: forward sees the codes
    }
    // Commitment pulls the encoder toward its chosen codes at every depth:
    // layer q compares z against the prefix sum of entries through q.
    std::vector<double> prefix(size_t(B * S) * d, 0.0);
    for (int q = 0; q < Q; q++) {
      for (int r = 0; r < B * S; r++)
        for (int j = 0; j < d; j++)
          prefix[size_t(r) * d + j] += qr.layer_entry[(size_t(r) * Q + q) * d + j];
      TP cq = g.sq_dist_rows(z, prefix);
      commit = commit ? g.add(commit, cq) : cq;
    }
    last_qr_[p] = std::move(qr);
    xhat_parts[p] = decoder_forward(g, *nets_[p], zq, B, S);
  }
  TP xhat = g.scatter_cols(xhat_parts, idx_lists, C);
  // Per-frame L1: mean over rows, sum over channels, matching the per-row
  // squared-distance convention of the commitment term.
  TP recon = g.scale(g.l1_mean(xhat, xc), double(C));

  double aux_value = 0.0;
  std::vector<double> aux_grad(size_t(B) * T * C, 0.0);
  for (int b = 0; b < B; b++) {
    kin::Clip hat(T, C, windows[b].fps);
    std::copy_n(xhat->v.begin() + size_t(b) * T * C, size_t(T) * C, hat.data.begin());
    std::vector<double> gb;
    try {
      auto br = kin::auxiliary_loss(hat, windows[b], sk_, cfg_.aux, &gb);
      aux_value += br.total / B;
      for (size_t i = 0; i < gb.size(); i++) aux_grad[size_t(b) * T * C + i] += gb[i] / B;
    } catch (const Error& e) {
      // A decoded rotation can collapse mid-training; drop the FK term for
      // that item and let the reconstruction loss pull it back.
      if (e.code() != Err::DegenerateRotation) throw;
    }
  }
  TP aux = g.custom_scalar(xhat, aux_value, std::move(aux_grad));

  TP total = g.add(g.add(recon, g.scale(commit, cfg_.eta)), aux);
  TokenizerLoss out;
  out.recon = recon->v[0];
  out.commit = cfg_.eta * commit->v[0];
  out.aux = aux_value;
  out.total = total->v[0];
  if (!std::isfinite(out.recon)) raise(Err::NumericalError, "reconstruction term");
  if (!std::isfinite(out.commit)) raise(Err::NumericalError, "commitment term");
  if (!std::isfinite(out.aux)) raise(Err::NumericalError, "auxiliary term");
  if (loss_out) *loss_out = total;
  return out;
}

TokenizerLoss Tokenizer::train_step(const std::vector<kin::Clip>& windows,
                                    const nn::AdamConfig& opt) {
  Graph g;
  TP loss;
  auto stats = build_loss(g, windows, false, &loss);
  ps_.zero_grad();
  g.backward(loss);
  ps_.adam_step(opt);
  const size_t pool_cap = size_t(4096) * cfg_.latent_dim;
  for (size_t p = 0; p < parts_.size(); p++) {
    rvq_[p]->ema_update(last_qr_[p]);
    auto& pool = latent_pool_[p];
    pool.insert(pool.end(), last_z_[p].begin(), last_z_[p].end());
    if (pool.size() > pool_cap) pool.erase(pool.begin(), pool.begin() + (pool.size() - pool_cap));
  }
  return stats;
}

int Tokenizer::end_epoch(Rng& rng) {
  int refreshed = 0;
  for (size_t p = 0; p < parts_.size(); p++) {
    int n = int(latent_pool_[p].size() / cfg_.latent_dim);
    refreshed += rvq_[p]->end_epoch(latent_pool_[p].data(), n, rng);
  }
  return refreshed;
}

kin::Clip Tokenizer::pad_clip(const kin::Clip& clip) const {
  const int F = cfg_.frames_per_latent;
  if (clip.frames == 0) raise(Err::TooShort, "empty clip");
  if (clip.channels != sk_.channels()) raise(Err::DimensionError, "clip channel count");
  int rem = clip.frames % F;
  if (rem == 0) return clip;
  if (!cfg_.pad_incomplete) raise(Err::PaddingRequired, "clip length not a multiple of frames_per_latent");
  kin::Clip out(clip.frames + (F - rem), clip.channels, clip.fps);
  for (int t = 0; t < F - rem; t++)
    std::copy_n(clip.frame(0), clip.channels, out.frame(t));
  std::copy(clip.data.begin(), clip.data.end(), out.frame(F - rem));
  return out;
}

EncodeState Tokenizer::encode_begin() const { return {}; }
DecodeState Tokenizer::decode_begin() const { return {}; }

std::vector<double> Tokenizer::encode_last_step(const PartNet& net,
                                                const std::vector<double>& window, int frames,
                                                int part) const {
  Graph g;
  const int cp = int(parts_[part].channels.size());
  TP x = g.constant(window, frames, cp);
  TP z = encoder_forward(g, net, x, 1, frames);
  std::vector<double> out(cfg_.latent_dim);
  std::copy_n(z->v.end() - cfg_.latent_dim, cfg_.latent_dim, out.begin());
  return out;
}

TokenGrid Tokenizer::encode_step(EncodeState& st, const kin::Clip& chunk) const {
  const int F = cfg_.frames_per_latent;
  const int C = sk_.channels();
  if (chunk.channels != C) raise(Err::DimensionError, "chunk channel count");
  if (chunk.frames % F != 0) raise(Err::PaddingRequired, "chunk length not a multiple of frames_per_latent");
  const int steps = chunk.frames / F;
  const int cap = window_cap_frames();
  TokenGrid grid(steps, cfg_.rvq_layers, int(parts_.size()), cfg_.codebook);
  for (int s = 0; s < steps; s++) {
    st.frames.insert(st.frames.end(), chunk.frame(s * F), chunk.frame(s * F) + size_t(F) * C);
    st.total_frames += F;
    if (int(st.frames.size() / C) > cap)
      st.frames.erase(st.frames.begin(), st.frames.end() - size_t(cap) * C);
    // Window length depends only on the absolute frame count, so any
    // chunking of the same clip runs identical shapes through the network.
    const int w = int(std::min<long>(st.total_frames, cap));
    const double* wbase = st.frames.data() + st.frames.size() - size_t(w) * C;
    for (size_t p = 0; p < parts_.size(); p++) {
      const auto& cols = parts_[p].channels;
      std::vector<double> win(size_t(w) * cols.size());
      for (int t = 0; t < w; t++)
        for (size_t j = 0; j < cols.size(); j++)
          win[size_t(t) * cols.size() + j] = wbase[size_t(t) * C + cols[j]];
      auto z = encode_last_step(*nets_[p], win, w, int(p));
      auto qr = rvq_[p]->quantize(z.data(), 1);
      for (int q = 0; q < cfg_.rvq_layers; q++)
        grid.at(s, q, int(p)) = uint16_t(qr.indices[q]);
    }
  }
  return grid;
}

TokenGrid Tokenizer::encode(const kin::Clip& clip) const {
  kin::Clip padded = pad_clip(clip);
  EncodeState st = encode_begin();
  return encode_step(st, padded);
}

std::vector<double> Tokenizer::decode_last_step(const PartNet& net,
                                                const std::vector<double>& latents, int steps,
                                                int part) const {
  Graph g;
  const int F = cfg_.frames_per_latent;
  TP z = g.constant(latents, steps, cfg_.latent_dim);
  TP h = g.linear(z, net.dec_in_w, net.dec_in_b);
  for (const auto& blk : net.dec_blocks)
    h = nn::apply_block(g, blk, h, 1, steps, cfg_.heads, cfg_.lookback, true, true);
  TP last = g.row_slice(h, steps - 1, 1);
  TP a = g.linear(g.repeat_rows(last, F), net.rep_w, net.rep_b);
  TP b = g.split_row_channels(g.linear(last, net.exp_w, net.exp_b), F);
  TP u = g.gelu(g.add(a, b));
  TP out = g.linear(u, net.out_w, net.out_b);
  return out->v;
}

kin::Clip Tokenizer::decode_step(DecodeState& st, const TokenGrid& chunk) const {
  const int F = cfg_.frames_per_latent;
  const int d = cfg_.latent_dim;
  const int P = int(parts_.size());
  const int C = sk_.channels();
  if (chunk.layers != cfg_.rvq_layers || chunk.parts != P) raise(Err::TokenError, "grid shape");
  const int cap = window_cap_steps();
  kin::Clip out(chunk.steps * F, C, 30.0);
  for (int s = 0; s < chunk.steps; s++) {
    std::vector<double> row(size_t(P) * d);
    for (int p = 0; p < P; p++) {
      std::vector<int> ids(cfg_.rvq_layers);
      for (int q = 0; q < cfg_.rvq_layers; q++) ids[q] = chunk.at(s, q, p);
      auto zr = rvq_[p]->decode(ids, 1);
      std::copy(zr.begin(), zr.end(), row.begin() + size_t(p) * d);
    }
    st.latents.insert(st.latents.end(), row.begin(), row.end());
    st.total_steps += 1;
    if (int(st.latents.size() / (size_t(P) * d)) > cap)
      st.latents.erase(st.latents.begin(), st.latents.end() - size_t(cap) * P * d);
    const int w = int(std::min<long>(st.total_steps, cap));
    const double* wbase = st.latents.data() + st.latents.size() - size_t(w) * P * d;
    for (int p = 0; p < P; p++) {
      std::vector<double> lat(size_t(w) * d);
      for (int t = 0; t < w; t++)
        std::copy_n(wbase + size_t(t) * P * d + size_t(p) * d, d, lat.begin() + size_t(t) * d);
      auto frames = decode_last_step(*nets_[p], lat, w, p);
      const auto& cols = parts_[p].channels;
      for (int f = 0; f < F; f++)
        for (size_t j = 0; j < cols.size(); j++)
          out.at(s * F + f, cols[j]) = frames[size_t(f) * cols.size() + j];
    }
  }
  return out;
}

kin::Clip Tokenizer::decode(const TokenGrid& grid) const {
  DecodeState st = decode_begin();
  return decode_step(st, grid);
}

std::vector<double> Tokenizer::encode_latents(const kin::Clip& clip) const {
  kin::Clip padded = pad_clip(clip);
  const int T = padded.frames;
  const int S = T / cfg_.frames_per_latent;
  const int d = cfg_.latent_dim;
  std::vector<double> out(size_t(S) * parts_.size() * d);
  for (size_t p = 0; p < parts_.size(); p++) {
    Graph g;
    const auto& cols = parts_[p].channels;
    std::vector<double> xp(size_t(T) * cols.size());
    for (int t = 0; t < T; t++)
      for (size_t j = 0; j < cols.size(); j++)
        xp[size_t(t) * cols.size() + j] = padded.at(t, cols[j]);
    TP x = g.constant(xp, T, int(cols.size()));
    TP z = encoder_forward(g, *nets_[p], x, 1, T);
    for (int s = 0; s < S; s++)
      std::copy_n(z->v.begin() + size_t(s) * d, d, out.begin() + (size_t(s) * parts_.size() + p) * d);
  }
  return out;
}

double Tokenizer::mpjpe(const kin::Clip& a, const kin::Clip& b) const {
  if (a.frames != b.frames || a.channels != b.channels) raise(Err::DimensionError, "clip shape");
  auto pa = kin::fk_positions(sk_, a);
  auto pb = kin::fk_positions(sk_, b);
  const int J = sk_.joints();
  double sum = 0;
  for (int t = 0; t < a.frames; t++)
    for (int j = 0; j < J; j++) {
      double dx = pa[(size_t(t) * J + j) * 3 + 0] - pb[(size_t(t) * J + j) * 3 + 0];
      double dy = pa[(size_t(t) * J + j) * 3 + 1] - pb[(size_t(t) * J + j) * 3 + 1];
      double dz = pa[(size_t(t) * J + j) * 3 + 2] - pb[(size_t(t) * J + j) * 3 + 2];
      sum += std::sqrt(dx * dx + dy * dy + dz * dz);
    }
  return sum / (double(a.frames) * J);
}

}  // namespace mstream::tok
