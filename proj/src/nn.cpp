// SPDX-License-Identifier: Apache-2.0
#include "mstream/nn.hpp"

#include <cmath>

namespace mstream::nn {

TP ParamStore::add(const std::string& name, int rows, int cols) {
  if (has(name)) raise(Err::ConfigError, "duplicate parameter " + name);
  Param p;
  p.name = name;
  p.t = std::make_shared<Tensor>(rows, cols, true);
  p.m.assign(p.t->size(), 0.0);
  p.v.assign(p.t->size(), 0.0);
  params_.push_back(std::move(p));
  return params_.back().t;
}

TP ParamStore::add_normal(const std::string& name, int rows, int cols, Rng& rng,
                          double stddev) {
  TP t = add(name, rows, cols);
  for (auto& x : t->v) x = rng.normal(0.0, stddev);
  return t;
}

TP ParamStore::add_ones(const std::string& name, int rows, int cols) {
  TP t = add(name, rows, cols);
  std::fill(t->v.begin(), t->v.end(), 1.0);
  return t;
}

TP ParamStore::get(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return p.t;
  raise(Err::NotInitialized, "no parameter named " + name);
}

bool ParamStore::has(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return true;
  return false;
}

size_t ParamStore::count_values() const {
  size_t n = 0;
  for (const auto& p : params_) n += p.t->size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p.t->zero_grad();
}

double ParamStore::grad_norm() const {
  double s = 0;
  for (const auto& p : params_)
    for (double g : p.t->g) s += g * g;
  return std::sqrt(s);
}

void ParamStore::set_frozen(const std::string& prefix, bool frozen) {
  for (auto& p : params_)
    if (p.name.rfind(prefix, 0) == 0) p.frozen = frozen;
}

void ParamStore::adam_step(const AdamConfig& cfg) {
  steps_++;
  double scale = 1.0;
  if (cfg.clip > 0) {
    const double n = grad_norm();
    if (n > cfg.clip) scale = cfg.clip / n;
  }
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(steps_));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(steps_));
  for (auto& p : params_) {
    if (p.frozen) continue;
    for (size_t i = 0; i < p.t->size(); i++) {
      const double g = p.t->g[i] * scale;
      p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g;
      p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g * g;
      const double mhat = p.m[i] / bc1;
      const double vhat = p.v[i] / bc2;
      p.t->v[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

Block make_block(ParamStore& ps, const std::string& prefix, int d, int mlp_hidden, Rng& rng) {
  Block b;
  const double s = 0.02;
  b.ln1_g = ps.add_ones(prefix + ".ln1.g", 1, d);
  b.ln1_b = ps.add(prefix + ".ln1.b", 1, d);
  b.wq = ps.add_normal(prefix + ".wq", d, d, rng, s);
  b.bq = ps.add(prefix + ".bq", 1, d);
  b.wk = ps.add_normal(prefix + ".wk", d, d, rng, s);
  b.bk = ps.add(prefix + ".bk", 1, d);
  b.wv = ps.add_normal(prefix + ".wv", d, d, rng, s);
  b.bv = ps.add(prefix + ".bv", 1, d);
  b.wo = ps.add_normal(prefix + ".wo", d, d, rng, s);
  b.bo = ps.add(prefix + ".bo", 1, d);
  b.ln2_g = ps.add_ones(prefix + ".ln2.g", 1, d);
  b.ln2_b = ps.add(prefix + ".ln2.b", 1, d);
  b.w1 = ps.add_normal(prefix + ".w1", d, mlp_hidden, rng, s);
  b.b1 = ps.add(prefix + ".b1", 1, mlp_hidden);
  b.w2 = ps.add_normal(prefix + ".w2", mlp_hidden, d, rng, s);
  b.b2 = ps.add(prefix + ".b2", 1, d);
  return b;
}

TP apply_block(Graph& g, const Block& blk, TP x, int batch, int time, int heads, int window,
               bool causal, bool alibi) {
  TP h = g.layernorm(x, blk.ln1_g, blk.ln1_b);
  TP q = g.linear(h, blk.wq, blk.bq);
  TP k = g.linear(h, blk.wk, blk.bk);
  TP v = g.linear(h, blk.wv, blk.bv);
  TP a = g.attention_core(q, k, v, batch, time, heads, window, causal, alibi);
  x = g.add(x, g.linear(a, blk.wo, blk.bo));
  TP m = g.layernorm(x, blk.ln2_g, blk.ln2_b);
  m = g.linear(m, blk.w1, blk.b1);
  m = g.gelu(m);
  m = g.linear(m, blk.w2, blk.b2);
  return g.add(x, m);
}

}  // namespace mstream::nn
