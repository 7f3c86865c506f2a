// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mstream/tensor.hpp"

namespace mstream::nn {

struct Param {
  std::string name;
  TP t;
  std::vector<double> m, v;  // Adam moments
  bool frozen = false;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip = 1.0;  // global gradient norm; <= 0 disables
};

class ParamStore {
 public:
  TP add(const std::string& name, int rows, int cols);
  TP add_normal(const std::string& name, int rows, int cols, Rng& rng, double stddev);
  TP add_ones(const std::string& name, int rows, int cols);

  TP get(const std::string& name) const;  // NotInitialized if missing
  bool has(const std::string& name) const;
  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }
  size_t count_values() const;

  void zero_grad();
  double grad_norm() const;
  void set_frozen(const std::string& prefix, bool frozen);
  void adam_step(const AdamConfig& cfg);
  int64_t steps() const { return steps_; }

 private:
  std::vector<Param> params_;
  int64_t steps_ = 0;
};

// Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x)).
struct Block {
  TP ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
  TP ln2_g, ln2_b, w1, b1, w2, b2;
};

Block make_block(ParamStore& ps, const std::string& prefix, int d, int mlp_hidden, Rng& rng);

TP apply_block(Graph& g, const Block& blk, TP x, int batch, int time, int heads, int window,
               bool causal, bool alibi);

}  // namespace mstream::nn
