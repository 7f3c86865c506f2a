// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "mstream/errors.hpp"
#include "mstream/rng.hpp"

namespace mstream::nn {

// Row-major 2-D tensor. Sequences are stored flattened as (batch*time, dim);
// ops that need the sequence structure take batch/time explicitly.
struct Tensor {
  int rows = 0, cols = 0;
  bool rg = false;  // participates in backward
  std::vector<double> v;
  std::vector<double> g;

  Tensor() = default;
  Tensor(int r, int c, bool requires_grad) : rows(r), cols(c), rg(requires_grad) {
    v.assign(size_t(r) * c, 0.0);
    if (rg) g.assign(size_t(r) * c, 0.0);
  }
  size_t size() const { return v.size(); }
  double& at(int r, int c) { return v[size_t(r) * cols + c]; }
  double at(int r, int c) const { return v[size_t(r) * cols + c]; }
  void zero_grad() { std::fill(g.begin(), g.end(), 0.0); }
};

using TP = std::shared_ptr<Tensor>;

// Eager computation graph: each op computes its forward result immediately
// and pushes a backward closure onto the tape. One Graph per training step.
class Graph {
 public:
  TP value(int rows, int cols) { return std::make_shared<Tensor>(rows, cols, false); }
  TP node(int rows, int cols) { return std::make_shared<Tensor>(rows, cols, true); }
  TP constant(const std::vector<double>& data, int rows, int cols);

  TP matmul(TP a, TP b);     // (m,k) x (k,n)
  TP matmul_nt(TP a, TP b);  // a * b^T, (m,k) x (n,k)
  TP transpose(TP a);
  TP linear(TP x, TP w, TP b);  // x*w + row-broadcast bias; w is (in, out)
  TP add(TP a, TP b);
  TP sub(TP a, TP b);
  TP mul(TP a, TP b);
  TP scale(TP a, double s);
  TP add_const(TP a, const std::vector<double>& c);  // c broadcast over rows if c.size()==cols
  TP gelu(TP a);
  TP relu(TP a);
  TP sigmoid(TP a);
  TP exp_(TP a);
  TP mul_scalar_node(TP a, TP s);  // s is (1,1)
  TP layernorm(TP x, TP gain, TP bias);

  TP embed(TP table, const std::vector<int>& ids);
  TP gather_cols(TP x, const std::vector<int>& idx);
  // Writes each part into its column set of a (rows, total_cols) output.
  TP scatter_cols(const std::vector<TP>& parts, const std::vector<std::vector<int>>& idx,
                  int total_cols);
  TP row_slice(TP x, int r0, int n);
  TP concat_rows(const std::vector<TP>& parts);
  TP pool_rows(TP x, int group);          // (n*g, c) -> (n, c), mean per group
  TP concat_group_rows(TP x, int group);  // (n*g, c) -> (n, g*c)
  TP repeat_rows(TP x, int k);            // (n, c) -> (n*k, c)
  TP split_row_channels(TP x, int k);     // (n, k*c) -> (n*k, c)
  TP l2_normalize_rows(TP x);             // DegenerateEmbedding on zero rows

  // Multi-head attention core on projected q, k, v of shape (B*T, d).
  // Distance-biased scores: s_ij = q.k/sqrt(dh) - slope_h * |i-j|, with
  // slope_h = 2^{-8(h+1)/H} when alibi is set, 0 otherwise. Causal mode
  // restricts j to (i-window, i]; window <= 0 means unlimited lookback.
  TP attention_core(TP q, TP k, TP v, int batch, int time, int heads, int window, bool causal,
                    bool alibi);

  // Cross-entropy over rows with per-row weights; rows with weight 0 are
  // ignored. Returns (1,1) loss = sum(w_i * ce_i) / sum(w). Optionally
  // reports unweighted per-row CE.
  TP ce_loss(TP logits, const std::vector<int>& targets, const std::vector<double>& weights,
             std::vector<double>* per_row_ce = nullptr);
  // Mean over rows of -sum_j y_ij log softmax(logits)_ij.
  TP soft_ce(TP logits, const std::vector<double>& target_rows);
  TP l1_mean(TP a, TP b);
  TP mse_mean(TP a, const std::vector<double>& target);
  // Mean over rows of squared L2 distance to constant rows.
  TP sq_dist_rows(TP a, const std::vector<double>& target_rows);
  TP smooth_l1(TP pred, const std::vector<double>& target, double beta = 1.0);
  TP mean_all(TP a);
  TP sum_all(TP a);
  TP add_scaled(TP a, double sa, TP b, double sb);  // sa*a + sb*b
  // Scalar node with externally supplied value and gradient d(value)/d(x).
  TP custom_scalar(TP x, double value, std::vector<double> dvalue_dx);

  void backward(TP loss);
  size_t tape_size() const { return tape_.size(); }

 private:
  void push(std::function<void()> f) { tape_.push_back(std::move(f)); }
  std::vector<std::function<void()>> tape_;
};

// Sinusoidal position table, (time, dim).
std::vector<double> sinusoid_positions(int time, int dim);

}  // namespace mstream::nn
