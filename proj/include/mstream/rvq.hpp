// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "mstream/errors.hpp"
#include "mstream/rng.hpp"

namespace mstream::rvq {

struct RvqConfig {
  int layers = 2;      // quantizer depth Q
  int codebook = 64;   // entries per layer K
  int dim = 32;        // latent width d
  double ema_decay = 0.99;
  bool zero_reserved = true;  // entry 0 of every residual layer pinned to zero

  void validate() const {
    if (layers < 1 || codebook < 2 || dim < 1) raise(Err::ConfigError, "rvq shape");
    if (codebook > 65535) raise(Err::ConfigError, "codebook exceeds uint16 index range");
    if (ema_decay <= 0.0 || ema_decay >= 1.0) raise(Err::ConfigError, "ema decay in (0,1)");
  }
};

struct QuantizeResult {
  int n = 0;
  std::vector<int> indices;          // n x Q
  std::vector<double> quantized;     // n x d, sum of per-layer entries
  std::vector<double> residual_in;   // n x Q x d, input residual z^q per layer
  std::vector<double> layer_entry;   // n x Q x d, chosen entry per layer
};

// Residual vector quantizer with EMA codebook maintenance. Layer 0 quantizes
// the raw latent; layer q > 0 quantizes the running residual. Nearest
// neighbor by squared L2, ties broken toward the lowest index. When
// zero_reserved is set, entry 0 of each layer q > 0 stays the zero vector,
// which keeps residual norms non-increasing from the first residual onward.
class Rvq {
 public:
  Rvq(const RvqConfig& cfg, Rng& rng);

  QuantizeResult quantize(const double* z, int n) const;
  std::vector<double> decode(const std::vector<int>& indices, int n) const;

  // Accumulates EMA statistics from one quantized batch and refreshes
  // entries. Also tallies per-entry usage for dead-code handling.
  void ema_update(const QuantizeResult& qr);
  // Reinitializes entries with less than one use since the last call from
  // random rows of the provided latent pool.
  int end_epoch(const double* pool, int pool_n, Rng& rng);

  const RvqConfig& config() const { return cfg_; }
  const std::vector<double>& codebook(int q) const { return books_[q]; }
  std::vector<double>& mutable_codebook(int q) { return books_[q]; }
  std::vector<double>& mutable_ema_count(int q) { return ema_count_[q]; }
  std::vector<double>& mutable_ema_sum(int q) { return ema_sum_[q]; }
  // Re-seeds moments from the current tables (count 1, sum = entry). Call
  // after writing codebooks directly.
  void reseed_moments() {
    for (int q = 0; q < cfg_.layers; q++) {
      ema_count_[q].assign(cfg_.codebook, 1.0);
      ema_sum_[q] = books_[q];
    }
  }

 private:
  bool pinned(int q, int k) const { return cfg_.zero_reserved && q > 0 && k == 0; }

  RvqConfig cfg_;
  std::vector<std::vector<double>> books_;      // Q x (K*d)
  std::vector<std::vector<double>> ema_count_;  // Q x K
  std::vector<std::vector<double>> ema_sum_;    // Q x (K*d)
  std::vector<std::vector<double>> usage_;      // Q x K since last end_epoch
};

}  // namespace mstream::rvq
