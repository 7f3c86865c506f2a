// SPDX-License-Identifier: Apache-2.0
#include "mstream/rvq.hpp"

#include <cmath>
#include <cstring>

namespace mstream::rvq {

Rvq::Rvq(const RvqConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  books_.resize(cfg_.layers);
  ema_count_.resize(cfg_.layers);
  ema_sum_.resize(cfg_.layers);
  usage_.resize(cfg_.layers);
  for (int q = 0; q < cfg_.layers; q++) {
    books_[q].resize(size_t(cfg_.codebook) * cfg_.dim);
    for (auto& x : books_[q]) x = rng.normal(0.0, 0.1);
    if (pinned(q, 0))
      std::fill_n(books_[q].begin(), cfg_.dim, 0.0);
    // Moments seeded from the table itself: an entry that gets no
    // assignments keeps its value exactly (sum and count decay together).
    ema_count_[q].assign(cfg_.codebook, 1.0);
    ema_sum_[q] = books_[q];
    usage_[q].assign(cfg_.codebook, 0.0);
  }
}

QuantizeResult Rvq::quantize(const double* z, int n) const {
  const int Q = cfg_.layers, K = cfg_.codebook, d = cfg_.dim;
  QuantizeResult r;
  r.n = n;
  r.indices.assign(size_t(n) * Q, 0);
  r.quantized.assign(size_t(n) * d, 0.0);
  r.residual_in.assign(size_t(n) * Q * d, 0.0);
  r.layer_entry.assign(size_t(n) * Q * d, 0.0);
  std::vector<double> res(d);
  for (int i = 0; i < n; i++) {
    std::memcpy(res.data(), z + size_t(i) * d, d * sizeof(double));
    for (int q = 0; q < Q; q++) {
      std::memcpy(&r.residual_in[(size_t(i) * Q + q) * d], res.data(), d * sizeof(double));
      const std::vector<double>& book = books_[q];
      int best = 0;
      double best_d = 1e300;
      for (int k = 0; k < K; k++) {
        double dist = 0;
        const double* e = book.data() + size_t(k) * d;
        for (int c = 0; c < d; c++) {
          const double diff = res[c] - e[c];
          dist += diff * diff;
        }
        if (dist < best_d) {  // strict: ties keep the lowest index
          best_d = dist;
          best = k;
        }
      }
      r.indices[size_t(i) * Q + q] = best;
      const double* e = book.data() + size_t(best) * d;
      double* le = &r.layer_entry[(size_t(i) * Q + q) * d];
      double* acc = &r.quantized[size_t(i) * d];
      for (int c = 0; c < d; c++) {
        le[c] = e[c];
        acc[c] += e[c];
        res[c] -= e[c];
      }
    }
  }
  return r;
}

std::vector<double> Rvq::decode(const std::vector<int>& indices, int n) const {
  const int Q = cfg_.layers, K = cfg_.codebook, d = cfg_.dim;
  if (indices.size() != size_t(n) * Q) raise(Err::DimensionError, "rvq decode index count");
  std::vector<double> out(size_t(n) * d, 0.0);
  for (int i = 0; i < n; i++) {
    for (int q = 0; q < Q; q++) {
      const int k = indices[size_t(i) * Q + q];
      if (k < 0 || k >= K) raise(Err::TokenError, "rvq index out of range");
      const double* e = books_[q].data() + size_t(k) * d;
      for (int c = 0; c < d; c++) out[size_t(i) * d + c] += e[c];
    }
  }
  return out;
}

void Rvq::ema_update(const QuantizeResult& qr) {
  const int Q = cfg_.layers, K = cfg_.codebook, d = cfg_.dim;
  const double g = cfg_.ema_decay;
  std::vector<double> count(K);
  std::vector<double> sum(size_t(K) * d);
  for (int q = 0; q < Q; q++) {
    std::fill(count.begin(), count.end(), 0.0);
    std::fill(sum.begin(), sum.end(), 0.0);
    for (int i = 0; i < qr.n; i++) {
      const int k = qr.indices[size_t(i) * Q + q];
      count[k] += 1.0;
      usage_[q][k] += 1.0;
      const double* r = &qr.residual_in[(size_t(i) * Q + q) * d];
      for (int c = 0; c < d; c++) sum[size_t(k) * d + c] += r[c];
    }
    for (int k = 0; k < K; k++) {
      if (pinned(q, k)) continue;
      ema_count_[q][k] = g * ema_count_[q][k] + (1 - g) * count[k];
      for (int c = 0; c < d; c++) {
        const size_t idx = size_t(k) * d + c;
        ema_sum_[q][idx] = g * ema_sum_[q][idx] + (1 - g) * sum[idx];
        books_[q][idx] = ema_sum_[q][idx] / std::max(ema_count_[q][k], 1e-5);
      }
    }
  }
}

int Rvq::end_epoch(const double* pool, int pool_n, Rng& rng) {
  const int Q = cfg_.layers, K = cfg_.codebook, d = cfg_.dim;
  int reinits = 0;
  for (int q = 0; q < Q; q++) {
    for (int k = 0; k < K; k++) {
      if (pinned(q, k)) {
        usage_[q][k] = 0.0;
        continue;
      }
      if (usage_[q][k] < 1.0 && pool_n > 0) {
        const int pick = rng.uniform_int(pool_n);
        for (int c = 0; c < d; c++) {
          books_[q][size_t(k) * d + c] = pool[size_t(pick) * d + c];
          ema_sum_[q][size_t(k) * d + c] = books_[q][size_t(k) * d + c];
        }
        ema_count_[q][k] = 1.0;
        reinits++;
      }
      usage_[q][k] = 0.0;
    }
  }
  return reinits;
}

}  // namespace mstream::rvq
