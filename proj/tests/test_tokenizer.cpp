// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mstream/rvq.hpp"
#include "mstream/tokenizer.hpp"

using namespace mstream;

namespace {

// Smooth random motion around a standing rest pose; rotations stay far from
// the Gram-Schmidt degeneracy threshold.
kin::Clip random_clip(Rng& rng, const kin::Skeleton& sk, int frames) {
  const int C = sk.channels();
  std::vector<double> rest(C, 0.0);
  rest[2] = 0.9;
  for (int j = 0; j < sk.joints(); j++) {
    rest[3 + 6 * j + 0] = 1.0;
    rest[3 + 6 * j + 4] = 1.0;
  }
  kin::Clip c(frames, C);
  std::vector<double> state(C, 0.0);
  for (int t = 0; t < frames; t++)
    for (int ch = 0; ch < C; ch++) {
      state[ch] = 0.85 * state[ch] + rng.normal(0.0, 0.12);
      c.at(t, ch) = rest[ch] + 0.35 * std::tanh(state[ch]);
    }
  return c;
}

// One-parameter family (phase) of periodic motions; easy for a small
// codebook, so loss reduction is a clean training signal.
kin::Clip sinusoid_clip(const kin::Skeleton& sk, int frames, double phase) {
  const int C = sk.channels();
  std::vector<double> rest(C, 0.0), gain(C, 0.0);
  rest[2] = 0.9;
  for (int j = 0; j < sk.joints(); j++) {
    rest[3 + 6 * j + 0] = 1.0;
    rest[3 + 6 * j + 4] = 1.0;
  }
  Rng grng(999);
  for (int ch = 0; ch < C; ch++) gain[ch] = 0.25 * grng.uniform(-1.0, 1.0);
  kin::Clip c(frames, C);
  for (int t = 0; t < frames; t++)
    for (int ch = 0; ch < C; ch++)
      c.at(t, ch) = rest[ch] + gain[ch] * std::sin(2 * M_PI * 1.5 * t / 30.0 + phase + 0.3 * ch);
  return c;
}

tok::TokenizerConfig small_config() {
  tok::TokenizerConfig cfg;
  cfg.frames_per_latent = 4;
  cfg.latent_dim = 8;
  cfg.model_dim = 32;
  cfg.heads = 4;
  cfg.enc_blocks = 2;
  cfg.dec_blocks = 2;
  cfg.lookback = 8;
  cfg.rvq_layers = 2;
  cfg.codebook = 16;
  cfg.eta = 0.5;
  return cfg;
}

bool grids_equal(const tok::TokenGrid& a, const tok::TokenGrid& b) {
  return a.steps == b.steps && a.layers == b.layers && a.parts == b.parts && a.idx == b.idx;
}

tok::TokenGrid grid_rows(const tok::TokenGrid& g, int r0, int n) {
  tok::TokenGrid out(n, g.layers, g.parts, g.codebook);
  std::copy_n(g.idx.begin() + size_t(r0) * g.layers * g.parts, size_t(n) * g.layers * g.parts,
              out.idx.begin());
  return out;
}

}  // namespace

TEST_CASE("rvq picks the nearest entry and reports the residual") {
  rvq::RvqConfig rc;
  rc.layers = 1;
  rc.codebook = 2;
  rc.dim = 2;
  Rng rng(1);
  rvq::Rvq q(rc, rng);
  q.mutable_codebook(0) = {0.0, 0.0, 1.0, 1.0};
  const double z[2] = {0.9, 0.9};
  auto r = q.quantize(z, 1);
  CHECK(r.indices[0] == 1);
  CHECK(r.quantized[0] == doctest::Approx(1.0));
  CHECK(r.quantized[1] == doctest::Approx(1.0));
  CHECK(r.residual_in[0] - r.layer_entry[0] == doctest::Approx(-0.1));
  CHECK(r.residual_in[1] - r.layer_entry[1] == doctest::Approx(-0.1));
}

TEST_CASE("rvq exact codebook match leaves zero residual") {
  rvq::RvqConfig rc;
  rc.layers = 1;
  rc.codebook = 4;
  rc.dim = 3;
  Rng rng(2);
  rvq::Rvq q(rc, rng);
  const auto& book = q.codebook(0);
  const double* z = book.data() + 2 * rc.dim;  // entry 2 verbatim
  auto r = q.quantize(z, 1);
  CHECK(r.indices[0] == 2);
  for (int c = 0; c < rc.dim; c++) {
    CHECK(r.quantized[c] == z[c]);
    CHECK(r.residual_in[c] - r.layer_entry[c] == 0.0);
  }
}

TEST_CASE("rvq ties break toward the lowest index") {
  rvq::RvqConfig rc;
  rc.layers = 1;
  rc.codebook = 4;
  rc.dim = 2;
  Rng rng(3);
  rvq::Rvq q(rc, rng);
  q.mutable_codebook(0) = {1.0, 0.0, 1.0, 0.0, -1.0, 0.0, 1.0, 0.0};
  const double z[2] = {0.0, 5.0};  // equidistant from every entry
  auto r = q.quantize(z, 1);
  CHECK(r.indices[0] == 0);
}

TEST_CASE("rvq agrees with a brute-force oracle on random latents") {
  struct Shape {
    int q, k, d;
  };
  for (Shape s : {Shape{1, 16, 3}, Shape{2, 8, 4}, Shape{3, 16, 2}}) {
    rvq::RvqConfig rc;
    rc.layers = s.q;
    rc.codebook = s.k;
    rc.dim = s.d;
    Rng rng(100 + s.q);
    rvq::Rvq q(rc, rng);
    const int n = 1000;
    std::vector<double> z(size_t(n) * s.d);
    for (auto& x : z) x = rng.normal(0.0, 0.3);
    auto r = q.quantize(z.data(), n);
    for (int i = 0; i < n; i++) {
      std::vector<double> res(z.begin() + size_t(i) * s.d, z.begin() + size_t(i + 1) * s.d);
      std::vector<double> acc(s.d, 0.0);
      for (int layer = 0; layer < s.q; layer++) {
        const auto& book = q.codebook(layer);
        int best = 0;
        double best_d = 1e300;
        for (int k = 0; k < s.k; k++) {
          double dist = 0;
          for (int c = 0; c < s.d; c++) {
            double diff = res[c] - book[size_t(k) * s.d + c];
            dist += diff * diff;
          }
          if (dist < best_d) {
            best_d = dist;
            best = k;
          }
        }
        REQUIRE(r.indices[size_t(i) * s.q + layer] == best);
        for (int c = 0; c < s.d; c++) {
          res[c] -= book[size_t(best) * s.d + c];
          acc[c] += book[size_t(best) * s.d + c];
        }
      }
      for (int c = 0; c < s.d; c++) REQUIRE(r.quantized[size_t(i) * s.d + c] == acc[c]);
    }
    std::vector<int> ids(r.indices);
    auto dec = q.decode(ids, n);
    REQUIRE(dec == r.quantized);
  }
}

TEST_CASE("rvq residual norms never grow past the first residual") {
  rvq::RvqConfig rc;
  rc.layers = 4;
  rc.codebook = 8;
  rc.dim = 4;
  Rng rng(11);
  rvq::Rvq q(rc, rng);
  for (int q0 = 1; q0 < rc.layers; q0++)
    for (int c = 0; c < rc.dim; c++) CHECK(q.codebook(q0)[c] == 0.0);  // reserved zero entry
  for (int trial = 0; trial < 200; trial++) {
    std::vector<double> z(rc.dim);
    for (auto& x : z) x = rng.normal(0.0, 0.5);
    auto r = q.quantize(z.data(), 1);
    auto norm_at = [&](int layer) {
      double s = 0;
      for (int c = 0; c < rc.dim; c++) {
        double v = r.residual_in[size_t(layer) * rc.dim + c];
        s += v * v;
      }
      return std::sqrt(s);
    };
    double final_norm = 0;
    for (int c = 0; c < rc.dim; c++) {
      double v = r.residual_in[size_t(rc.layers - 1) * rc.dim + c] -
                 r.layer_entry[size_t(rc.layers - 1) * rc.dim + c];
      final_norm += v * v;
    }
    final_norm = std::sqrt(final_norm);
    for (int layer = 1; layer + 1 < rc.layers; layer++)
      CHECK(norm_at(layer + 1) <= norm_at(layer) + 1e-12);
    CHECK(final_norm <= norm_at(rc.layers - 1) + 1e-12);
  }
}

TEST_CASE("rvq ema pulls entries toward assigned latents") {
  rvq::RvqConfig rc;
  rc.layers = 1;
  rc.codebook = 2;
  rc.dim = 1;
  Rng rng(4);
  rvq::Rvq q(rc, rng);
  q.mutable_codebook(0) = {0.0, 10.0};
  q.reseed_moments();
  const int n = 100;
  std::vector<double> z(n, 1.0);
  auto r = q.quantize(z.data(), n);
  for (int i = 0; i < n; i++) REQUIRE(r.indices[i] == 0);
  q.ema_update(r);
  // count = 0.99 + 1, sum = 0.01 * 100; entry moves from 0 toward 1.
  CHECK(q.codebook(0)[0] == doctest::Approx(1.0 / 1.99));
  CHECK(q.codebook(0)[1] == doctest::Approx(10.0));  // idle entry holds its value

  // Unused entry 1 is refreshed from the pool, used entry 0 stays.
  std::vector<double> pool = {5.0};
  Rng rr(5);
  int reinits = q.end_epoch(pool.data(), 1, rr);
  CHECK(reinits == 1);
  CHECK(q.codebook(0)[0] == doctest::Approx(1.0 / 1.99));
  CHECK(q.codebook(0)[1] == doctest::Approx(5.0));
}

TEST_CASE("rvq reserved zero entry survives updates") {
  rvq::RvqConfig rc;
  rc.layers = 2;
  rc.codebook = 4;
  rc.dim = 3;
  Rng rng(6);
  rvq::Rvq q(rc, rng);
  std::vector<double> z(size_t(50) * rc.dim);
  for (auto& x : z) x = rng.normal(0.0, 0.4);
  for (int it = 0; it < 5; it++) {
    auto r = q.quantize(z.data(), 50);
    q.ema_update(r);
  }
  Rng rr(7);
  q.end_epoch(z.data(), 50, rr);
  for (int c = 0; c < rc.dim; c++) CHECK(q.codebook(1)[c] == 0.0);
}

TEST_CASE("rvq rejects bad indices and configs") {
  rvq::RvqConfig rc;
  rc.layers = 1;
  rc.codebook = 4;
  rc.dim = 2;
  Rng rng(8);
  rvq::Rvq q(rc, rng);
  std::vector<int> bad = {4};
  CHECK_THROWS_AS(q.decode(bad, 1), Error);
  std::vector<int> wrong_count = {0, 1};
  CHECK_THROWS_AS(q.decode(wrong_count, 1), Error);
  rvq::RvqConfig huge;
  huge.codebook = 70000;
  CHECK_THROWS_AS(huge.validate(), Error);
  rvq::RvqConfig decay;
  decay.ema_decay = 1.0;
  CHECK_THROWS_AS(decay.validate(), Error);
}

TEST_CASE("body partition covers every channel exactly once") {
  auto sk = kin::default_skeleton();
  auto parts = tok::default_partition(sk);
  CHECK(parts.size() == 3);
  std::vector<int> seen;
  for (const auto& p : parts) seen.insert(seen.end(), p.channels.begin(), p.channels.end());
  std::sort(seen.begin(), seen.end());
  REQUIRE(int(seen.size()) == sk.channels());
  for (int c = 0; c < sk.channels(); c++) CHECK(seen[c] == c);
}

TEST_CASE("zero input encodes to exactly zero latents") {
  // Biases start at zero, so every layer maps the zero row to the zero row.
  auto sk = kin::default_skeleton();
  tok::Tokenizer t(small_config(), sk, 42);
  kin::Clip zero(24, sk.channels());
  auto lat = t.encode_latents(zero);
  CHECK(lat.size() == size_t(24 / 4) * 3 * 8);
  for (double v : lat) CHECK(v == 0.0);
}

TEST_CASE("encode is causal at latent granularity") {
  auto sk = kin::default_skeleton();
  tok::Tokenizer t(small_config(), sk, 51);
  Rng rng(19);
  std::vector<kin::Clip> batch = {random_clip(rng, sk, 16), random_clip(rng, sk, 16)};
  nn::AdamConfig opt;
  for (int it = 0; it < 5; it++) t.train_step(batch, opt);

  auto clip = random_clip(rng, sk, 16);
  auto base = t.encode(clip);
  auto bumped = clip;
  bumped.at(7, 5) += 0.25;  // frame inside the second latent step
  auto changed = t.encode(bumped);
  for (int q = 0; q < base.layers; q++)
    for (int p = 0; p < base.parts; p++) CHECK(base.at(0, q, p) == changed.at(0, q, p));
}

TEST_CASE("decode is causal at frame granularity") {
  auto sk = kin::default_skeleton();
  tok::Tokenizer t(small_config(), sk, 52);
  Rng rng(20);
  std::vector<kin::Clip> batch = {random_clip(rng, sk, 16), random_clip(rng, sk, 16)};
  nn::AdamConfig opt;
  for (int it = 0; it < 5; it++) t.train_step(batch, opt);

  auto grid = t.encode(random_clip(rng, sk, 16));
  auto base = t.decode(grid);
  auto bumped = grid;
  bumped.at(1, 0, 0) = uint16_t((bumped.at(1, 0, 0) + 1) % grid.codebook);
  auto changed = t.decode(bumped);
  for (int f = 0; f < 4; f++)
    for (int c = 0; c < base.channels; c++) CHECK(base.at(f, c) == changed.at(f, c));
}

TEST_CASE("hand tokens ignore lower-body channels") {
  auto sk = kin::default_skeleton();
  tok::Tokenizer t(small_config(), sk, 53);
  Rng rng(21);
  auto clip = random_clip(rng, sk, 24);
  auto base = t.encode(clip);
  auto bumped = clip;
  for (int f = 0; f < clip.frames; f++) {
    bumped.at(f, 2) += 0.3;                        // root height
    bumped.at(f, 3 + 6 * 12 + 1) += 0.4;           // left knee rotation channel
  }
  auto changed = t.encode(bumped);
  const int hands = 2;  // partition order: upper, lower, hands
  for (int s = 0; s < base.steps; s++)
    for (int q = 0; q < base.layers; q++) CHECK(base.at(s, q, hands) == changed.at(s, q, hands));
}

TEST_CASE("chunked encode matches whole-clip encode bit for bit") {
  auto sk = kin::default_skeleton();
  tok::Tokenizer t(small_config(), sk, 43);
  Rng rng(10);
  std::vector<kin::Clip> batch;
  for (int i = 0; i < 4; i++) batch.push_back(random_clip(rng, sk, 16));
  nn::AdamConfig opt;
  opt.lr = 3e-3;
  for (int it = 0; it < 8; it++) t.train_step(batch, opt);

  auto clip = random_clip(rng, sk, 64);
  auto whole = t.encode(clip);
  REQUIRE(whole.steps == 16);

  auto chunked = [&](const std::vector<int>& sizes) {
    auto st = t.encode_begin();
    tok::TokenGrid acc(0, whole.layers, whole.parts, whole.codebook);
    int at = 0;
    for (int s : sizes) {
      kin::Clip chunk(s, clip.channels, clip.fps);
      std::copy_n(clip.frame(at), size_t(s) * clip.channels, chunk.frame(0));
      auto g = t.encode_step(st, chunk);
      acc.idx.insert(acc.idx.end(), g.idx.begin(), g.idx.end());
      acc.steps += g.steps;
      at += s;
    }
    return acc;
  };
  CHECK(grids_equal(whole, chunked({8, 8, 8, 8, 8, 8, 8, 8})));
  CHECK(grids_equal(whole, chunked({4, 12, 20, 28})));
  CHECK(grids_equal(whole, chunked({64})));
}

TEST_CASE("chunked decode matches whole-grid decode bit for bit") {
  auto sk = kin::default_skeleton();
  tok::Tokenizer t(small_config(), sk, 44);
  Rng rng(12);
  std::vector<kin::Clip> batch;
  for (int i = 0; i < 4; i++) batch.push_back(random_clip(rng, sk, 16));
  nn::AdamConfig opt;
  for (int it = 0; it < 8; it++) t.train_step(batch, opt);

  auto grid = t.encode(random_clip(rng, sk, 48));
  auto whole = t.decode(grid);
  REQUIRE(whole.frames == 48);

  auto st = t.decode_begin();
  std::vector<double> acc;
  for (int r0 = 0; r0 < grid.steps;) {
    int n = std::min(grid.steps - r0, (r0 % 2 == 0) ? 1 : 3);
    auto part = t.decode_step(st, grid_rows(grid, r0, n));
    acc.insert(acc.end(), part.data.begin(), part.data.end());
    r0 += n;
  }
  REQUIRE(acc.size() == whole.data.size());
  CHECK(acc == whole.data);
}

TEST_CASE("batched training encoder agrees with the streaming machine") {
  auto sk = kin::default_skeleton();
  auto cfg = small_config();
  tok::Tokenizer t(cfg, sk, 45);
  Rng rng(13);
  std::vector<kin::Clip> batch;
  for (int i = 0; i < 4; i++) batch.push_back(random_clip(rng, sk, 16));
  nn::AdamConfig opt;
  for (int it = 0; it < 10; it++) t.train_step(batch, opt);

  // Within the window cap the streaming windows cover the full history, so
  // quantizing the batched latents must reproduce the streamed indices.
  auto clip = random_clip(rng, sk, 16);
  auto grid = t.encode(clip);
  auto lat = t.encode_latents(clip);
  const int d = cfg.latent_dim;
  for (int s = 0; s < grid.steps; s++)
    for (int p = 0; p < grid.parts; p++) {
      auto qr = t.quantizer(p).quantize(lat.data() + (size_t(s) * grid.parts + p) * d, 1);
      for (int q = 0; q < grid.layers; q++) CHECK(int(grid.at(s, q, p)) == qr.indices[q]);
    }
}

TEST_CASE("front padding completes partial windows") {
  auto sk = kin::default_skeleton();
  tok::Tokenizer t(small_config(), sk, 46);
  Rng rng(14);
  auto clip = random_clip(rng, sk, 66);
  auto grid = t.encode(clip);
  CHECK(grid.steps == 17);  // padded to 68 frames

  auto strict_cfg = small_config();
  strict_cfg.pad_incomplete = false;
  tok::Tokenizer strict(strict_cfg, sk, 46);
  CHECK_THROWS_AS(strict.encode(clip), Error);
  kin::Clip empty(0, sk.channels());
  CHECK_THROWS_AS(t.encode(empty), Error);
}

TEST_CASE("training reduces the tokenizer loss") {
  auto sk = kin::default_skeleton();
  auto cfg = small_config();
  tok::Tokenizer t(cfg, sk, 47);
  Rng rng(15);
  std::vector<kin::Clip> data;
  for (int i = 0; i < 6; i++) data.push_back(sinusoid_clip(sk, 16, i * 0.9));
  nn::AdamConfig opt;
  opt.lr = 4e-3;
  double first = 0, last = 0;
  const int iters = 300;
  for (int it = 0; it < iters; it++) {
    std::vector<kin::Clip> batch = {data[it % data.size()], data[(it + 1) % data.size()],
                                    data[(it + 2) % data.size()]};
    auto stats = t.train_step(batch, opt);
    if (it < 5) first += stats.total / 5;
    if (it >= iters - 5) last += stats.total / 5;
    if (it == iters / 2) t.end_epoch(rng);
  }
  CHECK(last < 0.7 * first);
}

TEST_CASE("tokenizer loss gradients match finite differences") {
  auto sk = kin::default_skeleton();
  auto cfg = small_config();
  cfg.enc_blocks = 1;
  cfg.dec_blocks = 1;
  tok::Tokenizer t(cfg, sk, 48);
  Rng rng(16);
  std::vector<kin::Clip> batch;
  for (int i = 0; i < 2; i++) batch.push_back(random_clip(rng, sk, 8));
  nn::AdamConfig opt;
  opt.lr = 2e-3;
  for (int it = 0; it < 6; it++) t.train_step(batch, opt);  // move off the zero init

  nn::Graph g;
  nn::TP loss;
  t.build_loss(g, batch, true, &loss);
  t.params().zero_grad();
  g.backward(loss);

  auto loss_at = [&]() {
    nn::Graph g2;
    nn::TP l2;
    t.build_loss(g2, batch, true, &l2);
    return l2->v[0];
  };

  auto& params = t.params().params();
  int checked = 0;
  for (size_t pi = 0; pi < params.size(); pi += 7) {
    auto& p = params[pi];
    size_t j = rng.next_u64() % p.t->size();
    const double analytic = p.t->g[j];
    const double h = 1e-5;
    const double save = p.t->v[j];
    p.t->v[j] = save + h;
    const double up = loss_at();
    p.t->v[j] = save - h;
    const double down = loss_at();
    p.t->v[j] = save;
    const double fd = (up - down) / (2 * h);
    const double denom = std::max({std::fabs(analytic), std::fabs(fd), 1e-6});
    INFO(p.name << "[" << j << "] analytic " << analytic << " fd " << fd);
    CHECK(std::fabs(analytic - fd) / denom < 2e-3);
    checked++;
  }
  CHECK(checked >= 10);
}

namespace {

// The per-layer penalty the loss applies: squared distance between each
// layer's residual input and its chosen entry, averaged over rows,
// summed over layers.
double commitment_of(const rvq::QuantizeResult& qr, int layers, int d, double eta) {
  double total = 0;
  for (int q = 0; q < layers; q++) {
    double layer = 0;
    for (int i = 0; i < qr.n; i++)
      for (int c = 0; c < d; c++) {
        double diff = qr.residual_in[(size_t(i) * layers + q) * d + c] -
                      qr.layer_entry[(size_t(i) * layers + q) * d + c];
        layer += diff * diff;
      }
    total += layer / qr.n;
  }
  return eta * total;
}

}  // namespace

TEST_CASE("commitment term matches hand arithmetic") {
  // One latent at distance 1 from its code, eta 0.5: penalty 0.5.
  rvq::RvqConfig rc;
  rc.layers = 1;
  rc.codebook = 2;
  rc.dim = 2;
  Rng rng(17);
  rvq::Rvq q(rc, rng);
  q.mutable_codebook(0) = {0.0, 0.0, 9.0, 9.0};
  const double z[2] = {1.0, 0.0};
  auto qr = q.quantize(z, 1);
  REQUIRE(qr.indices[0] == 0);
  CHECK(commitment_of(qr, 1, 2, 0.5) == doctest::Approx(0.5));
}

TEST_CASE("loss commitment equals the per-layer residual penalty") {
  auto sk = kin::default_skeleton();
  auto cfg = small_config();
  tok::Tokenizer t(cfg, sk, 49);
  Rng rng(22);
  auto clip = random_clip(rng, sk, 16);
  nn::Graph g;
  nn::TP loss;
  auto stats = t.build_loss(g, {clip}, false, &loss);

  // Same batched encoder path, so the latents match bit for bit.
  auto lat = t.encode_latents(clip);
  const int d = cfg.latent_dim;
  const int S = 16 / cfg.frames_per_latent;
  double expect = 0;
  for (int p = 0; p < 3; p++) {
    std::vector<double> zp(size_t(S) * d);
    for (int s = 0; s < S; s++)
      std::copy_n(lat.begin() + (size_t(s) * 3 + p) * d, d, zp.begin() + size_t(s) * d);
    auto qr = t.quantizer(p).quantize(zp.data(), S);
    expect += commitment_of(qr, cfg.rvq_layers, d, cfg.eta);
  }
  CHECK(stats.commit == doctest::Approx(expect).epsilon(1e-9));
}

TEST_CASE("mpjpe reports mean joint displacement") {
  auto sk = kin::default_skeleton();
  tok::Tokenizer t(small_config(), sk, 50);
  Rng rng(18);
  auto a = random_clip(rng, sk, 10);
  CHECK(t.mpjpe(a, a) == 0.0);
  auto b = a;
  for (int f = 0; f < b.frames; f++) b.at(f, 2) += 0.1;  // raise the root
  CHECK(t.mpjpe(a, b) == doctest::Approx(0.1));
}
