// SPDX-License-Identifier: Apache-2.0
#include "mstream/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

namespace mstream::nn {

namespace {
using RM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<RM>;
using CMapRM = Eigen::Map<const RM>;

CMapRM cmap(const TP& t) { return CMapRM(t->v.data(), t->rows, t->cols); }
MapRM vmap(const TP& t) { return MapRM(t->v.data(), t->rows, t->cols); }
MapRM gmap(const TP& t) { return MapRM(t->g.data(), t->rows, t->cols); }

void check(bool ok, const std::string& what) {
  if (!ok) raise(Err::DimensionError, what);
}
}  // namespace

TP Graph::constant(const std::vector<double>& data, int rows, int cols) {
  check(data.size() == size_t(rows) * cols, "constant size");
  TP t = value(rows, cols);
  t->v = data;
  return t;
}

TP Graph::matmul(TP a, TP b) {
  check(a->cols == b->rows, "matmul inner dims");
  TP out = std::make_shared<Tensor>(a->rows, b->cols, a->rg || b->rg);
  vmap(out).noalias() = cmap(a) * cmap(b);
  if (out->rg)
    push([a, b, out] {
      if (a->rg) gmap(a).noalias() += gmap(out) * cmap(b).transpose();
      if (b->rg) gmap(b).noalias() += cmap(a).transpose() * gmap(out);
    });
  return out;
}

TP Graph::matmul_nt(TP a, TP b) {
  check(a->cols == b->cols, "matmul_nt inner dims");
  TP out = std::make_shared<Tensor>(a->rows, b->rows, a->rg || b->rg);
  vmap(out).noalias() = cmap(a) * cmap(b).transpose();
  if (out->rg)
    push([a, b, out] {
      if (a->rg) gmap(a).noalias() += gmap(out) * cmap(b);
      if (b->rg) gmap(b).noalias() += gmap(out).transpose() * cmap(a);
    });
  return out;
}

TP Graph::transpose(TP a) {
  TP out = std::make_shared<Tensor>(a->cols, a->rows, a->rg);
  vmap(out) = cmap(a).transpose();
  if (out->rg)
    push([a, out] { gmap(a) += gmap(out).transpose(); });
  return out;
}

TP Graph::linear(TP x, TP w, TP b) {
  check(x->cols == w->rows, "linear in dim");
  check(b->rows == 1 && b->cols == w->cols, "linear bias dim");
  TP out = std::make_shared<Tensor>(x->rows, w->cols, x->rg || w->rg || b->rg);
  vmap(out).noalias() = cmap(x) * cmap(w);
  vmap(out).rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b->v.data(), b->cols);
  if (out->rg)
    push([x, w, b, out] {
      if (x->rg) gmap(x).noalias() += gmap(out) * cmap(w).transpose();
      if (w->rg) gmap(w).noalias() += cmap(x).transpose() * gmap(out);
      if (b->rg)
        Eigen::Map<Eigen::RowVectorXd>(b->g.data(), b->cols) += gmap(out).colwise().sum();
    });
  return out;
}

TP Graph::add(TP a, TP b) {
  check(a->rows == b->rows && a->cols == b->cols, "add shape");
  TP out = std::make_shared<Tensor>(a->rows, a->cols, a->rg || b->rg);
  for (size_t i = 0; i < out->size(); i++) out->v[i] = a->v[i] + b->v[i];
  if (out->rg)
    push([a, b, out] {
      if (a->rg)
        for (size_t i = 0; i < out->size(); i++) a->g[i] += out->g[i];
      if (b->rg)
        for (size_t i = 0; i < out->size(); i++) b->g[i] += out->g[i];
    });
  return out;
}

TP Graph::sub(TP a, TP b) { return add_scaled(a, 1.0, b, -1.0); }

TP Graph::add_scaled(TP a, double sa, TP b, double sb) {
  check(a->rows == b->rows && a->cols == b->cols, "add_scaled shape");
  TP out = std::make_shared<Tensor>(a->rows, a->cols, a->rg || b->rg);
  for (size_t i = 0; i < out->size(); i++) out->v[i] = sa * a->v[i] + sb * b->v[i];
  if (out->rg)
    push([a, b, out, sa, sb] {
      if (a->rg)
        for (size_t i = 0; i < out->size(); i++) a->g[i] += sa * out->g[i];
      if (b->rg)
        for (size_t i = 0; i < out->size(); i++) b->g[i] += sb * out->g[i];
    });
  return out;
}

TP Graph::mul(TP a, TP b) {
  check(a->rows == b->rows && a->cols == b->cols, "mul shape");
  TP out = std::make_shared<Tensor>(a->rows, a->cols, a->rg || b->rg);
  for (size_t i = 0; i < out->size(); i++) out->v[i] = a->v[i] * b->v[i];
  if (out->rg)
    push([a, b, out] {
      if (a->rg)
        for (size_t i = 0; i < out->size(); i++) a->g[i] += b->v[i] * out->g[i];
      if (b->rg)
        for (size_t i = 0; i < out->size(); i++) b->g[i] += a->v[i] * out->g[i];
    });
  return out;
}

TP Graph::scale(TP a, double s) {
  TP out = std::make_shared<Tensor>(a->rows, a->cols, a->rg);
  for (size_t i = 0; i < out->size(); i++) out->v[i] = s * a->v[i];
  if (out->rg)
    push([a, out, s] {
      for (size_t i = 0; i < out->size(); i++) a->g[i] += s * out->g[i];
    });
  return out;
}

TP Graph::add_const(TP a, const std::vector<double>& c) {
  TP out = std::make_shared<Tensor>(a->rows, a->cols, a->rg);
  if (c.size() == size_t(a->cols)) {
    for (int r = 0; r < a->rows; r++)
      for (int j = 0; j < a->cols; j++) out->at(r, j) = a->at(r, j) + c[j];
  } else {
    check(c.size() == a->size(), "add_const size");
    for (size_t i = 0; i < out->size(); i++) out->v[i] = a->v[i] + c[i];
  }
  if (out->rg)
    push([a, out] {
      for (size_t i = 0; i < out->size(); i++) a->g[i] += out->g[i];
    });
  return out;
}

TP Graph::gelu(TP a) {
  TP out = std::make_shared<Tensor>(a->rows, a->cols, a->rg);
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  for (size_t i = 0; i < out->size(); i++) {
    const double x = a->v[i];
    out->v[i] = 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
  }
  if (out->rg)
    push([a, out] {
      for (size_t i = 0; i < out->size(); i++) {
        const double x = a->v[i];
        const double u = k * (x + 0.044715 * x * x * x);
        const double t = std::tanh(u);
        const double du = k * (1.0 + 3 * 0.044715 * x * x);
        a->g[i] += out->g[i] * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
      }
    });
  return out;
}

TP Graph::relu(TP a) {
  TP out = std::make_shared<Tensor>(a->rows, a->cols, a->rg);
  for (size_t i = 0; i < out->size(); i++) out->v[i] = a->v[i] > 0 ? a->v[i] : 0.0;
  if (out->rg)
    push([a, out] {
      for (size_t i = 0; i < out->size(); i++)
        if (a->v[i] > 0) a->g[i] += out->g[i];
    });
  return out;
}

TP Graph::sigmoid(TP a) {
  TP out = std::make_shared<Tensor>(a->rows, a->cols, a->rg);
  for (size_t i = 0; i < out->size(); i++) out->v[i] = 1.0 / (1.0 + std::exp(-a->v[i]));
  if (out->rg)
    push([a, out] {
      for (size_t i = 0; i < out->size(); i++)
        a->g[i] += out->g[i] * out->v[i] * (1.0 - out->v[i]);
    });
  return out;
}

TP Graph::exp_(TP a) {
  TP out = std::make_shared<Tensor>(a->rows, a->cols, a->rg);
  for (size_t i = 0; i < out->size(); i++) out->v[i] = std::exp(a->v[i]);
  if (out->rg)
    push([a, out] {
      for (size_t i = 0; i < out->size(); i++) a->g[i] += out->g[i] * out->v[i];
    });
  return out;
}

TP Graph::mul_scalar_node(TP a, TP s) {
  check(s->size() == 1, "mul_scalar_node scalar");
  TP out = std::make_shared<Tensor>(a->rows, a->cols, a->rg || s->rg);
  const double sv = s->v[0];
  for (size_t i = 0; i < out->size(); i++) out->v[i] = sv * a->v[i];
  if (out->rg)
    push([a, s, out] {
      if (a->rg)
        for (size_t i = 0; i < out->size(); i++) a->g[i] += s->v[0] * out->g[i];
      if (s->rg) {
        double acc = 0.0;
        for (size_t i = 0; i < out->size(); i++) acc += a->v[i] * out->g[i];
        s->g[0] += acc;
      }
    });
  return out;
}

TP Graph::layernorm(TP x, TP gain, TP bias) {
  check(gain->cols == x->cols && bias->cols == x->cols, "layernorm affine dims");
  constexpr double eps = 1e-5;
  TP out = std::make_shared<Tensor>(x->rows, x->cols, x->rg || gain->rg || bias->rg);
  const int n = x->cols;
  auto mu = std::make_shared<std::vector<double>>(x->rows);
  auto istd = std::make_shared<std::vector<double>>(x->rows);
  for (int r = 0; r < x->rows; r++) {
    double m = 0;
    for (int j = 0; j < n; j++) m += x->at(r, j);
    m /= n;
    double var = 0;
    for (int j = 0; j < n; j++) {
      const double d = x->at(r, j) - m;
      var += d * d;
    }
    var /= n;
    const double is = 1.0 / std::sqrt(var + eps);
    (*mu)[r] = m;
    (*istd)[r] = is;
    for (int j = 0; j < n; j++)
      out->at(r, j) = (x->at(r, j) - m) * is * gain->v[j] + bias->v[j];
  }
  if (out->rg)
    push([x, gain, bias, out, mu, istd, n] {
      for (int r = 0; r < x->rows; r++) {
        const double m = (*mu)[r], is = (*istd)[r];
        double sum_dy_g = 0, sum_dy_g_xhat = 0;
        for (int j = 0; j < n; j++) {
          const double xhat = (x->at(r, j) - m) * is;
          const double dyg = out->g[size_t(r) * n + j] * gain->v[j];
          sum_dy_g += dyg;
          sum_dy_g_xhat += dyg * xhat;
          if (gain->rg) gain->g[j] += out->g[size_t(r) * n + j] * xhat;
          if (bias->rg) bias->g[j] += out->g[size_t(r) * n + j];
        }
        if (x->rg) {
          for (int j = 0; j < n; j++) {
            const double xhat = (x->at(r, j) - m) * is;
            const double dyg = out->g[size_t(r) * n + j] * gain->v[j];
            x->g[size_t(r) * n + j] +=
                is * (dyg - sum_dy_g / n - xhat * sum_dy_g_xhat / n);
          }
        }
      }
    });
  return out;
}

TP Graph::embed(TP table, const std::vector<int>& ids) {
  const int d = table->cols;
  TP out = std::make_shared<Tensor>(int(ids.size()), d, table->rg);
  for (size_t i = 0; i < ids.size(); i++) {
    const int id = ids[i];
    check(id >= 0 && id < table->rows, "embedding id out of range");
    std::copy_n(table->v.data() + size_t(id) * d, d, out->v.data() + i * d);
  }
  if (out->rg)
    push([table, out, ids, d] {
      for (size_t i = 0; i < ids.size(); i++)
        for (int j = 0; j < d; j++) table->g[size_t(ids[i]) * d + j] += out->g[i * d + j];
    });
  return out;
}

TP Graph::gather_cols(TP x, const std::vector<int>& idx) {
  TP out = std::make_shared<Tensor>(x->rows, int(idx.size()), x->rg);
  for (int r = 0; r < x->rows; r++)
    for (size_t j = 0; j < idx.size(); j++) out->at(r, int(j)) = x->at(r, idx[j]);
  if (out->rg)
    push([x, out, idx] {
      for (int r = 0; r < x->rows; r++)
        for (size_t j = 0; j < idx.size(); j++)
          x->g[size_t(r) * x->cols + idx[j]] += out->g[size_t(r) * out->cols + j];
    });
  return out;
}

TP Graph::scatter_cols(const std::vector<TP>& parts, const std::vector<std::vector<int>>& idx,
                       int total_cols) {
  check(parts.size() == idx.size() && !parts.empty(), "scatter_cols arity");
  const int rows = parts[0]->rows;
  bool rg = false;
  for (const auto& p : parts) {
    check(p->rows == rows, "scatter_cols rows");
    rg = rg || p->rg;
  }
  TP out = std::make_shared<Tensor>(rows, total_cols, rg);
  for (size_t p = 0; p < parts.size(); p++) {
    check(parts[p]->cols == int(idx[p].size()), "scatter_cols part width");
    for (int r = 0; r < rows; r++)
      for (size_t j = 0; j < idx[p].size(); j++) out->at(r, idx[p][j]) = parts[p]->at(r, int(j));
  }
  if (out->rg)
    push([parts, out, idx] {
      for (size_t p = 0; p < parts.size(); p++) {
        if (!parts[p]->rg) continue;
        for (int r = 0; r < out->rows; r++)
          for (size_t j = 0; j < idx[p].size(); j++)
            parts[p]->g[size_t(r) * parts[p]->cols + j] +=
                out->g[size_t(r) * out->cols + idx[p][j]];
      }
    });
  return out;
}

TP Graph::row_slice(TP x, int r0, int n) {
  check(r0 >= 0 && r0 + n <= x->rows, "row_slice range");
  TP out = std::make_shared<Tensor>(n, x->cols, x->rg);
  std::copy_n(x->v.data() + size_t(r0) * x->cols, size_t(n) * x->cols, out->v.data());
  if (out->rg)
    push([x, out, r0] {
      for (size_t i = 0; i < out->size(); i++) x->g[size_t(r0) * x->cols + i] += out->g[i];
    });
  return out;
}

TP Graph::concat_rows(const std::vector<TP>& parts) {
  check(!parts.empty(), "concat_rows empty");
  const int cols = parts[0]->cols;
  int rows = 0;
  bool rg = false;
  for (const auto& p : parts) {
    check(p->cols == cols, "concat_rows cols");
    rows += p->rows;
    rg = rg || p->rg;
  }
  TP out = std::make_shared<Tensor>(rows, cols, rg);
  size_t off = 0;
  for (const auto& p : parts) {
    std::copy_n(p->v.data(), p->size(), out->v.data() + off);
    off += p->size();
  }
  if (out->rg)
    push([parts, out] {
      size_t off2 = 0;
      for (const auto& p : parts) {
        if (p->rg)
          for (size_t i = 0; i < p->size(); i++) p->g[i] += out->g[off2 + i];
        off2 += p->size();
      }
    });
  return out;
}

TP Graph::pool_rows(TP x, int group) {
  check(group > 0 && x->rows % group == 0, "pool_rows group");
  const int n = x->rows / group;
  TP out = std::make_shared<Tensor>(n, x->cols, x->rg);
  for (int i = 0; i < n; i++)
    for (int k = 0; k < group; k++)
      for (int j = 0; j < x->cols; j++) out->at(i, j) += x->at(i * group + k, j) / group;
  if (out->rg)
    push([x, out, group] {
      for (int i = 0; i < out->rows; i++)
        for (int k = 0; k < group; k++)
          for (int j = 0; j < x->cols; j++)
            x->g[size_t(i * group + k) * x->cols + j] +=
                out->g[size_t(i) * x->cols + j] / group;
    });
  return out;
}

TP Graph::concat_group_rows(TP x, int group) {
  check(group > 0 && x->rows % group == 0, "concat_group_rows group");
  const int n = x->rows / group;
  TP out = std::make_shared<Tensor>(n, x->cols * group, x->rg);
  std::copy(x->v.begin(), x->v.end(), out->v.begin());  // row-major layout coincides
  if (out->rg)
    push([x, out] {
      for (size_t i = 0; i < x->size(); i++) x->g[i] += out->g[i];
    });
  return out;
}

TP Graph::repeat_rows(TP x, int k) {
  TP out = std::make_shared<Tensor>(x->rows * k, x->cols, x->rg);
  for (int r = 0; r < x->rows; r++)
    for (int i = 0; i < k; i++)
      std::copy_n(x->v.data() + size_t(r) * x->cols, x->cols,
                  out->v.data() + size_t(r * k + i) * x->cols);
  if (out->rg)
    push([x, out, k] {
      for (int r = 0; r < x->rows; r++)
        for (int i = 0; i < k; i++)
          for (int j = 0; j < x->cols; j++)
            x->g[size_t(r) * x->cols + j] += out->g[size_t(r * k + i) * x->cols + j];
    });
  return out;
}

TP Graph::split_row_channels(TP x, int k) {
  check(x->cols % k == 0, "split_row_channels width");
  TP out = std::make_shared<Tensor>(x->rows * k, x->cols / k, x->rg);
  std::copy(x->v.begin(), x->v.end(), out->v.begin());
  if (out->rg)
    push([x, out] {
      for (size_t i = 0; i < x->size(); i++) x->g[i] += out->g[i];
    });
  return out;
}

TP Graph::l2_normalize_rows(TP x) {
  TP out = std::make_shared<Tensor>(x->rows, x->cols, x->rg);
  auto norms = std::make_shared<std::vector<double>>(x->rows);
  for (int r = 0; r < x->rows; r++) {
    double s = 0;
    for (int j = 0; j < x->cols; j++) s += x->at(r, j) * x->at(r, j);
    const double n = std::sqrt(s);
    if (n < 1e-12) raise(Err::DegenerateEmbedding, "zero row in l2 normalize");
    (*norms)[r] = n;
    for (int j = 0; j < x->cols; j++) out->at(r, j) = x->at(r, j) / n;
  }
  if (out->rg)
    push([x, out, norms] {
      for (int r = 0; r < x->rows; r++) {
        const double n = (*norms)[r];
        double dot = 0;
        for (int j = 0; j < x->cols; j++)
          dot += out->g[size_t(r) * x->cols + j] * out->v[size_t(r) * x->cols + j];
        for (int j = 0; j < x->cols; j++)
          x->g[size_t(r) * x->cols + j] +=
              (out->g[size_t(r) * x->cols + j] - dot * out->v[size_t(r) * x->cols + j]) / n;
      }
    });
  return out;
}

TP Graph::attention_core(TP q, TP k, TP v, int batch, int time, int heads, int window,
                         bool causal, bool alibi) {
  const int d = q->cols;
  check(k->cols == d && v->cols == d, "attention dims");
  check(q->rows == batch * time && k->rows == q->rows && v->rows == q->rows,
        "attention rows");
  check(d % heads == 0, "attention heads divide width");
  const int dh = d / heads;
  const double sc = 1.0 / std::sqrt(double(dh));
  TP out = std::make_shared<Tensor>(q->rows, d, q->rg || k->rg || v->rg);
  auto alphas = std::make_shared<std::vector<double>>(size_t(batch) * heads * time * time, 0.0);

  std::vector<double> slopes(heads, 0.0);
  if (alibi)
    for (int h = 0; h < heads; h++) slopes[h] = std::pow(2.0, -8.0 * (h + 1) / heads);

  std::vector<double> s(time);
  for (int b = 0; b < batch; b++) {
    for (int h = 0; h < heads; h++) {
      double* alpha = alphas->data() + (size_t(b) * heads + h) * time * time;
      for (int i = 0; i < time; i++) {
        const int jlo = causal && window > 0 ? std::max(0, i - window + 1) : 0;
        const int jhi = causal ? i : time - 1;
        const double* qi = q->v.data() + size_t(b * time + i) * d + h * dh;
        double mx = -1e300;
        for (int j = jlo; j <= jhi; j++) {
          const double* kj = k->v.data() + size_t(b * time + j) * d + h * dh;
          double dot = 0;
          for (int c = 0; c < dh; c++) dot += qi[c] * kj[c];
          s[j] = dot * sc - slopes[h] * std::abs(i - j);
          mx = std::max(mx, s[j]);
        }
        double z = 0;
        for (int j = jlo; j <= jhi; j++) {
          s[j] = std::exp(s[j] - mx);
          z += s[j];
        }
        double* oi = out->v.data() + size_t(b * time + i) * d + h * dh;
        for (int j = jlo; j <= jhi; j++) {
          const double a = s[j] / z;
          alpha[size_t(i) * time + j] = a;
          const double* vj = v->v.data() + size_t(b * time + j) * d + h * dh;
          for (int c = 0; c < dh; c++) oi[c] += a * vj[c];
        }
      }
    }
  }
  if (out->rg)
    push([q, k, v, out, alphas, batch, time, heads, dh, d, sc, causal, window] {
      std::vector<double> ds(time);
      for (int b = 0; b < batch; b++) {
        for (int h = 0; h < heads; h++) {
          const double* alpha = alphas->data() + (size_t(b) * heads + h) * time * time;
          for (int i = 0; i < time; i++) {
            const int jlo = causal && window > 0 ? std::max(0, i - window + 1) : 0;
            const int jhi = causal ? i : time - 1;
            const double* goi = out->g.data() + size_t(b * time + i) * d + h * dh;
            const double* qi = q->v.data() + size_t(b * time + i) * d + h * dh;
            double dot_a_da = 0;
            for (int j = jlo; j <= jhi; j++) {
              const double a = alpha[size_t(i) * time + j];
              if (a == 0.0) {
                ds[j] = 0;
                continue;
              }
              const double* vj = v->v.data() + size_t(b * time + j) * d + h * dh;
              double da = 0;
              for (int c = 0; c < dh; c++) da += goi[c] * vj[c];
              if (v->rg) {
                double* gvj = v->g.data() + size_t(b * time + j) * d + h * dh;
                for (int c = 0; c < dh; c++) gvj[c] += a * goi[c];
              }
              ds[j] = a * da;
              dot_a_da += a * da;
            }
            for (int j = jlo; j <= jhi; j++) {
              const double a = alpha[size_t(i) * time + j];
              if (a == 0.0) continue;
              const double dsij = ds[j] - a * dot_a_da;
              const double* kj = k->v.data() + size_t(b * time + j) * d + h * dh;
              if (q->rg) {
                double* gqi = q->g.data() + size_t(b * time + i) * d + h * dh;
                for (int c = 0; c < dh; c++) gqi[c] += sc * dsij * kj[c];
              }
              if (k->rg) {
                double* gkj = k->g.data() + size_t(b * time + j) * d + h * dh;
                for (int c = 0; c < dh; c++) gkj[c] += sc * dsij * qi[c];
              }
            }
          }
        }
      }
    });
  return out;
}

TP Graph::ce_loss(TP logits, const std::vector<int>& targets,
                  const std::vector<double>& weights, std::vector<double>* per_row_ce) {
  check(targets.size() == size_t(logits->rows), "ce targets");
  check(weights.size() == size_t(logits->rows), "ce weights");
  const int V = logits->cols;
  double wsum = 0;
  for (double w : weights) wsum += w;
  if (wsum <= 0) raise(Err::MaskError, "cross entropy with no active rows");
  TP out = std::make_shared<Tensor>(1, 1, logits->rg);
  auto probs = std::make_shared<std::vector<double>>(logits->v);
  double acc = 0;
  for (int r = 0; r < logits->rows; r++) {
    double* p = probs->data() + size_t(r) * V;
    double mx = p[0];
    for (int j = 1; j < V; j++) mx = std::max(mx, p[j]);
    double z = 0;
    for (int j = 0; j < V; j++) {
      p[j] = std::exp(p[j] - mx);
      z += p[j];
    }
    for (int j = 0; j < V; j++) p[j] /= z;
    const int t = targets[r];
    check(t >= 0 && t < V, "ce target range");
    const double ce = -std::log(std::max(p[t], 1e-300));
    if (per_row_ce) per_row_ce->push_back(ce);
    acc += weights[r] * ce;
  }
  out->v[0] = acc / wsum;
  if (out->rg)
    push([logits, out, probs, targets, weights, wsum, V] {
      const double up = out->g[0] / wsum;
      for (int r = 0; r < logits->rows; r++) {
        if (weights[r] == 0.0) continue;
        const double* p = probs->data() + size_t(r) * V;
        double* gl = logits->g.data() + size_t(r) * V;
        const double wr = weights[r] * up;
        for (int j = 0; j < V; j++) gl[j] += wr * p[j];
        gl[targets[r]] -= wr;
      }
    });
  return out;
}

TP Graph::soft_ce(TP logits, const std::vector<double>& target_rows) {
  check(target_rows.size() == logits->size(), "soft_ce target size");
  const int V = logits->cols, n = logits->rows;
  TP out = std::make_shared<Tensor>(1, 1, logits->rg);
  auto probs = std::make_shared<std::vector<double>>(logits->v);
  double acc = 0;
  for (int r = 0; r < n; r++) {
    double* p = probs->data() + size_t(r) * V;
    double mx = p[0];
    for (int j = 1; j < V; j++) mx = std::max(mx, p[j]);
    double z = 0;
    for (int j = 0; j < V; j++) {
      p[j] = std::exp(p[j] - mx);
      z += p[j];
    }
    for (int j = 0; j < V; j++) {
      p[j] /= z;
      const double y = target_rows[size_t(r) * V + j];
      if (y > 0) acc -= y * std::log(std::max(p[j], 1e-300));
    }
  }
  out->v[0] = acc / n;
  if (out->rg)
    push([logits, out, probs, target_rows, V, n] {
      const double up = out->g[0] / n;
      for (int r = 0; r < n; r++)
        for (int j = 0; j < V; j++)
          logits->g[size_t(r) * V + j] +=
              up * (probs->at(size_t(r) * V + j) - target_rows[size_t(r) * V + j]);
    });
  return out;
}

TP Graph::l1_mean(TP a, TP b) {
  check(a->size() == b->size(), "l1_mean size");
  TP out = std::make_shared<Tensor>(1, 1, a->rg || b->rg);
  double acc = 0;
  for (size_t i = 0; i < a->size(); i++) acc += std::abs(a->v[i] - b->v[i]);
  out->v[0] = acc / double(a->size());
  if (out->rg)
    push([a, b, out] {
      const double up = out->g[0] / double(a->size());
      for (size_t i = 0; i < a->size(); i++) {
        const double d = a->v[i] - b->v[i];
        const double s = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
        if (a->rg) a->g[i] += up * s;
        if (b->rg) b->g[i] -= up * s;
      }
    });
  return out;
}

TP Graph::mse_mean(TP a, const std::vector<double>& target) {
  check(target.size() == a->size(), "mse size");
  TP out = std::make_shared<Tensor>(1, 1, a->rg);
  double acc = 0;
  for (size_t i = 0; i < a->size(); i++) {
    const double d = a->v[i] - target[i];
    acc += d * d;
  }
  out->v[0] = acc / double(a->size());
  if (out->rg)
    push([a, out, target] {
      const double up = 2.0 * out->g[0] / double(a->size());
      for (size_t i = 0; i < a->size(); i++) a->g[i] += up * (a->v[i] - target[i]);
    });
  return out;
}

TP Graph::sq_dist_rows(TP a, const std::vector<double>& target_rows) {
  check(target_rows.size() == a->size(), "sq_dist size");
  TP out = std::make_shared<Tensor>(1, 1, a->rg);
  double acc = 0;
  for (size_t i = 0; i < a->size(); i++) {
    const double d = a->v[i] - target_rows[i];
    acc += d * d;
  }
  out->v[0] = acc / double(a->rows);
  if (out->rg)
    push([a, out, target_rows] {
      const double up = 2.0 * out->g[0] / double(a->rows);
      for (size_t i = 0; i < a->size(); i++) a->g[i] += up * (a->v[i] - target_rows[i]);
    });
  return out;
}

TP Graph::smooth_l1(TP pred, const std::vector<double>& target, double beta) {
  check(target.size() == pred->size(), "smooth_l1 size");
  TP out = std::make_shared<Tensor>(1, 1, pred->rg);
  double acc = 0;
  for (size_t i = 0; i < pred->size(); i++) {
    const double d = std::abs(pred->v[i] - target[i]);
    acc += d <= beta ? 0.5 * d * d / beta : d - 0.5 * beta;
  }
  out->v[0] = acc / double(pred->size());
  if (out->rg)
    push([pred, out, target, beta] {
      const double up = out->g[0] / double(pred->size());
      for (size_t i = 0; i < pred->size(); i++) {
        const double d = pred->v[i] - target[i];
        pred->g[i] += up * std::clamp(d / beta, -1.0, 1.0);
      }
    });
  return out;
}

TP Graph::mean_all(TP a) {
  TP out = std::make_shared<Tensor>(1, 1, a->rg);
  double acc = 0;
  for (double x : a->v) acc += x;
  out->v[0] = acc / double(a->size());
  if (out->rg)
    push([a, out] {
      const double up = out->g[0] / double(a->size());
      for (size_t i = 0; i < a->size(); i++) a->g[i] += up;
    });
  return out;
}

TP Graph::sum_all(TP a) {
  TP out = std::make_shared<Tensor>(1, 1, a->rg);
  double acc = 0;
  for (double x : a->v) acc += x;
  out->v[0] = acc;
  if (out->rg)
    push([a, out] {
      for (size_t i = 0; i < a->size(); i++) a->g[i] += out->g[0];
    });
  return out;
}

TP Graph::custom_scalar(TP x, double value, std::vector<double> dvalue_dx) {
  check(dvalue_dx.size() == x->size(), "custom_scalar gradient size");
  TP out = std::make_shared<Tensor>(1, 1, x->rg);
  out->v[0] = value;
  if (out->rg) {
    auto grad = std::make_shared<std::vector<double>>(std::move(dvalue_dx));
    push([x, out, grad] {
      for (size_t i = 0; i < x->size(); i++) x->g[i] += out->g[0] * (*grad)[i];
    });
  }
  return out;
}

void Graph::backward(TP loss) {
  if (!loss->rg) raise(Err::NotInitialized, "backward on a non-gradient tensor");
  check(loss->size() == 1, "backward expects scalar loss");
  if (!std::isfinite(loss->v[0])) raise(Err::NumericalError, "loss is not finite");
  loss->g[0] = 1.0;
  for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
}

std::vector<double> sinusoid_positions(int time, int dim) {
  std::vector<double> pe(size_t(time) * dim, 0.0);
  for (int t = 0; t < time; t++) {
    for (int i = 0; i + 1 < dim; i += 2) {
      const double freq = std::pow(10000.0, -double(i) / dim);
      pe[size_t(t) * dim + i] = std::sin(t * freq);
      pe[size_t(t) * dim + i + 1] = std::cos(t * freq);
    }
  }
  return pe;
}

}  // namespace mstream::nn
