#pragma once

// Double-precision reference implementations used as independent oracles.
// Nothing here calls into the library's op code.

#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <vector>

#include "rpt/model.hpp"

namespace ref {

struct Mat {
  int r = 0, c = 0;
  std::vector<double> v;

  Mat() = default;
  Mat(int rows, int cols, double fill = 0.0) : r(rows), c(cols), v(static_cast<std::size_t>(rows) * cols, fill) {}
  double& operator()(int i, int j) { return v[static_cast<std::size_t>(i) * c + j]; }
  double operator()(int i, int j) const { return v[static_cast<std::size_t>(i) * c + j]; }
};

inline Mat from(const rpt::Tensor& t) {
  Mat m(t.rows(), t.cols());
  for (std::size_t i = 0; i < t.size(); ++i) m.v[i] = t[i];
  return m;
}

inline rpt::Tensor to_tensor(const Mat& m) {
  rpt::Tensor t({m.r, m.c});
  for (std::size_t i = 0; i < m.v.size(); ++i) t[i] = static_cast<float>(m.v[i]);
  return t;
}

inline Mat random(int r, int c, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Mat m(r, c);
  for (double& x : m.v) x = u(rng);
  return m;
}

inline Mat matmul(const Mat& a, const Mat& b) {
  Mat o(a.r, b.c);
  for (int i = 0; i < a.r; ++i)
    for (int j = 0; j < b.c; ++j) {
      double s = 0.0;
      for (int k = 0; k < a.c; ++k) s += a(i, k) * b(k, j);
      o(i, j) = s;
    }
  return o;
}

inline Mat transpose(const Mat& a) {
  Mat o(a.c, a.r);
  for (int i = 0; i < a.r; ++i)
    for (int j = 0; j < a.c; ++j) o(j, i) = a(i, j);
  return o;
}

inline Mat add(const Mat& a, const Mat& b) {
  Mat o = a;
  for (std::size_t i = 0; i < o.v.size(); ++i) o.v[i] += b.v[i];
  return o;
}

inline Mat add_row(const Mat& a, const Mat& row) {
  Mat o = a;
  for (int i = 0; i < a.r; ++i)
    for (int j = 0; j < a.c; ++j) o(i, j) += row(0, j);
  return o;
}

inline Mat map(const Mat& a, const std::function<double(double)>& f) {
  Mat o = a;
  for (double& x : o.v) x = f(x);
  return o;
}

inline Mat softmax_rows(const Mat& a) {
  Mat o(a.r, a.c);
  for (int i = 0; i < a.r; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < a.c; ++j) mx = std::max(mx, a(i, j));
    double s = 0.0;
    for (int j = 0; j < a.c; ++j) s += std::exp(a(i, j) - mx);
    for (int j = 0; j < a.c; ++j) o(i, j) = std::exp(a(i, j) - mx) / s;
  }
  return o;
}

inline Mat log_softmax_rows(const Mat& a) {
  Mat p = softmax_rows(a);
  return map(p, [](double x) { return std::log(x); });
}

inline Mat normalize_rows(const Mat& a, double eps = 1e-5) {
  Mat o(a.r, a.c);
  for (int i = 0; i < a.r; ++i) {
    double mean = 0.0;
    for (int j = 0; j < a.c; ++j) mean += a(i, j);
    mean /= a.c;
    double var = 0.0;
    for (int j = 0; j < a.c; ++j) var += (a(i, j) - mean) * (a(i, j) - mean);
    var /= a.c;
    for (int j = 0; j < a.c; ++j) o(i, j) = (a(i, j) - mean) / std::sqrt(var + eps);
  }
  return o;
}

inline Mat layer_norm(const Mat& a, const Mat& gamma, const Mat& beta) {
  Mat o = normalize_rows(a);
  for (int i = 0; i < a.r; ++i)
    for (int j = 0; j < a.c; ++j) o(i, j) = o(i, j) * gamma(0, j) + beta(0, j);
  return o;
}

inline double gelu(double x) {
  const double c = std::sqrt(2.0 / M_PI);
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

inline Mat cols(const Mat& a, int b, int e) {
  Mat o(a.r, e - b);
  for (int i = 0; i < a.r; ++i)
    for (int j = b; j < e; ++j) o(i, j - b) = a(i, j);
  return o;
}

inline Mat rows(const Mat& a, int b, int e) {
  Mat o(e - b, a.c);
  for (int i = b; i < e; ++i)
    for (int j = 0; j < a.c; ++j) o(i - b, j) = a(i, j);
  return o;
}

inline double frobenius(const Mat& a) {
  double s = 0.0;
  for (double x : a.v) s += x * x;
  return std::sqrt(s);
}

inline double l2(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

/// ||a - b|| / max(||b||, floor), the relative error used by every gradient check.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b, double floor = 1e-8) {
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  return l2(d) / std::max(l2(b), floor);
}

/// Central differences of f around x.
inline std::vector<double> central_difference(const std::function<double(const std::vector<double>&)>& f,
                                              std::vector<double> x, double eps = 1e-6) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + eps;
    const double up = f(x);
    x[i] = keep - eps;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2.0 * eps);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Transformer forward in double precision.

struct Block {
  Mat ln1_g, ln1_b, w_qkv, b_qkv, w_out, b_out, ln2_g, ln2_b, w_fc, b_fc, w_proj, b_proj;
};

struct Model {
  rpt::ModelConfig cfg;
  Mat tok, pos;
  std::vector<Block> blocks;
  Mat lnf_g, lnf_b, w_head, b_head;

  explicit Model(const rpt::ModelConfig& c, const rpt::LMParameters& p) : cfg(c) {
    tok = from(p.token_embedding);
    pos = from(p.position_embedding);
    for (const auto& b : p.blocks) {
      blocks.push_back({from(b.ln1_gamma), from(b.ln1_beta), from(b.w_qkv), from(b.b_qkv), from(b.w_out),
                        from(b.b_out), from(b.ln2_gamma), from(b.ln2_beta), from(b.w_fc), from(b.b_fc),
                        from(b.w_proj), from(b.b_proj)});
    }
    lnf_g = from(p.lnf_gamma);
    lnf_b = from(p.lnf_beta);
    w_head = from(p.w_head);
    b_head = from(p.b_head);
  }
};

/// Optional override of one final-layer attention probability, for finite differences.
struct AttentionNudge {
  int head = -1;
  int row = 0;
  int col = 0;
  double delta = 0.0;
};

struct Trace {
  std::vector<Mat> hidden;     // L+1 entries, T x d
  std::vector<Mat> attention;  // final layer, per head, T x (P + T)
  Mat logits;                  // T x V
};

/// Forward of `stream` with the prefix matrix (P x L d). An empty prefix runs the bare LM.
/// `offset` (T x d) is added to the input embeddings when given.
inline Trace forward(const Model& m, const Mat& prefix, const std::vector<int>& stream,
                     const AttentionNudge& nudge = {}, const Mat* offset = nullptr) {
  const auto& cfg = m.cfg;
  const int t = static_cast<int>(stream.size());
  const int d = cfg.hidden_dim, h = cfg.num_heads, dh = d / h;
  const int p = prefix.r;
  Trace tr;
  Mat x(t, d);
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < d; ++j) x(i, j) = m.tok(stream[i], j) + m.pos(i, j) + (offset ? (*offset)(i, j) : 0.0);
  tr.hidden.push_back(x);
  for (int l = 0; l < cfg.num_layers; ++l) {
    const Block& b = m.blocks[l];
    const Mat qkv = add_row(matmul(layer_norm(x, b.ln1_g, b.ln1_b), b.w_qkv), b.b_qkv);
    Mat keys(p + t, d), vals(p + t, d);
    if (p > 0) {
      const Mat pq = add_row(matmul(layer_norm(cols(prefix, l * d, (l + 1) * d), b.ln1_g, b.ln1_b), b.w_qkv), b.b_qkv);
      for (int i = 0; i < p; ++i)
        for (int j = 0; j < d; ++j) {
          keys(i, j) = pq(i, d + j);
          vals(i, j) = pq(i, 2 * d + j);
        }
    }
    for (int i = 0; i < t; ++i)
      for (int j = 0; j < d; ++j) {
        keys(p + i, j) = qkv(i, d + j);
        vals(p + i, j) = qkv(i, 2 * d + j);
      }
    Mat attn(t, d);
    for (int hh = 0; hh < h; ++hh) {
      Mat a(t, p + t);
      for (int i = 0; i < t; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        std::vector<double> s(static_cast<std::size_t>(p + t), -std::numeric_limits<double>::infinity());
        for (int j = 0; j < p + i + 1; ++j) {
          double dot = 0.0;
          for (int k = 0; k < dh; ++k) dot += qkv(i, hh * dh + k) * keys(j, hh * dh + k);
          s[j] = dot / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, s[j]);
        }
        double z = 0.0;
        for (int j = 0; j < p + i + 1; ++j) z += std::exp(s[j] - mx);
        for (int j = 0; j < p + i + 1; ++j) a(i, j) = std::exp(s[j] - mx) / z;
      }
      if (l == cfg.num_layers - 1) {
        if (nudge.head == hh) a(nudge.row, nudge.col) += nudge.delta;
        tr.attention.push_back(a);
      }
      for (int i = 0; i < t; ++i)
        for (int k = 0; k < dh; ++k) {
          double s = 0.0;
          for (int j = 0; j < p + t; ++j) s += a(i, j) * vals(j, hh * dh + k);
          attn(i, hh * dh + k) = s;
        }
    }
    x = add(x, add_row(matmul(attn, b.w_out), b.b_out));
    const Mat fc = map(add_row(matmul(layer_norm(x, b.ln2_g, b.ln2_b), b.w_fc), b.b_fc), gelu);
    x = add(x, add_row(matmul(fc, b.w_proj), b.b_proj));
    tr.hidden.push_back(x);
  }
  tr.logits = add_row(matmul(layer_norm(x, m.lnf_g, m.lnf_b), m.w_head), m.b_head);
  return tr;
}

/// Manifold residual on output-position rows: sum over layers of ||H - mu - (H - mu) Q||_F.
/// mode: 0 = dynamic (batch mean), 1 = static (stored mean), 2 = none.
inline double manifold_loss(const std::vector<Mat>& per_layer, const std::vector<Mat>& projectors,
                            const std::vector<Mat>& means, int mode) {
  double total = 0.0;
  for (std::size_t k = 0; k < per_layer.size(); ++k) {
    Mat h = per_layer[k];
    if (mode == 0) {
      for (int j = 0; j < h.c; ++j) {
        double s = 0.0;
        for (int i = 0; i < h.r; ++i) s += h(i, j);
        for (int i = 0; i < h.r; ++i) h(i, j) -= s / h.r;
      }
    } else if (mode == 1) {
      for (int i = 0; i < h.r; ++i)
        for (int j = 0; j < h.c; ++j) h(i, j) -= means[k](0, j);
    }
    const Mat hq = matmul(h, projectors[k]);
    Mat res = h;
    for (std::size_t i = 0; i < res.v.size(); ++i) res.v[i] -= hq.v[i];
    total += frobenius(res);
  }
  return total;
}

}  // namespace ref
