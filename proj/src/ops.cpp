#include "rpt/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace rpt {

namespace {

struct Dims {
  int rows;
  int cols;
};

Dims mat_dims(const Tensor& t) {
  if (t.rank() == 1) return {1, t.dim(0)};
  if (t.rank() == 2) return {t.dim(0), t.dim(1)};
  throw DimensionError("expected a vector or matrix, got " + shape_str(t.shape()));
}

[[noreturn]] void mismatch(const char* op, const Tensor& a, const Tensor& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()));
}

Shape mat_shape(int rows, int cols) { return {rows, cols}; }

// C (m x n) += A (m x k) * B (k x n). Each B row is used for all of A before moving on.
void gemm_nn(const float* a, const float* b, float* c, int m, int k, int n) {
  for (int p = 0; p < k; ++p) {
    const float* brow = b + static_cast<std::size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      const float av = a[static_cast<std::size_t>(i) * k + p];
      if (av == 0.0f) continue;
      float* crow = c + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

float dot(const float* x, const float* y, int k) {
  float acc[8] = {};
  int p = 0;
  for (; p + 8 <= k; p += 8)
    for (int l = 0; l < 8; ++l) acc[l] += x[p + l] * y[p + l];
  float s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
  for (; p < k; ++p) s += x[p] * y[p];
  return s;
}

// C (m x n) += A (m x k) * B^T, B (n x k)
void gemm_nt(const float* a, const float* b, float* c, int m, int k, int n) {
  for (int j = 0; j < n; ++j) {
    const float* brow = b + static_cast<std::size_t>(j) * k;
    for (int i = 0; i < m; ++i) c[static_cast<std::size_t>(i) * n + j] += dot(a + static_cast<std::size_t>(i) * k, brow, k);
  }
}

// C (m x n) += A^T * B, A (k x m), B (k x n)
void gemm_tn(const float* a, const float* b, float* c, int k, int m, int n) {
  for (int p = 0; p < k; ++p) {
    const float* arow = a + static_cast<std::size_t>(p) * m;
    const float* brow = b + static_cast<std::size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      const float av = arow[i];
      if (av == 0.0f) continue;
      float* crow = c + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void accumulate(Tensor* dst, const Tensor& src) {
  if (!dst) return;
  auto d = dst->data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

void check_same_shape(const char* name, Var a, Var b) {
  if (a.shape() != b.shape()) mismatch(name, a.value(), b.value());
}

constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kGeluK = 0.044715f;

}  // namespace

Var matmul(Var a, Var b) {
  const auto [m, k] = mat_dims(a.value());
  const auto [k2, n] = mat_dims(b.value());
  if (k != k2) mismatch("matmul", a.value(), b.value());
  Tensor out(mat_shape(m, n));
  gemm_nn(a.value().data().data(), b.value().data().data(), out.data().data(), m, k, n);
  return a.graph().record(std::move(out), {a, b}, [m, k, n](BackwardContext& ctx) {
    const float* g = ctx.grad_out().data().data();
    if (Tensor* ga = ctx.in_grad(0)) gemm_nt(g, ctx.in(1).data().data(), ga->data().data(), m, n, k);
    if (Tensor* gb = ctx.in_grad(1)) gemm_tn(ctx.in(0).data().data(), g, gb->data().data(), m, k, n);
  });
}

Var matmul_nt(Var a, Var b) {
  const auto [m, k] = mat_dims(a.value());
  const auto [n, k2] = mat_dims(b.value());
  if (k != k2) mismatch("matmul_nt", a.value(), b.value());
  Tensor out(mat_shape(m, n));
  gemm_nt(a.value().data().data(), b.value().data().data(), out.data().data(), m, k, n);
  return a.graph().record(std::move(out), {a, b}, [m, k, n](BackwardContext& ctx) {
    const float* g = ctx.grad_out().data().data();
    if (Tensor* ga = ctx.in_grad(0)) gemm_nn(g, ctx.in(1).data().data(), ga->data().data(), m, n, k);
    if (Tensor* gb = ctx.in_grad(1)) gemm_tn(g, ctx.in(0).data().data(), gb->data().data(), m, n, k);
  });
}

Var add(Var a, Var b) {
  check_same_shape("add", a, b);
  Tensor out = a.value();
  accumulate(&out, b.value());
  return a.graph().record(std::move(out), {a, b}, [](BackwardContext& ctx) {
    accumulate(ctx.in_grad(0), ctx.grad_out());
    accumulate(ctx.in_grad(1), ctx.grad_out());
  });
}

Var sub(Var a, Var b) {
  check_same_shape("sub", a, b);
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
  return a.graph().record(std::move(out), {a, b}, [](BackwardContext& ctx) {
    accumulate(ctx.in_grad(0), ctx.grad_out());
    if (Tensor* gb = ctx.in_grad(1)) {
      auto d = gb->data();
      auto g = ctx.grad_out().data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  check_same_shape("mul", a, b);
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  return a.graph().record(std::move(out), {a, b}, [](BackwardContext& ctx) {
    auto g = ctx.grad_out().data();
    if (Tensor* ga = ctx.in_grad(0)) {
      auto d = ga->data();
      auto other = ctx.in(1).data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * other[i];
    }
    if (Tensor* gb = ctx.in_grad(1)) {
      auto d = gb->data();
      auto other = ctx.in(0).data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * other[i];
    }
  });
}

Var scale(Var a, float s) {
  Tensor out = a.value();
  for (float& v : out.data()) v *= s;
  return a.graph().record(std::move(out), {a}, [s](BackwardContext& ctx) {
    if (Tensor* ga = ctx.in_grad(0)) {
      auto d = ga->data();
      auto g = ctx.grad_out().data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += s * g[i];
    }
  });
}

Var add_row(Var a, Var row) {
  const auto [m, n] = mat_dims(a.value());
  const auto [r, n2] = mat_dims(row.value());
  if (r != 1 || n != n2) mismatch("add_row", a.value(), row.value());
  Tensor out = a.value();
  auto bias = row.value().data();
  for (int i = 0; i < m; ++i) {
    auto orow = out.data().subspan(static_cast<std::size_t>(i) * n, n);
    for (int j = 0; j < n; ++j) orow[j] += bias[j];
  }
  return a.graph().record(std::move(out), {a, row}, [m, n](BackwardContext& ctx) {
    accumulate(ctx.in_grad(0), ctx.grad_out());
    if (Tensor* gb = ctx.in_grad(1)) {
      auto g = ctx.grad_out().data();
      auto d = gb->data();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) d[j] += g[static_cast<std::size_t>(i) * n + j];
    }
  });
}

Var softmax_rows(Var a) {
  const auto [m, n] = mat_dims(a.value());
  Tensor out(a.value().shape());
  for (int i = 0; i < m; ++i) {
    auto x = a.value().data().subspan(static_cast<std::size_t>(i) * n, n);
    auto y = out.data().subspan(static_cast<std::size_t>(i) * n, n);
    const float mx = *std::max_element(x.begin(), x.end());
    double s = 0.0;
    for (int j = 0; j < n; ++j) {
      y[j] = std::exp(x[j] - mx);
      s += y[j];
    }
    const float inv = static_cast<float>(1.0 / s);
    for (int j = 0; j < n; ++j) y[j] *= inv;
  }
  return a.graph().record(std::move(out), {a}, [m, n](BackwardContext& ctx) {
    Tensor* ga = ctx.in_grad(0);
    if (!ga) return;
    for (int i = 0; i < m; ++i) {
      const std::size_t off = static_cast<std::size_t>(i) * n;
      auto y = ctx.out().data().subspan(off, n);
      auto g = ctx.grad_out().data().subspan(off, n);
      auto d = ga->data().subspan(off, n);
      double dot = 0.0;
      for (int j = 0; j < n; ++j) dot += static_cast<double>(g[j]) * y[j];
      for (int j = 0; j < n; ++j) d[j] += y[j] * (g[j] - static_cast<float>(dot));
    }
  });
}

Var log_softmax_rows(Var a) {
  const auto [m, n] = mat_dims(a.value());
  Tensor out(a.value().shape());
  for (int i = 0; i < m; ++i) {
    auto x = a.value().data().subspan(static_cast<std::size_t>(i) * n, n);
    auto y = out.data().subspan(static_cast<std::size_t>(i) * n, n);
    const float mx = *std::max_element(x.begin(), x.end());
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += std::exp(static_cast<double>(x[j] - mx));
    const float lse = mx + static_cast<float>(std::log(s));
    for (int j = 0; j < n; ++j) y[j] = x[j] - lse;
  }
  return a.graph().record(std::move(out), {a}, [m, n](BackwardContext& ctx) {
    Tensor* ga = ctx.in_grad(0);
    if (!ga) return;
    for (int i = 0; i < m; ++i) {
      const std::size_t off = static_cast<std::size_t>(i) * n;
      auto y = ctx.out().data().subspan(off, n);
      auto g = ctx.grad_out().data().subspan(off, n);
      auto d = ga->data().subspan(off, n);
      double gs = 0.0;
      for (int j = 0; j < n; ++j) gs += g[j];
      for (int j = 0; j < n; ++j) d[j] += g[j] - std::exp(y[j]) * static_cast<float>(gs);
    }
  });
}

namespace {

// Shared core of layer_norm / normalize_rows. Stores xhat in `xhat` and 1/sigma per row.
void normalize_forward(const Tensor& x, int m, int n, Tensor& xhat, std::vector<float>& inv_sigma) {
  inv_sigma.resize(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    auto xr = x.data().subspan(static_cast<std::size_t>(i) * n, n);
    auto hr = xhat.data().subspan(static_cast<std::size_t>(i) * n, n);
    double mean = 0.0;
    for (float v : xr) mean += v;
    mean /= n;
    double var = 0.0;
    for (float v : xr) var += (v - mean) * (v - mean);
    var /= n;
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    inv_sigma[static_cast<std::size_t>(i)] = static_cast<float>(is);
    for (int j = 0; j < n; ++j) hr[j] = static_cast<float>((xr[j] - mean) * is);
  }
}

// dx += (1/sigma) (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
void normalize_backward(const float* dxhat, const float* xhat, float inv_sigma, float* dx, int n) {
  double m1 = 0.0, m2 = 0.0;
  for (int j = 0; j < n; ++j) {
    m1 += dxhat[j];
    m2 += static_cast<double>(dxhat[j]) * xhat[j];
  }
  m1 /= n;
  m2 /= n;
  for (int j = 0; j < n; ++j) {
    dx[j] += inv_sigma * static_cast<float>(dxhat[j] - m1 - xhat[j] * m2);
  }
}

}  // namespace

Var layer_norm(Var x, Var gamma, Var beta) {
  const auto [m, n] = mat_dims(x.value());
  const auto [gr, gn] = mat_dims(gamma.value());
  const auto [br, bn] = mat_dims(beta.value());
  if (gr != 1 || gn != n) mismatch("layer_norm", x.value(), gamma.value());
  if (br != 1 || bn != n) mismatch("layer_norm", x.value(), beta.value());
  Tensor xhat(x.value().shape());
  std::vector<float> inv_sigma;
  normalize_forward(x.value(), m, n, xhat, inv_sigma);
  Tensor out(x.value().shape());
  auto g = gamma.value().data();
  auto b = beta.value().data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      const std::size_t k = static_cast<std::size_t>(i) * n + j;
      out[k] = xhat[k] * g[j] + b[j];
    }
  return x.graph().record(
      std::move(out), {x, gamma, beta},
      [m, n, xhat = std::move(xhat), inv_sigma = std::move(inv_sigma)](BackwardContext& ctx) {
        auto gout = ctx.grad_out().data();
        auto gam = ctx.in(1).data();
        if (Tensor* gx = ctx.in_grad(0)) {
          std::vector<float> dxhat(static_cast<std::size_t>(n));
          for (int i = 0; i < m; ++i) {
            const std::size_t off = static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) dxhat[j] = gout[off + j] * gam[j];
            normalize_backward(dxhat.data(), xhat.data().data() + off, inv_sigma[i], gx->data().data() + off, n);
          }
        }
        if (Tensor* gg = ctx.in_grad(1)) {
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
              const std::size_t k = static_cast<std::size_t>(i) * n + j;
              (*gg)[j] += gout[k] * xhat[k];
            }
        }
        if (Tensor* gb = ctx.in_grad(2)) {
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) (*gb)[j] += gout[static_cast<std::size_t>(i) * n + j];
        }
      });
}

Var normalize_rows(Var x) {
  const auto [m, n] = mat_dims(x.value());
  Tensor xhat(x.value().shape());
  std::vector<float> inv_sigma;
  normalize_forward(x.value(), m, n, xhat, inv_sigma);
  Tensor out = xhat;
  return x.graph().record(std::move(out), {x}, [m, n, inv_sigma = std::move(inv_sigma)](BackwardContext& ctx) {
    Tensor* gx = ctx.in_grad(0);
    if (!gx) return;
    for (int i = 0; i < m; ++i) {
      const std::size_t off = static_cast<std::size_t>(i) * n;
      normalize_backward(ctx.grad_out().data().data() + off, ctx.out().data().data() + off, inv_sigma[i],
                         gx->data().data() + off, n);
    }
  });
}

Var gelu(Var a) {
  Tensor out(a.value().shape());
  auto x = a.value().data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const float u = kGeluC * (x[i] + kGeluK * x[i] * x[i] * x[i]);
    out[i] = 0.5f * x[i] * (1.0f + std::tanh(u));
  }
  return a.graph().record(std::move(out), {a}, [](BackwardContext& ctx) {
    Tensor* ga = ctx.in_grad(0);
    if (!ga) return;
    auto x = ctx.in(0).data();
    auto g = ctx.grad_out().data();
    auto d = ga->data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const float xi = x[i];
      const float t = std::tanh(kGeluC * (xi + kGeluK * xi * xi * xi));
      const float du = kGeluC * (1.0f + 3.0f * kGeluK * xi * xi);
      d[i] += g[i] * (0.5f * (1.0f + t) + 0.5f * xi * (1.0f - t * t) * du);
    }
  });
}

Var tanh(Var a) {
  Tensor out(a.value().shape());
  auto x = a.value().data();
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::tanh(x[i]);
  return a.graph().record(std::move(out), {a}, [](BackwardContext& ctx) {
    Tensor* ga = ctx.in_grad(0);
    if (!ga) return;
    auto y = ctx.out().data();
    auto g = ctx.grad_out().data();
    auto d = ga->data();
    for (std::size_t i = 0; i < y.size(); ++i) d[i] += g[i] * (1.0f - y[i] * y[i]);
  });
}

Var sum(Var a) {
  double s = 0.0;
  for (float v : a.value().data()) s += v;
  return a.graph().record(Tensor::scalar(static_cast<float>(s)), {a}, [](BackwardContext& ctx) {
    Tensor* ga = ctx.in_grad(0);
    if (!ga) return;
    const float g = ctx.grad_out()[0];
    for (float& v : ga->data()) v += g;
  });
}

Var sum_squares(Var a) {
  double s = 0.0;
  for (float v : a.value().data()) s += static_cast<double>(v) * v;
  return a.graph().record(Tensor::scalar(static_cast<float>(s)), {a}, [](BackwardContext& ctx) {
    Tensor* ga = ctx.in_grad(0);
    if (!ga) return;
    const float g = 2.0f * ctx.grad_out()[0];
    auto x = ctx.in(0).data();
    auto d = ga->data();
    for (std::size_t i = 0; i < x.size(); ++i) d[i] += g * x[i];
  });
}

Var l2_norm(Var a) {
  const float norm = rpt::l2_norm(a.value().data());
  return a.graph().record(Tensor::scalar(norm), {a}, [](BackwardContext& ctx) {
    Tensor* ga = ctx.in_grad(0);
    const float n = ctx.out()[0];
    if (!ga || n == 0.0f) return;
    const float g = ctx.grad_out()[0] / n;
    auto x = ctx.in(0).data();
    auto d = ga->data();
    for (std::size_t i = 0; i < x.size(); ++i) d[i] += g * x[i];
  });
}

Var cross_entropy(Var logits, std::span<const int> targets) {
  const auto [m, n] = mat_dims(logits.value());
  if (static_cast<int>(targets.size()) != m) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_str(logits.value().shape()));
  }
  Tensor probs(logits.value().shape());
  double loss = 0.0;
  std::vector<int> tgt(targets.begin(), targets.end());
  for (int i = 0; i < m; ++i) {
    if (tgt[i] < 0 || tgt[i] >= n) throw DimensionError("cross_entropy: target out of range");
    auto x = logits.value().data().subspan(static_cast<std::size_t>(i) * n, n);
    auto p = probs.data().subspan(static_cast<std::size_t>(i) * n, n);
    const float mx = *std::max_element(x.begin(), x.end());
    double s = 0.0;
    for (int j = 0; j < n; ++j) {
      p[j] = std::exp(x[j] - mx);
      s += p[j];
    }
    for (int j = 0; j < n; ++j) p[j] = static_cast<float>(p[j] / s);
    loss += (mx + std::log(s)) - x[tgt[i]];
  }
  return logits.graph().record(
      Tensor::scalar(static_cast<float>(loss)), {logits},
      [m, n, probs = std::move(probs), tgt = std::move(tgt)](BackwardContext& ctx) {
        Tensor* gl = ctx.in_grad(0);
        if (!gl) return;
        const float g = ctx.grad_out()[0];
        for (int i = 0; i < m; ++i) {
          const std::size_t off = static_cast<std::size_t>(i) * n;
          for (int j = 0; j < n; ++j) (*gl)[off + j] += g * probs[off + j];
          (*gl)[off + tgt[i]] -= g;
        }
      });
}

Var gather_rows(Var table, std::span<const int> ids) {
  const auto [m, n] = mat_dims(table.value());
  const int k = static_cast<int>(ids.size());
  if (k == 0) throw DimensionError("gather_rows: empty index list");
  Tensor out(mat_shape(k, n));
  std::vector<int> idx(ids.begin(), ids.end());
  for (int i = 0; i < k; ++i) {
    if (idx[i] < 0 || idx[i] >= m) {
      throw DimensionError("gather_rows: index " + std::to_string(idx[i]) + " out of range for " +
                           shape_str(table.value().shape()));
    }
    auto src = table.value().row(idx[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return table.graph().record(std::move(out), {table}, [n, idx = std::move(idx)](BackwardContext& ctx) {
    Tensor* gt = ctx.in_grad(0);
    if (!gt) return;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      auto g = ctx.grad_out().row(static_cast<int>(i));
      auto d = gt->row(idx[i]);
      for (int j = 0; j < n; ++j) d[j] += g[j];
    }
  });
}

Var slice_rows(Var a, int begin, int end) {
  const auto [m, n] = mat_dims(a.value());
  if (begin < 0 || end > m || begin >= end) {
    throw DimensionError("slice_rows [" + std::to_string(begin) + ", " + std::to_string(end) + ") of " +
                         shape_str(a.value().shape()));
  }
  const auto off = static_cast<std::size_t>(begin) * n;
  const auto len = static_cast<std::size_t>(end - begin) * n;
  std::vector<float> data(a.value().data().begin() + off, a.value().data().begin() + off + len);
  return a.graph().record(Tensor(mat_shape(end - begin, n), std::move(data)), {a},
                          [off, len](BackwardContext& ctx) {
                            Tensor* ga = ctx.in_grad(0);
                            if (!ga) return;
                            auto g = ctx.grad_out().data();
                            for (std::size_t i = 0; i < len; ++i) (*ga)[off + i] += g[i];
                          });
}

Var slice_cols(Var a, int begin, int end) {
  const auto [m, n] = mat_dims(a.value());
  if (begin < 0 || end > n || begin >= end) {
    throw DimensionError("slice_cols [" + std::to_string(begin) + ", " + std::to_string(end) + ") of " +
                         shape_str(a.value().shape()));
  }
  const int w = end - begin;
  Tensor out(mat_shape(m, w));
  for (int i = 0; i < m; ++i) {
    auto src = a.value().row(i).subspan(begin, w);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return a.graph().record(std::move(out), {a}, [m, begin, w](BackwardContext& ctx) {
    Tensor* ga = ctx.in_grad(0);
    if (!ga) return;
    for (int i = 0; i < m; ++i) {
      auto g = ctx.grad_out().row(i);
      auto d = ga->row(i).subspan(begin, w);
      for (int j = 0; j < w; ++j) d[j] += g[j];
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const int n = mat_dims(parts[0].value()).cols;
  int total = 0;
  for (Var p : parts) {
    const auto d = mat_dims(p.value());
    if (d.cols != n) mismatch("concat_rows", parts[0].value(), p.value());
    total += d.rows;
  }
  std::vector<float> data;
  data.reserve(static_cast<std::size_t>(total) * n);
  for (Var p : parts) data.insert(data.end(), p.value().data().begin(), p.value().data().end());
  return parts[0].graph().record(Tensor(mat_shape(total, n), std::move(data)), parts,
                                 [count = parts.size()](BackwardContext& ctx) {
                                   std::size_t off = 0;
                                   auto g = ctx.grad_out().data();
                                   for (std::size_t k = 0; k < count; ++k) {
                                     const std::size_t len = ctx.in(static_cast<int>(k)).size();
                                     if (Tensor* gp = ctx.in_grad(static_cast<int>(k))) {
                                       for (std::size_t i = 0; i < len; ++i) (*gp)[i] += g[off + i];
                                     }
                                     off += len;
                                   }
                                 });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const int m = mat_dims(parts[0].value()).rows;
  std::vector<int> widths;
  int total = 0;
  for (Var p : parts) {
    const auto d = mat_dims(p.value());
    if (d.rows != m) mismatch("concat_cols", parts[0].value(), p.value());
    widths.push_back(d.cols);
    total += d.cols;
  }
  Tensor out(mat_shape(m, total));
  int col = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (int i = 0; i < m; ++i) {
      auto src = parts[k].value().row(i);
      std::copy(src.begin(), src.end(), out.row(i).begin() + col);
    }
    col += widths[k];
  }
  return parts[0].graph().record(std::move(out), parts, [m, widths = std::move(widths)](BackwardContext& ctx) {
    int col = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (Tensor* gp = ctx.in_grad(static_cast<int>(k))) {
        for (int i = 0; i < m; ++i) {
          auto g = ctx.grad_out().row(i).subspan(col, widths[k]);
          auto d = gp->row(i);
          for (int j = 0; j < widths[k]; ++j) d[j] += g[j];
        }
      }
      col += widths[k];
    }
  });
}

Var select(Var a, std::span<const int> flat_indices) {
  if (flat_indices.empty()) throw DimensionError("select: empty index list");
  std::vector<int> idx(flat_indices.begin(), flat_indices.end());
  Tensor out(mat_shape(1, static_cast<int>(idx.size())));
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= a.value().size()) {
      throw DimensionError("select: index out of range for " + shape_str(a.value().shape()));
    }
    out[i] = a.value()[static_cast<std::size_t>(idx[i])];
  }
  return a.graph().record(std::move(out), {a}, [idx = std::move(idx)](BackwardContext& ctx) {
    Tensor* ga = ctx.in_grad(0);
    if (!ga) return;
    for (std::size_t i = 0; i < idx.size(); ++i) (*ga)[static_cast<std::size_t>(idx[i])] += ctx.grad_out()[i];
  });
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return a.graph().record(std::move(out), {a}, [](BackwardContext& ctx) {
    accumulate(ctx.in_grad(0), ctx.grad_out());
  });
}

}  // namespace rpt
