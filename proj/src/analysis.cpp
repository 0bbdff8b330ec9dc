#include "rpt/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

#include "rpt/ops.hpp"

namespace rpt {

namespace {

struct DecisionGraph {
  Var d;
  SequenceTrace trace;
};

// Builds d on `g`. A zero embedding offset makes every activation differentiable.
DecisionGraph build_decision(Graph& g, const MicroLM& model, const PrefixParameters& prefix, const SampleFrame& frame,
                             std::span<const Token> labels, const RobustPrefix* robust) {
  if (labels.empty()) throw ConfigError("label set is empty");
  const ModelConfig& cfg = model.config();
  LMBinding lm = bind_lm(g, model.params());
  Var pm = g.borrow(prefix.expansion);
  if (robust) pm = add(pm, g.borrow(robust->offset));
  const TokenSeq stream = frame.input();
  TraceOptions opts;
  opts.all_step_logits = true;
  opts.embedding_offset = g.param(Tensor({frame.stream_len(), cfg.hidden_dim}));
  SequenceTrace tr = trace_sequence(cfg, lm, prefix_kv(cfg, lm, pm), stream, opts);

  const int o = frame.output_position();
  const int v = cfg.vocab_size;
  Var probs = softmax_rows(tr.logits);
  std::vector<Var> terms;
  if (o > 0) {
    std::vector<int> next;
    for (int k = 0; k < o; ++k) next.push_back(k * v + stream[static_cast<std::size_t>(k) + 1]);
    terms.push_back(sum(select(probs, next)));
  }
  std::vector<int> label_cols;
  for (Token t : labels) label_cols.push_back(o * v + t);
  Var label_probs = softmax_rows(select(tr.logits, label_cols));
  const auto lp = label_probs.value().data();
  const int best = static_cast<int>(std::max_element(lp.begin(), lp.end()) - lp.begin());
  terms.push_back(select(label_probs, std::span<const int>(&best, 1)));
  Var d = terms.size() == 1 ? terms[0] : sum(concat_cols(terms));
  return {sum(d), std::move(tr)};
}

}  // namespace

double decision_function(const MicroLM& model, const PrefixParameters& prefix, const SampleFrame& frame,
                         std::span<const Token> labels, const RobustPrefix* robust) {
  Graph g;
  return build_decision(g, model, prefix, frame, labels, robust).d.value().item();
}

ImportanceMatrix importance_matrix(const MicroLM& model, const PrefixParameters& prefix, const SampleFrame& frame,
                                   std::span<const Token> labels, const RobustPrefix* robust, bool drop_cls) {
  Graph g;
  DecisionGraph dg = build_decision(g, model, prefix, frame, labels, robust);
  g.backward(dg.d);
  const int t = frame.stream_len();
  const int lp = model.config().prefix_len;
  const int skip = drop_cls ? 1 : 0;
  const int n = t - skip;
  if (n < 1) throw ContractError("no visible tokens left for the importance matrix");
  ImportanceMatrix out{Tensor({n, n}), Tensor()};
  const auto& heads = dg.trace.final_attention;
  for (Var a : heads) {
    const Tensor grad = g.grad(a);
    const Tensor& val = a.value();
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j <= i; ++j) {
        const std::size_t at = static_cast<std::size_t>(i + skip) * (lp + t) + (lp + j + skip);
        out.raw[static_cast<std::size_t>(i) * n + j] += grad[at] * val[at];
      }
    }
  }
  for (float& x : out.raw.data()) x /= static_cast<float>(heads.size());
  out.normalized = normalize_importance(out.raw);
  return out;
}

Tensor normalize_importance(const Tensor& raw) {
  const int n = raw.rows();
  Tensor out({n, raw.cols()});
  for (int i = 0; i < n; ++i) {
    const auto src = raw.row(i);
    auto dst = out.row(i);
    const int w = std::min(i + 1, raw.cols());
    const float lo = *std::min_element(src.begin(), src.begin() + w);
    double s = 0.0;
    for (int j = 0; j < w; ++j) s += static_cast<double>(src[j]) - lo;
    for (int j = 0; j < w; ++j) {
      dst[j] = s > 0.0 ? static_cast<float>((static_cast<double>(src[j]) - lo) / s) : 1.0f / static_cast<float>(w);
    }
  }
  return out;
}

RankingMatrix ranking_matrix(const Tensor& importance) {
  RankingMatrix k;
  for (int i = 0; i < importance.rows(); ++i) {
    const auto row = importance.row(i).first(static_cast<std::size_t>(i) + 1);
    const std::vector<int> order = argsort(row);
    std::vector<int> rank(row.size());
    for (std::size_t r = 0; r < order.size(); ++r) rank[static_cast<std::size_t>(order[r])] = static_cast<int>(r) + 1;
    k.push_back(std::move(rank));
  }
  return k;
}

std::optional<double> degree_of_distraction(const RankingMatrix& k, int trigger_len) {
  if (trigger_len < 1) throw ConfigError("trigger length must be >= 1");
  double total = 0.0;
  int steps = 0;
  for (int i = trigger_len; i < static_cast<int>(k.size()); ++i) {
    const auto& row = k[static_cast<std::size_t>(i)];
    const int top = *std::max_element(row.begin(), row.begin() + trigger_len);
    total += static_cast<double>(top) / static_cast<double>(i + 1) * 100.0;
    ++steps;
  }
  if (steps == 0) return std::nullopt;
  return total / steps;
}

double recognition_of_essential(const Tensor& clean, const Tensor& attacked, int trigger_len) {
  const int n = clean.rows();
  if (attacked.rows() != n + trigger_len) {
    throw DimensionError("attacked importance must have " + std::to_string(n + trigger_len) + " rows, got " +
                         std::to_string(attacked.rows()));
  }
  if (n == 0) return 0.0;
  auto first_max = [](std::span<const float> row) {
    return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  };
  int hits = 0;
  for (int i = 0; i < n; ++i) {
    const int a = first_max(clean.row(i).first(static_cast<std::size_t>(i) + 1));
    const int b = first_max(attacked.row(i + trigger_len).first(static_cast<std::size_t>(i + trigger_len) + 1));
    hits += a == b - trigger_len ? 1 : 0;
  }
  return static_cast<double>(hits) / n;
}

double mean(std::span<const double> values) {
  if (values.empty()) return 0.0;
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

double bootstrap_test(std::span<const double> a, std::span<const double> b, int resamples, std::uint64_t seed) {
  if (resamples < 100) throw ConfigError("bootstrap needs at least 100 resamples");
  if (a.empty() || b.empty()) throw ConfigError("bootstrap samples must be non-empty");
  const double ma = mean(a), mb = mean(b);
  const double observed = std::abs(ma - mb);
  std::vector<double> all(a.begin(), a.end());
  all.insert(all.end(), b.begin(), b.end());
  const double pooled = mean(all);
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick_a(0, a.size() - 1), pick_b(0, b.size() - 1);
  int extreme = 0;
  for (int r = 0; r < resamples; ++r) {
    double sa = 0.0, sb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) sa += a[pick_a(rng)] - ma + pooled;
    for (std::size_t i = 0; i < b.size(); ++i) sb += b[pick_b(rng)] - mb + pooled;
    const double diff = sa / static_cast<double>(a.size()) - sb / static_cast<double>(b.size());
    if (std::abs(diff) >= observed - 1e-12) ++extreme;
  }
  return (extreme + 1.0) / (resamples + 1.0);
}

std::string matrix_csv(const Tensor& m) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(6);
  for (int i = 0; i < m.rows(); ++i) {
    for (int j = 0; j < m.cols(); ++j) os << (j ? "," : "") << m.at(i, j);
    os << '\n';
  }
  return os.str();
}

std::string heat_text(const Tensor& m, std::span<const std::string> labels) {
  static constexpr char kRamp[] = " .:-=+*#%@";
  std::ostringstream os;
  for (int i = 0; i < m.rows(); ++i) {
    if (!labels.empty()) os << std::setw(8) << labels[static_cast<std::size_t>(i)] << ' ';
    const auto row = m.row(i);
    const float hi = *std::max_element(row.begin(), row.end());
    for (float v : row) {
      const int level = hi > 0.0f ? static_cast<int>(std::lround(std::max(0.0f, v) / hi * 9.0f)) : 0;
      os << kRamp[level];
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace rpt
