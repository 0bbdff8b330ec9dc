#include "rpt/defense.hpp"

#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <iostream>

#include "rpt/ops.hpp"
#include "rpt/optim.hpp"
#include "rpt/parallel.hpp"

namespace rpt {

namespace {

Eigen::MatrixXd to_eigen(const Tensor& t) {
  Eigen::MatrixXd m(t.rows(), t.cols());
  for (int i = 0; i < t.rows(); ++i)
    for (int j = 0; j < t.cols(); ++j) m(i, j) = t.at(i, j);
  return m;
}

Eigen::JacobiSVD<Eigen::MatrixXd> right_svd(const Tensor& centered) {
  return Eigen::JacobiSVD<Eigen::MatrixXd>(to_eigen(centered), Eigen::ComputeFullV);
}

// Per-layer stack of output-position rows across the batch. Layer j is the output of block j.
std::vector<Var> output_rows(const std::vector<SequenceTrace>& traces, std::span<const SampleFrame> batch,
                             std::span<const int> layers) {
  std::vector<Var> out;
  for (int j : layers) {
    std::vector<Var> rows;
    for (std::size_t b = 0; b < traces.size(); ++b) {
      const int o = batch[b].output_position();
      rows.push_back(slice_rows(traces[b].hidden[static_cast<std::size_t>(j) + 1], o, o + 1));
    }
    out.push_back(concat_rows(rows));
  }
  return out;
}

void require_rows_for(Normalization mode, int rows) {
  if (mode == Normalization::dynamic && rows < 2) {
    throw ContractError("dynamic normalization needs at least 2 samples per batch; use fixed (stored mean) or none");
  }
}

}  // namespace

void DefenseConfig::validate(const ModelConfig& cfg) const {
  if (num_layers < 0 || num_layers > cfg.num_layers) {
    throw ConfigError("defense num_layers must be in [0, " + std::to_string(cfg.num_layers) + "]");
  }
  if (steps < 0) throw ConfigError("defense steps must be non-negative");
  if (!learning_rate) throw ConfigError("defense learning_rate is required (tune it on the dev split)");
  if (!(*learning_rate >= 0.0f)) throw ConfigError("defense learning_rate must be non-negative");
  if (batch.kind == BatchMode::Kind::fixed && batch.size < 1) throw ConfigError("fixed batch size must be >= 1");
  if (batch.kind == BatchMode::Kind::adaptive && batch.token_budget < 1) {
    throw ConfigError("adaptive token budget must be >= 1");
  }
  if (normalization == Normalization::dynamic && batch.kind == BatchMode::Kind::fixed && batch.size == 1) {
    throw ConfigError("dynamic normalization is undefined for batch size 1; use fixed or none");
  }
}

std::vector<int> DefenseConfig::layers(const ModelConfig& cfg) const {
  std::vector<int> out;
  const int first = layer_end == LayerEnd::bottom ? 0 : cfg.num_layers - num_layers;
  for (int j = 0; j < num_layers; ++j) out.push_back(first + j);
  return out;
}

ActivationSet collect_correct_activations(const MicroLM& model, const PrefixParameters& prefix, const Task& task,
                                          const Dataset& data, std::span<const int> layers, int min_rows) {
  const ModelConfig& cfg = model.config();
  for (int j : layers) {
    if (j < 0 || j >= cfg.num_layers) throw ConfigError("activation layer " + std::to_string(j) + " out of range");
  }
  ActivationSet out;
  out.layers.assign(layers.begin(), layers.end());
  std::vector<std::vector<float>> rows(layers.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const SampleFrame f = task.frame(cfg, data[i]);
    const ForwardOutput fw = model.forward(f, prefix);
    const int o = f.output_position();
    if (argmax_label(fw.logits.row(o), task.labels) != f.label) continue;
    out.sample_ids.push_back(i);
    for (std::size_t k = 0; k < layers.size(); ++k) {
      auto h = fw.record.at(layers[k] + 1, o);
      rows[k].insert(rows[k].end(), h.begin(), h.end());
    }
  }
  const int n = static_cast<int>(out.sample_ids.size());
  if (n < std::max(1, min_rows)) {
    throw RankError("only " + std::to_string(n) + " correctly classified samples; need at least " +
                    std::to_string(std::max(1, min_rows)) + " (choose a smaller rank p)");
  }
  for (auto& r : rows) out.matrices.emplace_back(Shape{n, cfg.hidden_dim}, std::move(r));
  return out;
}

Centered center_columns(const Tensor& h) {
  const int n = h.rows(), d = h.cols();
  std::vector<double> mean(static_cast<std::size_t>(d), 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) mean[static_cast<std::size_t>(j)] += h.at(i, j);
  Centered out{h, Tensor({1, d})};
  for (int j = 0; j < d; ++j) {
    const double m = mean[static_cast<std::size_t>(j)] / n;
    out.mean[static_cast<std::size_t>(j)] = static_cast<float>(m);
    for (int i = 0; i < n; ++i) {
      float& v = out.matrix[static_cast<std::size_t>(i) * d + j];
      v = static_cast<float>(v - m);
    }
  }
  return out;
}

Tensor pca_projection(const Tensor& centered, int p) {
  const int d = centered.cols();
  if (p < 1 || p > d) throw ConfigError("rank p must be in [1, " + std::to_string(d) + "]");
  if (centered.rows() < p) {
    throw RankError("rank p = " + std::to_string(p) + " exceeds the " + std::to_string(centered.rows()) +
                    " available rows");
  }
  if (p == d) return Tensor::identity(d);
  const auto svd = right_svd(centered);
  Eigen::MatrixXd v = svd.matrixV().leftCols(p);
  for (int k = 0; k < p; ++k) {
    Eigen::Index at = 0;
    v.col(k).cwiseAbs().maxCoeff(&at);
    if (v(at, k) < 0.0) v.col(k) *= -1.0;
  }
  const Eigen::MatrixXd q = v * v.transpose();
  Tensor out({d, d});
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) out[static_cast<std::size_t>(i) * d + j] = static_cast<float>(q(i, j));
  return out;
}

int default_rank(const Tensor& centered, double mass) {
  const int d = centered.cols();
  const Eigen::VectorXd s = right_svd(centered).singularValues();
  const double total = s.squaredNorm();
  if (total <= 0.0) return 1;
  double acc = 0.0;
  int p = 0;
  while (p < s.size()) {
    acc += s(p) * s(p);
    ++p;
    if (acc >= mass * total) break;
  }
  return std::clamp(p, 1, std::max(1, d - 1));
}

int ProjectionSet::find(int layer) const {
  const auto it = std::find(layers.begin(), layers.end(), layer);
  return it == layers.end() ? -1 : static_cast<int>(it - layers.begin());
}

ProjectionSet build_projections(const ActivationSet& acts, std::optional<int> rank) {
  ProjectionSet out;
  out.layers = acts.layers;
  for (const Tensor& h : acts.matrices) {
    Centered c = center_columns(h);
    const int p = rank ? *rank : default_rank(c.matrix);
    out.projectors.push_back(pca_projection(c.matrix, p));
    out.means.push_back(std::move(c.mean));
    out.ranks.push_back(p);
  }
  return out;
}

double manifold_loss(const std::vector<Tensor>& batch, std::span<const int> layers, const ProjectionSet& proj,
                     Normalization mode) {
  Graph g;
  std::vector<Var> vars;
  for (const Tensor& t : batch) vars.push_back(g.borrow(t));
  return manifold_loss(g, vars, layers, proj, mode).value().item();
}

Var manifold_loss(Graph& g, const std::vector<Var>& batch, std::span<const int> layers, const ProjectionSet& proj,
                  Normalization mode) {
  if (batch.size() != layers.size()) throw ContractError("one activation matrix per layer expected");
  Var total = g.constant(Tensor::scalar(0.0f));
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const int at = proj.find(layers[k]);
    if (at < 0) throw ContractError("no projector for layer " + std::to_string(layers[k]));
    Var h = batch[k];
    const int n = h.value().rows();
    require_rows_for(mode, n);
    if (mode == Normalization::dynamic) {
      Var mean = scale(matmul(g.constant(Tensor({1, n}, 1.0f)), h), 1.0f / static_cast<float>(n));
      h = sub(h, matmul(g.constant(Tensor({n, 1}, 1.0f)), mean));
    } else if (mode == Normalization::fixed) {
      Tensor neg = proj.means[static_cast<std::size_t>(at)];
      for (float& v : neg.data()) v = -v;
      h = add_row(h, g.constant(std::move(neg)));
    }
    Var residual = sub(h, matmul(h, g.borrow(proj.projectors[static_cast<std::size_t>(at)])));
    total = add(total, l2_norm(residual));
  }
  return total;
}

TuneOutcome tune_robust_prefix(const MicroLM& model, std::span<const SampleFrame> batch,
                               const PrefixParameters& prefix, std::span<const Token> labels,
                               const ProjectionSet& proj, const DefenseConfig& cfg) {
  const ModelConfig& mc = model.config();
  cfg.validate(mc);
  require_rows_for(cfg.normalization, static_cast<int>(batch.size()));
  const std::vector<int> layers = cfg.layers(mc);
  TuneOutcome out;
  out.robust = RobustPrefix::zeros(mc, layers);

  // Loss and label predictions under the current P'.
  auto evaluate = [&](std::vector<Token>* preds) {
    Graph g;
    LMBinding lm = bind_lm(g, model.params());
    Var pm = add(g.borrow(prefix.expansion), g.borrow(out.robust.offset));
    const PrefixKV kv = prefix_kv(mc, lm, pm);
    std::vector<SequenceTrace> traces;
    for (const auto& f : batch) {
      const TokenSeq stream = f.input();
      traces.push_back(trace_sequence(mc, lm, kv, stream));
    }
    if (preds) {
      preds->clear();
      for (const auto& tr : traces) preds->push_back(argmax_label(tr.logits.value().row(0), labels));
    }
    if (layers.empty()) return 0.0;
    return static_cast<double>(
        manifold_loss(g, output_rows(traces, batch, layers), layers, proj, cfg.normalization).value().item());
  };

  out.initial_loss = evaluate(nullptr);
  if (!layers.empty() && cfg.steps > 0 && std::isfinite(out.initial_loss)) {
    AdamW opt({&out.robust.offset}, AdamWConfig{.lr = *cfg.learning_rate});
    for (int step = 0; step < cfg.steps; ++step) {
      Graph g;
      LMBinding lm = bind_lm(g, model.params());
      Var offset = g.borrow(out.robust.offset, true);
      const PrefixKV kv = prefix_kv(mc, lm, add(g.borrow(prefix.expansion), offset));
      std::vector<SequenceTrace> traces;
      for (const auto& f : batch) {
        const TokenSeq stream = f.input();
        traces.push_back(trace_sequence(mc, lm, kv, stream));
      }
      Var loss = manifold_loss(g, output_rows(traces, batch, layers), layers, proj, cfg.normalization);
      if (!std::isfinite(loss.value().item())) {
        out.fell_back = true;
        break;
      }
      g.backward(loss);
      Tensor grad = g.grad(offset);
      RobustPrefix masked{std::move(grad), out.robust.trainable_layers};
      masked.enforce_mask(mc.hidden_dim);
      opt.step({&masked.offset});
      out.robust.enforce_mask(mc.hidden_dim);
    }
  } else if (!std::isfinite(out.initial_loss)) {
    out.fell_back = true;
  }
  out.final_loss = evaluate(&out.predictions);
  if (!out.fell_back && !std::isfinite(out.final_loss)) out.fell_back = true;
  if (out.fell_back) {
    std::cerr << "defense: non-finite manifold loss; using zero robust prefix for this batch\n";
    out.robust = RobustPrefix::zeros(mc, layers);
    out.final_loss = evaluate(&out.predictions);
  }
  return out;
}

std::vector<std::vector<std::size_t>> partition_batches(std::span<const SampleFrame> frames, const BatchMode& mode,
                                                        std::size_t min_size) {
  std::vector<std::vector<std::size_t>> out;
  std::vector<std::size_t> cur;
  int longest = 0;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const int len = frames[i].stream_len();
    bool fits;
    if (mode.kind == BatchMode::Kind::fixed) {
      fits = cur.size() < static_cast<std::size_t>(mode.size);
    } else {
      fits = cur.empty() || static_cast<long>(cur.size() + 1) * std::max(longest, len) <= mode.token_budget;
    }
    if (!fits && cur.size() >= min_size) {
      out.push_back(std::move(cur));
      cur.clear();
      longest = 0;
    }
    cur.push_back(i);
    longest = std::max(longest, len);
  }
  if (!cur.empty()) {
    if (cur.size() < min_size && !out.empty()) {
      out.back().insert(out.back().end(), cur.begin(), cur.end());
    } else {
      out.push_back(std::move(cur));
    }
  }
  return out;
}

DefendedEval defend_dataset(const MicroLM& model, const Task& task, const Dataset& data,
                            const PrefixParameters& prefix, const ProjectionSet& proj, const DefenseConfig& cfg) {
  cfg.validate(model.config());
  std::vector<SampleFrame> frames;
  for (const auto& ex : data) frames.push_back(task.frame(model.config(), ex));
  const std::size_t min_size = cfg.normalization == Normalization::dynamic ? 2 : 1;
  DefendedEval out;
  out.predictions.assign(frames.size(), vocab::kPad);
  out.batch_of.assign(frames.size(), 0);
  const auto batches = partition_batches(frames, cfg.batch, min_size);
  std::vector<TuneOutcome> outcomes(batches.size());
  parallel_for(batches.size(), [&](std::size_t b) {
    std::vector<SampleFrame> batch;
    for (std::size_t i : batches[b]) batch.push_back(frames[i]);
    outcomes[b] = tune_robust_prefix(model, batch, prefix, task.labels, proj, cfg);
  });
  std::size_t correct = 0;
  for (std::size_t b = 0; b < batches.size(); ++b) {
    const auto& idx = batches[b];
    TuneOutcome& t = outcomes[b];
    ++out.batches;
    if (t.fell_back) ++out.fallbacks;
    if (t.final_loss <= t.initial_loss) ++out.improved_batches;
    for (std::size_t k = 0; k < idx.size(); ++k) {
      out.predictions[idx[k]] = t.predictions[k];
      out.batch_of[idx[k]] = b;
      if (t.predictions[k] == frames[idx[k]].label) ++correct;
    }
    out.robust.push_back(std::move(t.robust));
  }
  out.accuracy = frames.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(frames.size());
  return out;
}

float sweep_learning_rate(const MicroLM& model, const Task& task, const Dataset& dev, const PrefixParameters& prefix,
                          const ProjectionSet& proj, DefenseConfig cfg, std::span<const float> candidates,
                          std::vector<double>* accuracies) {
  if (candidates.empty()) throw ConfigError("learning-rate sweep needs at least one candidate");
  float best = candidates[0];
  double best_acc = -1.0;
  if (accuracies) accuracies->clear();
  for (float lr : candidates) {
    cfg.learning_rate = lr;
    const double acc = defend_dataset(model, task, dev, prefix, proj, cfg).accuracy;
    if (accuracies) accuracies->push_back(acc);
    if (acc > best_acc) {
      best_acc = acc;
      best = lr;
    }
  }
  return best;
}

}  // namespace rpt
