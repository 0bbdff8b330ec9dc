#include "rpt/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iostream>
#include <numeric>
#include <sstream>

#include "rpt/ops.hpp"
#include "rpt/optim.hpp"
#include "rpt/parallel.hpp"

namespace rpt {

namespace {

using Clock = std::chrono::steady_clock;

std::vector<SampleFrame> make_frames(const ModelConfig& cfg, const Task& task, const Dataset& data,
                                     std::span<const std::size_t> idx) {
  std::vector<SampleFrame> frames;
  frames.reserve(idx.size());
  for (std::size_t i : idx) frames.push_back(task.frame(cfg, data[i]));
  return frames;
}

// Embedding offset for a whole stream that is zero outside the context rows.
Var context_offset(Graph& g, const SampleFrame& frame, Var r, int d) {
  const int ctx = static_cast<int>(frame.context.size());
  const int tail = frame.stream_len() - 1 - ctx;
  return concat_rows({g.constant(Tensor({1, d})), r, g.constant(Tensor({tail, d}))});
}

// Per-frame traces with optional context perturbations (invalid Var = none).
std::vector<SequenceTrace> trace_frames(const ModelConfig& cfg, const LMBinding& lm, const PrefixKV& kv,
                                        std::span<const SampleFrame> batch, const std::vector<Var>& perturb) {
  std::vector<SequenceTrace> out;
  out.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const TokenSeq stream = batch[i].input();
    TraceOptions opts;
    if (i < perturb.size() && perturb[i].valid() && !batch[i].context.empty()) {
      opts.embedding_offset = context_offset(lm.token_embedding.graph(), batch[i], perturb[i], cfg.hidden_dim);
    }
    out.push_back(trace_sequence(cfg, lm, kv, stream, opts));
  }
  return out;
}

Var sum_label_losses(const std::vector<SequenceTrace>& traces, std::span<const SampleFrame> batch) {
  std::vector<Var> parts;
  for (std::size_t i = 0; i < traces.size(); ++i) {
    const Token y = batch[i].label;
    parts.push_back(cross_entropy(traces[i].logits, std::span<const Token>(&y, 1)));
  }
  return sum(concat_cols(parts));
}

std::vector<Shape> perturbation_shapes(std::span<const SampleFrame> batch, int d) {
  std::vector<Shape> shapes;
  for (const auto& f : batch) shapes.push_back({std::max<int>(1, static_cast<int>(f.context.size())), d});
  return shapes;
}

void check_finite(double loss, const char* what, int epoch, std::size_t batch_index) {
  if (std::isfinite(loss)) return;
  std::ostringstream os;
  os << "non-finite " << what << " at epoch " << epoch << ", batch " << batch_index << " (value " << loss << ")";
  throw TrainingError(os.str());
}

// Batch objective: returns the summed loss and gradients for the prefix trainables.
using Objective = std::function<double(std::span<const SampleFrame>, const PrefixParameters&, std::vector<Tensor>&,
                                       PgdAudit&, std::uint64_t)>;

double standard_objective(const MicroLM& model, std::span<const SampleFrame> batch, const PrefixParameters& prefix,
                          std::vector<Tensor>& grads, const std::vector<Tensor>* perturbations) {
  Graph g;
  LMBinding lm = bind_lm(g, model.params());
  PrefixBinding pb = bind_prefix(g, prefix, true);
  PrefixKV kv = prefix_kv(model.config(), lm, pb.matrix);
  std::vector<Var> perturb;
  if (perturbations) {
    for (const Tensor& r : *perturbations) perturb.push_back(g.borrow(r));
  }
  Var total = sum_label_losses(trace_frames(model.config(), lm, kv, batch, perturb), batch);
  Var loss = scale(total, 1.0f / static_cast<float>(batch.size()));
  g.backward(loss);
  grads.clear();
  for (Var v : pb.trainables()) grads.push_back(g.grad(v));
  return total.value().item();
}

TrainResult run_training(const MicroLM& model, const Task& task, const Dataset& train, const Dataset& dev,
                         const TrainConfig& cfg, PrefixParameters prefix, const Objective& objective) {
  cfg.validate();
  if (train.empty()) throw ConfigError("training set is empty");
  const ModelConfig& mc = model.config();
  TrainResult out;
  AdamW opt(prefix.trainables(), AdamWConfig{.lr = cfg.learning_rate, .weight_decay = cfg.weight_decay});
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = Clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const auto frames = make_frames(mc, task, train, std::span(order).subspan(start, end - start));
      std::vector<Tensor> grads;
      const double loss = objective(frames, prefix, grads, out.audit, rng());
      check_finite(loss, "training loss", epoch, batch_index);
      std::vector<const Tensor*> gp;
      for (const auto& t : grads) gp.push_back(&t);
      opt.step(gp);
      prefix.refresh();
      loss_sum += loss;
    }
    const double wall = std::chrono::duration<double>(Clock::now() - t0).count();
    const double dev_acc = dev.empty() ? 0.0 : dataset_accuracy(model, task, dev, prefix);
    out.curve.push_back(EpochStats{epoch, loss_sum / static_cast<double>(train.size()), dev_acc, wall});
    if (std::find(cfg.milestones.begin(), cfg.milestones.end(), epoch) != cfg.milestones.end()) {
      out.checkpoints.emplace(epoch, prefix);
    }
  }
  out.prefix = std::move(prefix);
  return out;
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (!(learning_rate >= 0.0f)) throw ConfigError("learning rate must be non-negative");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  for (int m : milestones) {
    if (m < 1 || m > epochs) throw ConfigError("milestone " + std::to_string(m) + " outside [1, epochs]");
  }
}

void AdvConfig::validate() const {
  if (!(epsilon >= 0.0f)) throw ConfigError("epsilon must be non-negative");
  if (!(step_size >= 0.0f)) throw ConfigError("PGD step size must be non-negative");
  if (iterations < 0) throw ConfigError("PGD iterations must be non-negative");
  if (kl_beta && !(*kl_beta >= 0.0f)) throw ConfigError("kl_beta must be non-negative");
}

void PgdAudit::merge(const PgdAudit& other) {
  if (other.checked && (!checked || other.max_excess > max_excess)) max_excess = other.max_excess;
  checked += other.checked;
  violations += other.violations;
}

float ball_norm(const Tensor& r, PerturbLevel level) {
  if (level == PerturbLevel::sentence) return l2_norm(r.data());
  float worst = 0.0f;
  for (int i = 0; i < r.rows(); ++i) worst = std::max(worst, l2_norm(r.row(i)));
  return worst;
}

void project_to_ball(Tensor& r, float epsilon, PerturbLevel level) {
  auto project = [epsilon](std::span<float> v) {
    const float n = l2_norm(v);
    if (n <= epsilon || n == 0.0f) return;
    const float s = epsilon / n;
    for (float& x : v) x *= s;
  };
  if (level == PerturbLevel::sentence) {
    project(r.data());
  } else {
    for (int i = 0; i < r.rows(); ++i) project(r.row(i));
  }
}

std::vector<Tensor> projected_ascent(const std::vector<Shape>& shapes, const PerturbationGrad& grad,
                                     const AdvConfig& adv, PgdAudit* audit) {
  adv.validate();
  std::vector<Tensor> r;
  for (const Shape& s : shapes) r.push_back(Tensor::zeros(s));
  auto ascend = [&](std::span<float> rv, std::span<const float> gv) {
    const float gn = l2_norm(gv);
    if (gn == 0.0f || !std::isfinite(gn)) return;
    const float s = adv.step_size / gn;
    for (std::size_t i = 0; i < rv.size(); ++i) rv[i] += s * gv[i];
  };
  for (int it = 0; it < adv.iterations; ++it) {
    const std::vector<Tensor> g = grad(r);
    for (std::size_t k = 0; k < r.size(); ++k) {
      if (adv.level == PerturbLevel::sentence) {
        ascend(r[k].data(), g[k].data());
      } else {
        for (int row = 0; row < r[k].rows(); ++row) ascend(r[k].row(row), g[k].row(row));
      }
      project_to_ball(r[k], adv.epsilon, adv.level);
      if (audit) {
        const double excess = static_cast<double>(ball_norm(r[k], adv.level)) - adv.epsilon;
        if (!audit->checked || excess > audit->max_excess) audit->max_excess = excess;
        ++audit->checked;
        if (excess > kBallTolerance) ++audit->violations;
      }
    }
  }
  return r;
}

std::vector<Tensor> pgd_inner_max(const MicroLM& model, std::span<const SampleFrame> batch,
                                  const PrefixParameters& prefix, const AdvConfig& adv, PgdAudit* audit) {
  const ModelConfig& mc = model.config();
  auto grad = [&](const std::vector<Tensor>& r) {
    Graph g;
    LMBinding lm = bind_lm(g, model.params());
    PrefixKV kv = prefix_kv(mc, lm, g.borrow(prefix.expansion));
    std::vector<Var> perturb;
    for (const Tensor& t : r) perturb.push_back(g.borrow(t, true));
    Var loss = sum_label_losses(trace_frames(mc, lm, kv, batch, perturb), batch);
    g.backward(loss);
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < perturb.size(); ++i) {
      out.push_back(batch[i].context.empty() ? Tensor::zeros(r[i].shape()) : g.grad(perturb[i]));
    }
    return out;
  };
  return projected_ascent(perturbation_shapes(batch, mc.hidden_dim), grad, adv, audit);
}

double label_loss(const MicroLM& model, std::span<const SampleFrame> batch, const PrefixParameters& prefix,
                  const std::vector<Tensor>* perturbations) {
  Graph g;
  LMBinding lm = bind_lm(g, model.params());
  PrefixKV kv = prefix_kv(model.config(), lm, g.borrow(prefix.expansion));
  std::vector<Var> perturb;
  if (perturbations) {
    for (const Tensor& r : *perturbations) perturb.push_back(g.borrow(r));
  }
  return sum_label_losses(trace_frames(model.config(), lm, kv, batch, perturb), batch).value().item();
}

double kl_adversarial_step(const MicroLM& model, std::span<const SampleFrame> batch, const PrefixParameters& prefix,
                           const AdvConfig& adv, std::vector<Tensor>* grads, PgdAudit* audit, std::uint64_t seed) {
  const ModelConfig& mc = model.config();
  const float beta = adv.kl_beta.value_or(0.0f);
  const std::vector<Shape> shapes = perturbation_shapes(batch, mc.hidden_dim);

  // Clean next-token distributions at the output positions, held fixed for the inner max.
  std::vector<Tensor> clean_probs;
  {
    Graph g;
    LMBinding lm = bind_lm(g, model.params());
    PrefixKV kv = prefix_kv(mc, lm, g.borrow(prefix.expansion));
    for (const auto& tr : trace_frames(mc, lm, kv, batch, {})) clean_probs.push_back(softmax_rows(tr.logits).value());
  }

  // KL(p || q) has zero gradient at r = 0, so the ascent starts from a small seeded offset.
  Rng rng(seed);
  std::normal_distribution<float> noise(0.0f, 1.0f);
  std::vector<Tensor> start;
  for (const Shape& s : shapes) {
    Tensor t(s);
    for (float& v : t.data()) v = noise(rng);
    const float n = ball_norm(t, adv.level);
    const float target = 1e-3f * adv.epsilon;
    for (float& v : t.data()) v *= n > 0.0f ? target / n : 0.0f;
    start.push_back(std::move(t));
  }

  auto kl_grad = [&](const std::vector<Tensor>& r) {
    Graph g;
    LMBinding lm = bind_lm(g, model.params());
    PrefixKV kv = prefix_kv(mc, lm, g.borrow(prefix.expansion));
    std::vector<Var> perturb;
    std::vector<Tensor> shifted;
    shifted.reserve(r.size());
    for (std::size_t i = 0; i < r.size(); ++i) {
      Tensor t = r[i];
      for (std::size_t k = 0; k < t.size(); ++k) t[k] += start[i][k];
      project_to_ball(t, adv.epsilon, adv.level);
      shifted.push_back(std::move(t));
    }
    for (const Tensor& t : shifted) perturb.push_back(g.borrow(t, true));
    const auto traces = trace_frames(mc, lm, kv, batch, perturb);
    std::vector<Var> parts;
    for (std::size_t i = 0; i < traces.size(); ++i) {
      Var p = g.borrow(clean_probs[i]);
      Var logq = log_softmax_rows(traces[i].logits);
      parts.push_back(scale(sum(mul(p, logq)), -1.0f));
    }
    g.backward(sum(concat_cols(parts)));
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < perturb.size(); ++i) {
      out.push_back(batch[i].context.empty() ? Tensor::zeros(r[i].shape()) : g.grad(perturb[i]));
    }
    return out;
  };
  std::vector<Tensor> r = projected_ascent(shapes, kl_grad, adv, audit);
  for (std::size_t i = 0; i < r.size(); ++i) {
    for (std::size_t k = 0; k < r[i].size(); ++k) r[i][k] += start[i][k];
    project_to_ball(r[i], adv.epsilon, adv.level);
  }

  Graph g;
  LMBinding lm = bind_lm(g, model.params());
  PrefixBinding pb = bind_prefix(g, prefix, grads != nullptr);
  PrefixKV kv = prefix_kv(mc, lm, pb.matrix);
  const auto clean = trace_frames(mc, lm, kv, batch, {});
  std::vector<Var> perturb;
  for (const Tensor& t : r) perturb.push_back(g.borrow(t));
  const auto adv_traces = trace_frames(mc, lm, kv, batch, perturb);
  std::vector<Var> kl_parts;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    Var logp = log_softmax_rows(clean[i].logits);
    Var logq = log_softmax_rows(adv_traces[i].logits);
    kl_parts.push_back(sum(mul(softmax_rows(clean[i].logits), sub(logp, logq))));
  }
  Var kl = sum(concat_cols(kl_parts));
  if (!std::isfinite(kl.value().item())) throw TrainingError("non-finite KL term");
  Var ce = sum_label_losses(clean, batch);
  Var total = add(ce, scale(kl, beta));
  Var mean = scale(total, 1.0f / static_cast<float>(batch.size()));
  if (grads) {
    g.backward(mean);
    grads->clear();
    for (Var v : pb.trainables()) grads->push_back(g.grad(v));
  }
  return mean.value().item();
}

TrainResult train_standard_prefix(const MicroLM& model, const Task& task, const Dataset& train, const Dataset& dev,
                                  const TrainConfig& cfg, PrefixParameters init) {
  Objective obj = [&](std::span<const SampleFrame> batch, const PrefixParameters& prefix, std::vector<Tensor>& grads,
                      PgdAudit&, std::uint64_t) { return standard_objective(model, batch, prefix, grads, nullptr); };
  return run_training(model, task, train, dev, cfg, std::move(init), obj);
}

TrainResult train_adversarial_prefix(const MicroLM& model, const Task& task, const Dataset& train, const Dataset& dev,
                                     const TrainConfig& cfg, const AdvConfig& adv, PrefixParameters init) {
  adv.validate();
  if (!adv.reaches_boundary()) {
    std::cerr << "warning: step_size * iterations < epsilon; PGD cannot reach the ball boundary\n";
  }
  Objective obj;
  if (adv.kl_beta) {
    obj = [&](std::span<const SampleFrame> batch, const PrefixParameters& prefix, std::vector<Tensor>& grads,
              PgdAudit& audit, std::uint64_t seed) {
      return kl_adversarial_step(model, batch, prefix, adv, &grads, &audit, seed) *
             static_cast<double>(batch.size());
    };
  } else {
    obj = [&](std::span<const SampleFrame> batch, const PrefixParameters& prefix, std::vector<Tensor>& grads,
              PgdAudit& audit, std::uint64_t) {
      const std::vector<Tensor> r = pgd_inner_max(model, batch, prefix, adv, &audit);
      return standard_objective(model, batch, prefix, grads, &r);
    };
  }
  return run_training(model, task, train, dev, cfg, std::move(init), obj);
}

double dataset_accuracy(const MicroLM& model, const Task& task, const Dataset& data, const PrefixParameters& prefix) {
  if (data.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& ex : data) {
    if (model.predict_label(task.frame(model.config(), ex), prefix, task.labels) == ex.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

double dataset_loss(const MicroLM& model, const Task& task, const Dataset& data, const PrefixParameters& prefix) {
  if (data.empty()) return 0.0;
  double total = 0.0;
  for (const auto& ex : data) {
    const SampleFrame f = task.frame(model.config(), ex);
    total += label_loss(model, std::span(&f, 1), prefix);
  }
  return total / static_cast<double>(data.size());
}

Dataset augment_with_attack(const Dataset& train, const SampleAttack& attack, AugmentStats* stats) {
  std::vector<std::optional<Example>> adv(train.size());
  parallel_for(train.size(), [&](std::size_t i) { adv[i] = attack(train[i]); });
  Dataset out;
  out.reserve(train.size() * 2);
  AugmentStats local;
  for (std::size_t i = 0; i < train.size(); ++i) {
    out.push_back(train[i]);
    ++local.attempted;
    if (!adv[i]) {
      ++local.failed;
      continue;
    }
    out.push_back(std::move(*adv[i]));
  }
  if (local.failed > 0) {
    std::cerr << "augment: attack failed on " << local.failed << " of " << local.attempted
              << " samples; those keep the clean copy only\n";
  }
  if (stats) *stats = local;
  return out;
}

}  // namespace rpt
