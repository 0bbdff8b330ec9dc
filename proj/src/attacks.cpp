#include "rpt/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "rpt/ops.hpp"

namespace rpt {

namespace {

struct LabelIndex {
  std::vector<int> ids;  // label token ids
  int gold = 0;          // position of the gold label inside ids
};

LabelIndex label_index(std::span<const Token> labels, Token gold) {
  LabelIndex li{std::vector<int>(labels.begin(), labels.end()), 0};
  const auto it = std::find(labels.begin(), labels.end(), gold);
  if (it == labels.end()) throw ConfigError("gold token is not in the label set");
  li.gold = static_cast<int>(it - labels.begin());
  return li;
}

// Label-set cross-entropy of the gold label at the output position.
Var gold_loss(const SequenceTrace& tr, const LabelIndex& li) {
  Var z = select(tr.logits, li.ids);
  return cross_entropy(z, std::span<const int>(&li.gold, 1));
}

double gold_loss_value(const MicroLM& model, const PrefixParameters& prefix, const SampleFrame& frame,
                       std::span<const Token> labels) {
  const std::vector<float> p = label_probabilities(model, prefix, frame, labels);
  const LabelIndex li = label_index(labels, frame.label);
  return -std::log(std::max(p[static_cast<std::size_t>(li.gold)], 1e-30f));
}

Example relabel(const Example& ex, AttackKind kind) {
  Example out = ex;
  out.provenance = attack_name(kind);
  out.edits.clear();
  return out;
}

bool flipped(const MicroLM& model, const PrefixParameters& prefix, const Task& task, const Example& ex) {
  return model.predict_label(task.frame(model.config(), ex), prefix, task.labels) != ex.label;
}

}  // namespace

std::string attack_name(AttackKind kind) {
  switch (kind) {
    case AttackKind::word_substitution: return "pwws";
    case AttackKind::viper: return "viper";
    case AttackKind::bug: return "bug";
    case AttackKind::uat: return "uat";
  }
  return "unknown";
}

AttackKind parse_attack(const std::string& name) {
  for (AttackKind k : {AttackKind::word_substitution, AttackKind::viper, AttackKind::bug, AttackKind::uat}) {
    if (attack_name(k) == name) return k;
  }
  throw ConfigError("unknown attack '" + name + "' (expected pwws, viper, bug or uat)");
}

std::vector<float> label_probabilities(const MicroLM& model, const PrefixParameters& prefix, const SampleFrame& frame,
                                       std::span<const Token> labels) {
  if (labels.empty()) throw ConfigError("label set is empty");
  const ModelConfig& cfg = model.config();
  Graph g;
  LMBinding lm = bind_lm(g, model.params());
  const TokenSeq stream = frame.input();
  SequenceTrace tr = trace_sequence(cfg, lm, prefix_kv(cfg, lm, g.borrow(prefix.expansion)), stream);
  auto row = tr.logits.value().row(0);
  float mx = -INFINITY;
  for (Token t : labels) mx = std::max(mx, row[static_cast<std::size_t>(t)]);
  std::vector<float> p;
  double s = 0.0;
  for (Token t : labels) {
    p.push_back(std::exp(row[static_cast<std::size_t>(t)] - mx));
    s += p.back();
  }
  for (float& v : p) v = static_cast<float>(v / s);
  return p;
}

AttackResult greedy_word_substitution(const MicroLM& model, const PrefixParameters& prefix, const Task& task,
                                      const Example& ex, const CandidateTable& table) {
  const ModelConfig& cfg = model.config();
  AttackResult out{ex, relabel(ex, AttackKind::word_substitution), AttackKind::word_substitution, false, {}};
  const LabelIndex li = label_index(task.labels, ex.label);
  auto gold_prob = [&](const TokenSeq& ctx) {
    const SampleFrame f = frame_sample(cfg, ctx, task.question, ex.label);
    return label_probabilities(model, prefix, f, task.labels)[static_cast<std::size_t>(li.gold)];
  };
  if (!table.empty()) {
    const float base = gold_prob(ex.context);
    std::vector<float> saliency(ex.context.size(), 0.0f);
    for (std::size_t i = 0; i < ex.context.size(); ++i) {
      TokenSeq masked = ex.context;
      masked[i] = vocab::kUnk;
      saliency[i] = base - gold_prob(masked);
    }
    std::vector<int> order(ex.context.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return saliency[a] > saliency[b]; });

    TokenSeq ctx = ex.context;
    float current = base;
    for (int pos : order) {
      const auto it = table.find(ctx[static_cast<std::size_t>(pos)]);
      if (it == table.end()) continue;
      Token best = -1;
      float best_p = current;
      for (Token cand : it->second) {
        TokenSeq trial = ctx;
        trial[static_cast<std::size_t>(pos)] = cand;
        const float p = gold_prob(trial);
        if (p < best_p) {
          best_p = p;
          best = cand;
        }
      }
      if (best < 0) continue;
      out.edits.push_back(Edit{pos, ctx[static_cast<std::size_t>(pos)], best});
      ctx[static_cast<std::size_t>(pos)] = best;
      current = best_p;
      out.perturbed.context = ctx;
      if (flipped(model, prefix, task, out.perturbed)) break;
    }
  }
  out.perturbed.edits = out.edits;
  out.success = flipped(model, prefix, task, out.perturbed);
  return out;
}

AttackResult token_noise_attack(const MicroLM& model, const PrefixParameters& prefix, const Task& task,
                                const Example& ex, const CandidateTable& confusion, double budget, AttackKind mode,
                                std::uint64_t seed) {
  if (!(budget > 0.0 && budget <= 1.0)) throw ConfigError("token noise budget must lie in (0, 1]");
  if (mode != AttackKind::viper && mode != AttackKind::bug) throw ConfigError("token noise mode must be viper or bug");
  const ModelConfig& cfg = model.config();
  AttackResult out{ex, relabel(ex, mode), mode, false, {}};
  out.perturbed.seed = seed;
  const int limit = static_cast<int>(std::ceil(budget * static_cast<double>(ex.context.size()) - 1e-9));

  std::vector<int> eligible;
  for (std::size_t i = 0; i < ex.context.size(); ++i) {
    const auto it = confusion.find(ex.context[i]);
    if (it != confusion.end() && !it->second.empty()) eligible.push_back(static_cast<int>(i));
  }
  Rng rng(seed);
  if (mode == AttackKind::viper) {
    std::shuffle(eligible.begin(), eligible.end(), rng);
  } else if (!eligible.empty()) {
    const SampleFrame f = task.frame(cfg, ex);
    Graph g;
    LMBinding lm = bind_lm(g, model.params());
    const TokenSeq stream = f.input();
    Var offset = g.param(Tensor({f.stream_len(), cfg.hidden_dim}));
    TraceOptions opts;
    opts.embedding_offset = offset;
    SequenceTrace tr = trace_sequence(cfg, lm, prefix_kv(cfg, lm, g.borrow(prefix.expansion)), stream, opts);
    g.backward(gold_loss(tr, label_index(task.labels, ex.label)));
    const Tensor grad = g.grad(offset);
    std::vector<float> norm(ex.context.size());
    for (std::size_t i = 0; i < ex.context.size(); ++i) {
      norm[i] = l2_norm(grad.row(static_cast<int>(i) + SampleFrame::context_begin()));
    }
    std::stable_sort(eligible.begin(), eligible.end(), [&](int a, int b) { return norm[a] > norm[b]; });
  }
  if (static_cast<int>(eligible.size()) > limit) eligible.resize(static_cast<std::size_t>(limit));
  for (int pos : eligible) {
    const Token old = ex.context[static_cast<std::size_t>(pos)];
    const auto& variants = confusion.at(old);
    const Token v = variants[std::uniform_int_distribution<std::size_t>(0, variants.size() - 1)(rng)];
    if (v == old) continue;
    out.perturbed.context[static_cast<std::size_t>(pos)] = v;
    out.edits.push_back(Edit{pos, old, v});
  }
  std::sort(out.edits.begin(), out.edits.end(), [](const Edit& a, const Edit& b) { return a.position < b.position; });
  out.perturbed.edits = out.edits;
  out.success = flipped(model, prefix, task, out.perturbed);
  return out;
}

std::vector<Token> trigger_vocabulary(const ModelConfig& cfg, const Task& task, std::span<const Token> excluded) {
  std::vector<Token> out;
  for (Token t = vocab::kFirstLabel; t < cfg.vocab_size; ++t) {
    auto in = [t](auto&& set) { return std::find(set.begin(), set.end(), t) != set.end(); };
    if (in(task.labels) || in(task.question) || in(excluded)) continue;
    out.push_back(t);
  }
  return out;
}

Trigger uat_search(const MicroLM& model, const PrefixParameters& prefix, const Task& task, const Dataset& targets,
                   const UatConfig& uc) {
  const ModelConfig& cfg = model.config();
  const std::vector<Token> allowed = trigger_vocabulary(cfg, task, uc.excluded);
  if (uc.trigger_len < 1 || uc.beam < 1 || uc.epochs < 0 || uc.candidates < 1 || uc.batch_size < 1) {
    throw ConfigError("UAT needs trigger_len, beam, candidates and batch_size >= 1");
  }
  double distinct = 1.0;
  for (int k = 0; k < uc.trigger_len; ++k) distinct *= static_cast<double>(allowed.size());
  if (distinct < uc.beam) {
    throw ConfigError("trigger vocabulary (" + std::to_string(allowed.size()) + " tokens) yields fewer distinct " +
                      "triggers than the beam (" + std::to_string(uc.beam) + ")");
  }
  if (targets.empty()) throw ConfigError("UAT needs at least one target sample");
  Trigger best;
  best.target = targets.front().label;
  const Token init = uc.init_token >= 0 ? uc.init_token : allowed.front();
  if (std::find(allowed.begin(), allowed.end(), init) == allowed.end()) {
    throw ConfigError("UAT init token is not in the trigger vocabulary");
  }
  TokenSeq trigger(static_cast<std::size_t>(uc.trigger_len), init);

  auto batch_loss = [&](const TokenSeq& trig, std::span<const std::size_t> idx) {
    double s = 0.0;
    for (std::size_t i : idx) {
      const Example e = apply_trigger(targets[i], trig);
      s += gold_loss_value(model, prefix, task.frame(cfg, e), task.labels);
    }
    return s;
  };
  auto error_rate = [&](const TokenSeq& trig) {
    std::size_t wrong = 0;
    for (const auto& ex : targets) wrong += flipped(model, prefix, task, apply_trigger(ex, trig)) ? 1 : 0;
    return static_cast<double>(wrong) / static_cast<double>(targets.size());
  };
  // Batch-mean gradient of the gold loss with respect to each trigger embedding.
  auto trigger_grad = [&](const TokenSeq& trig, std::span<const std::size_t> idx) {
    Tensor total({uc.trigger_len, cfg.hidden_dim});
    for (std::size_t i : idx) {
      const SampleFrame f = task.frame(cfg, apply_trigger(targets[i], trig));
      Graph g;
      LMBinding lm = bind_lm(g, model.params());
      const TokenSeq stream = f.input();
      Var offset = g.param(Tensor({f.stream_len(), cfg.hidden_dim}));
      TraceOptions opts;
      opts.embedding_offset = offset;
      SequenceTrace tr = trace_sequence(cfg, lm, prefix_kv(cfg, lm, g.borrow(prefix.expansion)), stream, opts);
      g.backward(gold_loss(tr, label_index(task.labels, f.label)));
      const Tensor grad = g.grad(offset);
      for (int k = 0; k < uc.trigger_len; ++k) {
        auto src = grad.row(SampleFrame::context_begin() + k);
        auto dst = total.row(k);
        for (int j = 0; j < cfg.hidden_dim; ++j) dst[j] += src[j];
      }
    }
    return total;
  };
  const Tensor& emb = model.params().token_embedding;

  best.tokens = trigger;
  best.score = error_rate(trigger);
  std::vector<std::size_t> order(targets.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(uc.seed);
  for (int epoch = 0; epoch < uc.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(uc.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(uc.batch_size));
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      const Tensor grad = trigger_grad(trigger, idx);

      // First-order candidates per position: largest (e_c - e_cur) . g.
      std::vector<std::vector<Token>> cands(static_cast<std::size_t>(uc.trigger_len));
      for (int k = 0; k < uc.trigger_len; ++k) {
        const auto gk = grad.row(k);
        const auto cur = emb.row(trigger[static_cast<std::size_t>(k)]);
        std::vector<std::pair<double, Token>> scored;
        for (Token t : allowed) {
          const auto e = emb.row(t);
          double s = 0.0;
          for (int j = 0; j < cfg.hidden_dim; ++j) s += static_cast<double>(e[j] - cur[j]) * gk[j];
          scored.emplace_back(-s, t);
        }
        const std::size_t keep = std::min<std::size_t>(scored.size(), static_cast<std::size_t>(uc.candidates));
        std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(keep), scored.end());
        for (std::size_t c = 0; c < keep; ++c) cands[static_cast<std::size_t>(k)].push_back(scored[c].second);
      }

      // Beam over positions, ranked by the true batch loss.
      std::vector<std::pair<double, TokenSeq>> beam{{batch_loss(trigger, idx), trigger}};
      for (int k = 0; k < uc.trigger_len; ++k) {
        std::vector<std::pair<double, TokenSeq>> next = beam;
        for (const auto& [loss, seq] : beam) {
          for (Token c : cands[static_cast<std::size_t>(k)]) {
            if (c == seq[static_cast<std::size_t>(k)]) continue;
            TokenSeq s = seq;
            s[static_cast<std::size_t>(k)] = c;
            if (std::any_of(next.begin(), next.end(), [&](const auto& b) { return b.second == s; })) continue;
            next.emplace_back(batch_loss(s, idx), std::move(s));
          }
        }
        std::stable_sort(next.begin(), next.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
        if (next.size() > static_cast<std::size_t>(uc.beam)) next.resize(static_cast<std::size_t>(uc.beam));
        beam = std::move(next);
      }
      trigger = beam.front().second;
    }
    const double err = error_rate(trigger);
    if (err > best.score) {
      best.score = err;
      best.tokens = trigger;
    }
    best.history.push_back(best.score);
  }
  return best;
}

std::vector<Trigger> uat_search_per_class(const MicroLM& model, const PrefixParameters& prefix, const Task& task,
                                          const Dataset& data, const UatConfig& cfg) {
  std::vector<Trigger> out;
  for (Token label : task.labels) {
    Dataset subset;
    for (const auto& ex : data) {
      if (ex.label == label) subset.push_back(ex);
    }
    if (subset.empty()) continue;
    UatConfig c = cfg;
    c.seed = cfg.seed + static_cast<std::uint64_t>(label);
    out.push_back(uat_search(model, prefix, task, subset, c));
  }
  return out;
}

Example apply_trigger(const Example& ex, std::span<const Token> trigger) {
  if (trigger.empty()) return ex;
  Example out = ex;
  out.context.assign(trigger.begin(), trigger.end());
  out.context.insert(out.context.end(), ex.context.begin(), ex.context.end());
  out.provenance = attack_name(AttackKind::uat);
  out.edits.clear();
  for (std::size_t k = 0; k < trigger.size(); ++k) {
    out.edits.push_back(Edit{static_cast<int>(k), vocab::kPad, trigger[k]});
  }
  return out;
}

SampleFrame apply_trigger(const ModelConfig& cfg, const SampleFrame& frame, std::span<const Token> trigger) {
  TokenSeq ctx(trigger.begin(), trigger.end());
  ctx.insert(ctx.end(), frame.context.begin(), frame.context.end());
  return frame_sample(cfg, std::move(ctx), frame.question, frame.label);
}

Dataset apply_class_triggers(const Dataset& data, const std::vector<Trigger>& triggers) {
  Dataset out;
  out.reserve(data.size());
  for (const auto& ex : data) {
    const auto it = std::find_if(triggers.begin(), triggers.end(), [&](const Trigger& t) { return t.target == ex.label; });
    out.push_back(it == triggers.end() ? ex : apply_trigger(ex, it->tokens));
  }
  return out;
}

}  // namespace rpt
