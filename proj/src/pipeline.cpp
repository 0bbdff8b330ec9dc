#include "rpt/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <deque>
#include <map>

#include "rpt/analysis.hpp"
#include "rpt/io.hpp"
#include "rpt/parallel.hpp"

namespace rpt {

namespace {

using Clock = std::chrono::steady_clock;

std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
  std::uint64_t h = 1469598103934665603ULL ^ (seed * 0x9E3779B97F4A7C15ULL);
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return h;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct MethodState {
  TrainMethod method = TrainMethod::standard;
  std::string name;
  PrefixParameters prefix;
  ProjectionSet proj;
  std::map<AttackKind, Dataset> attacked;  // test split per attack
  Dataset dev_uat;                         // dev subset with UAT triggers
  std::optional<DefendedEval> defended_uat;
  float lr = 0.0f;
};

class Runner {
 public:
  Runner(const ExperimentConfig& cfg, const RunOptions& opts, ResultBundle& bundle)
      : cfg_(cfg), opts_(opts), bundle_(bundle), out_(cfg.output_dir) {}

  void run() {
    stage("data", "data", "-", [&] { make_data(); });
    stage("pretrain", "pretrain", "-", [&] { make_lm(); });
    std::vector<TrainMethod> order = cfg_.methods;
    for (TrainMethod m : order) {
      MethodState& st = methods_.emplace_back();
      st.method = m;
      st.name = method_name(m);
      stage("train:" + st.name, "train", st.name, [&] { train(st); });
      stage("manifold:" + st.name, "manifold", st.name, [&] { build_manifold(st); });
      stage("attack:" + st.name, "attack", st.name, [&] { attack(st); });
      if (cfg_.defense_enabled) stage("defense-lr:" + st.name, "defense-lr", st.name, [&] { choose_lr(st); });
      evaluate(st);
    }
    MethodState& lead = methods_.front();
    if (!has_uat()) {
      log("UAT not selected; skipping analysis, mixed, normalization and layer sweeps");
      return;
    }
    if (!cfg_.defense_enabled) return;
    if (cfg_.analysis.enabled) stage("analysis", "analysis", lead.name, [&] { analyze(lead); });
    if (cfg_.mixed.enabled) stage("mixed", "mixed", lead.name, [&] { mixed(lead); });
    if (cfg_.sweep.normalization_variants) {
      stage("normalization", "normalization", lead.name, [&] { normalization(lead); });
    }
    if (cfg_.sweep.layer_sweep) stage("layer-sweep", "layer-sweep", lead.name, [&] { layer_sweep(lead); });
  }

  std::string current_stage;

 private:
  template <typename F>
  void stage(const std::string& name, const std::string& phase, const std::string& method, F&& fn) {
    current_stage = name;
    log("stage " + name);
    const std::uint64_t before = model_ ? model_->params().checksum() : 0;
    const auto t0 = Clock::now();
    fn();
    bundle_.timings.push_back({phase, method, seconds_since(t0)});
    const std::uint64_t after = model_ ? model_->params().checksum() : 0;
    bundle_.stages.push_back({name, before, after});
    if (before != 0 && before != after) throw ContractError("stage " + name + " changed the LM parameters");
  }

  void log(const std::string& msg) const {
    if (opts_.log) *opts_.log << "[rpt] " << msg << std::endl;
  }

  bool has_uat() const {
    for (AttackKind k : cfg_.attacks.kinds) {
      if (k == AttackKind::uat) return true;
    }
    return false;
  }

  std::filesystem::path artifact(const std::string& name) const { return out_ / name; }

  void make_data() {
    task_ = synth_dataset(cfg_.data, cfg_.seed);
    if (cfg_.test_set_path) task_.test = load_dataset(*cfg_.test_set_path);
    if (opts_.save_artifacts) {
      std::filesystem::create_directories(out_);
      std::ofstream(artifact("config.json")) << config_to_json(cfg_);
      save_artifact(artifact("train.rptf"), task_.train, cfg_.seed);
      save_artifact(artifact("dev.rptf"), task_.dev, cfg_.seed);
      save_artifact(artifact("test.rptf"), task_.test, cfg_.seed);
    }
    const int n = std::min<int>(cfg_.sweep.dev_samples, static_cast<int>(task_.dev.size()));
    dev_subset_.assign(task_.dev.begin(), task_.dev.begin() + n);
    uat_ = cfg_.attacks.uat;
    uat_.init_token = task_.layout.filler.front();
    for (const auto& v : task_.layout.signals) uat_.excluded.insert(uat_.excluded.end(), v.begin(), v.end());
    for (const auto& v : task_.layout.synonyms) {
      for (Token t : v) {
        if (t >= 0) uat_.excluded.push_back(t);
      }
    }
  }

  void make_lm() {
    LMParameters lm;
    if (cfg_.lm_path) {
      lm = load_lm(*cfg_.lm_path, cfg_.model);
    } else {
      PretrainConfig pc = cfg_.pretrain;
      pc.seed = derive_seed(cfg_.seed, "pretrain");
      lm = pretrain_lm(cfg_.model, task_.pretrain_corpus, pc).params;
    }
    model_.emplace(cfg_.model, std::move(lm));
    if (opts_.save_artifacts) save_artifact(artifact("lm.rptf"), model_->params(), cfg_.model, cfg_.seed);
  }

  const PrefixParameters& standard_prefix() {
    if (!standard_) {
      TrainConfig tc = cfg_.train;
      tc.seed = derive_seed(cfg_.seed, "train:standard");
      PrefixParameters init = PrefixParameters::init(cfg_.model, model_->params(), tc.seed);
      if (cfg_.prefix_path) {
        standard_ = load_prefix(*cfg_.prefix_path, cfg_.model);
      } else {
        TrainResult r = train_standard_prefix(*model_, task_.task, task_.train, task_.dev, tc, std::move(init));
        record_curve("standard", r);
        standard_ = std::move(r.prefix);
      }
    }
    return *standard_;
  }

  void record_curve(const std::string& method, const TrainResult& r) {
    for (const auto& e : r.curve) bundle_.curves.push_back({method, e.epoch, e.train_loss, e.dev_accuracy});
  }

  void train(MethodState& st) {
    TrainConfig tc = cfg_.train;
    tc.seed = derive_seed(cfg_.seed, "train:" + st.name);
    PrefixParameters init = PrefixParameters::init(cfg_.model, model_->params(), tc.seed);
    switch (st.method) {
      case TrainMethod::standard:
        st.prefix = standard_prefix();
        break;
      case TrainMethod::adversarial: {
        TrainResult r = train_adversarial_prefix(*model_, task_.task, task_.train, task_.dev, tc, cfg_.adv, init);
        if (r.audit.violations > 0) {
          throw TrainingError(std::to_string(r.audit.violations) + " PGD iterates left the ball");
        }
        record_curve(st.name, r);
        st.prefix = std::move(r.prefix);
        break;
      }
      case TrainMethod::augmented: {
        const PrefixParameters& source = standard_prefix();
        const Dataset augmented = augment_with_attack(task_.train, [&](const Example& ex) -> std::optional<Example> {
          AttackResult a = greedy_word_substitution(*model_, source, task_.task, ex, task_.synonyms);
          if (a.edits.empty()) return std::nullopt;
          return a.perturbed;
        });
        TrainResult r = train_standard_prefix(*model_, task_.task, augmented, task_.dev, tc, init);
        record_curve(st.name, r);
        st.prefix = std::move(r.prefix);
        break;
      }
    }
    if (opts_.save_artifacts) save_artifact(artifact("prefix_" + st.name + ".rptf"), st.prefix, cfg_.model, tc.seed);
  }

  void build_manifold(MethodState& st) {
    std::vector<int> layers;
    for (int j = 0; j < cfg_.model.num_layers; ++j) layers.push_back(j);
    const ActivationSet acts = collect_correct_activations(*model_, st.prefix, task_.task, task_.train, layers, 2);
    st.proj = build_projections(acts);
    if (opts_.save_artifacts) {
      save_artifact(artifact("projection_" + st.name + ".rptf"), st.proj, cfg_.model, cfg_.seed);
    }
  }

  Dataset per_sample_attack(const Dataset& data, const std::function<Example(const Example&, std::size_t)>& fn) {
    Dataset out(data.size());
    parallel_for(data.size(), [&](std::size_t i) { out[i] = fn(data[i], i); });
    return out;
  }

  void attack(MethodState& st) {
    const std::uint64_t base = derive_seed(cfg_.seed, "attack:" + st.name);
    for (AttackKind kind : cfg_.attacks.kinds) {
      const auto t0 = Clock::now();
      Dataset adv;
      switch (kind) {
        case AttackKind::word_substitution:
          adv = per_sample_attack(task_.test, [&](const Example& ex, std::size_t) {
            return greedy_word_substitution(*model_, st.prefix, task_.task, ex, task_.synonyms).perturbed;
          });
          break;
        case AttackKind::viper:
        case AttackKind::bug:
          adv = per_sample_attack(task_.test, [&](const Example& ex, std::size_t i) {
            return token_noise_attack(*model_, st.prefix, task_.task, ex, task_.confusion, cfg_.attacks.noise_budget,
                                      kind, base + i)
                .perturbed;
          });
          break;
        case AttackKind::uat: {
          UatConfig uc = uat_;
          uc.seed = base;
          const std::vector<Trigger> triggers = uat_search_per_class(*model_, st.prefix, task_.task, task_.dev, uc);
          for (const auto& t : triggers) bundle_.triggers.push_back({st.name, t.target, t.tokens, t.score});
          adv = apply_class_triggers(task_.test, triggers);
          st.dev_uat = apply_class_triggers(dev_subset_, triggers);
          break;
        }
      }
      bundle_.timings.push_back({"attack:" + attack_name(kind), st.name, seconds_since(t0)});
      if (opts_.save_artifacts) {
        save_artifact(artifact("test_" + attack_name(kind) + "_" + st.name + ".rptf"), adv, cfg_.seed);
      }
      st.attacked[kind] = std::move(adv);
    }
  }

  Dataset sweep_set(const MethodState& st) const {
    Dataset d = dev_subset_;
    d.insert(d.end(), st.dev_uat.begin(), st.dev_uat.end());
    return d;
  }

  void choose_lr(MethodState& st) {
    if (cfg_.defense.learning_rate) {
      st.lr = *cfg_.defense.learning_rate;
    } else {
      st.lr = sweep_learning_rate(*model_, task_.task, sweep_set(st), st.prefix, st.proj, cfg_.defense,
                                  cfg_.sweep.learning_rates);
      log("defense learning rate for " + st.name + ": " + std::to_string(st.lr));
    }
    if (&st == &methods_.front()) bundle_.defense_learning_rate = st.lr;
  }

  DefenseConfig main_defense(const MethodState& st) const {
    DefenseConfig d = cfg_.defense;
    d.learning_rate = st.lr;
    return d;
  }

  void evaluate(MethodState& st) {
    if (bundle_.grid.columns.empty()) {
      bundle_.grid.columns.push_back("clean");
      for (AttackKind k : cfg_.attacks.kinds) bundle_.grid.columns.push_back(attack_name(k));
    }
    GridRow plain{st.name, false, {}};
    stage("evaluate:" + st.name, "inference", st.name, [&] {
      plain.accuracy.push_back(dataset_accuracy(*model_, task_.task, task_.test, st.prefix));
    });
    stage("evaluate-attacks:" + st.name, "inference-attacked", st.name, [&] {
      for (AttackKind k : cfg_.attacks.kinds) {
        plain.accuracy.push_back(dataset_accuracy(*model_, task_.task, st.attacked.at(k), st.prefix));
      }
    });
    bundle_.grid.rows.push_back(plain);
    if (!cfg_.defense_enabled) return;
    GridRow defended{st.name, true, {}};
    const DefenseConfig d = main_defense(st);
    stage("defend:" + st.name, "inference+defense", st.name, [&] {
      defended.accuracy.push_back(defend_dataset(*model_, task_.task, task_.test, st.prefix, st.proj, d).accuracy);
    });
    stage("defend-attacks:" + st.name, "inference-attacked+defense", st.name, [&] {
      for (AttackKind k : cfg_.attacks.kinds) {
        DefendedEval e = defend_dataset(*model_, task_.task, st.attacked.at(k), st.prefix, st.proj, d);
        defended.accuracy.push_back(e.accuracy);
        if (k == AttackKind::uat) st.defended_uat = std::move(e);
      }
    });
    bundle_.grid.rows.push_back(defended);
  }

  void analyze(MethodState& st) {
    const Dataset& attacked = st.attacked.at(AttackKind::uat);
    const DefendedEval& def = *st.defended_uat;
    const int trig = cfg_.attacks.uat.trigger_len;
    const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(cfg_.analysis.max_samples), attacked.size());
    std::vector<std::optional<double>> dod_base(n), dod_def(n);
    std::vector<double> roe_base(n), roe_def(n);
    parallel_for(n, [&](std::size_t i) {
      const ModelConfig& mc = cfg_.model;
      const SampleFrame clean = task_.task.frame(mc, task_.test[i]);
      const SampleFrame adv = task_.task.frame(mc, attacked[i]);
      const RobustPrefix& robust = def.robust[def.batch_of[i]];
      const Tensor ic = importance_matrix(*model_, st.prefix, clean, task_.task.labels).normalized;
      const Tensor ib = importance_matrix(*model_, st.prefix, adv, task_.task.labels).normalized;
      const Tensor id = importance_matrix(*model_, st.prefix, adv, task_.task.labels, &robust).normalized;
      dod_base[i] = degree_of_distraction(ranking_matrix(ib), trig);
      dod_def[i] = degree_of_distraction(ranking_matrix(id), trig);
      roe_base[i] = recognition_of_essential(ic, ib, trig);
      roe_def[i] = recognition_of_essential(ic, id, trig);
    });
    std::vector<double> db, dd;
    for (std::size_t i = 0; i < n; ++i) {
      if (dod_base[i] && dod_def[i]) {
        db.push_back(*dod_base[i]);
        dd.push_back(*dod_def[i]);
      } else {
        log("analysis: sample " + std::to_string(i) + " too short for DoD, skipped");
      }
    }
    if (db.empty()) throw ContractError("no sample long enough for DoD");
    const std::uint64_t seed = derive_seed(cfg_.seed, "bootstrap");
    const int b = cfg_.analysis.resamples;
    bundle_.metrics.push_back({"cDoD", "baseline", mean(db), db.size(), std::nullopt});
    bundle_.metrics.push_back({"cDoD", "defended", mean(dd), dd.size(), bootstrap_test(db, dd, b, seed)});
    bundle_.metrics.push_back({"cRoE", "baseline", mean(roe_base), n, std::nullopt});
    bundle_.metrics.push_back({"cRoE", "defended", mean(roe_def), n, bootstrap_test(roe_base, roe_def, b, seed + 1)});
  }

  // Clean and triggered samples alternate; steps and lr are fixed on the dev stream, then applied to test.
  void mixed(MethodState& st) {
    auto interleave = [](const Dataset& clean, const Dataset& attacked) {
      Dataset out;
      for (std::size_t i = 0; i < clean.size(); ++i) {
        out.push_back(clean[i]);
        out.push_back(attacked[i]);
      }
      return out;
    };
    auto run = [&](const Dataset& stream, int steps, float lr, const std::string& split) {
      DefenseConfig d = main_defense(st);
      d.batch = BatchMode::fixed_size(1);
      d.steps = steps;
      d.learning_rate = lr;
      if (d.normalization == Normalization::dynamic) d.normalization = Normalization::fixed;
      MixedResult r{split, steps, lr, stream.size(), dataset_accuracy(*model_, task_.task, stream, st.prefix), 0.0};
      r.defended = defend_dataset(*model_, task_.task, stream, st.prefix, st.proj, d).accuracy;
      bundle_.mixed.push_back(r);
      return r;
    };
    const Dataset dev = interleave(dev_subset_, st.dev_uat);
    std::optional<MixedResult> best;
    for (int steps : cfg_.mixed.steps) {
      for (float lr : cfg_.sweep.learning_rates) {
        const MixedResult r = run(dev, steps, lr, "dev");
        if (!best || r.defended > best->defended) best = r;
      }
    }
    run(interleave(task_.test, st.attacked.at(AttackKind::uat)), best->steps, best->learning_rate, "test");
  }

  DefenseCell evaluate_cell(const MethodState& st, const DefenseSetting& s, const Dataset& clean, const Dataset& adv,
                            const std::string& split) {
    DefenseConfig d;
    d.layer_end = s.layer_end;
    d.num_layers = s.num_layers;
    d.steps = s.steps;
    d.learning_rate = s.learning_rate;
    d.normalization = s.normalization;
    d.batch = BatchMode::fixed_size(s.batch_size);
    const DefendedEval c = defend_dataset(*model_, task_.task, clean, st.prefix, st.proj, d);
    const DefendedEval a = defend_dataset(*model_, task_.task, adv, st.prefix, st.proj, d);
    return {s, split, c.accuracy, a.accuracy, c.fallbacks + a.fallbacks};
  }

  // Dev-selected learning rate for a setting, scored on clean + triggered dev samples.
  DefenseCell select_on_dev(const MethodState& st, DefenseSetting s, std::vector<DefenseCell>* cells) {
    std::optional<DefenseCell> best;
    for (float lr : cfg_.sweep.learning_rates) {
      s.learning_rate = lr;
      DefenseCell c = evaluate_cell(st, s, dev_subset_, st.dev_uat, "dev");
      if (cells) cells->push_back(c);
      if (!best || c.clean + c.attacked > best->clean + best->attacked) best = c;
    }
    return *best;
  }

  void normalization(MethodState& st) {
    std::vector<DefenseSetting> variants;
    DefenseSetting base;
    base.layer_end = cfg_.defense.layer_end;
    base.num_layers = cfg_.defense.num_layers;
    base.steps = cfg_.defense.steps;
    for (int b : cfg_.sweep.dynamic_batch_sizes) {
      DefenseSetting s = base;
      s.normalization = Normalization::dynamic;
      s.batch_size = b;
      variants.push_back(s);
    }
    for (Normalization n : {Normalization::fixed, Normalization::none}) {
      DefenseSetting s = base;
      s.normalization = n;
      s.batch_size = 1;
      variants.push_back(s);
    }
    for (const DefenseSetting& v : variants) {
      const DefenseCell dev = select_on_dev(st, v, nullptr);
      bundle_.normalization.push_back(
          evaluate_cell(st, dev.setting, task_.test, st.attacked.at(AttackKind::uat), "test"));
    }
  }

  void layer_sweep(MethodState& st) {
    for (LayerEnd end : {LayerEnd::bottom, LayerEnd::top}) {
      std::optional<DefenseCell> best;
      for (int n : cfg_.sweep.layer_counts) {
        for (int steps : cfg_.sweep.steps) {
          DefenseSetting s;
          s.layer_end = end;
          s.num_layers = n;
          s.steps = steps;
          s.normalization = cfg_.defense.normalization == Normalization::dynamic ? Normalization::fixed
                                                                                 : cfg_.defense.normalization;
          const DefenseCell c = select_on_dev(st, s, &bundle_.layer_sweep);
          if (!best || c.clean + c.attacked > best->clean + best->attacked) best = c;
        }
      }
      if (best) {
        bundle_.layer_sweep.push_back(
            evaluate_cell(st, best->setting, task_.test, st.attacked.at(AttackKind::uat), "test"));
      }
    }
  }

  const ExperimentConfig& cfg_;
  const RunOptions& opts_;
  ResultBundle& bundle_;
  std::filesystem::path out_;
  SyntheticTask task_;
  Dataset dev_subset_;
  UatConfig uat_;
  std::optional<MicroLM> model_;
  std::optional<PrefixParameters> standard_;
  std::deque<MethodState> methods_;
};

}  // namespace

std::optional<DefenseCell> ResultBundle::best(LayerEnd end) const {
  for (const auto& c : layer_sweep) {
    if (c.split == "test" && c.setting.layer_end == end) return c;
  }
  return std::nullopt;
}

std::optional<double> ResultBundle::accuracy(const std::string& method, bool defended,
                                             const std::string& column) const {
  for (const auto& r : grid.rows) {
    if (r.method != method || r.defended != defended) continue;
    for (std::size_t c = 0; c < grid.columns.size() && c < r.accuracy.size(); ++c) {
      if (grid.columns[c] == column) return r.accuracy[c];
    }
  }
  return std::nullopt;
}

std::optional<double> ResultBundle::metric(const std::string& name, const std::string& condition) const {
  for (const auto& m : metrics) {
    if (m.metric == name && m.condition == condition) return m.value;
  }
  return std::nullopt;
}

ResultBundle run_experiment(const ExperimentConfig& cfg, const RunOptions& opts) {
  cfg.validate();
  ResultBundle bundle;
  Runner runner(cfg, opts, bundle);
  try {
    runner.run();
  } catch (const std::exception& e) {
    bundle.partial = true;
    bundle.failed_stage = runner.current_stage;
    bundle.error = e.what();
    if (opts.log) *opts.log << "[rpt] stage " << runner.current_stage << " failed: " << e.what() << std::endl;
  }
  return bundle;
}

}  // namespace rpt
