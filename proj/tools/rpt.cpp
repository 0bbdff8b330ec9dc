// Command-line front end for the robust prefix-tuning pipeline.
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "rpt/analysis.hpp"
#include "rpt/io.hpp"
#include "rpt/parallel.hpp"
#include "rpt/pipeline.hpp"

namespace fs = std::filesystem;
using namespace rpt;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* app, Common& c, bool with_out = true) {
  app->add_option("--config", c.config, "experiment config (JSON); defaults when omitted");
  app->add_option("--seed", c.seed, "override the config seed");
  if (with_out) app->add_option("--out", c.out, "output path");
}

ExperimentConfig load(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig::defaults() : load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  return cfg;
}

// The synthetic task (layout, tables, splits) is a pure function of the data spec and seed.
SyntheticTask task_of(const ExperimentConfig& cfg) { return synth_dataset(cfg.data, cfg.seed); }

MicroLM load_model(const ExperimentConfig& cfg, const std::string& lm_path) {
  return MicroLM(cfg.model, load_lm(lm_path, cfg.model));
}

void print_json_line(const std::string& key, double v) { std::cout << key << ": " << v << "\n"; }

UatConfig uat_for(const ExperimentConfig& cfg, const SyntheticTask& t) {
  UatConfig u = cfg.attacks.uat;
  u.seed = cfg.seed;
  u.init_token = t.layout.filler.front();
  for (const auto& v : t.layout.signals) u.excluded.insert(u.excluded.end(), v.begin(), v.end());
  for (const auto& v : t.layout.synonyms) {
    for (Token k : v) {
      if (k >= 0) u.excluded.push_back(k);
    }
  }
  return u;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"robust prefix-tuning experiments"};
  app.require_subcommand(1);
  app.footer("Threads: set RPT_THREADS (default 1).");

  Common c;

  auto* synth = app.add_subcommand("synth-data", "generate train/dev/test splits");
  add_common(synth, c);

  auto* train = app.add_subcommand("train", "pretrain the LM if needed and train a prefix");
  add_common(train, c);
  std::string method = "standard", lm_path;
  train->add_option("--method", method, "standard | adversarial | augmented");
  train->add_option("--lm", lm_path, "pretrained LM artifact; pretrains and saves lm.rptf when omitted");

  auto* manifold = app.add_subcommand("build-manifold", "fit projection matrices on correct training samples");
  add_common(manifold, c);
  std::string prefix_path;
  std::optional<int> rank;
  manifold->add_option("--lm", lm_path)->required();
  manifold->add_option("--prefix", prefix_path)->required();
  manifold->add_option("--rank", rank, "subspace rank; 95% spectral mass when omitted");

  auto* attack = app.add_subcommand("attack", "perturb a dataset");
  add_common(attack, c);
  std::string kind = "uat", input, search;
  attack->add_option("--lm", lm_path)->required();
  attack->add_option("--prefix", prefix_path)->required();
  attack->add_option("--kind", kind, "pwws | viper | bug | uat");
  attack->add_option("--input", input, "dataset to perturb")->required();
  attack->add_option("--search", search, "dataset the UAT search runs on (default: dev split)");

  auto* eval = app.add_subcommand("eval", "undefended accuracy");
  add_common(eval, c, false);
  eval->add_option("--lm", lm_path)->required();
  eval->add_option("--prefix", prefix_path)->required();
  eval->add_option("--input", input)->required();

  auto* defend = app.add_subcommand("defend", "accuracy with per-batch robust prefixes");
  add_common(defend, c, false);
  std::string proj_path;
  defend->add_option("--lm", lm_path)->required();
  defend->add_option("--prefix", prefix_path)->required();
  defend->add_option("--projection", proj_path)->required();
  defend->add_option("--input", input)->required();

  auto* analyze = app.add_subcommand("analyze", "cDoD / cRoE of baseline vs defended on a triggered set");
  add_common(analyze, c);
  std::string clean_path;
  int heat = -1;
  analyze->add_option("--lm", lm_path)->required();
  analyze->add_option("--prefix", prefix_path)->required();
  analyze->add_option("--projection", proj_path)->required();
  analyze->add_option("--clean", clean_path)->required();
  analyze->add_option("--attacked", input, "clean set with the trigger prepended")->required();
  analyze->add_option("--heat", heat, "print importance heat maps for this sample index");

  auto* report = app.add_subcommand("report", "render a saved report.json");
  std::string report_in, formats = "csv,json,text";
  report->add_option("--input", report_in)->required();
  report->add_option("--format", formats, "comma list of csv, json, text");
  report->add_option("--out", c.out)->required();

  auto* run_all = app.add_subcommand("run-all", "full train/attack/defend/analyze/report pipeline");
  add_common(run_all, c);
  run_all->add_option("--format", formats, "comma list of csv, json, text");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      const ExperimentConfig cfg = load(c);
      const fs::path out = c.out.empty() ? fs::path(cfg.output_dir) : fs::path(c.out);
      fs::create_directories(out);
      const SyntheticTask t = task_of(cfg);
      save_artifact(out / "train.rptf", t.train, cfg.seed);
      save_artifact(out / "dev.rptf", t.dev, cfg.seed);
      save_artifact(out / "test.rptf", t.test, cfg.seed);
      std::cout << "train " << t.train.size() << " dev " << t.dev.size() << " test " << t.test.size() << " -> "
                << out << "\n";
    } else if (*train) {
      ExperimentConfig cfg = load(c);
      const fs::path out = c.out.empty() ? fs::path(cfg.output_dir) : fs::path(c.out);
      fs::create_directories(out);
      const SyntheticTask t = task_of(cfg);
      LMParameters lm;
      if (lm_path.empty()) {
        PretrainConfig pc = cfg.pretrain;
        pc.seed = cfg.seed;
        const PretrainResult r = pretrain_lm(cfg.model, t.pretrain_corpus, pc);
        for (std::size_t e = 0; e < r.epoch_loss.size(); ++e) {
          std::cout << "pretrain epoch " << e + 1 << " loss " << r.epoch_loss[e] << "\n";
        }
        lm = r.params;
        save_artifact(out / "lm.rptf", lm, cfg.model, cfg.seed);
      } else {
        lm = load_lm(lm_path, cfg.model);
      }
      const MicroLM model(cfg.model, std::move(lm));
      TrainConfig tc = cfg.train;
      tc.seed = cfg.seed;
      PrefixParameters init = PrefixParameters::init(cfg.model, model.params(), cfg.seed);
      TrainResult r;
      if (method == "standard") {
        r = train_standard_prefix(model, t.task, t.train, t.dev, tc, init);
      } else if (method == "adversarial") {
        r = train_adversarial_prefix(model, t.task, t.train, t.dev, tc, cfg.adv, init);
        std::cout << "pgd iterates " << r.audit.checked << " violations " << r.audit.violations << "\n";
      } else if (method == "augmented") {
        const TrainResult base = train_standard_prefix(model, t.task, t.train, t.dev, tc, init);
        const Dataset aug = augment_with_attack(t.train, [&](const Example& ex) -> std::optional<Example> {
          AttackResult a = greedy_word_substitution(model, base.prefix, t.task, ex, t.synonyms);
          if (a.edits.empty()) return std::nullopt;
          return a.perturbed;
        });
        r = train_standard_prefix(model, t.task, aug, t.dev, tc, init);
      } else {
        throw ConfigError("unknown method '" + method + "'");
      }
      for (const auto& e : r.curve) {
        std::cout << "epoch " << e.epoch << " loss " << e.train_loss << " dev " << e.dev_accuracy << "\n";
      }
      save_artifact(out / ("prefix_" + method + ".rptf"), r.prefix, cfg.model, cfg.seed);
      for (const auto& [epoch, p] : r.checkpoints) {
        save_artifact(out / ("prefix_" + method + "_epoch" + std::to_string(epoch) + ".rptf"), p, cfg.model,
                      cfg.seed);
      }
    } else if (*manifold) {
      const ExperimentConfig cfg = load(c);
      const SyntheticTask t = task_of(cfg);
      const MicroLM model = load_model(cfg, lm_path);
      const PrefixParameters prefix = load_prefix(prefix_path, cfg.model);
      std::vector<int> layers;
      for (int j = 0; j < cfg.model.num_layers; ++j) layers.push_back(j);
      const ProjectionSet proj =
          build_projections(collect_correct_activations(model, prefix, t.task, t.train, layers, 2), rank);
      const fs::path out = c.out.empty() ? fs::path(cfg.output_dir) / "projection.rptf" : fs::path(c.out);
      save_artifact(out, proj, cfg.model, cfg.seed);
      for (std::size_t i = 0; i < proj.layers.size(); ++i) {
        std::cout << "layer " << proj.layers[i] << " rank " << proj.ranks[i] << "\n";
      }
    } else if (*attack) {
      const ExperimentConfig cfg = load(c);
      const SyntheticTask t = task_of(cfg);
      const MicroLM model = load_model(cfg, lm_path);
      const PrefixParameters prefix = load_prefix(prefix_path, cfg.model);
      const Dataset data = load_dataset(input);
      const AttackKind k = parse_attack(kind);
      Dataset adv(data.size());
      std::size_t flipped = 0;
      if (k == AttackKind::uat) {
        const Dataset pool = search.empty() ? t.dev : load_dataset(search);
        const auto triggers = uat_search_per_class(model, prefix, t.task, pool, uat_for(cfg, t));
        for (const auto& tr : triggers) {
          std::cout << "trigger for label " << tr.target << ":";
          for (Token tok : tr.tokens) std::cout << ' ' << tok;
          std::cout << " (search error " << tr.score << ")\n";
        }
        adv = apply_class_triggers(data, triggers);
      } else {
        std::vector<char> success(data.size(), 0);
        parallel_for(data.size(), [&](std::size_t i) {
          AttackResult r = k == AttackKind::word_substitution
                               ? greedy_word_substitution(model, prefix, t.task, data[i], t.synonyms)
                               : token_noise_attack(model, prefix, t.task, data[i], t.confusion,
                                                    cfg.attacks.noise_budget, k, cfg.seed + i);
          success[i] = r.success ? 1 : 0;
          adv[i] = std::move(r.perturbed);
        });
        for (char s : success) flipped += s;
        std::cout << "flipped " << flipped << " / " << data.size() << "\n";
      }
      const fs::path out = c.out.empty() ? fs::path(cfg.output_dir) / ("test_" + kind + ".rptf") : fs::path(c.out);
      save_artifact(out, adv, cfg.seed);
      print_json_line("attacked accuracy", dataset_accuracy(model, t.task, adv, prefix));
    } else if (*eval) {
      const ExperimentConfig cfg = load(c);
      const SyntheticTask t = task_of(cfg);
      const MicroLM model = load_model(cfg, lm_path);
      print_json_line("accuracy",
                      dataset_accuracy(model, t.task, load_dataset(input), load_prefix(prefix_path, cfg.model)));
    } else if (*defend) {
      const ExperimentConfig cfg = load(c);
      if (!cfg.defense.learning_rate) throw ConfigError("defend needs defense.learning_rate in the config");
      const SyntheticTask t = task_of(cfg);
      const MicroLM model = load_model(cfg, lm_path);
      const DefendedEval e = defend_dataset(model, t.task, load_dataset(input), load_prefix(prefix_path, cfg.model),
                                            load_projection(proj_path, cfg.model), cfg.defense);
      print_json_line("accuracy", e.accuracy);
      std::cout << "batches " << e.batches << " fallbacks " << e.fallbacks << " improved " << e.improved_batches
                << "\n";
    } else if (*analyze) {
      const ExperimentConfig cfg = load(c);
      if (!cfg.defense.learning_rate) throw ConfigError("analyze needs defense.learning_rate in the config");
      const SyntheticTask t = task_of(cfg);
      const MicroLM model = load_model(cfg, lm_path);
      const PrefixParameters prefix = load_prefix(prefix_path, cfg.model);
      const Dataset clean = load_dataset(clean_path), adv = load_dataset(input);
      if (clean.size() != adv.size()) throw ConfigError("clean and attacked sets differ in size");
      const int trig = static_cast<int>(adv.empty() ? 0 : adv[0].context.size() - clean[0].context.size());
      if (trig < 1) throw ConfigError("attacked set does not look trigger-prepended");
      const DefendedEval def =
          defend_dataset(model, t.task, adv, prefix, load_projection(proj_path, cfg.model), cfg.defense);
      std::vector<double> db, dd, rb, rd;
      for (std::size_t i = 0; i < adv.size(); ++i) {
        const SampleFrame fc = t.task.frame(cfg.model, clean[i]), fa = t.task.frame(cfg.model, adv[i]);
        const RobustPrefix& robust = def.robust[def.batch_of[i]];
        const ImportanceMatrix ic = importance_matrix(model, prefix, fc, t.task.labels);
        const ImportanceMatrix ib = importance_matrix(model, prefix, fa, t.task.labels);
        const ImportanceMatrix id = importance_matrix(model, prefix, fa, t.task.labels, &robust);
        const auto b = degree_of_distraction(ranking_matrix(ib.normalized), trig);
        const auto d = degree_of_distraction(ranking_matrix(id.normalized), trig);
        if (b && d) {
          db.push_back(*b);
          dd.push_back(*d);
        }
        rb.push_back(recognition_of_essential(ic.normalized, ib.normalized, trig));
        rd.push_back(recognition_of_essential(ic.normalized, id.normalized, trig));
        if (static_cast<int>(i) == heat) {
          std::cout << "clean importance\n" << heat_text(ic.normalized) << "attacked, baseline\n"
                    << heat_text(ib.normalized) << "attacked, defended\n" << heat_text(id.normalized);
          if (!c.out.empty()) {
            fs::create_directories(c.out);
            std::ofstream(fs::path(c.out) / "importance_clean.csv") << matrix_csv(ic.normalized);
            std::ofstream(fs::path(c.out) / "importance_baseline.csv") << matrix_csv(ib.normalized);
            std::ofstream(fs::path(c.out) / "importance_defended.csv") << matrix_csv(id.normalized);
          }
        }
      }
      if (db.empty()) throw ContractError("no sample long enough for DoD");
      const int b = cfg.analysis.resamples;
      std::cout << "cDoD baseline " << mean(db) << " defended " << mean(dd)
                << " p=" << bootstrap_test(db, dd, b, cfg.seed) << " (n=" << db.size() << ")\n";
      std::cout << "cRoE baseline " << mean(rb) << " defended " << mean(rd)
                << " p=" << bootstrap_test(rb, rd, b, cfg.seed + 1) << " (n=" << rb.size() << ")\n";
    } else if (*report || *run_all) {
      std::vector<ReportFormat> fmts;
      for (const auto& f : CLI::detail::split(formats, ',')) fmts.push_back(parse_report_format(f));
      Report r;
      fs::path out;
      if (*report) {
        std::ifstream f(report_in);
        if (!f) throw ConfigError("cannot read " + report_in);
        std::stringstream ss;
        ss << f.rdbuf();
        r = report_from_json(ss.str());
        out = c.out;
      } else {
        ExperimentConfig cfg = load(c);
        if (!c.out.empty()) cfg.output_dir = c.out;
        RunOptions opts;
        opts.log = &std::cerr;
        r = make_report(run_experiment(cfg, opts));
        out = cfg.output_dir;
      }
      for (ReportFormat f : fmts) {
        for (const auto& p : emit_report(r, f, out)) std::cout << "wrote " << p.string() << "\n";
      }
      std::cout << "report checksum " << report_checksum(r) << "\n";
      if (r.partial) {
        std::cerr << "partial result: stage " << r.failed_stage << " failed: " << r.error << "\n";
        return 2;
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
