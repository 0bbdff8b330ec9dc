#include <algorithm>

#include "doctest.h"
#include "rpt/pipeline.hpp"
#include "support/tempdir.hpp"

using namespace rpt;

namespace {

ExperimentConfig tiny_run(const std::filesystem::path& out) {
  ExperimentConfig c = ExperimentConfig::defaults();
  c.model.num_layers = 2;
  c.model.hidden_dim = 16;
  c.model.num_heads = 2;
  c.model.vocab_size = 128;
  c.model.max_seq_len = 40;
  c.model.prefix_len = 4;
  c.data.vocab_size = 128;
  c.data.train_count = 80;
  c.data.dev_count = 30;
  c.data.test_count = 30;
  c.data.pretrain_count = 80;
  c.pretrain.epochs = 1;
  c.train.epochs = 1;
  c.defense.learning_rate.reset();
  c.defense.num_layers = 2;
  c.defense.steps = 2;
  c.attacks.kinds = {AttackKind::uat};
  c.attacks.uat.epochs = 1;
  c.attacks.uat.beam = 2;
  c.attacks.uat.candidates = 3;
  c.analysis.max_samples = 20;
  c.analysis.resamples = 200;
  c.mixed.steps = {1, 2};
  c.sweep.learning_rates = {0.01f, 0.1f};
  c.sweep.layer_counts = {1};
  c.sweep.steps = {2};
  c.sweep.dev_samples = 10;
  c.seed = 5;
  c.output_dir = out.string();
  return c;
}

}  // namespace

TEST_CASE("tiny run completes with stable LM and deterministic report") {
  fixture::TempDir tmp;
  const ResultBundle a = run_experiment(tiny_run(tmp / "a"));
  RunOptions quiet;
  quiet.save_artifacts = false;
  const ResultBundle b = run_experiment(tiny_run(tmp / "b"), quiet);
  REQUIRE_FALSE(a.partial);
  CHECK(report_checksum(make_report(a)) == report_checksum(make_report(b)));
  CHECK(std::filesystem::exists(tmp / "a" / "lm.rptf"));
  CHECK_FALSE(std::filesystem::exists(tmp / "b"));
  for (const auto& s : a.stages) {
    if (s.lm_before != 0) CHECK(s.lm_before == s.lm_after);
  }
  CHECK(a.best(LayerEnd::bottom).has_value());
  CHECK(a.best(LayerEnd::top).has_value());
  CHECK(a.normalization.size() == 4);
}

TEST_CASE("mixed stream reports one test row at the best dev setting") {
  fixture::TempDir tmp;
  RunOptions quiet;
  quiet.save_artifacts = false;
  const ResultBundle r = run_experiment(tiny_run(tmp / "run"), quiet);
  REQUIRE_FALSE(r.partial);
  std::vector<MixedResult> dev, test;
  for (const auto& m : r.mixed) (m.split == "dev" ? dev : test).push_back(m);
  REQUIRE(dev.size() == 4);
  REQUIRE(test.size() == 1);
  const auto best = std::max_element(dev.begin(), dev.end(), [](const MixedResult& x, const MixedResult& y) {
    return x.defended < y.defended;
  });
  CHECK(test[0].steps == best->steps);
  CHECK(test[0].learning_rate == best->learning_rate);
  CHECK(test[0].samples == 60);
  CHECK(dev[0].samples == 20);
}

TEST_CASE("config errors surface before any artifact is written") {
  fixture::TempDir tmp;
  ExperimentConfig c = tiny_run(tmp / "run");
  c.defense.normalization = Normalization::dynamic;
  c.defense.batch = BatchMode::fixed_size(1);
  CHECK_THROWS_AS(run_experiment(c), ConfigError);
  CHECK_FALSE(std::filesystem::exists(tmp / "run"));
}
