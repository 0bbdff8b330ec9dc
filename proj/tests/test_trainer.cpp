#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "rpt/attacks.hpp"
#include "rpt/pretrain.hpp"
#include "rpt/trainer.hpp"
#include "support/fixture.hpp"

using namespace rpt;

namespace {

double row_norm(const Tensor& t, int r) {
  double s = 0.0;
  for (float v : t.row(r)) s += static_cast<double>(v) * v;
  return std::sqrt(s);
}

double flat_norm(const Tensor& t) {
  double s = 0.0;
  for (float v : t.data()) s += static_cast<double>(v) * v;
  return std::sqrt(s);
}

Tensor random_tensor(int r, int c, std::uint64_t seed, float scale) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, scale);
  Tensor t({r, c});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = n(rng);
  return t;
}

}  // namespace

TEST_CASE("word-level projection bounds each row and keeps interior rows") {
  Tensor t = random_tensor(6, 8, 1, 3.0f);
  for (float& v : t.row(2)) v *= 1e-3f;
  const Tensor before = t;
  project_to_ball(t, 2.0f, PerturbLevel::word);
  for (int r = 0; r < t.rows(); ++r) CHECK(row_norm(t, r) <= 2.0 + 1e-5);
  for (int c = 0; c < t.cols(); ++c) CHECK(t.at(2, c) == before.at(2, c));
  CHECK(ball_norm(t, PerturbLevel::word) <= 2.0f + 1e-5f);
}

TEST_CASE("sentence-level projection bounds the flattened tensor and keeps direction") {
  Tensor t = random_tensor(5, 4, 2, 3.0f);
  const Tensor before = t;
  project_to_ball(t, 1.5f, PerturbLevel::sentence);
  CHECK(flat_norm(t) == doctest::Approx(1.5).epsilon(1e-5));
  const double scale = flat_norm(t) / flat_norm(before);
  for (std::size_t i = 0; i < t.size(); ++i) CHECK(t[i] == doctest::Approx(before[i] * scale).epsilon(1e-4));
}

TEST_CASE("projected ascent on a linear objective lands on the ball boundary along the gradient") {
  const Tensor g = random_tensor(3, 4, 3, 1.0f);
  AdvConfig adv;
  adv.epsilon = 2.0f;
  adv.step_size = 0.5f;
  adv.iterations = 6;
  adv.level = PerturbLevel::sentence;
  PgdAudit audit;
  const auto r = projected_ascent({g.shape()}, [&](const std::vector<Tensor>&) { return std::vector<Tensor>{g}; },
                                  adv, &audit);
  const double gn = flat_norm(g);
  for (std::size_t i = 0; i < g.size(); ++i) CHECK(r[0][i] == doctest::Approx(2.0 * g[i] / gn).epsilon(1e-4));
  CHECK(audit.checked == 6);
  CHECK(audit.violations == 0);
}

TEST_CASE("zero gradients leave the perturbation at zero") {
  AdvConfig adv;
  const auto r = projected_ascent({{2, 3}}, [](const std::vector<Tensor>&) { return std::vector<Tensor>{Tensor({2, 3})}; },
                                  adv);
  for (float v : r[0].data()) CHECK(v == 0.0f);
}

TEST_CASE("adversarial training keeps every PGD iterate inside the ball") {
  fixture::Setup s(40);
  TrainConfig tc;
  tc.epochs = 1;
  tc.learning_rate = 1e-3f;
  tc.batch_size = 8;
  const Dataset train(s.task.train.begin(), s.task.train.begin() + 16);
  for (PerturbLevel level : {PerturbLevel::word, PerturbLevel::sentence}) {
    AdvConfig adv;
    adv.level = level;
    adv.iterations = 3;
    adv.step_size = 2.0f;
    const TrainResult res = train_adversarial_prefix(s.lm, s.task.task, train, s.task.dev, tc, adv, s.prefix);
    CHECK(res.audit.checked > 0);
    CHECK(res.audit.violations == 0);
    CHECK(res.audit.max_excess <= kBallTolerance);
    CHECK(res.curve.size() == 1);
  }
}

TEST_CASE("standard training lowers the training loss on a tiny task") {
  fixture::Setup s(41);
  TrainConfig tc;
  tc.epochs = 3;
  tc.learning_rate = 1e-2f;
  tc.batch_size = 8;
  const double before = dataset_loss(s.lm, s.task.task, s.task.train, s.prefix);
  const TrainResult res = train_standard_prefix(s.lm, s.task.task, s.task.train, s.task.dev, tc, s.prefix);
  CHECK(dataset_loss(s.lm, s.task.task, s.task.train, res.prefix) < before);
}

TEST_CASE("training never touches the language model") {
  fixture::Setup s(42);
  const std::uint64_t before = s.lm.params().checksum();
  TrainConfig tc;
  tc.epochs = 1;
  tc.milestones = {1};
  const TrainResult res = train_standard_prefix(s.lm, s.task.task, s.task.train, s.task.dev, tc, s.prefix);
  CHECK(s.lm.params().checksum() == before);
  CHECK(res.checkpoints.count(1) == 1);
}

TEST_CASE("augmentation pairs successes and keeps failed samples clean") {
  fixture::Setup s(43);
  const Dataset train(s.task.train.begin(), s.task.train.begin() + 6);
  int calls = 0;
  AugmentStats stats;
  const Dataset out = augment_with_attack(
      train,
      [&](const Example& ex) -> std::optional<Example> {
        if (calls++ % 2) return std::nullopt;
        Example adv = ex;
        adv.provenance = "pwws";
        return adv;
      },
      &stats);
  CHECK(stats.attempted == 6);
  CHECK(stats.failed == 3);
  CHECK(out.size() == 9);
}

TEST_CASE("invalid training settings are rejected") {
  TrainConfig tc;
  tc.epochs = 0;
  CHECK_THROWS_AS(tc.validate(), ConfigError);
  AdvConfig adv;
  adv.epsilon = -1.0f;
  CHECK_THROWS_AS(adv.validate(), ConfigError);
}

TEST_CASE("a copy task whose label sits in the context is learned within five epochs") {
  ModelConfig cfg;
  cfg.num_layers = 2;
  cfg.hidden_dim = 32;
  cfg.num_heads = 4;
  cfg.vocab_size = 32;
  cfg.max_seq_len = 16;
  cfg.prefix_len = 4;
  const Task task{{6}, {4, 5}};
  std::mt19937_64 rng(90);
  std::uniform_int_distribution<Token> filler(8, 31);
  auto make = [&](int n) {
    Dataset d;
    for (int i = 0; i < n; ++i) {
      Example ex;
      ex.label = task.labels[static_cast<std::size_t>(i % 2)];
      for (int k = 0; k < 5; ++k) ex.context.push_back(filler(rng));
      ex.context[std::uniform_int_distribution<std::size_t>(0, 4)(rng)] = ex.label;
      d.push_back(ex);
    }
    return d;
  };
  const Dataset train = make(300), dev = make(100);
  // Frequency-rule oracle: the only label token in the context is the answer.
  for (const auto& ex : dev) CHECK(std::count(ex.context.begin(), ex.context.end(), ex.label) == 1);

  std::vector<TokenSeq> corpus;
  for (const auto& ex : make(1500)) {
    TokenSeq doc = task.frame(cfg, ex).input();
    doc.push_back(ex.label);
    corpus.push_back(doc);
  }
  PretrainConfig pc;
  pc.epochs = 6;
  pc.seed = 91;
  const MicroLM lm(cfg, pretrain_lm(cfg, corpus, pc).params);
  TrainConfig tc;
  tc.epochs = 5;
  tc.learning_rate = 1e-2f;
  tc.batch_size = 16;
  const TrainResult res =
      train_standard_prefix(lm, task, train, dev, tc, PrefixParameters::init(cfg, lm.params(), 92));
  CHECK(res.curve.back().dev_accuracy >= 0.99);
}

TEST_CASE("first-epoch loss does not exceed the untrained prefix loss") {
  fixture::Setup s(44);
  TrainConfig tc;
  tc.epochs = 1;
  tc.learning_rate = 1e-3f;
  const double untrained = dataset_loss(s.lm, s.task.task, s.task.train, s.prefix);
  const TrainResult res = train_standard_prefix(s.lm, s.task.task, s.task.train, s.task.dev, tc, s.prefix);
  CHECK(res.curve[0].train_loss <= untrained);
}

TEST_CASE("PGD perturbations raise the loss on at least 95% of batches") {
  fixture::Setup s(45, 400);
  TrainConfig tc;
  tc.epochs = 2;
  tc.learning_rate = 1e-2f;
  const PrefixParameters trained =
      train_standard_prefix(s.lm, s.task.task, s.task.train, s.task.dev, tc, s.prefix).prefix;
  AdvConfig adv;
  adv.iterations = 3;
  adv.step_size = 2.0f;
  int raised = 0;
  for (int b = 0; b < 100; ++b) {
    std::vector<SampleFrame> batch;
    for (int k = 0; k < 4; ++k) batch.push_back(s.task.task.frame(s.cfg, s.task.test[static_cast<std::size_t>(b * 4 + k)]));
    const std::vector<Tensor> r = pgd_inner_max(s.lm, batch, trained, adv);
    raised += label_loss(s.lm, batch, trained, &r) >= label_loss(s.lm, batch, trained) ? 1 : 0;
  }
  CHECK(raised >= 95);
}

TEST_CASE("an adversarial epoch costs more wall-clock than a standard one") {
  fixture::Setup s(46);
  TrainConfig tc;
  tc.epochs = 1;
  const TrainResult standard = train_standard_prefix(s.lm, s.task.task, s.task.train, s.task.dev, tc, s.prefix);
  const TrainResult adversarial =
      train_adversarial_prefix(s.lm, s.task.task, s.task.train, s.task.dev, tc, AdvConfig{}, s.prefix);
  CHECK(adversarial.curve[0].wall_clock_s > standard.curve[0].wall_clock_s);
}

TEST_CASE("word-substitution augmentation changes at least 80% of attacked samples") {
  fixture::Setup s(47);
  CandidateTable table = s.task.synonyms;
  AugmentStats stats;
  const Dataset out = augment_with_attack(
      s.task.train,
      [&](const Example& ex) -> std::optional<Example> {
        return greedy_word_substitution(s.lm, s.prefix, s.task.task, ex, table).perturbed;
      },
      &stats);
  std::size_t changed = 0, attacked = 0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i].is_clean()) continue;
    ++attacked;
    changed += out[i].context != out[i - 1].context ? 1 : 0;
  }
  REQUIRE(attacked > 0);
  CHECK(static_cast<double>(changed) / static_cast<double>(attacked) >= 0.8);
}
