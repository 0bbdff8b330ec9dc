#include <algorithm>
#include <random>

#include "doctest.h"
#include "rpt/defense.hpp"
#include "support/checks.hpp"
#include "support/fixture.hpp"
#include "support/reference.hpp"

using namespace rpt;

namespace {

std::vector<SampleFrame> frames_of(const fixture::Setup& s, const Dataset& d, std::size_t n) {
  std::vector<SampleFrame> out;
  for (std::size_t i = 0; i < n && i < d.size(); ++i) out.push_back(s.task.task.frame(s.cfg, d[i]));
  return out;
}

ProjectionSet all_layer_projections(const fixture::Setup& s, std::optional<int> rank) {
  std::vector<int> layers;
  for (int l = 0; l < s.cfg.num_layers; ++l) layers.push_back(l);
  const ActivationSet acts =
      collect_correct_activations(s.lm, s.prefix, s.task.task, s.task.train, layers, 2);
  return build_projections(acts, rank);
}

}  // namespace

TEST_CASE("PCA projector is idempotent, symmetric and matches an eigendecomposition") {
  const checks::ProjectorReport r = checks::projector_checks(5, 60, 16, 5, 200);
  CHECK(r.max_idempotence < 1e-5);
  CHECK(r.max_symmetry < 1e-6);
  CHECK(r.max_oracle_diff < 1e-4);
  CHECK(r.trials == 200);
  CHECK(r.optimality_violations == 0);
}

TEST_CASE("full rank gives the identity exactly") {
  std::mt19937_64 rng(6);
  const Tensor h = ref::to_tensor(ref::random(20, 8, rng));
  const Tensor q = pca_projection(center_columns(h).matrix, 8);
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) CHECK(q.at(i, j) == (i == j ? 1.0f : 0.0f));
}

TEST_CASE("rank outside [1, d] is a config error and rank above the row count a RankError") {
  std::mt19937_64 rng(7);
  const Tensor c = center_columns(ref::to_tensor(ref::random(10, 6, rng))).matrix;
  CHECK_THROWS_AS(pca_projection(c, 0), ConfigError);
  CHECK_THROWS_AS(pca_projection(c, 7), ConfigError);
  const Tensor short_c = center_columns(ref::to_tensor(ref::random(3, 6, rng))).matrix;
  CHECK_THROWS_AS(pca_projection(short_c, 5), RankError);
  const int p = default_rank(c);
  CHECK(p >= 1);
  CHECK(p <= 5);
}

TEST_CASE("centering subtracts the column mean") {
  const Tensor h = Tensor::matrix(2, 2, {1.0f, 4.0f, 3.0f, 8.0f});
  const Centered c = center_columns(h);
  CHECK(c.mean.at(0, 0) == 2.0f);
  CHECK(c.mean.at(0, 1) == 6.0f);
  CHECK(c.matrix.at(0, 0) == -1.0f);
  CHECK(c.matrix.at(1, 1) == 2.0f);
}

TEST_CASE("manifold loss gradients match finite differences of a double-precision model") {
  for (const auto& c : checks::manifold_gradient_cases(12)) {
    INFO(c.name << " rel error " << c.rel_error);
    CHECK(c.pass());
  }
}

TEST_CASE("value-level manifold loss matches the reference residual") {
  std::mt19937_64 rng(8);
  const int d = 6;
  std::vector<Tensor> batch;
  std::vector<ref::Mat> rb, rq, rm;
  ProjectionSet proj;
  for (int l = 0; l < 2; ++l) {
    const ref::Mat fit = ref::random(12, d, rng);
    const Centered c = center_columns(ref::to_tensor(fit));
    proj.layers.push_back(l);
    proj.projectors.push_back(pca_projection(c.matrix, 3));
    proj.means.push_back(c.mean);
    proj.ranks.push_back(3);
    rq.push_back(ref::from(proj.projectors.back()));
    rm.push_back(ref::from(c.mean));
    rb.push_back(ref::random(4, d, rng));
    batch.push_back(ref::to_tensor(rb.back()));
  }
  const std::vector<int> layers{0, 1};
  const Normalization modes[] = {Normalization::dynamic, Normalization::fixed, Normalization::none};
  for (int m = 0; m < 3; ++m) {
    CHECK(manifold_loss(batch, layers, proj, modes[m]) ==
          doctest::Approx(ref::manifold_loss(rb, rq, rm, m)).epsilon(1e-5));
  }
}

TEST_CASE("full-rank projectors leave predictions and P' unchanged") {
  fixture::Setup s(50, 24);
  const ProjectionSet proj = all_layer_projections(s, s.cfg.hidden_dim);
  DefenseConfig dc;
  dc.num_layers = s.cfg.num_layers;
  dc.learning_rate = 0.1f;
  dc.batch = BatchMode::fixed_size(4);
  const DefendedEval ev = defend_dataset(s.lm, s.task.task, s.task.test, s.prefix, proj, dc);
  for (std::size_t i = 0; i < s.task.test.size(); ++i) {
    const Token base = s.lm.predict_label(s.task.task.frame(s.cfg, s.task.test[i]), s.prefix, s.task.task.labels);
    CHECK(ev.predictions[i] == base);
  }
  for (const auto& r : ev.robust) CHECK(r.is_zero());
}

TEST_CASE("zero defended layers reproduce the undefended predictions") {
  fixture::Setup s(51, 24);
  const ProjectionSet proj = all_layer_projections(s, std::nullopt);
  DefenseConfig dc;
  dc.num_layers = 0;
  dc.learning_rate = 0.1f;
  const DefendedEval ev = defend_dataset(s.lm, s.task.task, s.task.test, s.prefix, proj, dc);
  for (std::size_t i = 0; i < s.task.test.size(); ++i) {
    const Token base = s.lm.predict_label(s.task.task.frame(s.cfg, s.task.test[i]), s.prefix, s.task.task.labels);
    CHECK(ev.predictions[i] == base);
  }
}

TEST_CASE("tuning lowers the manifold residual and only moves trainable slices") {
  fixture::Setup s(52);
  const ProjectionSet proj = all_layer_projections(s, 2);
  DefenseConfig dc;
  dc.num_layers = 2;
  dc.layer_end = LayerEnd::top;
  dc.learning_rate = 0.05f;
  dc.steps = 10;
  dc.batch = BatchMode::fixed_size(4);
  const auto frames = frames_of(s, s.task.test, 4);
  const TuneOutcome t = tune_robust_prefix(s.lm, frames, s.prefix, s.task.task.labels, proj, dc);
  CHECK_FALSE(t.fell_back);
  CHECK(t.final_loss < t.initial_loss);
  CHECK(t.robust.trainable_layers == std::vector<int>{1, 2});
  const int d = s.cfg.hidden_dim;
  for (int r = 0; r < s.cfg.prefix_len; ++r)
    for (int c = 0; c < d; ++c) CHECK(t.robust.offset.at(r, c) == 0.0f);
}

TEST_CASE("layer sets count from the chosen end") {
  const ModelConfig cfg;
  DefenseConfig dc;
  dc.num_layers = 3;
  CHECK(dc.layers(cfg) == std::vector<int>{0, 1, 2});
  dc.layer_end = LayerEnd::top;
  CHECK(dc.layers(cfg) == std::vector<int>{1, 2, 3});
  dc.num_layers = 0;
  CHECK(dc.layers(cfg).empty());
}

TEST_CASE("dynamic normalization with single-sample batches is a configuration error") {
  DefenseConfig dc;
  dc.learning_rate = 0.1f;
  dc.normalization = Normalization::dynamic;
  dc.batch = BatchMode::fixed_size(1);
  CHECK_THROWS_AS(dc.validate(ModelConfig{}), ConfigError);
  dc.batch = BatchMode::fixed_size(2);
  CHECK_NOTHROW(dc.validate(ModelConfig{}));
  dc.learning_rate.reset();
  CHECK_THROWS_AS(dc.validate(ModelConfig{}), ConfigError);
}

TEST_CASE("batch partitioning covers every frame once in order") {
  fixture::Setup s(53);
  const auto frames = frames_of(s, s.task.test, 11);
  const auto fixed = partition_batches(frames, BatchMode::fixed_size(4));
  REQUIRE(fixed.size() == 3);
  CHECK(fixed[2].size() == 3);
  std::vector<std::size_t> flat;
  for (const auto& b : fixed) flat.insert(flat.end(), b.begin(), b.end());
  for (std::size_t i = 0; i < flat.size(); ++i) CHECK(flat[i] == i);

  const int budget = 40;
  const auto adaptive = partition_batches(frames, BatchMode::adaptive(budget));
  std::size_t total = 0;
  for (const auto& b : adaptive) {
    int longest = 0;
    for (std::size_t i : b) longest = std::max(longest, frames[i].stream_len());
    if (b.size() > 1) CHECK(static_cast<int>(b.size()) * longest <= budget);
    total += b.size();
  }
  CHECK(total == frames.size());

  const auto merged = partition_batches(frames, BatchMode::fixed_size(4), 4);
  for (const auto& b : merged) CHECK(b.size() >= 4);
}

TEST_CASE("too few correct samples raise RankError") {
  fixture::Setup s(54);
  const std::vector<int> layers{0};
  CHECK_THROWS_AS(collect_correct_activations(s.lm, s.prefix, s.task.task, s.task.dev, layers, 1000), RankError);
}

TEST_CASE("collected rows equal per-sample forward activations") {
  fixture::Setup s(55);
  const std::vector<int> layers{0, 2};
  const ActivationSet acts = collect_correct_activations(s.lm, s.prefix, s.task.task, s.task.train, layers, 1);
  const ref::Model m(s.cfg, s.lm.params());
  for (std::size_t r = 0; r < acts.sample_ids.size() && r < 5; ++r) {
    const SampleFrame f = s.task.task.frame(s.cfg, s.task.train[acts.sample_ids[r]]);
    const ref::Trace tr = ref::forward(m, ref::from(s.prefix.expansion), f.input());
    for (std::size_t k = 0; k < layers.size(); ++k)
      for (int c = 0; c < s.cfg.hidden_dim; ++c) {
        CHECK(acts.matrices[k].at(static_cast<int>(r), c) ==
              doctest::Approx(tr.hidden[static_cast<std::size_t>(layers[k]) + 1](f.output_position(), c)).epsilon(1e-4));
      }
  }
}

TEST_CASE("tuning does not raise the residual on at least 95% of batches") {
  fixture::Setup s(56, 200);
  std::vector<int> layers{0, 1, 2};
  const ProjectionSet proj = build_projections(
      collect_correct_activations(s.lm, s.prefix, s.task.task, s.task.train, layers, 2), std::nullopt);
  DefenseConfig dc;
  dc.num_layers = 3;
  dc.learning_rate = 0.03f;
  dc.steps = 5;
  dc.batch = BatchMode::fixed_size(2);
  const DefendedEval ev = defend_dataset(s.lm, s.task.task, s.task.test, s.prefix, proj, dc);
  REQUIRE(ev.batches == 100);
  CHECK(ev.improved_batches - ev.fallbacks >= 95);
}
