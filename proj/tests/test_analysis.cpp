#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "rpt/analysis.hpp"
#include "support/fixture.hpp"
#include "support/reference.hpp"

using namespace rpt;

namespace {

// Decision function recomputed step by step from the reference forward.
double reference_decision(const ref::Model& m, const ref::Mat& prefix, const SampleFrame& f,
                          const std::vector<Token>& labels, const ref::AttentionNudge& nudge = {}) {
  const TokenSeq stream = f.input();
  const ref::Trace tr = ref::forward(m, prefix, stream, nudge);
  const ref::Mat p = ref::softmax_rows(tr.logits);
  const int o = f.output_position();
  double d = 0.0;
  for (int k = 0; k < o; ++k) d += p(k, stream[static_cast<std::size_t>(k) + 1]);
  ref::Mat z(1, static_cast<int>(labels.size()));
  for (std::size_t i = 0; i < labels.size(); ++i) z(0, static_cast<int>(i)) = tr.logits(o, labels[i]);
  const ref::Mat lp = ref::softmax_rows(z);
  return d + *std::max_element(lp.v.begin(), lp.v.end());
}

Tensor lower(const std::vector<std::vector<float>>& rows) {
  const int n = static_cast<int>(rows.size());
  Tensor t({n, n});
  for (int i = 0; i < n; ++i)
    for (std::size_t j = 0; j < rows[static_cast<std::size_t>(i)].size(); ++j)
      t.at(i, static_cast<int>(j)) = rows[static_cast<std::size_t>(i)][j];
  return t;
}

}  // namespace

TEST_CASE("decision function matches a step-by-step reference") {
  fixture::Setup s(70);
  const ref::Model m(s.cfg, s.lm.params());
  for (int i = 0; i < 3; ++i) {
    const SampleFrame f = s.task.task.frame(s.cfg, s.task.test[static_cast<std::size_t>(i)]);
    CHECK(decision_function(s.lm, s.prefix, f, s.task.task.labels) ==
          doctest::Approx(reference_decision(m, ref::from(s.prefix.expansion), f, s.task.task.labels)).epsilon(1e-4));
  }
}

TEST_CASE("raw importance equals attention times finite-difference sensitivity") {
  fixture::Setup s(71);
  const ref::Model m(s.cfg, s.lm.params());
  const ref::Mat prefix = ref::from(s.prefix.expansion);
  const Example& ex = s.task.test[0];
  const SampleFrame f = frame_sample(s.cfg, TokenSeq(ex.context.begin(), ex.context.begin() + 5), s.task.task.question,
                                     ex.label);
  const std::vector<Token>& labels = s.task.task.labels;
  const ImportanceMatrix im = importance_matrix(s.lm, s.prefix, f, labels, nullptr, false);
  const ref::Trace base = ref::forward(m, prefix, f.input());
  const int t = f.stream_len();
  const int p = s.cfg.prefix_len;
  const double eps = 1e-6;
  std::vector<double> got, want;
  for (int i = 0; i < t; ++i) {
    for (int j = 0; j <= i; ++j) {
      double acc = 0.0;
      for (int h = 0; h < s.cfg.num_heads; ++h) {
        const double up = reference_decision(m, prefix, f, labels, {h, i, p + j, eps});
        const double down = reference_decision(m, prefix, f, labels, {h, i, p + j, -eps});
        acc += base.attention[static_cast<std::size_t>(h)](i, p + j) * (up - down) / (2.0 * eps);
      }
      want.push_back(acc / s.cfg.num_heads);
      got.push_back(im.raw.at(i, j));
    }
  }
  CHECK(ref::relative_error(got, want) < 1e-3);
}

TEST_CASE("dropping [CLS] removes the leading row and column") {
  fixture::Setup s(72);
  const SampleFrame f = s.task.task.frame(s.cfg, s.task.test[1]);
  const ImportanceMatrix full = importance_matrix(s.lm, s.prefix, f, s.task.task.labels, nullptr, false);
  const ImportanceMatrix dropped = importance_matrix(s.lm, s.prefix, f, s.task.task.labels);
  REQUIRE(dropped.raw.rows() == full.raw.rows() - 1);
  for (int i = 0; i < dropped.raw.rows(); ++i)
    for (int j = 0; j <= i; ++j) CHECK(dropped.raw.at(i, j) == full.raw.at(i + 1, j + 1));
}

TEST_CASE("row normalization subtracts the visible minimum and sums to one") {
  const Tensor n = normalize_importance(lower({{3.0f}, {1.0f, 3.0f}, {2.0f, 2.0f, 2.0f}, {-1.0f, 1.0f, 0.0f, 2.0f}}));
  CHECK(n.at(0, 0) == 1.0f);
  CHECK(n.at(1, 0) == 0.0f);
  CHECK(n.at(1, 1) == 1.0f);
  for (int j = 0; j < 3; ++j) CHECK(n.at(2, j) == doctest::Approx(1.0 / 3.0));
  CHECK(n.at(3, 0) == 0.0f);
  CHECK(n.at(3, 1) == doctest::Approx(2.0 / 6.0));
  CHECK(n.at(3, 3) == doctest::Approx(3.0 / 6.0));
}

TEST_CASE("ranking and distraction on a hand-worked matrix") {
  const Tensor imp = lower({{1.0f}, {0.2f, 0.8f}, {0.5f, 0.1f, 0.4f}, {0.1f, 0.3f, 0.4f, 0.2f}});
  const RankingMatrix k = ranking_matrix(imp);
  CHECK(k[2] == std::vector<int>{3, 1, 2});
  CHECK(k[3] == std::vector<int>{1, 3, 4, 2});
  // Steps 2 and 3: max rank of the two leading columns is 3 of 3, then 3 of 4.
  CHECK(*degree_of_distraction(k, 2) == doctest::Approx(87.5));
  CHECK_FALSE(degree_of_distraction(k, 4).has_value());
}

TEST_CASE("recognition counts steps whose top token survives the shift") {
  const Tensor clean = lower({{1.0f}, {0.3f, 0.7f}});
  const Tensor hit_miss = lower({{1.0f}, {0.4f, 0.6f}, {0.1f, 0.5f, 0.4f}});
  const Tensor hit_hit = lower({{1.0f}, {0.4f, 0.6f}, {0.1f, 0.2f, 0.7f}});
  CHECK(recognition_of_essential(clean, hit_miss, 1) == doctest::Approx(0.5));
  CHECK(recognition_of_essential(clean, hit_hit, 1) == doctest::Approx(1.0));
  CHECK_THROWS_AS(recognition_of_essential(clean, clean, 1), DimensionError);
}

TEST_CASE("bootstrap p-values are deterministic and track effect size") {
  const std::vector<double> a{1.0, 2.0, 3.0, 4.0, 5.0, 6.0};
  const std::vector<double> b{1.5, 2.5, 3.5, 4.5, 5.5, 2.0};
  const std::vector<double> far{20.0, 21.0, 22.0, 23.0, 24.0, 25.0};
  const double p_same = bootstrap_test(a, a, 2000, 1);
  CHECK(p_same == doctest::Approx(1.0));
  const double p_near = bootstrap_test(a, b, 2000, 1);
  CHECK(p_near > 0.3);
  const double p_far = bootstrap_test(a, far, 2000, 1);
  CHECK(p_far == doctest::Approx(1.0 / 2001.0));
  CHECK(bootstrap_test(a, b, 2000, 1) == p_near);
  CHECK_THROWS_AS(bootstrap_test(a, b, 50, 1), ConfigError);
}

TEST_CASE("random rankings and metrics match direct recomputation") {
  std::mt19937_64 rng(73);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 6 + trial % 5, trig = 1 + trial % 3;
    Tensor clean({n, n}), attacked({n + trig, n + trig});
    for (int i = 0; i < n; ++i)
      for (int j = 0; j <= i; ++j) clean.at(i, j) = u(rng);
    for (int i = 0; i < n + trig; ++i)
      for (int j = 0; j <= i; ++j) attacked.at(i, j) = u(rng);

    // Rank by counting strictly smaller entries plus earlier equal ones.
    const RankingMatrix k = ranking_matrix(attacked);
    double dod = 0.0;
    for (int i = 0; i < n + trig; ++i) {
      for (int j = 0; j <= i; ++j) {
        int rank = 1;
        for (int m = 0; m <= i; ++m) {
          const float a = attacked.at(i, m), b = attacked.at(i, j);
          if (a < b || (a == b && m < j)) ++rank;
        }
        CHECK(k[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] == rank);
      }
      if (i >= trig) {
        int top = 0;
        for (int j = 0; j < trig; ++j) top = std::max(top, k[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]);
        dod += 100.0 * top / (i + 1);
      }
    }
    CHECK(*degree_of_distraction(k, trig) == doctest::Approx(dod / n));

    int hits = 0;
    for (int i = 0; i < n; ++i) {
      int a = 0, b = 0;
      for (int j = 0; j <= i; ++j)
        if (clean.at(i, j) > clean.at(i, a)) a = j;
      for (int j = 0; j <= i + trig; ++j)
        if (attacked.at(i + trig, j) > attacked.at(i + trig, b)) b = j;
      hits += a + trig == b ? 1 : 0;
    }
    CHECK(recognition_of_essential(clean, attacked, trig) == doctest::Approx(static_cast<double>(hits) / n));
  }
}

TEST_CASE("bootstrap separates two tight, distant groups") {
  std::mt19937_64 rng(74);
  std::normal_distribution<double> a(0.0, 0.01), b(10.0, 0.01);
  std::vector<double> xa(100), xb(100);
  for (auto& v : xa) v = a(rng);
  for (auto& v : xb) v = b(rng);
  CHECK(bootstrap_test(xa, xb, 10000, 2) < 0.001);
}
