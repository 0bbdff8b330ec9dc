#include <algorithm>
#include <set>

#include "doctest.h"
#include "rpt/synth.hpp"

using namespace rpt;

namespace {

// Independent restatement of the gold rule: count signal and synonym hits per class.
int count_rule(const VocabLayout& layout, const TokenSeq& ctx) {
  std::vector<int> votes(layout.signals.size(), 0);
  for (Token t : ctx) {
    for (std::size_t c = 0; c < layout.signals.size(); ++c) {
      for (std::size_t k = 0; k < layout.signals[c].size(); ++k) {
        if (t == layout.signals[c][k] || t == layout.synonyms[c][k]) ++votes[c];
      }
    }
  }
  int best = 0;
  for (std::size_t c = 1; c < votes.size(); ++c)
    if (votes[c] > votes[best]) best = static_cast<int>(c);
  return best;
}

SyntheticTaskSpec small_spec() {
  SyntheticTaskSpec s;
  s.train_count = 120;
  s.dev_count = 40;
  s.test_count = 60;
  s.pretrain_count = 50;
  return s;
}

}  // namespace

TEST_CASE("labels follow the signal-count rule on every split") {
  const SyntheticTask t = synth_dataset(small_spec(), 3);
  for (const Dataset* d : {&t.train, &t.dev, &t.test}) {
    for (const auto& ex : *d) {
      CHECK(ex.label == t.layout.labels[count_rule(t.layout, ex.context)]);
      CHECK(ex.is_clean());
    }
  }
}

TEST_CASE("without filler a single signal token decides the label") {
  SyntheticTaskSpec s = small_spec();
  s.noise_ratio = 0.0;
  s.cue_rate = 0.0;
  const SyntheticTask t = synth_dataset(s, 4);
  const VocabLayout& l = t.layout;
  for (std::size_t c = 0; c < l.signals.size(); ++c) {
    CHECK(majority_class(l, {l.signals[c][0]}) == static_cast<int>(c));
    CHECK(majority_class(l, {l.filler[0], l.signals[c][1], l.filler[1]}) == static_cast<int>(c));
  }
  for (const auto& ex : t.test) {
    for (Token tok : ex.context) CHECK(std::find(l.filler.begin(), l.filler.end(), tok) == l.filler.end());
  }
}

TEST_CASE("split sizes and context lengths follow the spec") {
  const SyntheticTaskSpec s = small_spec();
  const SyntheticTask t = synth_dataset(s, 5);
  CHECK(t.train.size() == 120);
  CHECK(t.dev.size() == 40);
  CHECK(t.test.size() == 60);
  CHECK(t.pretrain_corpus.size() == 50);
  for (const auto& ex : t.train) {
    CHECK(static_cast<int>(ex.context.size()) >= s.min_context);
    CHECK(static_cast<int>(ex.context.size()) <= s.max_context);
  }
}

TEST_CASE("generation is deterministic in the seed") {
  const SyntheticTask a = synth_dataset(small_spec(), 6);
  const SyntheticTask b = synth_dataset(small_spec(), 6);
  const SyntheticTask c = synth_dataset(small_spec(), 7);
  CHECK(dataset_checksum(a.train) == dataset_checksum(b.train));
  CHECK(dataset_checksum(a.test) == dataset_checksum(b.test));
  CHECK(dataset_checksum(a.train) != dataset_checksum(c.train));
}

TEST_CASE("vocabulary roles are disjoint") {
  const VocabLayout l = make_layout(small_spec());
  std::set<Token> seen;
  auto claim = [&](Token t) {
    if (t < 0) return;
    CHECK(seen.insert(t).second);
    CHECK(t >= vocab::kFirstLabel);
  };
  for (Token t : l.labels) claim(t);
  for (Token t : l.question) claim(t);
  for (const auto& v : l.signals) for (Token t : v) claim(t);
  for (const auto& v : l.synonyms) for (Token t : v) claim(t);
  for (const auto& v : l.cues) for (Token t : v) claim(t);
  for (Token t : l.variants) claim(t);
  for (Token t : l.filler) claim(t);
  CHECK(*seen.rbegin() < small_spec().vocab_size);
}

TEST_CASE("synonym and confusion tables stay within their roles") {
  const SyntheticTask t = synth_dataset(small_spec(), 8);
  for (const auto& [tok, subs] : t.synonyms) {
    const int cls = t.layout.signal_class(tok);
    REQUIRE_FALSE(subs.empty());
    CHECK(t.layout.signal_class(subs.front()) == cls);
    for (Token s : subs) CHECK((t.layout.signal_class(s) == cls || t.layout.cue_class(s) >= 0));
  }
  for (const auto& [tok, subs] : t.confusion) {
    for (Token s : subs) CHECK(std::find(t.layout.variants.begin(), t.layout.variants.end(), s) != t.layout.variants.end());
  }
}

TEST_CASE("invalid synthetic specs are rejected") {
  SyntheticTaskSpec s = small_spec();
  s.vocab_size = 20;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = small_spec();
  s.min_context = 10;
  s.max_context = 5;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = small_spec();
  s.noise_ratio = 1.5;
  CHECK_THROWS_AS(s.validate(), ConfigError);
}
