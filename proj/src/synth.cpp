#include "rpt/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

namespace rpt {

namespace {

constexpr int kLabelSlots = 4;
constexpr int kQuestionLen = 4;

template <typename T>
const T& pick(const std::vector<T>& v, Rng& rng) {
  std::uniform_int_distribution<std::size_t> d(0, v.size() - 1);
  return v[d(rng)];
}

bool chance(double p, Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p; }

struct Generated {
  TokenSeq context;
  int label;
};

Generated generate_context(const SyntheticTaskSpec& spec, const VocabLayout& layout, Rng& rng) {
  const int classes = spec.num_classes;
  const int gold = std::uniform_int_distribution<int>(0, classes - 1)(rng);
  const int n = std::uniform_int_distribution<int>(spec.min_context, spec.max_context)(rng);
  const int slots = std::clamp(static_cast<int>(std::lround((1.0 - spec.noise_ratio) * n)), 1, n);
  const int k_gold = std::uniform_int_distribution<int>((slots + 2) / 2, slots)(rng);

  std::vector<int> slot_class(static_cast<std::size_t>(slots), gold);
  for (int s = k_gold; s < slots; ++s) {
    int other = std::uniform_int_distribution<int>(0, classes - 2)(rng);
    if (other >= gold) ++other;
    slot_class[static_cast<std::size_t>(s)] = other;
  }
  std::vector<int> positions(static_cast<std::size_t>(n));
  std::iota(positions.begin(), positions.end(), 0);
  std::shuffle(positions.begin(), positions.end(), rng);

  TokenSeq ctx(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) ctx[static_cast<std::size_t>(i)] = pick(layout.filler, rng);
  for (int s = 0; s < slots; ++s) {
    const int c = slot_class[static_cast<std::size_t>(s)];
    const auto& sig = layout.signals[static_cast<std::size_t>(c)];
    const std::size_t which = std::uniform_int_distribution<std::size_t>(0, sig.size() - 1)(rng);
    Token t = sig[which];
    const Token syn = layout.synonyms[static_cast<std::size_t>(c)][which];
    if (syn >= 0 && chance(spec.synonym_rate, rng)) t = syn;
    ctx[static_cast<std::size_t>(positions[static_cast<std::size_t>(s)])] = t;
  }
  if (slots < n && spec.cue_per_class > 0 && chance(spec.cue_rate, rng)) {
    int c = gold;
    if (classes > 1 && !chance(spec.cue_agreement, rng)) {
      c = std::uniform_int_distribution<int>(0, classes - 2)(rng);
      if (c >= gold) ++c;
    }
    const int count = std::min(n - slots, std::uniform_int_distribution<int>(1, spec.max_cues)(rng));
    for (int k = 0; k < count; ++k) {
      const int pos = positions[static_cast<std::size_t>(slots + k)];
      ctx[static_cast<std::size_t>(pos)] = pick(layout.cues[static_cast<std::size_t>(c)], rng);
    }
  }
  return {std::move(ctx), gold};
}

}  // namespace

void SyntheticTaskSpec::validate() const {
  if (num_classes < 2 || num_classes > kLabelSlots) throw ConfigError("num_classes must be in [2, 4]");
  if (signal_per_class < 1) throw ConfigError("signal_per_class must be >= 1");
  if (cue_per_class < 0) throw ConfigError("cue_per_class must be >= 0");
  if (noise_ratio < 0.0 || noise_ratio >= 1.0) throw ConfigError("noise_ratio must be in [0, 1)");
  if (min_context < 1 || max_context < min_context) throw ConfigError("context length range is empty");
  if (train_count < 1 || dev_count < 1 || test_count < 1) throw ConfigError("sample counts must be >= 1");
  if (pretrain_count < 0) throw ConfigError("pretrain_count must be >= 0");
  if (max_cues < 1) throw ConfigError("max_cues must be >= 1");
  for (double p : {synonym_density, confusion_density, synonym_rate, cue_rate, cue_agreement, pretrain_label_rate}) {
    if (p < 0.0 || p > 1.0) throw ConfigError("densities and rates must lie in [0, 1]");
  }
  const int content = num_classes * (2 * signal_per_class + cue_per_class);
  const int needed = vocab::kFirstLabel + kLabelSlots + kQuestionLen + 2 * content + 8;
  if (vocab_size < needed) {
    throw ConfigError("vocab_size " + std::to_string(vocab_size) + " too small; need at least " +
                      std::to_string(needed));
  }
}

VocabLayout make_layout(const SyntheticTaskSpec& spec) {
  spec.validate();
  VocabLayout L;
  Token next = vocab::kFirstLabel;
  for (int c = 0; c < kLabelSlots; ++c, ++next) {
    if (c < spec.num_classes) L.labels.push_back(next);
  }
  for (int i = 0; i < kQuestionLen; ++i) L.question.push_back(next++);
  const int syn_count = static_cast<int>(std::lround(spec.synonym_density * spec.signal_per_class));
  std::vector<Token> content;
  for (int c = 0; c < spec.num_classes; ++c) {
    std::vector<Token> sig, syn, cue;
    for (int i = 0; i < spec.signal_per_class; ++i) sig.push_back(next++);
    for (int i = 0; i < spec.signal_per_class; ++i) syn.push_back(i < syn_count ? next++ : -1);
    for (int i = 0; i < spec.cue_per_class; ++i) cue.push_back(next++);
    for (auto* v : {&sig, &syn, &cue})
      for (Token t : *v)
        if (t >= 0) content.push_back(t);
    L.signals.push_back(std::move(sig));
    L.synonyms.push_back(std::move(syn));
    L.cues.push_back(std::move(cue));
  }
  const int variant_count = static_cast<int>(std::lround(spec.confusion_density * content.size()));
  for (int i = 0; i < variant_count; ++i) L.variants.push_back(next++);
  for (Token t = next; t < spec.vocab_size; ++t) L.filler.push_back(t);
  return L;
}

int VocabLayout::signal_class(Token t) const {
  for (std::size_t c = 0; c < signals.size(); ++c) {
    if (std::find(signals[c].begin(), signals[c].end(), t) != signals[c].end()) return static_cast<int>(c);
    if (std::find(synonyms[c].begin(), synonyms[c].end(), t) != synonyms[c].end()) return static_cast<int>(c);
  }
  return -1;
}

int VocabLayout::cue_class(Token t) const {
  for (std::size_t c = 0; c < cues.size(); ++c) {
    if (std::find(cues[c].begin(), cues[c].end(), t) != cues[c].end()) return static_cast<int>(c);
  }
  return -1;
}

bool VocabLayout::is_reserved(Token t) const {
  if (t < vocab::kFirstLabel) return true;
  if (std::find(labels.begin(), labels.end(), t) != labels.end()) return true;
  return std::find(question.begin(), question.end(), t) != question.end();
}

int majority_class(const VocabLayout& layout, const TokenSeq& context) {
  std::vector<int> counts(layout.signals.size(), 0);
  for (Token t : context) {
    const int c = layout.signal_class(t);
    if (c >= 0) ++counts[static_cast<std::size_t>(c)];
  }
  return static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

SyntheticTask synth_dataset(const SyntheticTaskSpec& spec, std::uint64_t seed) {
  SyntheticTask out;
  out.spec = spec;
  out.layout = make_layout(spec);
  const VocabLayout& L = out.layout;
  out.task.question = L.question;
  out.task.labels = L.labels;

  Rng rng(seed);
  auto make_split = [&](int count) {
    Dataset d;
    d.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
      Generated g = generate_context(spec, L, rng);
      d.push_back(Example{std::move(g.context), L.labels[static_cast<std::size_t>(g.label)]});
    }
    return d;
  };
  out.train = make_split(spec.train_count);
  out.dev = make_split(spec.dev_count);
  out.test = make_split(spec.test_count);

  for (int i = 0; i < spec.pretrain_count; ++i) {
    Generated g = generate_context(spec, L, rng);
    TokenSeq doc{vocab::kCls};
    doc.insert(doc.end(), g.context.begin(), g.context.end());
    doc.insert(doc.end(), L.question.begin(), L.question.end());
    doc.push_back(vocab::kAns);
    const std::size_t c = static_cast<std::size_t>(g.label);
    doc.push_back(chance(spec.pretrain_label_rate, rng) ? L.labels[c] : pick(L.signals[c], rng));
    out.pretrain_corpus.push_back(std::move(doc));
  }

  // Synonym entries: a same-class alternate first, then a cue of another class.
  for (std::size_t c = 0; c < L.signals.size(); ++c) {
    for (std::size_t i = 0; i < L.signals[c].size(); ++i) {
      const Token s = L.signals[c][i];
      const Token syn = L.synonyms[c][i];
      if (syn < 0) continue;
      std::vector<Token> cands{syn};
      const std::size_t other = (c + 1) % L.signals.size();
      if (!L.cues[other].empty()) cands.push_back(L.cues[other][i % L.cues[other].size()]);
      out.synonyms[s] = cands;
      out.synonyms[syn] = {s};
    }
  }
  // Confusion variants, assigned to content tokens in vocabulary order.
  std::size_t v = 0;
  for (std::size_t c = 0; c < L.signals.size(); ++c) {
    for (const auto* set : {&L.signals[c], &L.synonyms[c], &L.cues[c]}) {
      for (Token t : *set) {
        if (t < 0 || v >= L.variants.size()) continue;
        out.confusion[t] = {L.variants[v++]};
      }
    }
  }
  return out;
}

std::uint64_t dataset_checksum(const Dataset& data) {
  std::vector<float> flat;
  for (const auto& ex : data) {
    flat.push_back(static_cast<float>(ex.label));
    flat.push_back(static_cast<float>(ex.context.size()));
    for (Token t : ex.context) flat.push_back(static_cast<float>(t));
  }
  return checksum(flat);
}

}  // namespace rpt
