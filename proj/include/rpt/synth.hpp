#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "rpt/data.hpp"

namespace rpt {

/// Desk-scale stand-in for a sentiment / topic benchmark.
///
/// Each class owns a set of signal tokens; the gold label of a context is the
/// class with the most signal occurrences (synonyms count for their class).
/// Filler tokens are neutral. Cue tokens co-occur with their class in the data
/// but do not enter the gold rule. Confusion variants are separate vocabulary
/// entries standing in for character-level perturbations of content tokens.
struct SyntheticTaskSpec {
  int vocab_size = 256;
  int num_classes = 2;
  int signal_per_class = 6;
  int cue_per_class = 4;
  /// Fraction of context positions holding filler tokens.
  double noise_ratio = 0.6;
  int min_context = 6;
  int max_context = 14;
  int train_count = 1200;
  int dev_count = 200;
  int test_count = 400;
  int pretrain_count = 4000;
  /// Fraction of signal tokens that have a synonym entry.
  double synonym_density = 1.0;
  /// Fraction of content tokens that have a confusion variant.
  double confusion_density = 1.0;
  /// Chance that a signal occurrence uses the synonym form.
  double synonym_rate = 0.1;
  /// Chance that a sample carries a cue token, and that the cue agrees with the gold class.
  double cue_rate = 0.9;
  double cue_agreement = 0.99;
  /// Cue tokens per cued sample are drawn uniformly from [1, max_cues].
  int max_cues = 3;
  /// Chance that a pretraining document ends in the label word rather than a signal word.
  double pretrain_label_rate = 0.5;

  void validate() const;
  bool operator==(const SyntheticTaskSpec&) const = default;
};

/// Vocabulary roles assigned by the generator.
struct VocabLayout {
  std::vector<Token> labels;
  TokenSeq question;
  std::vector<std::vector<Token>> signals;   // per class
  std::vector<std::vector<Token>> synonyms;  // per class, aligned with signals (-1 when absent)
  std::vector<std::vector<Token>> cues;      // per class
  std::vector<Token> variants;
  std::vector<Token> filler;

  /// Class whose signal or synonym set contains `t`, or -1.
  int signal_class(Token t) const;
  int cue_class(Token t) const;
  bool is_reserved(Token t) const;
};

VocabLayout make_layout(const SyntheticTaskSpec& spec);

using SynonymTable = std::map<Token, std::vector<Token>>;
using ConfusionTable = std::map<Token, std::vector<Token>>;

struct SyntheticTask {
  SyntheticTaskSpec spec;
  VocabLayout layout;
  Task task;
  Dataset train, dev, test;
  SynonymTable synonyms;
  ConfusionTable confusion;
  /// Language-model documents: full streams ending in a class word or label word.
  std::vector<TokenSeq> pretrain_corpus;
};

SyntheticTask synth_dataset(const SyntheticTaskSpec& spec, std::uint64_t seed);

/// Gold rule: class with the most signal occurrences; ties go to the lowest class.
int majority_class(const VocabLayout& layout, const TokenSeq& context);

std::uint64_t dataset_checksum(const Dataset& data);

}  // namespace rpt
