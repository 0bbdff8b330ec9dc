#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "rpt/data.hpp"
#include "rpt/model.hpp"

namespace rpt {

enum class AttackKind { word_substitution, viper, bug, uat };

std::string attack_name(AttackKind kind);
AttackKind parse_attack(const std::string& name);

using CandidateTable = std::map<Token, std::vector<Token>>;

struct AttackResult {
  Example original;
  Example perturbed;
  AttackKind kind = AttackKind::word_substitution;
  bool success = false;  // prediction on `perturbed` differs from gold
  std::vector<Edit> edits;
};

struct Trigger {
  TokenSeq tokens;
  Token target = vocab::kPad;  // gold label of the samples it was searched on
  double score = 0.0;          // error rate on those samples
  std::vector<double> history;  // best error rate after each epoch
};

/// Label-set softmax at the output position.
std::vector<float> label_probabilities(const MicroLM& model, const PrefixParameters& prefix, const SampleFrame& frame,
                                       std::span<const Token> labels);

/// Saliency-ordered greedy substitution from `table`; stops at the first flip.
AttackResult greedy_word_substitution(const MicroLM& model, const PrefixParameters& prefix, const Task& task,
                                      const Example& ex, const CandidateTable& table);

/// Replaces up to ceil(budget * |context|) tokens by their confusion variants.
/// Viper picks positions uniformly under `seed`; bug ranks them by embedding-gradient norm.
AttackResult token_noise_attack(const MicroLM& model, const PrefixParameters& prefix, const Task& task,
                                const Example& ex, const CandidateTable& confusion, double budget, AttackKind mode,
                                std::uint64_t seed = 0);

struct UatConfig {
  int trigger_len = 3;
  int beam = 5;
  int epochs = 5;
  int candidates = 10;   // first-order candidates per position
  int batch_size = 32;
  Token init_token = -1;  // neutral start token; -1 picks the lowest allowed token
  std::vector<Token> excluded;  // never used as trigger tokens
  std::uint64_t seed = 0;
};

/// Tokens a trigger may use: the vocabulary minus reserved ids, labels, question and `excluded`.
std::vector<Token> trigger_vocabulary(const ModelConfig& cfg, const Task& task, std::span<const Token> excluded);

/// Beam search over first-order candidates for one trigger maximizing error on `targets`.
Trigger uat_search(const MicroLM& model, const PrefixParameters& prefix, const Task& task, const Dataset& targets,
                   const UatConfig& cfg);

/// One trigger per gold class, each searched on that class's subset of `data`.
std::vector<Trigger> uat_search_per_class(const MicroLM& model, const PrefixParameters& prefix, const Task& task,
                                          const Dataset& data, const UatConfig& cfg);

/// Prepends the trigger to the context.
Example apply_trigger(const Example& ex, std::span<const Token> trigger);
SampleFrame apply_trigger(const ModelConfig& cfg, const SampleFrame& frame, std::span<const Token> trigger);

/// Triggered copy of every sample using the trigger searched for its gold class.
Dataset apply_class_triggers(const Dataset& data, const std::vector<Trigger>& triggers);

}  // namespace rpt
