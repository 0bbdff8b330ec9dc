#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rpt/model.hpp"

namespace rpt {

/// One token replacement applied by an attack, in context coordinates.
struct Edit {
  int position = 0;
  Token old_token = vocab::kPad;
  Token new_token = vocab::kPad;
  bool operator==(const Edit&) const = default;
};

/// A labelled context. Perturbed copies carry the attack kind and edits.
struct Example {
  TokenSeq context;
  Token label = vocab::kPad;
  std::string provenance = "clean";
  std::vector<Edit> edits;
  std::uint64_t seed = 0;

  bool is_clean() const { return provenance == "clean"; }
  bool operator==(const Example&) const = default;
};

using Dataset = std::vector<Example>;

/// Fixed task description and the label token set S_label.
struct Task {
  TokenSeq question;
  std::vector<Token> labels;

  SampleFrame frame(const ModelConfig& cfg, const Example& ex) const {
    return frame_sample(cfg, ex.context, question, ex.label);
  }
  bool operator==(const Task&) const = default;
};

}  // namespace rpt
