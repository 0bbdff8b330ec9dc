#pragma once

#include <cstdint>
#include <vector>

#include "rpt/model.hpp"

namespace rpt {

struct PretrainConfig {
  int epochs = 3;
  int batch_size = 16;
  float learning_rate = 2e-3f;
  float weight_decay = 0.01f;
  std::uint64_t seed = 0;
};

struct PretrainResult {
  LMParameters params;
  std::vector<double> epoch_loss;  // mean next-token loss per epoch
};

/// Next-token language-model training of the bare LM (no prefix) on `corpus`.
/// Each document is a full token stream.
PretrainResult pretrain_lm(const ModelConfig& cfg, const std::vector<TokenSeq>& corpus, const PretrainConfig& pc);

/// Mean next-token loss of the bare LM over `corpus`.
double lm_loss(const ModelConfig& cfg, const LMParameters& lm, const std::vector<TokenSeq>& corpus);

}  // namespace rpt
