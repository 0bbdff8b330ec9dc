#pragma once

#include <vector>

#include "rpt/tensor.hpp"

namespace rpt {

struct AdamWConfig {
  float lr = 5e-5f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.0f;
};

/// Adam with decoupled weight decay over a fixed list of parameter tensors.
class AdamW {
 public:
  AdamW(std::vector<Tensor*> params, AdamWConfig cfg);

  /// One update; grads[i] must match params[i] in shape.
  void step(const std::vector<const Tensor*>& grads);
  int steps_taken() const { return t_; }
  AdamWConfig& config() { return cfg_; }

 private:
  std::vector<Tensor*> params_;
  std::vector<Tensor> m_, v_;
  AdamWConfig cfg_;
  int t_ = 0;
};

}  // namespace rpt
