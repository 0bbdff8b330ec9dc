#include "rpt/optim.hpp"

#include <cmath>

namespace rpt {

AdamW::AdamW(std::vector<Tensor*> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (Tensor* p : params_) {
    m_.push_back(Tensor::zeros(p->shape()));
    v_.push_back(Tensor::zeros(p->shape()));
  }
}

void AdamW::step(const std::vector<const Tensor*>& grads) {
  if (grads.size() != params_.size()) throw ContractError("AdamW::step: gradient count mismatch");
  ++t_;
  const double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), t_);
  const double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), t_);
  const float step = static_cast<float>(cfg_.lr / bc1);
  const float inv_bc2 = static_cast<float>(1.0 / bc2);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& p = *params_[k];
    const Tensor& g = *grads[k];
    if (g.shape() != p.shape()) {
      throw DimensionError("AdamW::step: gradient " + shape_str(g.shape()) + " vs parameter " + shape_str(p.shape()));
    }
    if (cfg_.lr == 0.0f) continue;
    auto pd = p.data();
    auto gd = g.data();
    auto md = m_[k].data();
    auto vd = v_[k].data();
    for (std::size_t i = 0; i < pd.size(); ++i) {
      md[i] = cfg_.beta1 * md[i] + (1.0f - cfg_.beta1) * gd[i];
      vd[i] = cfg_.beta2 * vd[i] + (1.0f - cfg_.beta2) * gd[i] * gd[i];
      if (cfg_.weight_decay != 0.0f) pd[i] -= cfg_.lr * cfg_.weight_decay * pd[i];
      pd[i] -= step * md[i] / (std::sqrt(vd[i] * inv_bc2) + cfg_.eps);
    }
  }
}

}  // namespace rpt
