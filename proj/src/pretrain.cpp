#include "rpt/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "rpt/ops.hpp"
#include "rpt/optim.hpp"

namespace rpt {

namespace {

// Sum of next-token losses for one document, and the number of predicted tokens.
Var document_loss(const ModelConfig& cfg, const LMBinding& lm, const TokenSeq& doc, int& predicted) {
  TraceOptions opts;
  opts.all_step_logits = true;
  const std::span<const Token> stream(doc.data(), doc.size() - 1);
  SequenceTrace tr = trace_sequence(cfg, lm, PrefixKV{}, stream, opts);
  predicted = static_cast<int>(doc.size()) - 1;
  return cross_entropy(tr.logits, std::span<const Token>(doc.data() + 1, doc.size() - 1));
}

}  // namespace

PretrainResult pretrain_lm(const ModelConfig& cfg, const std::vector<TokenSeq>& corpus, const PretrainConfig& pc) {
  if (pc.epochs < 1 || pc.batch_size < 1) throw ConfigError("pretraining needs epochs >= 1 and batch_size >= 1");
  PretrainResult out;
  out.params = LMParameters::init(cfg, pc.seed);
  std::vector<Tensor*> params = out.params.tensors();
  AdamW opt(params, AdamWConfig{.lr = pc.learning_rate, .weight_decay = pc.weight_decay});
  Rng rng(pc.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t total_steps =
      static_cast<std::size_t>(pc.epochs) * ((corpus.size() + pc.batch_size - 1) / pc.batch_size);
  std::size_t step = 0;
  for (int epoch = 0; epoch < pc.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    long tokens = 0;
    for (std::size_t start = 0; start < order.size(); start += pc.batch_size) {
      const std::size_t end = std::min(order.size(), start + pc.batch_size);
      Graph g;
      LMBinding lm = bind_lm(g, out.params, true);
      std::vector<Var> losses;
      int batch_tokens = 0;
      for (std::size_t i = start; i < end; ++i) {
        const TokenSeq& doc = corpus[order[i]];
        if (doc.size() < 2) continue;
        int n = 0;
        losses.push_back(document_loss(cfg, lm, doc, n));
        batch_tokens += n;
      }
      if (losses.empty()) continue;
      Var total = sum(concat_cols(losses));
      Var loss = scale(total, 1.0f / static_cast<float>(batch_tokens));
      if (!std::isfinite(loss.value().item())) throw std::runtime_error("non-finite pretraining loss");
      g.backward(loss);
      // Linear warmup over the first 5% of steps, cosine decay after.
      const double frac = static_cast<double>(step) / static_cast<double>(std::max<std::size_t>(1, total_steps));
      const double warm = std::min(1.0, frac / 0.05);
      opt.config().lr = static_cast<float>(pc.learning_rate * warm * 0.5 * (1.0 + std::cos(M_PI * frac)));
      std::vector<Tensor> grads;
      std::vector<Var> leaves{lm.token_embedding, lm.position_embedding};
      for (const auto& b : lm.blocks) {
        for (Var v : {b.ln1_gamma, b.ln1_beta, b.w_qkv, b.b_qkv, b.w_out, b.b_out, b.ln2_gamma, b.ln2_beta, b.w_fc,
                      b.b_fc, b.w_proj, b.b_proj})
          leaves.push_back(v);
      }
      for (Var v : {lm.lnf_gamma, lm.lnf_beta, lm.w_head, lm.b_head}) leaves.push_back(v);
      for (Var v : leaves) grads.push_back(g.grad(v));
      std::vector<const Tensor*> gp;
      for (const auto& t : grads) gp.push_back(&t);
      opt.step(gp);
      ++step;
      loss_sum += total.value().item();
      tokens += batch_tokens;
    }
    out.epoch_loss.push_back(tokens ? loss_sum / static_cast<double>(tokens) : 0.0);
  }
  return out;
}

double lm_loss(const ModelConfig& cfg, const LMParameters& params, const std::vector<TokenSeq>& corpus) {
  double loss = 0.0;
  long tokens = 0;
  for (const auto& doc : corpus) {
    if (doc.size() < 2) continue;
    Graph g;
    LMBinding lm = bind_lm(g, params);
    int n = 0;
    loss += document_loss(cfg, lm, doc, n).value().item();
    tokens += n;
  }
  return tokens ? loss / static_cast<double>(tokens) : 0.0;
}

}  // namespace rpt
