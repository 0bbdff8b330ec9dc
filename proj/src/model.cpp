#include "rpt/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "rpt/ops.hpp"

namespace rpt {

namespace {

constexpr float kMaskValue = -1e9f;

Tensor normal_tensor(Shape shape, float stddev, Rng& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<float> dist(0.0f, stddev);
  for (float& v : t.data()) v = dist(rng);
  return t;
}

Tensor row_vector(int n, float fill) { return Tensor({1, n}, fill); }

Tensor causal_mask(int prefix_len, int stream_len) {
  Tensor mask({stream_len, prefix_len + stream_len});
  for (int i = 0; i < stream_len; ++i)
    for (int j = i + 1; j < stream_len; ++j) mask.at(i, prefix_len + j) = kMaskValue;
  return mask;
}

}  // namespace

void ModelConfig::validate() const {
  if (num_layers < 1) throw ConfigError("num_layers must be >= 1");
  if (hidden_dim < 1 || num_heads < 1) throw ConfigError("hidden_dim and num_heads must be >= 1");
  if (hidden_dim % num_heads != 0) {
    throw ConfigError("hidden_dim " + std::to_string(hidden_dim) + " not divisible by num_heads " +
                      std::to_string(num_heads));
  }
  if (prefix_len < 1) throw ConfigError("prefix_len must be >= 1");
  if (vocab_size <= vocab::kFirstLabel) throw ConfigError("vocab_size too small for reserved tokens");
  if (max_seq_len <= prefix_len + 2) throw ConfigError("max_seq_len must exceed prefix_len + 2");
}

TokenSeq SampleFrame::input() const {
  TokenSeq s;
  s.reserve(static_cast<std::size_t>(stream_len()));
  s.push_back(vocab::kCls);
  s.insert(s.end(), context.begin(), context.end());
  s.insert(s.end(), question.begin(), question.end());
  s.push_back(vocab::kAns);
  return s;
}

SampleFrame frame_sample(const ModelConfig& cfg, TokenSeq context, TokenSeq question, Token label) {
  SampleFrame f{std::move(context), std::move(question), label};
  for (const TokenSeq* part : {&f.context, &f.question}) {
    for (Token t : *part) {
      if (t < 0 || t >= cfg.vocab_size) throw ConfigError("token " + std::to_string(t) + " outside vocabulary");
    }
  }
  if (label < 0 || label >= cfg.vocab_size) throw ConfigError("label outside vocabulary");
  if (f.stream_len() + cfg.prefix_len > cfg.max_seq_len) {
    throw LengthError("frame of " + std::to_string(f.stream_len()) + " tokens plus prefix " +
                      std::to_string(cfg.prefix_len) + " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  }
  return f;
}

LMParameters LMParameters::init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const int d = cfg.hidden_dim;
  const float std_w = 0.02f;
  const float std_resid = std_w / std::sqrt(2.0f * static_cast<float>(cfg.num_layers));
  LMParameters p;
  p.token_embedding = normal_tensor({cfg.vocab_size, d}, std_w, rng);
  p.position_embedding = normal_tensor({cfg.max_seq_len, d}, 0.01f, rng);
  for (int l = 0; l < cfg.num_layers; ++l) {
    BlockParameters b;
    b.ln1_gamma = row_vector(d, 1.0f);
    b.ln1_beta = row_vector(d, 0.0f);
    b.w_qkv = normal_tensor({d, 3 * d}, std_w, rng);
    b.b_qkv = row_vector(3 * d, 0.0f);
    b.w_out = normal_tensor({d, d}, std_resid, rng);
    b.b_out = row_vector(d, 0.0f);
    b.ln2_gamma = row_vector(d, 1.0f);
    b.ln2_beta = row_vector(d, 0.0f);
    b.w_fc = normal_tensor({d, 4 * d}, std_w, rng);
    b.b_fc = row_vector(4 * d, 0.0f);
    b.w_proj = normal_tensor({4 * d, d}, std_resid, rng);
    b.b_proj = row_vector(d, 0.0f);
    p.blocks.push_back(std::move(b));
  }
  p.lnf_gamma = row_vector(d, 1.0f);
  p.lnf_beta = row_vector(d, 0.0f);
  p.w_head = normal_tensor({d, cfg.vocab_size}, std_w, rng);
  p.b_head = row_vector(cfg.vocab_size, 0.0f);
  return p;
}

std::vector<Tensor*> LMParameters::tensors() {
  std::vector<Tensor*> out{&token_embedding, &position_embedding};
  for (auto& b : blocks) {
    for (Tensor* t : {&b.ln1_gamma, &b.ln1_beta, &b.w_qkv, &b.b_qkv, &b.w_out, &b.b_out, &b.ln2_gamma,
                      &b.ln2_beta, &b.w_fc, &b.b_fc, &b.w_proj, &b.b_proj})
      out.push_back(t);
  }
  for (Tensor* t : {&lnf_gamma, &lnf_beta, &w_head, &b_head}) out.push_back(t);
  return out;
}

std::vector<const Tensor*> LMParameters::tensors() const {
  auto mut = const_cast<LMParameters*>(this)->tensors();
  return {mut.begin(), mut.end()};
}

std::uint64_t LMParameters::checksum() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const Tensor* t : tensors()) h = rpt::checksum(t->data(), h);
  return h;
}

PrefixParameters PrefixParameters::init(const ModelConfig& cfg, const LMParameters& lm, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const int d = cfg.hidden_dim;
  const int small = d;
  const int out = cfg.num_layers * d;
  PrefixParameters p;
  // Prefix rows start from word embeddings of random non-reserved tokens.
  p.core = Tensor({cfg.prefix_len, small});
  std::uniform_int_distribution<int> pick(vocab::kFirstLabel, cfg.vocab_size - 1);
  const float emb_scale = 1.0f / std::max(1e-6f, l2_norm(lm.token_embedding.data()) /
                                                      std::sqrt(static_cast<float>(cfg.vocab_size)));
  for (int i = 0; i < cfg.prefix_len; ++i) {
    auto src = lm.token_embedding.row(pick(rng));
    auto dst = p.core.row(i);
    for (int j = 0; j < small; ++j) dst[j] = src[j] * emb_scale;
  }
  p.w_in = normal_tensor({small, 2 * small}, 1.0f / std::sqrt(static_cast<float>(small)), rng);
  p.b_in = row_vector(2 * small, 0.0f);
  p.w_out = normal_tensor({2 * small, out}, 1.0f / std::sqrt(static_cast<float>(2 * small)), rng);
  p.b_out = row_vector(out, 0.0f);
  p.refresh();
  return p;
}

void PrefixParameters::refresh() {
  Graph g;
  expansion = bind_prefix(g, *this, false).matrix.value();
}

std::vector<Tensor*> PrefixParameters::trainables() { return {&core, &w_in, &b_in, &w_out, &b_out}; }

std::vector<const Tensor*> PrefixParameters::trainables() const { return {&core, &w_in, &b_in, &w_out, &b_out}; }

std::uint64_t PrefixParameters::checksum() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const Tensor* t : trainables()) h = rpt::checksum(t->data(), h);
  return rpt::checksum(expansion.data(), h);
}

RobustPrefix RobustPrefix::zeros(const ModelConfig& cfg, std::vector<int> trainable_layers) {
  for (int l : trainable_layers) {
    if (l < 0 || l >= cfg.num_layers) throw ConfigError("robust prefix layer " + std::to_string(l) + " out of range");
  }
  std::sort(trainable_layers.begin(), trainable_layers.end());
  trainable_layers.erase(std::unique(trainable_layers.begin(), trainable_layers.end()), trainable_layers.end());
  return RobustPrefix{Tensor({cfg.prefix_len, cfg.num_layers * cfg.hidden_dim}), std::move(trainable_layers)};
}

bool RobustPrefix::layer_trainable(int layer) const {
  return std::find(trainable_layers.begin(), trainable_layers.end(), layer) != trainable_layers.end();
}

void RobustPrefix::enforce_mask(int hidden_dim) {
  const int layers = offset.cols() / hidden_dim;
  for (int l = 0; l < layers; ++l) {
    if (layer_trainable(l)) continue;
    for (int i = 0; i < offset.rows(); ++i) {
      auto r = offset.row(i).subspan(static_cast<std::size_t>(l) * hidden_dim, hidden_dim);
      std::fill(r.begin(), r.end(), 0.0f);
    }
  }
}

bool RobustPrefix::is_zero() const {
  return std::all_of(offset.data().begin(), offset.data().end(), [](float v) { return v == 0.0f; });
}

LMBinding bind_lm(Graph& g, const LMParameters& lm, bool trainable) {
  auto b = [&](const Tensor& t) { return g.borrow(t, trainable); };
  LMBinding out;
  out.token_embedding = b(lm.token_embedding);
  out.position_embedding = b(lm.position_embedding);
  for (const auto& blk : lm.blocks) {
    out.blocks.push_back(BlockBinding{b(blk.ln1_gamma), b(blk.ln1_beta), b(blk.w_qkv), b(blk.b_qkv), b(blk.w_out),
                                      b(blk.b_out), b(blk.ln2_gamma), b(blk.ln2_beta), b(blk.w_fc), b(blk.b_fc),
                                      b(blk.w_proj), b(blk.b_proj)});
  }
  out.lnf_gamma = b(lm.lnf_gamma);
  out.lnf_beta = b(lm.lnf_beta);
  out.w_head = b(lm.w_head);
  out.b_head = b(lm.b_head);
  return out;
}

PrefixBinding bind_prefix(Graph& g, const PrefixParameters& prefix, bool trainable) {
  PrefixBinding b;
  b.core = g.borrow(prefix.core, trainable);
  b.w_in = g.borrow(prefix.w_in, trainable);
  b.b_in = g.borrow(prefix.b_in, trainable);
  b.w_out = g.borrow(prefix.w_out, trainable);
  b.b_out = g.borrow(prefix.b_out, trainable);
  Var hidden = tanh(add_row(matmul(b.core, b.w_in), b.b_in));
  b.matrix = add_row(matmul(hidden, b.w_out), b.b_out);
  return b;
}

void check_prefix_shape(const ModelConfig& cfg, const Tensor& prefix_matrix, const char* what) {
  const Shape want{cfg.prefix_len, cfg.num_layers * cfg.hidden_dim};
  if (prefix_matrix.shape() != want) {
    throw ContractError(std::string(what) + " has shape " + shape_str(prefix_matrix.shape()) + ", model expects " +
                        shape_str(want));
  }
}

PrefixKV prefix_kv(const ModelConfig& cfg, const LMBinding& lm, Var prefix_matrix) {
  check_prefix_shape(cfg, prefix_matrix.value(), "prefix matrix");
  const int d = cfg.hidden_dim;
  PrefixKV kv;
  for (int l = 0; l < cfg.num_layers; ++l) {
    const auto& blk = lm.blocks[static_cast<std::size_t>(l)];
    Var state = slice_cols(prefix_matrix, l * d, (l + 1) * d);
    Var a = layer_norm(state, blk.ln1_gamma, blk.ln1_beta);
    Var qkv = add_row(matmul(a, blk.w_qkv), blk.b_qkv);
    kv.keys.push_back(slice_cols(qkv, d, 2 * d));
    kv.values.push_back(slice_cols(qkv, 2 * d, 3 * d));
  }
  return kv;
}

SequenceTrace trace_sequence(const ModelConfig& cfg, const LMBinding& lm, const PrefixKV& prefix,
                             std::span<const Token> stream, const TraceOptions& opts) {
  const int t_len = static_cast<int>(stream.size());
  const int d = cfg.hidden_dim;
  const int heads = cfg.num_heads;
  const int dh = cfg.head_dim();
  if (t_len < 1) throw ContractError("empty input stream");
  if (t_len + cfg.prefix_len > cfg.max_seq_len) throw LengthError("stream exceeds max_seq_len");
  Graph& g = lm.token_embedding.graph();

  std::vector<int> positions(static_cast<std::size_t>(t_len));
  std::iota(positions.begin(), positions.end(), 0);
  SequenceTrace tr;
  tr.embeddings = add(gather_rows(lm.token_embedding, stream), gather_rows(lm.position_embedding, positions));
  if (opts.embedding_offset) tr.embeddings = add(tr.embeddings, *opts.embedding_offset);
  tr.hidden.push_back(tr.embeddings);

  // An empty PrefixKV runs the bare LM (no prefix keys), as during pretraining.
  const bool has_prefix = !prefix.keys.empty();
  const int prefix_cols = has_prefix ? cfg.prefix_len : 0;
  Var mask = g.constant(causal_mask(prefix_cols, t_len));
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));
  Var x = tr.embeddings;
  for (int l = 0; l < cfg.num_layers; ++l) {
    const auto& blk = lm.blocks[static_cast<std::size_t>(l)];
    const bool last = l == cfg.num_layers - 1;
    Var a = layer_norm(x, blk.ln1_gamma, blk.ln1_beta);
    Var qkv = add_row(matmul(a, blk.w_qkv), blk.b_qkv);
    Var q = slice_cols(qkv, 0, d);
    Var k = slice_cols(qkv, d, 2 * d);
    Var v = slice_cols(qkv, 2 * d, 3 * d);
    if (has_prefix) {
      k = concat_rows({prefix.keys[static_cast<std::size_t>(l)], k});
      v = concat_rows({prefix.values[static_cast<std::size_t>(l)], v});
    }
    std::vector<Var> head_out;
    for (int h = 0; h < heads; ++h) {
      Var qh = slice_cols(q, h * dh, (h + 1) * dh);
      Var kh = slice_cols(k, h * dh, (h + 1) * dh);
      Var vh = slice_cols(v, h * dh, (h + 1) * dh);
      Var att = softmax_rows(add(scale(matmul_nt(qh, kh), inv_sqrt), mask));
      if (last) tr.final_attention.push_back(att);
      head_out.push_back(matmul(att, vh));
    }
    Var attn = heads == 1 ? head_out[0] : concat_cols(head_out);
    x = add(x, add_row(matmul(attn, blk.w_out), blk.b_out));
    Var m = layer_norm(x, blk.ln2_gamma, blk.ln2_beta);
    m = gelu(add_row(matmul(m, blk.w_fc), blk.b_fc));
    x = add(x, add_row(matmul(m, blk.w_proj), blk.b_proj));
    tr.hidden.push_back(x);
  }
  Var top = opts.all_step_logits ? x : slice_rows(x, t_len - 1, t_len);
  tr.logits = add_row(matmul(layer_norm(top, lm.lnf_gamma, lm.lnf_beta), lm.w_head), lm.b_head);
  return tr;
}

MicroLM::MicroLM(ModelConfig cfg, LMParameters params) : cfg_(cfg), params_(std::move(params)) {
  cfg_.validate();
  if (params_.blocks.size() != static_cast<std::size_t>(cfg_.num_layers) ||
      params_.token_embedding.shape() != Shape{cfg_.vocab_size, cfg_.hidden_dim}) {
    throw ContractError("LM parameters do not match model config");
  }
}

ForwardOutput MicroLM::forward(const SampleFrame& frame, const PrefixParameters& prefix,
                               const RobustPrefix* robust) const {
  check_prefix_shape(cfg_, prefix.expansion, "prefix expansion");
  Graph g;
  LMBinding lm = bind_lm(g, params_);
  Var pm = g.borrow(prefix.expansion);
  if (robust) {
    check_prefix_shape(cfg_, robust->offset, "robust prefix");
    pm = add(pm, g.borrow(robust->offset));
  }
  PrefixKV kv = prefix_kv(cfg_, lm, pm);
  const TokenSeq stream = frame.input();
  TraceOptions opts;
  opts.all_step_logits = true;
  SequenceTrace tr = trace_sequence(cfg_, lm, kv, stream, opts);
  ForwardOutput out;
  out.logits = tr.logits.value();
  for (Var h : tr.hidden) out.record.hidden.push_back(h.value());
  for (Var a : tr.final_attention) out.record.final_attention.push_back(a.value());
  return out;
}

Token argmax_label(std::span<const float> logits_row, std::span<const Token> labels) {
  if (labels.empty()) throw ConfigError("label set is empty");
  Token best = -1;
  float best_v = 0.0f;
  for (Token t : labels) {
    const float v = logits_row[static_cast<std::size_t>(t)];
    if (best < 0 || v > best_v || (v == best_v && t < best)) {
      best = t;
      best_v = v;
    }
  }
  return best;
}

Token MicroLM::predict_label(const SampleFrame& frame, const PrefixParameters& prefix, std::span<const Token> labels,
                             const RobustPrefix* robust) const {
  if (labels.empty()) throw ConfigError("label set is empty");
  check_prefix_shape(cfg_, prefix.expansion, "prefix expansion");
  Graph g;
  LMBinding lm = bind_lm(g, params_);
  Var pm = g.borrow(prefix.expansion);
  if (robust) pm = add(pm, g.borrow(robust->offset));
  const TokenSeq stream = frame.input();
  SequenceTrace tr = trace_sequence(cfg_, lm, prefix_kv(cfg_, lm, pm), stream);
  return argmax_label(tr.logits.value().row(0), labels);
}

Tensor drop_prefix_and_renormalize(const Tensor& attention, int prefix_len) {
  const int rows = attention.rows();
  const int cols = attention.cols() - prefix_len;
  if (cols < 1) throw DimensionError("attention map narrower than prefix");
  Tensor out({rows, cols});
  for (int i = 0; i < rows; ++i) {
    auto src = attention.row(i).subspan(static_cast<std::size_t>(prefix_len));
    double s = 0.0;
    for (float v : src) s += v;
    auto dst = out.row(i);
    for (int j = 0; j < cols; ++j) dst[j] = s > 0.0 ? static_cast<float>(src[j] / s) : 0.0f;
  }
  return out;
}

Tensor MicroLM::final_attention(const SampleFrame& frame, const PrefixParameters& prefix,
                                const RobustPrefix* robust) const {
  ForwardOutput fw = forward(frame, prefix, robust);
  const auto& heads = fw.record.final_attention;
  Tensor avg;
  for (const Tensor& a : heads) {
    Tensor r = drop_prefix_and_renormalize(a, cfg_.prefix_len);
    if (avg.empty()) {
      avg = std::move(r);
    } else {
      for (std::size_t i = 0; i < avg.size(); ++i) avg[i] += r[i];
    }
  }
  for (float& v : avg.data()) v /= static_cast<float>(heads.size());
  return avg;
}

}  // namespace rpt
