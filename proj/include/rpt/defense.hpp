#pragma once

#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rpt/data.hpp"
#include "rpt/model.hpp"

namespace rpt {

class RankError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Normalization { dynamic, fixed, none };
enum class LayerEnd { bottom, top };

struct BatchMode {
  enum class Kind { fixed, adaptive };
  Kind kind = Kind::fixed;
  int size = 1;            // samples per batch in fixed mode
  int token_budget = 256;  // padded tokens per batch in adaptive mode

  static BatchMode fixed_size(int k) { return {Kind::fixed, k, 0}; }
  static BatchMode adaptive(int budget) { return {Kind::adaptive, 0, budget}; }
};

struct DefenseConfig {
  int num_layers = 3;
  LayerEnd layer_end = LayerEnd::bottom;
  Normalization normalization = Normalization::fixed;
  int steps = 10;
  std::optional<float> learning_rate;  // required; pick with sweep_learning_rate
  BatchMode batch;

  /// Throws ConfigError for inconsistent settings, including dynamic normalization
  /// with single-sample fixed batches.
  void validate(const ModelConfig& cfg) const;
  /// Block indices j: the output of block j at the output position enters the loss and P' slice j trains.
  std::vector<int> layers(const ModelConfig& cfg) const;
};

/// Output-position block outputs of correctly classified samples, one matrix per block index.
struct ActivationSet {
  std::vector<int> layers;
  std::vector<Tensor> matrices;        // |S_C| x d each
  std::vector<std::size_t> sample_ids;  // indices into the source dataset
};

/// Rows come only from samples with predict_label == gold. Throws RankError when
/// fewer than `min_rows` samples qualify.
ActivationSet collect_correct_activations(const MicroLM& model, const PrefixParameters& prefix, const Task& task,
                                          const Dataset& data, std::span<const int> layers, int min_rows = 1);

struct Centered {
  Tensor matrix;
  Tensor mean;  // 1 x d
};

Centered center_columns(const Tensor& h);

/// Orthogonal projector onto the top-p right singular vectors of `centered` (d x d).
/// p == d yields the identity exactly.
Tensor pca_projection(const Tensor& centered, int p);

/// Smallest p whose squared singular values reach `mass` of the total, capped at d - 1.
int default_rank(const Tensor& centered, double mass = 0.95);

struct ProjectionSet {
  std::vector<int> layers;
  std::vector<Tensor> projectors;  // d x d
  std::vector<Tensor> means;       // 1 x d
  std::vector<int> ranks;

  std::size_t size() const { return layers.size(); }
  /// Position of `layer` in this set, or -1.
  int find(int layer) const;
};

/// Builds one projector per layer of `acts`. A missing rank selects default_rank per layer.
ProjectionSet build_projections(const ActivationSet& acts, std::optional<int> rank = std::nullopt);

/// Manifold residual with the configured normalization, evaluated outside any graph.
/// `batch` holds one activation matrix (|S_T| x d) per entry of `layers`.
double manifold_loss(const std::vector<Tensor>& batch, std::span<const int> layers, const ProjectionSet& proj,
                     Normalization mode);

/// Graph form of the residual; `batch` entries are |S_T| x d Vars.
Var manifold_loss(Graph& g, const std::vector<Var>& batch, std::span<const int> layers, const ProjectionSet& proj,
                  Normalization mode);

struct TuneOutcome {
  RobustPrefix robust;
  std::vector<Token> predictions;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  bool fell_back = false;  // non-finite loss, P' reset to zero
};

/// Per-batch tuning of a zero-initialized additive prefix against the manifold residual.
TuneOutcome tune_robust_prefix(const MicroLM& model, std::span<const SampleFrame> batch,
                               const PrefixParameters& prefix, std::span<const Token> labels,
                               const ProjectionSet& proj, const DefenseConfig& cfg);

/// Splits frames into consecutive batches. Adaptive mode packs frames while
/// count * longest_stream stays within the budget. `min_size` merges short trailing batches.
std::vector<std::vector<std::size_t>> partition_batches(std::span<const SampleFrame> frames, const BatchMode& mode,
                                                        std::size_t min_size = 1);

struct DefendedEval {
  std::vector<Token> predictions;
  double accuracy = 0.0;
  std::size_t fallbacks = 0;
  std::size_t improved_batches = 0;  // final loss <= initial loss
  std::size_t batches = 0;
  std::vector<RobustPrefix> robust;     // tuned prefix per batch
  std::vector<std::size_t> batch_of;    // batch index per sample
};

/// Runs tune_robust_prefix over a dataset and scores the predictions.
DefendedEval defend_dataset(const MicroLM& model, const Task& task, const Dataset& data,
                            const PrefixParameters& prefix, const ProjectionSet& proj, const DefenseConfig& cfg);

/// Accuracy on `data` for each candidate learning rate; returns the best (first on ties).
float sweep_learning_rate(const MicroLM& model, const Task& task, const Dataset& dev, const PrefixParameters& prefix,
                          const ProjectionSet& proj, DefenseConfig cfg, std::span<const float> candidates,
                          std::vector<double>* accuracies = nullptr);

}  // namespace rpt
