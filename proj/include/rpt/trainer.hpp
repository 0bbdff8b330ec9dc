#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rpt/data.hpp"
#include "rpt/model.hpp"

namespace rpt {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  int epochs = 10;
  float learning_rate = 5e-5f;
  int batch_size = 16;
  std::uint64_t seed = 0;
  std::vector<int> milestones;
  float weight_decay = 0.0f;

  void validate() const;
};

enum class PerturbLevel { word, sentence };

struct AdvConfig {
  float epsilon = 5.0f;
  float step_size = 1.25f;
  int iterations = 10;
  PerturbLevel level = PerturbLevel::word;
  /// When set, training uses the KL-regularized objective with this weight.
  std::optional<float> kl_beta;

  void validate() const;
  /// step_size * iterations >= epsilon; otherwise the ball boundary may be unreachable.
  bool reaches_boundary() const { return step_size * static_cast<float>(iterations) >= epsilon; }
};

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double dev_accuracy = 0.0;
  double wall_clock_s = 0.0;
};

/// Ball-constraint bookkeeping over every PGD iterate.
struct PgdAudit {
  std::size_t checked = 0;
  std::size_t violations = 0;
  double max_excess = 0.0;  // max(norm - epsilon) observed, <= 0 when all inside

  void merge(const PgdAudit& other);
};

inline constexpr double kBallTolerance = 1e-5;

struct TrainResult {
  PrefixParameters prefix;
  std::vector<EpochStats> curve;
  std::map<int, PrefixParameters> checkpoints;  // keyed by milestone epoch
  PgdAudit audit;
};

/// Gradient oracle for projected ascent: perturbations -> gradients of the objective.
using PerturbationGrad = std::function<std::vector<Tensor>(const std::vector<Tensor>&)>;

/// Normalized-gradient ascent with projection onto L2 balls, starting from zero.
/// Word level treats every row as its own ball; sentence level flattens each tensor.
/// Zero-norm gradients skip the step. Every iterate is recorded in `audit`.
std::vector<Tensor> projected_ascent(const std::vector<Shape>& shapes, const PerturbationGrad& grad,
                                     const AdvConfig& adv, PgdAudit* audit = nullptr);

/// L2 projection of a perturbation onto the ball(s) of the given geometry.
void project_to_ball(Tensor& r, float epsilon, PerturbLevel level);

/// Largest per-ball norm of `r` in the given geometry.
float ball_norm(const Tensor& r, PerturbLevel level);

/// Inner maximization over context-embedding perturbations, one tensor per frame
/// (|context| x d; frames with an empty context get a 1 x d zero that is never applied).
std::vector<Tensor> pgd_inner_max(const MicroLM& model, std::span<const SampleFrame> batch,
                                  const PrefixParameters& prefix, const AdvConfig& adv, PgdAudit* audit = nullptr);

/// Sum of label cross-entropies at the output positions, with optional context perturbations.
double label_loss(const MicroLM& model, std::span<const SampleFrame> batch, const PrefixParameters& prefix,
                  const std::vector<Tensor>* perturbations = nullptr);

/// Clean loss + beta * KL(p_clean || p_perturbed) for one batch, averaged over frames.
/// The perturbation maximizes the KL term by PGD. When `grads` is non-null it
/// receives gradients for the prefix trainables.
double kl_adversarial_step(const MicroLM& model, std::span<const SampleFrame> batch, const PrefixParameters& prefix,
                           const AdvConfig& adv, std::vector<Tensor>* grads = nullptr, PgdAudit* audit = nullptr,
                           std::uint64_t seed = 0);

TrainResult train_standard_prefix(const MicroLM& model, const Task& task, const Dataset& train, const Dataset& dev,
                                  const TrainConfig& cfg, PrefixParameters init);

TrainResult train_adversarial_prefix(const MicroLM& model, const Task& task, const Dataset& train, const Dataset& dev,
                                     const TrainConfig& cfg, const AdvConfig& adv, PrefixParameters init);

double dataset_accuracy(const MicroLM& model, const Task& task, const Dataset& data, const PrefixParameters& prefix);
double dataset_loss(const MicroLM& model, const Task& task, const Dataset& data, const PrefixParameters& prefix);

/// Per-sample attack used for augmentation; nullopt means the attack failed on that sample.
using SampleAttack = std::function<std::optional<Example>(const Example&)>;

struct AugmentStats {
  std::size_t attempted = 0;
  std::size_t failed = 0;
};

/// Pairs each clean sample with its perturbed copy; failed attacks keep the clean sample only.
Dataset augment_with_attack(const Dataset& train, const SampleAttack& attack, AugmentStats* stats = nullptr);

}  // namespace rpt
