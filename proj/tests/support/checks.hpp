#pragma once

// Property checks shared by the unit tests and the acceptance runner.

#include <cstdint>
#include <string>
#include <vector>

namespace checks {

struct GradCase {
  std::string name;
  std::uint64_t seed = 0;
  double rel_error = 0.0;
  double tolerance = 0.0;
  bool pass() const { return rel_error <= tolerance; }
};

/// Every differentiable op against central differences of its double-precision reference.
std::vector<GradCase> op_gradient_cases(int seeds_per_op);

/// Manifold loss gradient w.r.t. the robust prefix on a tiny model, against a double-precision model.
std::vector<GradCase> manifold_gradient_cases(int count);

struct ProjectorReport {
  double max_idempotence = 0.0;  // max |Q^2 - Q|
  double max_symmetry = 0.0;     // max |Q - Q^T|
  double max_oracle_diff = 0.0;  // max |Q - Q_eig|
  int optimality_violations = 0;
  int trials = 0;
};

/// Builds Q by the library PCA and compares against an eigendecomposition of H^T H.
ProjectorReport projector_checks(std::uint64_t seed, int rows, int dim, int rank, int random_projectors);

}  // namespace checks
