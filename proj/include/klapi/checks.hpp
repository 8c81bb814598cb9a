#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace klapi::checks {

struct CheckResult {
  std::string suite;
  std::string name;
  double value = 0.0;      ///< measured quantity (max error, min margin, ...)
  double threshold = 0.0;  ///< pass boundary for `value`
  bool passed = false;
  std::string detail;
};

struct CheckOptions {
  std::uint64_t seed = 0;
  int gradient_instances = 100;
  int exact_update_instances = 100;
  int exact_update_perturbations = 10000;
  int identity_instances = 1000;
  int bound_instances = 1000;
  int convexity_pairs = 1000;
  int witness_budget = 100000;
  /// Test hook: perturbs every analytic gradient before comparison.
  bool corrupt_gradient = false;
};

/// Analytic loss gradients against central finite differences, one result
/// per (loss kind, policy kind, batch mode), reporting the max relative error.
std::vector<CheckResult> gradient_suite(const CheckOptions& options);

/// The closed-form tabular update zeroes the MDPO gradient and beats random
/// perturbations.
std::vector<CheckResult> exact_update_suite(const CheckOptions& options);

/// gap = KL(candidate || exact maximizer) for the per-state regularized objective.
std::vector<CheckResult> gap_identity_suite(const CheckOptions& options);

/// Surrogate loss dominates E_x KL(pi_theta || psi_k).
std::vector<CheckResult> surrogate_bound_suite(const CheckOptions& options);

/// Midpoint convexity of the VMPO and surrogate losses in the tabular
/// activation table, plus a recorded non-convexity witness for the expected
/// advantage under an under-complete log-linear policy.
std::vector<CheckResult> convexity_suite(const CheckOptions& options);

std::vector<CheckResult> run_all(const CheckOptions& options);

bool all_passed(const std::vector<CheckResult>& results);

}  // namespace klapi::checks
