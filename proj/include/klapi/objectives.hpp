#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "klapi/mathcore.hpp"
#include "klapi/policies.hpp"

namespace klapi {

/// One phase's improvement dataset.
///
/// All-actions mode carries an advantage row per state. Sampled mode carries
/// one (state, action, advantage) triple per row together with the behavior
/// probability of the taken action. States are kept with multiplicity, so a
/// uniform average over rows is the empirical state distribution.
class ImprovementBatch {
public:
  enum class Mode { kAllActions, kSampled };

  static ImprovementBatch all_actions(StateSet states, Mat advantages);
  static ImprovementBatch sampled(StateSet states, std::vector<std::size_t> actions, Vec advantages,
                                  Vec behavior_probs);

  Mode mode() const { return mode_; }
  const StateSet& states() const { return states_; }
  std::size_t size() const { return states_.size(); }
  std::size_t num_actions() const { return num_actions_; }

  /// N x |A|, all-actions mode only.
  const Mat& advantages() const;
  /// Sampled mode only.
  const std::vector<std::size_t>& actions() const;
  const Vec& sampled_advantages() const;
  const Vec& behavior_probs() const;

private:
  ImprovementBatch() = default;

  Mode mode_ = Mode::kAllActions;
  StateSet states_;
  std::size_t num_actions_ = 0;
  Mat advantages_;
  std::vector<std::size_t> actions_;
  Vec sampled_advantages_;
  Vec behavior_probs_;
};

struct LossValue {
  double loss = 0.0;
  Vec grad;
};

enum class LossKind { kCpo, kMdpo, kSurrogate, kVmpo };

std::string to_string(LossKind kind);
LossKind parse_loss_kind(const std::string& name);

/// Exponential tilt psi proportional to pi_k * exp(eta * adv), normalized in log space.
ProbVec psi_target(const ProbVec& pi_k, const Vec& adv_row, double eta);

/// Row-wise log psi from snapshot activations: log_softmax(q_k + eta * adv).
Mat log_psi_rows(const Mat& snapshot_activations, const Mat& advantages, double eta);

/// Negative expected advantage. Sampled mode uses importance weights
/// pi_theta(a_t|x_t) / pi_k(a_t|x_t).
LossValue loss_cpo(const ImprovementBatch& batch, const SoftmaxPolicy& policy, const SoftmaxPolicy& snapshot);

/// Negative expected advantage plus (1/eta) E_x KL(pi_theta || pi_k).
LossValue loss_mdpo(const ImprovementBatch& batch, const SoftmaxPolicy& policy, const SoftmaxPolicy& snapshot,
                    double eta);

/// E_x KL(pi_theta || psi_k). Equals eta * (loss_mdpo + mdpo_kl_form_offset).
double mdpo_kl_form(const ImprovementBatch& batch, const SoftmaxPolicy& policy, const SoftmaxPolicy& snapshot,
                    double eta);

/// The theta-independent constant (1/eta) E_x log Z_x linking the two MDPO forms.
double mdpo_kl_form_offset(const ImprovementBatch& batch, const SoftmaxPolicy& snapshot, double eta);

/// E_x [KL(psi_k || pi_theta) + 0.25 ||q_k + eta adv - q_theta - v(x) 1||^2] with
/// v(x) the action mean of (q_k + eta adv - q_theta).
LossValue loss_surrogate(const ImprovementBatch& batch, const SoftmaxPolicy& policy, const SoftmaxPolicy& snapshot,
                         double eta);

/// Cross-entropy -E_x sum_a psi_k(x, a) log pi_theta(a|x).
LossValue loss_vmpo(const ImprovementBatch& batch, const SoftmaxPolicy& policy, const SoftmaxPolicy& snapshot,
                    double eta);

LossValue evaluate_loss(LossKind kind, const ImprovementBatch& batch, const SoftmaxPolicy& policy,
                        const SoftmaxPolicy& snapshot, double eta);

/// Closed-form regularized update for tabular policies: logits += eta * adv.
TabularSoftmaxPolicy exact_md_update(const TabularSoftmaxPolicy& pi_k, const RowMat& adv, double eta);

struct OptimizerConfig {
  double learning_rate = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// Regularized losses stop early once the gradient norm falls to this
  /// value. Zero disables the check.
  double grad_tolerance = 0.0;
};

enum class StopReason { kMaxSteps, kKlConstraint, kConverged };

std::string to_string(StopReason reason);

struct ImprovementReport {
  int steps = 0;
  double final_loss = 0.0;
  double kl_prev_new = 0.0;  ///< E_x KL(pi_k || pi_new)
  double kl_new_prev = 0.0;  ///< E_x KL(pi_new || pi_k)
  StopReason stop_reason = StopReason::kMaxSteps;
};

struct ImprovementResult {
  SoftmaxPolicy policy;
  ImprovementReport report;
};

/// Adam on the negative expected advantage. After every step the empirical
/// KL(pi_k || pi_theta) over the batch states is checked; the first step
/// pushing it above eta is discarded and the last feasible iterate returned.
ImprovementResult improve_cpo(const ImprovementBatch& batch, const SoftmaxPolicy& pi_k, double eta,
                              const OptimizerConfig& optimizer, int max_steps);

/// n_steps Adam steps on a regularized loss, warm-started from pi_k.
ImprovementResult improve_regularized(const ImprovementBatch& batch, const SoftmaxPolicy& pi_k, double eta,
                                      LossKind kind, const OptimizerConfig& optimizer, int n_steps);

struct GapCheck {
  double gap = 0.0;
  double kl = 0.0;
};

/// Suboptimality of a candidate in the per-state regularized objective
/// <eta q, pi> - KL(pi || pi_k), measured against its exact maximizer u*.
/// gap = objective(u*) - objective(candidate); kl = KL(candidate || u*).
GapCheck suboptimality_gap_check(const ProbVec& candidate, const ProbVec& pi_k, const Vec& q_hat, double eta);

}  // namespace klapi
