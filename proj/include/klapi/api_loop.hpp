#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "klapi/bandit.hpp"
#include "klapi/envs.hpp"
#include "klapi/objectives.hpp"
#include "klapi/policies.hpp"

namespace klapi::api {

enum class ImprovementKind { kCpo, kMdpo, kSurrogate, kVmpo, kExactMd };

std::string to_string(ImprovementKind kind);
ImprovementKind parse_improvement_kind(const std::string& name);

enum class Evaluation {
  kTabularEmpirical,  ///< per-(state, action) empirical means
  kLeastSquares,      ///< linear Q model on the environment's features
  kOracle,            ///< contextual bandit only: Q(x, a) = 1[a = label]
};

std::string to_string(Evaluation mode);
Evaluation parse_evaluation(const std::string& name);

enum class FeatureMap { kRaw, kFourier };

std::string to_string(FeatureMap map);
FeatureMap parse_feature_map(const std::string& name);

struct PolicySpec {
  PolicyKind kind = PolicyKind::kTabular;
  std::vector<std::size_t> hidden;  ///< MLP hidden widths
};

struct ApiConfig {
  int tau = 1000;
  int phases = 100;
  double eta = 1.0;
  ImprovementKind kind = ImprovementKind::kMdpo;
  OptimizerConfig optimizer;
  Evaluation evaluation = Evaluation::kTabularEmpirical;
  PolicySpec policy;
  std::uint64_t seed = 0;
  int policy_steps = 500;

  /// Throws std::invalid_argument unless tau >= 1, phases >= 1, eta > 0.
  void validate() const;
};

/// Tabular MDP stepped continuously across phases from state 0. Feature
/// policies see the declared observations rescaled to [0, 1] plus a bias
/// (raw), or their Fourier expansion; MDPs without observations fall back to
/// one-hot state features.
class MdpEnvironment {
public:
  explicit MdpEnvironment(envs::TabularMDP mdp, FeatureMap map = FeatureMap::kRaw, int fourier_order = 3);

  const envs::TabularMDP& mdp() const { return mdp_; }
  const Mat& state_features() const { return features_; }

private:
  envs::TabularMDP mdp_;
  Mat features_;
};

/// Classification bandit; the policy sees [x, 1].
class ContextualEnvironment {
public:
  explicit ContextualEnvironment(envs::ContextualBanditEnv env) : env_(std::move(env)) {}
  const envs::ContextualBanditEnv& env() const { return env_; }
  std::size_t feature_dim() const { return env_.dim() + 1; }

private:
  envs::ContextualBanditEnv env_;
};

/// The two-armed Gaussian bandit as a one-state, two-action MDP. Each step
/// draws the arm first and the reward noise second, as bandit::run_phase does.
struct GaussianBanditEnvironment {
  bandit::BanditInstance instance;
};

using Environment = std::variant<MdpEnvironment, ContextualEnvironment, GaussianBanditEnvironment>;

std::size_t num_states(const Environment& env);  ///< 0 for the contextual bandit
std::size_t num_actions(const Environment& env);
std::size_t feature_dim(const Environment& env);

/// One phase of interaction. `trajectory` holds state indices (always 0 for
/// the bandits); contextual phases also carry the context features and labels.
struct PhaseDataset {
  envs::Trajectory trajectory;
  Mat features;  ///< tau x d, one row per step
  std::vector<std::size_t> labels;
  std::vector<double> behavior_probs;  ///< pi_k(a_t | x_t)
  std::size_t final_state = 0;

  std::size_t size() const { return trajectory.size(); }
  double average_reward() const;
};

/// Runs the policy for exactly tau steps from `start_state`.
PhaseDataset collect_data(const Environment& env, const SoftmaxPolicy& policy, int tau, RngStream& rng,
                          std::size_t start_state = 0);

struct EvaluationResult {
  ImprovementBatch batch;
  /// |X| x |A| advantages over every state (tabular environments only).
  std::optional<RowMat> advantage_table;
};

/// Advantage estimates Q_hat(x, .) - <pi_k(x), Q_hat(x, .)>. CPO receives the
/// sampled triples, every other kind one advantage row per visited state.
/// `warm_start` carries the least-squares weights between phases.
EvaluationResult policy_evaluation(const Environment& env, const PhaseDataset& data, const SoftmaxPolicy& pi_k,
                                   const ApiConfig& config, envs::LinearQModel* warm_start = nullptr);

struct PhaseLog {
  int k = 0;
  double average_reward = 0.0;
  ImprovementReport report;
  double kl_prev_new = 0.0;
  double kl_new_prev = 0.0;
  double duration_seconds = 0.0;
  /// Standalone log-loss -mean log pi_{k+1}(label | x) on the phase contexts
  /// (contextual bandit only, NaN elsewhere).
  double log_loss = 0.0;
  double reward_sum = 0.0;
};

struct ApiRun {
  std::vector<PhaseLog> logs;
  SoftmaxPolicy final_policy;
};

/// Uniform initial policy of the configured kind.
SoftmaxPolicy initial_policy(const Environment& env, const ApiConfig& config);

/// K phases of collect, evaluate, improve.
ApiRun run_api(const Environment& env, const ApiConfig& config);

}  // namespace klapi::api
