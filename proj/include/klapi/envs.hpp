#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "klapi/mathcore.hpp"
#include "klapi/rng.hpp"

namespace klapi::envs {

// ---------------------------------------------------------------- contextual bandit

struct LabeledContext {
  Vec features;
  std::size_t label = 0;
};

/// Classification-as-bandit environment: reward 1 when the chosen action
/// equals the context's label, 0 otherwise.
class ContextualBanditEnv {
public:
  /// Gaussian clusters: class means are `separation` times independent
  /// random unit directions, contexts are mean + N(0, I).
  static ContextualBanditEnv synthetic_clusters(std::size_t num_classes, std::size_t dim, double separation,
                                                std::uint64_t seed);
  /// Contexts drawn uniformly (with replacement) from a labelled dataset.
  static ContextualBanditEnv from_dataset(Mat features, std::vector<std::size_t> labels, std::size_t num_classes);

  std::size_t num_classes() const { return num_classes_; }
  std::size_t dim() const { return dim_; }
  bool is_synthetic() const { return dataset_labels_.empty(); }
  const Mat& class_means() const { return means_; }

  LabeledContext sample(RngStream& rng) const;
  static double reward(const LabeledContext& context, std::size_t action) {
    return action == context.label ? 1.0 : 0.0;
  }

private:
  ContextualBanditEnv() = default;

  std::size_t num_classes_ = 0;
  std::size_t dim_ = 0;
  Mat means_;  ///< C x d, synthetic source
  Mat dataset_features_;
  std::vector<std::size_t> dataset_labels_;
};

// ---------------------------------------------------------------- IDX files

class IdxError : public std::runtime_error {
public:
  enum class Kind { kIo, kWrongMagic, kTruncated, kCountMismatch, kBadHeader };
  IdxError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

private:
  Kind kind_;
};

struct IdxDataset {
  Mat features;  ///< N x (rows * cols), pixels / 255
  std::vector<std::size_t> labels;
  std::size_t rows = 0;
  std::size_t cols = 0;
};

inline constexpr std::uint32_t kIdxImageMagic = 2051;
inline constexpr std::uint32_t kIdxLabelMagic = 2049;

IdxDataset idx_load(const std::filesystem::path& images, const std::filesystem::path& labels);
/// Writes the dataset back in IDX form, pixels rounded from value * 255.
void idx_save(const IdxDataset& data, const std::filesystem::path& images, const std::filesystem::path& labels);

// ---------------------------------------------------------------- Fourier basis

inline constexpr std::size_t kDefaultFourierBudget = 4096;

/// cos(pi c . x) for every c in {0..order}^d, c enumerated lexicographically
/// with the last coordinate varying fastest. Inputs are clamped to [0, 1].
Vec fourier_features(const Vec& x, int order, std::size_t budget = kDefaultFourierBudget);

/// Fourier features over a declared observation box; observations are
/// rescaled to [0, 1]^d and clamped before expansion.
class FourierBasis {
public:
  FourierBasis(Vec lower, Vec upper, int order, std::size_t budget = kDefaultFourierBudget);
  std::size_t size() const { return size_; }
  Vec operator()(const Vec& observation) const;

private:
  Vec lower_;
  Vec upper_;
  int order_;
  std::size_t budget_;
  std::size_t size_;
};

// ---------------------------------------------------------------- tabular MDPs

/// Finite average-reward MDP. Transition probabilities P(x' | x, a) are stored
/// as one row-major |X|*|A| x |X| matrix, row x * |A| + a.
class TabularMDP {
public:
  TabularMDP(RowMat transitions, RowMat rewards);

  std::size_t num_states() const { return num_states_; }
  std::size_t num_actions() const { return num_actions_; }
  const RowMat& rewards() const { return rewards_; }
  const RowMat& transitions() const { return transitions_; }
  double reward(std::size_t x, std::size_t a) const { return rewards_(static_cast<Eigen::Index>(x), static_cast<Eigen::Index>(a)); }
  Eigen::RowVectorXd next_state_dist(std::size_t x, std::size_t a) const {
    return transitions_.row(static_cast<Eigen::Index>(x * num_actions_ + a));
  }

  /// Optional per-state observation coordinates for feature-based policies.
  const std::optional<Mat>& observations() const { return observations_; }
  const Vec& observation_lower() const { return obs_lower_; }
  const Vec& observation_upper() const { return obs_upper_; }
  TabularMDP with_observations(Mat observations, Vec lower, Vec upper) const;

  /// Samples x' ~ P(. | x, a).
  std::size_t sample_next(std::size_t x, std::size_t a, RngStream& rng) const;

  /// Same MDP with states and actions renumbered: new state i is old state
  /// state_perm[i], new action j is old action action_perm[j].
  TabularMDP relabeled(const std::vector<std::size_t>& state_perm, const std::vector<std::size_t>& action_perm) const;

private:
  std::size_t num_states_;
  std::size_t num_actions_;
  RowMat transitions_;
  RowMat rewards_;
  std::optional<Mat> observations_;
  Vec obs_lower_;
  Vec obs_upper_;
};

/// Plain-text format: "|X| |A|", then |X| lines of |A| rewards, then
/// |X|*|A| lines (ordered by x, then a) of |X| transition probabilities.
TabularMDP read_mdp_text(std::istream& in);
TabularMDP load_mdp_text(const std::filesystem::path& path);
void write_mdp_text(std::ostream& out, const TabularMDP& mdp);

/// Six-state chain: "left" drifts to a small reward at state 0, "right"
/// pushes stochastically toward a large reward at state 5.
TabularMDP riverswim_fixture();
/// 4 x 4 grid with slippery moves; reaching the far corner pays 1 and resets to the start corner.
TabularMDP gridworld_fixture();
TabularMDP fixture_by_name(const std::string& name);

/// Per-state action distributions, |X| x |A|.
using PolicyTable = RowMat;

struct StationaryAnalysis {
  Vec mu;      ///< stationary state distribution
  RowMat nu;   ///< stationary state-action distribution
  double J = 0.0;
  RowMat Q;
  Vec V;       ///< normalized so that <mu, V> = 0
  RowMat A;    ///< Q - V
};

/// Exact evaluation of a stationary policy. Throws when the induced chain has
/// no unique stationary distribution.
StationaryAnalysis solve_policy(const TabularMDP& mdp, const PolicyTable& policy);

struct OptimalSolution {
  double J_star = 0.0;
  std::vector<std::size_t> greedy_policy;
  Vec bias;
  int iterations = 0;
};

/// Relative value iteration on the aperiodicity-transformed MDP with
/// span-seminorm stopping.
OptimalSolution solve_optimal(const TabularMDP& mdp, double span_tol = 1e-10, int max_iterations = 1000000);

PolicyTable deterministic_policy_table(const std::vector<std::size_t>& actions, std::size_t num_actions);

// ---------------------------------------------------------------- trajectories

struct Transition {
  std::size_t state = 0;
  std::size_t action = 0;
  double reward = 0.0;
  std::size_t next_state = 0;
};

using Trajectory = std::vector<Transition>;

// ---------------------------------------------------------------- Monte-Carlo evaluation

enum class EvalMode { kTabularEmpirical, kLeastSquares };

/// Differential returns sum r_s - J_hat over a window of this many steps,
/// cut short at the trajectory end.
inline constexpr std::size_t kDefaultReturnHorizon = 200;

/// Tabular estimates from one trajectory.
///
/// J_hat is the mean reward. V_hat(x) is the mean differential return
/// (sum of r_s - J_hat over the `horizon` steps starting at the visit) over
/// visits to x, shifted so its visit-weighted mean is zero. Q_hat(x, a) is the mean of
/// r_t + V_hat(x_{t+1}) over visits to (x, a); unvisited pairs get 0.
struct TabularEstimate {
  double J_hat = 0.0;
  RowMat Q;
  Vec V;
  Eigen::MatrixXi visits;
};

TabularEstimate mc_policy_eval_tabular(const Trajectory& trajectory, std::size_t num_states, std::size_t num_actions,
                                       std::size_t horizon = kDefaultReturnHorizon);

/// Linear Q model q(x, a) = w_a . phi(x) fitted by ridge regression to the
/// targets from differential_targets. With `previous` set the ridge
/// term pulls toward the previous weights instead of zero.
struct LinearQModel {
  RowMat weights;  ///< |A| x d
  double J_hat = 0.0;

  Vec predict(const Vec& features) const { return weights * features; }
  Mat predict_all(const Mat& features) const { return features * weights.transpose(); }
};

inline constexpr double kRidge = 1e-8;

LinearQModel fit_linear_q(const Mat& features, const std::vector<std::size_t>& actions, const Vec& targets,
                          std::size_t num_actions, const LinearQModel* previous = nullptr, double ridge = kRidge);

/// Regression targets r_t + sum_{s=t+1}^{t+H-1} (r_s - J_hat) for a reward
/// sequence, the window cut short at the end.
Vec differential_targets(const Vec& rewards, std::size_t horizon = kDefaultReturnHorizon);

/// Q estimates for every (state, action) of a tabular MDP. Least-squares mode
/// needs `state_features` (|X| x d); `warm_start` seeds and receives the fit.
RowMat mc_policy_eval(const Trajectory& trajectory, EvalMode mode, std::size_t num_states, std::size_t num_actions,
                      const Mat* state_features = nullptr, LinearQModel* warm_start = nullptr,
                      std::size_t horizon = kDefaultReturnHorizon);

}  // namespace klapi::envs
