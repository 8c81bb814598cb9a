#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <variant>
#include <vector>

#include "klapi/mathcore.hpp"
#include "klapi/rng.hpp"

namespace klapi {

/// A single observation. Tabular policies read `index`, feature-based
/// policies read `features`.
struct Observation {
  std::size_t index = 0;
  Vec features;
};

/// A batch of observations stored column-wise: one index per row and one
/// feature row per observation. Either part may be empty when the consuming
/// policy does not need it.
struct StateSet {
  std::vector<std::size_t> indices;
  Mat features;  ///< N x d

  static StateSet from_indices(std::vector<std::size_t> indices);
  static StateSet from_features(Mat features);
  static StateSet single(const Observation& obs);

  std::size_t size() const;
  Observation at(std::size_t i) const;
  StateSet subset(const std::vector<std::size_t>& rows) const;
};

/// Softmax over a per-state logit table. Parameter layout: row-major
/// |X| x |A|, logit(x, a) at x * |A| + a.
class TabularSoftmaxPolicy {
public:
  TabularSoftmaxPolicy(std::size_t num_states, std::size_t num_actions);
  explicit TabularSoftmaxPolicy(const RowMat& logits);

  std::size_t num_states() const { return num_states_; }
  std::size_t num_actions() const { return num_actions_; }
  const Vec& params() const { return params_; }
  TabularSoftmaxPolicy with_params(Vec params) const;
  RowMat logits() const;

  Mat activations(const StateSet& states) const;
  Vec backprop(const StateSet& states, const Mat& activation_grad) const;

private:
  std::size_t num_states_;
  std::size_t num_actions_;
  Vec params_;
};

/// Softmax over linear activations q(x, .) = theta x. Parameter layout:
/// row-major |A| x d, theta(a, j) at a * d + j.
class LogLinearSoftmaxPolicy {
public:
  LogLinearSoftmaxPolicy(std::size_t num_actions, std::size_t feature_dim);
  explicit LogLinearSoftmaxPolicy(const RowMat& theta);

  std::size_t num_actions() const { return num_actions_; }
  std::size_t feature_dim() const { return feature_dim_; }
  const Vec& params() const { return params_; }
  LogLinearSoftmaxPolicy with_params(Vec params) const;
  RowMat theta() const;

  Mat activations(const StateSet& states) const;
  Vec backprop(const StateSet& states, const Mat& activation_grad) const;

private:
  std::size_t num_actions_;
  std::size_t feature_dim_;
  Vec params_;
};

/// Feed-forward network with ReLU hidden layers and a linear output layer
/// feeding the softmax. `layer_sizes` is {d, h_1, ..., h_m, |A|}. Parameter
/// layout: for each layer in order, the weight matrix (out x in, row-major)
/// followed by the bias vector (out).
class MlpSoftmaxPolicy {
public:
  /// All weights and biases zero.
  explicit MlpSoftmaxPolicy(std::vector<std::size_t> layer_sizes);
  /// Weights uniform in +-sqrt(6 / (fan_in + fan_out)), biases zero.
  static MlpSoftmaxPolicy glorot(std::vector<std::size_t> layer_sizes, RngStream& rng);

  const std::vector<std::size_t>& layer_sizes() const { return layer_sizes_; }
  std::size_t num_actions() const { return layer_sizes_.back(); }
  std::size_t feature_dim() const { return layer_sizes_.front(); }
  const Vec& params() const { return params_; }
  MlpSoftmaxPolicy with_params(Vec params) const;

  Mat activations(const StateSet& states) const;
  Vec backprop(const StateSet& states, const Mat& activation_grad) const;

  static std::size_t count_params(const std::vector<std::size_t>& layer_sizes);

private:
  struct Layer {
    std::size_t in;
    std::size_t out;
    std::size_t weight_offset;
    std::size_t bias_offset;
  };
  std::vector<Layer> layout() const;

  std::vector<std::size_t> layer_sizes_;
  Vec params_;
};

using SoftmaxPolicy = std::variant<TabularSoftmaxPolicy, LogLinearSoftmaxPolicy, MlpSoftmaxPolicy>;

enum class PolicyKind { kTabular = 0, kLogLinear = 1, kMlp = 2 };

PolicyKind kind_of(const SoftmaxPolicy& policy);
std::string to_string(PolicyKind kind);
PolicyKind parse_policy_kind(const std::string& name);

std::size_t num_actions(const SoftmaxPolicy& policy);
const Vec& parameters(const SoftmaxPolicy& policy);
SoftmaxPolicy with_parameters(const SoftmaxPolicy& policy, Vec params);

/// Activation table q_theta, one row per state.
Mat activations(const SoftmaxPolicy& policy, const StateSet& states);
Vec activations(const SoftmaxPolicy& policy, const Observation& obs);

/// Action probabilities, one row per state.
Mat action_probs(const SoftmaxPolicy& policy, const StateSet& states);
ProbVec action_dist(const SoftmaxPolicy& policy, const Observation& obs);

/// Chain rule from dL/dq (one row per state) to dL/dparams.
Vec backprop_from_activation_grad(const SoftmaxPolicy& policy, const StateSet& states, const Mat& activation_grad);
Vec backprop_from_activation_grad(const SoftmaxPolicy& policy, const Observation& obs, const Vec& activation_grad);

/// Inverse-CDF draw in action-index order.
std::size_t sample_from(const ProbVec& dist, RngStream& rng);
std::size_t sample_action(const SoftmaxPolicy& policy, const Observation& obs, RngStream& rng);

enum class KlDirection {
  kAB,  ///< mean KL(a || b)
  kBA,  ///< mean KL(b || a)
};

/// Mean over states of the per-state KL divergence between two policies.
double empirical_kl(const SoftmaxPolicy& a, const SoftmaxPolicy& b, const StateSet& states, KlDirection direction);

/// Row-wise KL(p_i || q_i) averaged over rows, computed from log-probabilities.
double mean_row_kl(const Mat& log_p, const Mat& log_q);

/// Snapshot format: magic "KLPO", u32 version, u32 kind, u32 dim count,
/// dims as u32, u64 parameter count, parameters as little-endian f64.
void write_policy(std::ostream& out, const SoftmaxPolicy& policy);
SoftmaxPolicy read_policy(std::istream& in);

}  // namespace klapi
