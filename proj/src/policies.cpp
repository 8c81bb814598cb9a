#include "klapi/policies.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <limits>
#include <ostream>
#include <stdexcept>

namespace klapi {

namespace {

using ConstRowMap = Eigen::Map<const RowMat>;

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

void require_features(const StateSet& states, std::size_t dim, const char* who) {
  if (static_cast<std::size_t>(states.features.cols()) != dim) {
    throw std::invalid_argument(std::string(who) + ": feature dimension " +
                                std::to_string(states.features.cols()) + " does not match policy dimension " +
                                std::to_string(dim));
  }
}

void require_grad_shape(const StateSet& states, const Mat& g, std::size_t actions, const char* who) {
  if (static_cast<std::size_t>(g.rows()) != states.size() || static_cast<std::size_t>(g.cols()) != actions) {
    throw std::invalid_argument(std::string(who) + ": activation gradient has wrong shape");
  }
}

}  // namespace

// ---------------------------------------------------------------- StateSet

StateSet StateSet::from_indices(std::vector<std::size_t> indices) {
  StateSet s;
  s.features = Mat(static_cast<Eigen::Index>(indices.size()), 0);
  s.indices = std::move(indices);
  return s;
}

StateSet StateSet::from_features(Mat features) {
  StateSet s;
  s.features = std::move(features);
  return s;
}

StateSet StateSet::single(const Observation& obs) {
  StateSet s;
  s.indices = {obs.index};
  s.features = obs.features.transpose();
  return s;
}

std::size_t StateSet::size() const {
  const auto rows = static_cast<std::size_t>(features.rows());
  if (!indices.empty() && features.cols() > 0 && rows != indices.size()) {
    throw std::logic_error("StateSet: index and feature counts disagree");
  }
  return indices.empty() ? rows : indices.size();
}

Observation StateSet::at(std::size_t i) const {
  Observation obs;
  if (!indices.empty()) obs.index = indices.at(i);
  if (features.cols() > 0) obs.features = features.row(static_cast<Eigen::Index>(i)).transpose();
  return obs;
}

StateSet StateSet::subset(const std::vector<std::size_t>& rows) const {
  StateSet out;
  out.features = Mat(static_cast<Eigen::Index>(rows.size()), features.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (!indices.empty()) out.indices.push_back(indices.at(rows[k]));
    if (features.cols() > 0) out.features.row(static_cast<Eigen::Index>(k)) = features.row(static_cast<Eigen::Index>(rows[k]));
  }
  return out;
}

// ---------------------------------------------------------------- tabular

TabularSoftmaxPolicy::TabularSoftmaxPolicy(std::size_t num_states, std::size_t num_actions)
    : num_states_(num_states), num_actions_(num_actions),
      params_(Vec::Zero(static_cast<Eigen::Index>(num_states * num_actions))) {
  if (num_states == 0 || num_actions == 0) throw std::invalid_argument("TabularSoftmaxPolicy: empty table");
}

TabularSoftmaxPolicy::TabularSoftmaxPolicy(const RowMat& logits)
    : TabularSoftmaxPolicy(static_cast<std::size_t>(logits.rows()), static_cast<std::size_t>(logits.cols())) {
  params_ = Eigen::Map<const Vec>(logits.data(), logits.size());
}

TabularSoftmaxPolicy TabularSoftmaxPolicy::with_params(Vec params) const {
  if (params.size() != params_.size()) throw std::invalid_argument("TabularSoftmaxPolicy: parameter count mismatch");
  TabularSoftmaxPolicy out = *this;
  out.params_ = std::move(params);
  return out;
}

RowMat TabularSoftmaxPolicy::logits() const {
  return ConstRowMap(params_.data(), static_cast<Eigen::Index>(num_states_), static_cast<Eigen::Index>(num_actions_));
}

Mat TabularSoftmaxPolicy::activations(const StateSet& states) const {
  const ConstRowMap table(params_.data(), static_cast<Eigen::Index>(num_states_), static_cast<Eigen::Index>(num_actions_));
  const std::size_t n = states.size();
  if (states.indices.size() != n) throw std::invalid_argument("TabularSoftmaxPolicy: states carry no indices");
  Mat q(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(num_actions_));
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t x = states.indices[i];
    if (x >= num_states_) throw std::out_of_range("TabularSoftmaxPolicy: state index out of range");
    q.row(static_cast<Eigen::Index>(i)) = table.row(static_cast<Eigen::Index>(x));
  }
  return q;
}

Vec TabularSoftmaxPolicy::backprop(const StateSet& states, const Mat& g) const {
  require_grad_shape(states, g, num_actions_, "TabularSoftmaxPolicy::backprop");
  Vec grad = Vec::Zero(params_.size());
  for (std::size_t i = 0; i < states.indices.size(); ++i) {
    const std::size_t x = states.indices[i];
    if (x >= num_states_) throw std::out_of_range("TabularSoftmaxPolicy: state index out of range");
    grad.segment(static_cast<Eigen::Index>(x * num_actions_), static_cast<Eigen::Index>(num_actions_)) +=
        g.row(static_cast<Eigen::Index>(i)).transpose();
  }
  return grad;
}

// ---------------------------------------------------------------- log-linear

LogLinearSoftmaxPolicy::LogLinearSoftmaxPolicy(std::size_t num_actions, std::size_t feature_dim)
    : num_actions_(num_actions), feature_dim_(feature_dim),
      params_(Vec::Zero(static_cast<Eigen::Index>(num_actions * feature_dim))) {
  if (num_actions == 0 || feature_dim == 0) throw std::invalid_argument("LogLinearSoftmaxPolicy: empty parameter");
}

LogLinearSoftmaxPolicy::LogLinearSoftmaxPolicy(const RowMat& theta)
    : LogLinearSoftmaxPolicy(static_cast<std::size_t>(theta.rows()), static_cast<std::size_t>(theta.cols())) {
  params_ = Eigen::Map<const Vec>(theta.data(), theta.size());
}

LogLinearSoftmaxPolicy LogLinearSoftmaxPolicy::with_params(Vec params) const {
  if (params.size() != params_.size()) throw std::invalid_argument("LogLinearSoftmaxPolicy: parameter count mismatch");
  LogLinearSoftmaxPolicy out = *this;
  out.params_ = std::move(params);
  return out;
}

RowMat LogLinearSoftmaxPolicy::theta() const {
  return ConstRowMap(params_.data(), static_cast<Eigen::Index>(num_actions_), static_cast<Eigen::Index>(feature_dim_));
}

Mat LogLinearSoftmaxPolicy::activations(const StateSet& states) const {
  require_features(states, feature_dim_, "LogLinearSoftmaxPolicy");
  const ConstRowMap theta(params_.data(), static_cast<Eigen::Index>(num_actions_), static_cast<Eigen::Index>(feature_dim_));
  return states.features * theta.transpose();
}

Vec LogLinearSoftmaxPolicy::backprop(const StateSet& states, const Mat& g) const {
  require_features(states, feature_dim_, "LogLinearSoftmaxPolicy::backprop");
  require_grad_shape(states, g, num_actions_, "LogLinearSoftmaxPolicy::backprop");
  const RowMat grad = g.transpose() * states.features;
  return Eigen::Map<const Vec>(grad.data(), grad.size());
}

// ---------------------------------------------------------------- MLP

std::size_t MlpSoftmaxPolicy::count_params(const std::vector<std::size_t>& sizes) {
  std::size_t total = 0;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) total += sizes[l + 1] * (sizes[l] + 1);
  return total;
}

MlpSoftmaxPolicy::MlpSoftmaxPolicy(std::vector<std::size_t> layer_sizes) : layer_sizes_(std::move(layer_sizes)) {
  if (layer_sizes_.size() < 2) throw std::invalid_argument("MlpSoftmaxPolicy: need input and output sizes");
  if (std::any_of(layer_sizes_.begin(), layer_sizes_.end(), [](std::size_t s) { return s == 0; })) {
    throw std::invalid_argument("MlpSoftmaxPolicy: layer sizes must be positive");
  }
  params_ = Vec::Zero(static_cast<Eigen::Index>(count_params(layer_sizes_)));
}

MlpSoftmaxPolicy MlpSoftmaxPolicy::glorot(std::vector<std::size_t> layer_sizes, RngStream& rng) {
  MlpSoftmaxPolicy policy(std::move(layer_sizes));
  for (const Layer& layer : policy.layout()) {
    const double limit = std::sqrt(6.0 / static_cast<double>(layer.in + layer.out));
    for (std::size_t i = 0; i < layer.in * layer.out; ++i) {
      policy.params_[static_cast<Eigen::Index>(layer.weight_offset + i)] = limit * (2.0 * rng.uniform() - 1.0);
    }
  }
  return policy;
}

std::vector<MlpSoftmaxPolicy::Layer> MlpSoftmaxPolicy::layout() const {
  std::vector<Layer> layers;
  std::size_t offset = 0;
  for (std::size_t l = 0; l + 1 < layer_sizes_.size(); ++l) {
    Layer layer{layer_sizes_[l], layer_sizes_[l + 1], offset, offset + layer_sizes_[l] * layer_sizes_[l + 1]};
    offset = layer.bias_offset + layer.out;
    layers.push_back(layer);
  }
  return layers;
}

MlpSoftmaxPolicy MlpSoftmaxPolicy::with_params(Vec params) const {
  if (params.size() != params_.size()) throw std::invalid_argument("MlpSoftmaxPolicy: parameter count mismatch");
  MlpSoftmaxPolicy out = *this;
  out.params_ = std::move(params);
  return out;
}

Mat MlpSoftmaxPolicy::activations(const StateSet& states) const {
  require_features(states, feature_dim(), "MlpSoftmaxPolicy");
  const auto layers = layout();
  Mat h = states.features;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const Layer& layer = layers[l];
    const ConstRowMap w(params_.data() + layer.weight_offset, static_cast<Eigen::Index>(layer.out),
                        static_cast<Eigen::Index>(layer.in));
    const Eigen::Map<const Vec> b(params_.data() + layer.bias_offset, static_cast<Eigen::Index>(layer.out));
    Mat z = h * w.transpose();
    z.rowwise() += b.transpose();
    h = (l + 1 < layers.size()) ? Mat(z.cwiseMax(0.0)) : z;
  }
  return h;
}

Vec MlpSoftmaxPolicy::backprop(const StateSet& states, const Mat& g) const {
  require_features(states, feature_dim(), "MlpSoftmaxPolicy::backprop");
  require_grad_shape(states, g, num_actions(), "MlpSoftmaxPolicy::backprop");
  const auto layers = layout();

  // Forward pass keeping each layer's input and pre-activation.
  std::vector<Mat> inputs;
  std::vector<Mat> pre;
  Mat h = states.features;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const Layer& layer = layers[l];
    const ConstRowMap w(params_.data() + layer.weight_offset, static_cast<Eigen::Index>(layer.out),
                        static_cast<Eigen::Index>(layer.in));
    const Eigen::Map<const Vec> b(params_.data() + layer.bias_offset, static_cast<Eigen::Index>(layer.out));
    inputs.push_back(h);
    Mat z = h * w.transpose();
    z.rowwise() += b.transpose();
    pre.push_back(z);
    if (l + 1 < layers.size()) h = z.cwiseMax(0.0);
  }

  Vec grad = Vec::Zero(params_.size());
  Mat delta = g;
  for (std::size_t l = layers.size(); l-- > 0;) {
    const Layer& layer = layers[l];
    const RowMat dw = delta.transpose() * inputs[l];
    grad.segment(static_cast<Eigen::Index>(layer.weight_offset), dw.size()) = Eigen::Map<const Vec>(dw.data(), dw.size());
    grad.segment(static_cast<Eigen::Index>(layer.bias_offset), static_cast<Eigen::Index>(layer.out)) =
        delta.colwise().sum().transpose();
    if (l == 0) break;
    const ConstRowMap w(params_.data() + layer.weight_offset, static_cast<Eigen::Index>(layer.out),
                        static_cast<Eigen::Index>(layer.in));
    // ReLU subgradient at zero is zero.
    delta = (delta * w).cwiseProduct((pre[l - 1].array() > 0.0).cast<double>().matrix());
  }
  return grad;
}

// ---------------------------------------------------------------- variant dispatch

PolicyKind kind_of(const SoftmaxPolicy& policy) { return static_cast<PolicyKind>(policy.index()); }

std::string to_string(PolicyKind kind) {
  switch (kind) {
    case PolicyKind::kTabular: return "tabular";
    case PolicyKind::kLogLinear: return "log-linear";
    case PolicyKind::kMlp: return "mlp";
  }
  return "unknown";
}

PolicyKind parse_policy_kind(const std::string& name) {
  if (name == "tabular") return PolicyKind::kTabular;
  if (name == "log-linear" || name == "loglinear") return PolicyKind::kLogLinear;
  if (name == "mlp") return PolicyKind::kMlp;
  throw std::invalid_argument("unknown policy kind: " + name);
}

std::size_t num_actions(const SoftmaxPolicy& policy) {
  return std::visit([](const auto& p) { return p.num_actions(); }, policy);
}

const Vec& parameters(const SoftmaxPolicy& policy) {
  return std::visit([](const auto& p) -> const Vec& { return p.params(); }, policy);
}

SoftmaxPolicy with_parameters(const SoftmaxPolicy& policy, Vec params) {
  return std::visit([&](const auto& p) -> SoftmaxPolicy { return p.with_params(std::move(params)); }, policy);
}

Mat activations(const SoftmaxPolicy& policy, const StateSet& states) {
  return std::visit([&](const auto& p) { return p.activations(states); }, policy);
}

Vec activations(const SoftmaxPolicy& policy, const Observation& obs) {
  return activations(policy, StateSet::single(obs)).row(0).transpose();
}

Mat action_probs(const SoftmaxPolicy& policy, const StateSet& states) {
  return softmax_rows(activations(policy, states));
}

ProbVec action_dist(const SoftmaxPolicy& policy, const Observation& obs) {
  return softmax(activations(policy, obs));
}

Vec backprop_from_activation_grad(const SoftmaxPolicy& policy, const StateSet& states, const Mat& activation_grad) {
  return std::visit([&](const auto& p) { return p.backprop(states, activation_grad); }, policy);
}

Vec backprop_from_activation_grad(const SoftmaxPolicy& policy, const Observation& obs, const Vec& activation_grad) {
  if (static_cast<std::size_t>(activation_grad.size()) != num_actions(policy)) {
    throw std::invalid_argument("backprop_from_activation_grad: gradient dimension must equal action count");
  }
  return backprop_from_activation_grad(policy, StateSet::single(obs), Mat(activation_grad.transpose()));
}

std::size_t sample_from(const ProbVec& dist, RngStream& rng) {
  const double u = rng.uniform();
  double cumulative = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t a = 0; a < dist.size(); ++a) {
    if (dist[a] > 0.0) last_positive = a;
    cumulative += dist[a];
    if (u < cumulative) return a;
  }
  // Rounding left u above the final partial sum.
  return last_positive;
}

std::size_t sample_action(const SoftmaxPolicy& policy, const Observation& obs, RngStream& rng) {
  return sample_from(action_dist(policy, obs), rng);
}

double mean_row_kl(const Mat& log_p, const Mat& log_q) {
  if (log_p.rows() != log_q.rows() || log_p.cols() != log_q.cols()) {
    throw std::invalid_argument("mean_row_kl: shape mismatch");
  }
  if (log_p.rows() == 0) throw std::invalid_argument("mean_row_kl: no rows");
  double total = 0.0;
  for (Eigen::Index i = 0; i < log_p.rows(); ++i) {
    double row = 0.0;
    for (Eigen::Index a = 0; a < log_p.cols(); ++a) {
      const double lp = log_p(i, a);
      if (std::isinf(lp) && lp < 0) continue;
      const double p = std::exp(lp);
      if (p == 0.0) continue;
      row += p * (lp - log_q(i, a));
    }
    total += std::max(row, 0.0);
  }
  return total / static_cast<double>(log_p.rows());
}

double empirical_kl(const SoftmaxPolicy& a, const SoftmaxPolicy& b, const StateSet& states, KlDirection direction) {
  if (states.size() == 0) throw std::invalid_argument("empirical_kl: empty state list");
  const Mat log_a = log_softmax_rows(activations(a, states));
  const Mat log_b = log_softmax_rows(activations(b, states));
  return direction == KlDirection::kAB ? mean_row_kl(log_a, log_b) : mean_row_kl(log_b, log_a);
}

// ---------------------------------------------------------------- snapshots

namespace {

constexpr char kMagic[4] = {'K', 'L', 'P', 'O'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put_le(std::ostream& out, T value) {
  unsigned char bytes[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<unsigned char>((value >> (8 * i)) & 0xFF);
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <class T>
T get_le(std::istream& in) {
  unsigned char bytes[sizeof(T)];
  in.read(reinterpret_cast<char*>(bytes), sizeof(T));
  if (!in) throw std::runtime_error("read_policy: truncated snapshot");
  T value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) value |= static_cast<T>(bytes[i]) << (8 * i);
  return value;
}

}  // namespace

void write_policy(std::ostream& out, const SoftmaxPolicy& policy) {
  std::vector<std::size_t> dims = std::visit(
      Overloaded{[](const TabularSoftmaxPolicy& p) { return std::vector<std::size_t>{p.num_states(), p.num_actions()}; },
                 [](const LogLinearSoftmaxPolicy& p) { return std::vector<std::size_t>{p.num_actions(), p.feature_dim()}; },
                 [](const MlpSoftmaxPolicy& p) { return p.layer_sizes(); }},
      policy);
  out.write(kMagic, 4);
  put_le<std::uint32_t>(out, kVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(kind_of(policy)));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(dims.size()));
  for (std::size_t d : dims) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  const Vec& params = parameters(policy);
  put_le<std::uint64_t>(out, static_cast<std::uint64_t>(params.size()));
  for (Eigen::Index i = 0; i < params.size(); ++i) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(params[i]));
}

SoftmaxPolicy read_policy(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw std::runtime_error("read_policy: bad magic");
  if (get_le<std::uint32_t>(in) != kVersion) throw std::runtime_error("read_policy: unsupported version");
  const auto kind = get_le<std::uint32_t>(in);
  const auto ndims = get_le<std::uint32_t>(in);
  if (ndims > 64) throw std::runtime_error("read_policy: implausible dimension count");
  std::vector<std::size_t> dims;
  for (std::uint32_t i = 0; i < ndims; ++i) dims.push_back(get_le<std::uint32_t>(in));
  const auto count = get_le<std::uint64_t>(in);
  if (count > (std::uint64_t{1} << 32)) throw std::runtime_error("read_policy: implausible parameter count");
  Vec params(static_cast<Eigen::Index>(count));
  for (std::uint64_t i = 0; i < count; ++i) {
    params[static_cast<Eigen::Index>(i)] = std::bit_cast<double>(get_le<std::uint64_t>(in));
  }
  auto need_two = [&] {
    if (dims.size() != 2) throw std::runtime_error("read_policy: expected two dimensions");
  };
  switch (static_cast<PolicyKind>(kind)) {
    case PolicyKind::kTabular:
      need_two();
      return TabularSoftmaxPolicy(dims[0], dims[1]).with_params(std::move(params));
    case PolicyKind::kLogLinear:
      need_two();
      return LogLinearSoftmaxPolicy(dims[0], dims[1]).with_params(std::move(params));
    case PolicyKind::kMlp:
      return MlpSoftmaxPolicy(dims).with_params(std::move(params));
  }
  throw std::runtime_error("read_policy: unknown policy kind");
}

}  // namespace klapi
