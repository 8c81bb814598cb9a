#include "klapi/api_loop.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace klapi::api {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

constexpr std::uint64_t kInitSalt = 0x1217;

LossKind loss_kind(ImprovementKind kind) {
  switch (kind) {
    case ImprovementKind::kCpo: return LossKind::kCpo;
    case ImprovementKind::kMdpo: return LossKind::kMdpo;
    case ImprovementKind::kSurrogate: return LossKind::kSurrogate;
    case ImprovementKind::kVmpo: return LossKind::kVmpo;
    case ImprovementKind::kExactMd: break;
  }
  throw std::invalid_argument("ExactMD has no loss");
}

Mat with_bias(const Mat& x) {
  Mat out(x.rows(), x.cols() + 1);
  out.leftCols(x.cols()) = x;
  out.col(x.cols()).setOnes();
  return out;
}

/// Feature rows of every state (tabular environments).
const Mat& all_state_features(const Environment& env) {
  static const Mat kBanditFeatures = Mat::Ones(1, 1);
  if (const auto* m = std::get_if<MdpEnvironment>(&env)) return m->state_features();
  if (std::holds_alternative<GaussianBanditEnvironment>(env)) return kBanditFeatures;
  throw std::invalid_argument("the contextual bandit has no state table");
}

StateSet all_states(const Environment& env) {
  const Mat& features = all_state_features(env);
  StateSet s;
  for (Eigen::Index x = 0; x < features.rows(); ++x) s.indices.push_back(static_cast<std::size_t>(x));
  s.features = features;
  return s;
}

StateSet phase_states(const Environment& env, const PhaseDataset& data) {
  StateSet s;
  s.indices.reserve(data.size());
  for (const auto& tr : data.trajectory) s.indices.push_back(tr.state);
  if (std::holds_alternative<ContextualEnvironment>(env)) {
    s.features = data.features;
  } else {
    const Mat& table = all_state_features(env);
    s.features.resize(static_cast<Eigen::Index>(data.size()), table.cols());
    for (std::size_t t = 0; t < data.size(); ++t) {
      s.features.row(static_cast<Eigen::Index>(t)) = table.row(static_cast<Eigen::Index>(s.indices[t]));
    }
  }
  return s;
}

Mat centered_advantages(const Mat& q, const Mat& probs) {
  const Vec baseline = (q.array() * probs.array()).rowwise().sum();
  return q.colwise() - baseline;
}

}  // namespace

// ---------------------------------------------------------------- names

std::string to_string(ImprovementKind kind) {
  switch (kind) {
    case ImprovementKind::kCpo: return "CPO";
    case ImprovementKind::kMdpo: return "MDPO";
    case ImprovementKind::kSurrogate: return "Surrogate";
    case ImprovementKind::kVmpo: return "VMPO";
    case ImprovementKind::kExactMd: return "ExactMD";
  }
  return "unknown";
}

ImprovementKind parse_improvement_kind(const std::string& name) {
  if (name == "ExactMD" || name == "exactmd" || name == "exact-md") return ImprovementKind::kExactMd;
  switch (parse_loss_kind(name)) {
    case LossKind::kCpo: return ImprovementKind::kCpo;
    case LossKind::kMdpo: return ImprovementKind::kMdpo;
    case LossKind::kSurrogate: return ImprovementKind::kSurrogate;
    case LossKind::kVmpo: return ImprovementKind::kVmpo;
  }
  throw std::invalid_argument("unknown improvement kind: " + name);
}

std::string to_string(Evaluation mode) {
  switch (mode) {
    case Evaluation::kTabularEmpirical: return "tabular";
    case Evaluation::kLeastSquares: return "least-squares";
    case Evaluation::kOracle: return "oracle";
  }
  return "unknown";
}

Evaluation parse_evaluation(const std::string& name) {
  if (name == "tabular") return Evaluation::kTabularEmpirical;
  if (name == "least-squares" || name == "ls") return Evaluation::kLeastSquares;
  if (name == "oracle") return Evaluation::kOracle;
  throw std::invalid_argument("unknown evaluation mode: " + name);
}

std::string to_string(FeatureMap map) { return map == FeatureMap::kRaw ? "raw" : "fourier"; }

FeatureMap parse_feature_map(const std::string& name) {
  if (name == "raw") return FeatureMap::kRaw;
  if (name == "fourier") return FeatureMap::kFourier;
  throw std::invalid_argument("unknown feature map: " + name);
}

void ApiConfig::validate() const {
  if (tau < 1) throw std::invalid_argument("ApiConfig: tau must be >= 1");
  if (phases < 1) throw std::invalid_argument("ApiConfig: phases must be >= 1");
  if (!(eta > 0.0) || !std::isfinite(eta)) throw std::invalid_argument("ApiConfig: eta must be positive");
  if (policy_steps < 1) throw std::invalid_argument("ApiConfig: policy_steps must be >= 1");
  if (!(optimizer.learning_rate > 0.0)) throw std::invalid_argument("ApiConfig: learning rate must be positive");
}

// ---------------------------------------------------------------- environments

MdpEnvironment::MdpEnvironment(envs::TabularMDP mdp, FeatureMap map, int fourier_order) : mdp_(std::move(mdp)) {
  const auto n = static_cast<Eigen::Index>(mdp_.num_states());
  const auto& obs = mdp_.observations();
  if (!obs) {
    if (map == FeatureMap::kFourier) throw std::invalid_argument("Fourier features need declared observations");
    features_ = Mat::Identity(n, n);
    return;
  }
  const Vec& lo = mdp_.observation_lower();
  const Vec& hi = mdp_.observation_upper();
  if (map == FeatureMap::kFourier) {
    const envs::FourierBasis basis(lo, hi, fourier_order);
    features_.resize(n, static_cast<Eigen::Index>(basis.size()));
    for (Eigen::Index x = 0; x < n; ++x) features_.row(x) = basis(obs->row(x).transpose()).transpose();
  } else {
    Mat scaled(n, obs->cols());
    for (Eigen::Index x = 0; x < n; ++x) {
      scaled.row(x) = (obs->row(x) - lo.transpose()).cwiseQuotient((hi - lo).transpose()).cwiseMax(0.0).cwiseMin(1.0);
    }
    features_ = with_bias(scaled);
  }
}

std::size_t num_states(const Environment& env) {
  return std::visit(Overloaded{[](const MdpEnvironment& e) { return e.mdp().num_states(); },
                               [](const ContextualEnvironment&) { return std::size_t{0}; },
                               [](const GaussianBanditEnvironment&) { return std::size_t{1}; }},
                    env);
}

std::size_t num_actions(const Environment& env) {
  return std::visit(Overloaded{[](const MdpEnvironment& e) { return e.mdp().num_actions(); },
                               [](const ContextualEnvironment& e) { return e.env().num_classes(); },
                               [](const GaussianBanditEnvironment&) { return std::size_t{2}; }},
                    env);
}

std::size_t feature_dim(const Environment& env) {
  return std::visit(Overloaded{[](const MdpEnvironment& e) { return static_cast<std::size_t>(e.state_features().cols()); },
                               [](const ContextualEnvironment& e) { return e.feature_dim(); },
                               [](const GaussianBanditEnvironment&) { return std::size_t{1}; }},
                    env);
}

double PhaseDataset::average_reward() const {
  if (trajectory.empty()) return 0.0;
  double total = 0.0;
  for (const auto& tr : trajectory) total += tr.reward;
  return total / static_cast<double>(trajectory.size());
}

// ---------------------------------------------------------------- collect

PhaseDataset collect_data(const Environment& env, const SoftmaxPolicy& policy, int tau, RngStream& rng,
                          std::size_t start_state) {
  if (tau < 1) throw std::invalid_argument("collect_data: tau must be >= 1");
  if (klapi::num_actions(policy) != num_actions(env)) {
    throw std::invalid_argument("collect_data: policy and environment disagree on the action count");
  }
  PhaseDataset data;
  data.trajectory.reserve(static_cast<std::size_t>(tau));
  data.behavior_probs.reserve(static_cast<std::size_t>(tau));

  if (const auto* ctx = std::get_if<ContextualEnvironment>(&env)) {
    // Contexts do not depend on actions: draw them all, then act on the batch.
    Mat raw(tau, static_cast<Eigen::Index>(ctx->env().dim()));
    data.labels.resize(static_cast<std::size_t>(tau));
    for (int t = 0; t < tau; ++t) {
      envs::LabeledContext c = ctx->env().sample(rng);
      raw.row(t) = c.features.transpose();
      data.labels[static_cast<std::size_t>(t)] = c.label;
    }
    data.features = with_bias(raw);
    const Mat probs = action_probs(policy, StateSet::from_features(data.features));
    for (int t = 0; t < tau; ++t) {
      const std::size_t a = sample_from(ProbVec::normalized(probs.row(t).transpose()), rng);
      const double r = a == data.labels[static_cast<std::size_t>(t)] ? 1.0 : 0.0;
      data.trajectory.push_back({0, a, r, 0});
      data.behavior_probs.push_back(probs(t, static_cast<Eigen::Index>(a)));
    }
    return data;
  }

  if (start_state >= num_states(env)) throw std::out_of_range("collect_data: start state out of range");
  // The policy is fixed within a phase, so one table covers every step.
  const Mat probs = action_probs(policy, all_states(env));
  std::vector<ProbVec> dists;
  for (Eigen::Index x = 0; x < probs.rows(); ++x) dists.push_back(ProbVec::normalized(probs.row(x).transpose()));

  if (const auto* b = std::get_if<GaussianBanditEnvironment>(&env)) {
    for (int t = 0; t < tau; ++t) {
      const std::size_t a = sample_from(dists[0], rng);
      const double r = bandit::pull_arm(b->instance, static_cast<int>(a), rng);
      data.trajectory.push_back({0, a, r, 0});
      data.behavior_probs.push_back(dists[0][a]);
    }
    return data;
  }

  const auto& mdp = std::get<MdpEnvironment>(env).mdp();
  std::size_t x = start_state;
  for (int t = 0; t < tau; ++t) {
    const std::size_t a = sample_from(dists[x], rng);
    const std::size_t next = mdp.sample_next(x, a, rng);
    data.trajectory.push_back({x, a, mdp.reward(x, a), next});
    data.behavior_probs.push_back(dists[x][a]);
    x = next;
  }
  data.final_state = x;
  return data;
}

// ---------------------------------------------------------------- evaluate

EvaluationResult policy_evaluation(const Environment& env, const PhaseDataset& data, const SoftmaxPolicy& pi_k,
                                   const ApiConfig& config, envs::LinearQModel* warm_start) {
  if (data.size() == 0) throw std::invalid_argument("policy_evaluation: empty dataset");
  const std::size_t n_actions = num_actions(env);
  const auto T = static_cast<Eigen::Index>(data.size());
  StateSet states = phase_states(env, data);
  Mat q_rows(T, static_cast<Eigen::Index>(n_actions));
  std::optional<RowMat> table;

  if (std::holds_alternative<ContextualEnvironment>(env)) {
    if (config.evaluation == Evaluation::kOracle) {
      q_rows.setZero();
      for (Eigen::Index t = 0; t < T; ++t) q_rows(t, static_cast<Eigen::Index>(data.labels[static_cast<std::size_t>(t)])) = 1.0;
    } else if (config.evaluation == Evaluation::kLeastSquares) {
      std::vector<std::size_t> actions(data.size());
      Vec rewards(T);
      for (Eigen::Index t = 0; t < T; ++t) {
        actions[static_cast<std::size_t>(t)] = data.trajectory[static_cast<std::size_t>(t)].action;
        rewards[t] = data.trajectory[static_cast<std::size_t>(t)].reward;
      }
      const bool warm = warm_start && warm_start->weights.size() > 0;
      const envs::LinearQModel model =
          envs::fit_linear_q(data.features, actions, rewards, n_actions, warm ? warm_start : nullptr);
      if (warm_start) *warm_start = model;
      q_rows = model.predict_all(data.features);
    } else {
      throw std::invalid_argument("policy_evaluation: the contextual bandit needs least-squares or oracle evaluation");
    }
  } else {
    if (config.evaluation == Evaluation::kOracle) {
      throw std::invalid_argument("policy_evaluation: oracle evaluation is defined for the contextual bandit only");
    }
    const envs::EvalMode mode = config.evaluation == Evaluation::kLeastSquares ? envs::EvalMode::kLeastSquares
                                                                                : envs::EvalMode::kTabularEmpirical;
    const Mat& features = all_state_features(env);
    const RowMat q_table =
        envs::mc_policy_eval(data.trajectory, mode, num_states(env), n_actions, &features, warm_start);
    for (Eigen::Index t = 0; t < T; ++t) q_rows.row(t) = q_table.row(static_cast<Eigen::Index>(states.indices[static_cast<std::size_t>(t)]));
    const Mat table_probs = action_probs(pi_k, all_states(env));
    table = RowMat(centered_advantages(q_table, table_probs));
  }

  const Mat adv = centered_advantages(q_rows, action_probs(pi_k, states));
  if (config.kind == ImprovementKind::kCpo) {
    std::vector<std::size_t> actions(data.size());
    Vec sampled(T);
    Vec behavior(T);
    for (Eigen::Index t = 0; t < T; ++t) {
      const std::size_t a = data.trajectory[static_cast<std::size_t>(t)].action;
      actions[static_cast<std::size_t>(t)] = a;
      sampled[t] = adv(t, static_cast<Eigen::Index>(a));
      behavior[t] = data.behavior_probs[static_cast<std::size_t>(t)];
    }
    return {ImprovementBatch::sampled(std::move(states), std::move(actions), std::move(sampled), std::move(behavior)),
            std::move(table)};
  }
  return {ImprovementBatch::all_actions(std::move(states), adv), std::move(table)};
}

// ---------------------------------------------------------------- loop

SoftmaxPolicy initial_policy(const Environment& env, const ApiConfig& config) {
  const std::size_t n_actions = num_actions(env);
  switch (config.policy.kind) {
    case PolicyKind::kTabular: {
      const std::size_t n_states = num_states(env);
      if (n_states == 0) throw std::invalid_argument("tabular policies need a finite state set");
      return TabularSoftmaxPolicy(n_states, n_actions);
    }
    case PolicyKind::kLogLinear: return LogLinearSoftmaxPolicy(n_actions, feature_dim(env));
    case PolicyKind::kMlp: {
      std::vector<std::size_t> sizes{feature_dim(env)};
      sizes.insert(sizes.end(), config.policy.hidden.begin(), config.policy.hidden.end());
      sizes.push_back(n_actions);
      RngStream init(RngStream::mix_seed(config.seed, kInitSalt));
      const MlpSoftmaxPolicy random = MlpSoftmaxPolicy::glorot(sizes, init);
      // Zero output layer: uniform policy, trainable hidden layers.
      Vec params = random.params();
      const std::size_t tail = n_actions * (sizes[sizes.size() - 2] + 1);
      params.tail(static_cast<Eigen::Index>(tail)).setZero();
      return random.with_params(std::move(params));
    }
  }
  throw std::invalid_argument("initial_policy: unknown policy kind");
}

ApiRun run_api(const Environment& env, const ApiConfig& config) {
  config.validate();
  if (config.kind == ImprovementKind::kExactMd && config.policy.kind != PolicyKind::kTabular) {
    throw std::invalid_argument("ExactMD requires a tabular policy");
  }
  const bool contextual = std::holds_alternative<ContextualEnvironment>(env);

  ApiRun run{{}, initial_policy(env, config)};
  RngStream rng(config.seed);
  envs::LinearQModel value_weights;
  std::size_t state = 0;

  for (int k = 1; k <= config.phases; ++k) {
    const auto started = std::chrono::steady_clock::now();
    const PhaseDataset data = collect_data(env, run.final_policy, config.tau, rng, state);
    state = data.final_state;
    envs::LinearQModel* warm = config.evaluation == Evaluation::kLeastSquares ? &value_weights : nullptr;
    const EvaluationResult eval = policy_evaluation(env, data, run.final_policy, config, warm);

    ImprovementResult improved{run.final_policy, {}};
    if (config.kind == ImprovementKind::kExactMd) {
      const auto& tab = std::get<TabularSoftmaxPolicy>(run.final_policy);
      improved.policy = exact_md_update(tab, *eval.advantage_table, config.eta);
      improved.report.final_loss = loss_mdpo(eval.batch, improved.policy, run.final_policy, config.eta).loss;
      improved.report.kl_prev_new = empirical_kl(run.final_policy, improved.policy, eval.batch.states(), KlDirection::kAB);
      improved.report.kl_new_prev = empirical_kl(run.final_policy, improved.policy, eval.batch.states(), KlDirection::kBA);
    } else if (config.kind == ImprovementKind::kCpo) {
      improved = improve_cpo(eval.batch, run.final_policy, config.eta, config.optimizer, config.policy_steps);
    } else {
      improved = improve_regularized(eval.batch, run.final_policy, config.eta, loss_kind(config.kind), config.optimizer,
                                     config.policy_steps);
    }

    PhaseLog log;
    log.k = k;
    log.average_reward = data.average_reward();
    for (const auto& tr : data.trajectory) log.reward_sum += tr.reward;
    log.report = improved.report;
    log.kl_prev_new = improved.report.kl_prev_new;
    log.kl_new_prev = improved.report.kl_new_prev;
    log.log_loss = std::numeric_limits<double>::quiet_NaN();
    if (contextual) {
      const Mat log_p = log_softmax_rows(activations(improved.policy, eval.batch.states()));
      double total = 0.0;
      for (std::size_t t = 0; t < data.labels.size(); ++t) {
        total -= log_p(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(data.labels[t]));
      }
      log.log_loss = total / static_cast<double>(data.labels.size());
    }
    run.final_policy = std::move(improved.policy);
    log.duration_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    run.logs.push_back(log);
  }
  return run;
}

}  // namespace klapi::api
