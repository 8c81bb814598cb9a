#include "klapi/objectives.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace klapi {

// ---------------------------------------------------------------- batch

ImprovementBatch ImprovementBatch::all_actions(StateSet states, Mat advantages) {
  const std::size_t n = states.size();
  if (n == 0) throw std::invalid_argument("ImprovementBatch: empty batch");
  if (static_cast<std::size_t>(advantages.rows()) != n || advantages.cols() == 0) {
    throw std::invalid_argument("ImprovementBatch: advantage table must have one row per state");
  }
  if (!advantages.allFinite()) throw std::invalid_argument("ImprovementBatch: advantages must be finite");
  ImprovementBatch b;
  b.mode_ = Mode::kAllActions;
  b.num_actions_ = static_cast<std::size_t>(advantages.cols());
  b.states_ = std::move(states);
  b.advantages_ = std::move(advantages);
  return b;
}

ImprovementBatch ImprovementBatch::sampled(StateSet states, std::vector<std::size_t> actions, Vec advantages,
                                           Vec behavior_probs) {
  const std::size_t n = states.size();
  if (n == 0) throw std::invalid_argument("ImprovementBatch: empty batch");
  if (actions.size() != n || static_cast<std::size_t>(advantages.size()) != n ||
      static_cast<std::size_t>(behavior_probs.size()) != n) {
    throw std::invalid_argument("ImprovementBatch: sampled fields must have one entry per state");
  }
  for (Eigen::Index i = 0; i < behavior_probs.size(); ++i) {
    if (!(behavior_probs[i] > 0.0 && behavior_probs[i] <= 1.0)) {
      throw std::invalid_argument("ImprovementBatch: behavior probabilities must lie in (0, 1]");
    }
  }
  ImprovementBatch b;
  b.mode_ = Mode::kSampled;
  b.states_ = std::move(states);
  b.actions_ = std::move(actions);
  b.sampled_advantages_ = std::move(advantages);
  b.behavior_probs_ = std::move(behavior_probs);
  return b;
}

const Mat& ImprovementBatch::advantages() const {
  if (mode_ != Mode::kAllActions) throw std::logic_error("ImprovementBatch: not an all-actions batch");
  return advantages_;
}

const std::vector<std::size_t>& ImprovementBatch::actions() const {
  if (mode_ != Mode::kSampled) throw std::logic_error("ImprovementBatch: not a sampled batch");
  return actions_;
}

const Vec& ImprovementBatch::sampled_advantages() const {
  if (mode_ != Mode::kSampled) throw std::logic_error("ImprovementBatch: not a sampled batch");
  return sampled_advantages_;
}

const Vec& ImprovementBatch::behavior_probs() const {
  if (mode_ != Mode::kSampled) throw std::logic_error("ImprovementBatch: not a sampled batch");
  return behavior_probs_;
}

// ---------------------------------------------------------------- names

std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::kCpo: return "CPO";
    case LossKind::kMdpo: return "MDPO";
    case LossKind::kSurrogate: return "Surrogate";
    case LossKind::kVmpo: return "VMPO";
  }
  return "unknown";
}

LossKind parse_loss_kind(const std::string& name) {
  if (name == "CPO" || name == "cpo") return LossKind::kCpo;
  if (name == "MDPO" || name == "mdpo") return LossKind::kMdpo;
  if (name == "Surrogate" || name == "surrogate") return LossKind::kSurrogate;
  if (name == "VMPO" || name == "vmpo") return LossKind::kVmpo;
  throw std::invalid_argument("unknown loss kind: " + name);
}

std::string to_string(StopReason reason) {
  switch (reason) {
    case StopReason::kMaxSteps: return "max-steps";
    case StopReason::kKlConstraint: return "kl-constraint";
    case StopReason::kConverged: return "converged";
  }
  return "unknown";
}

// ---------------------------------------------------------------- targets

ProbVec psi_target(const ProbVec& pi_k, const Vec& adv_row, double eta) {
  if (static_cast<std::size_t>(adv_row.size()) != pi_k.size()) throw std::invalid_argument("psi_target: dimension mismatch");
  if (!(eta >= 0.0)) throw std::invalid_argument("psi_target: eta must be nonnegative");
  const auto n = adv_row.size();
  Vec log_w(n);
  double max_log = -std::numeric_limits<double>::infinity();
  for (Eigen::Index a = 0; a < n; ++a) {
    const double p = pi_k[static_cast<std::size_t>(a)];
    log_w[a] = p > 0.0 ? std::log(p) + eta * adv_row[a] : -std::numeric_limits<double>::infinity();
    max_log = std::max(max_log, log_w[a]);
  }
  Vec w(n);
  for (Eigen::Index a = 0; a < n; ++a) w[a] = std::isinf(log_w[a]) ? 0.0 : std::exp(log_w[a] - max_log);
  return ProbVec::normalized(w);
}

Mat log_psi_rows(const Mat& snapshot_activations, const Mat& advantages, double eta) {
  return log_softmax_rows(snapshot_activations + eta * advantages);
}

namespace {

void require_all_actions(const ImprovementBatch& batch, const SoftmaxPolicy& policy, const char* who) {
  if (batch.mode() != ImprovementBatch::Mode::kAllActions) {
    throw std::invalid_argument(std::string(who) + ": requires an all-actions batch");
  }
  if (batch.num_actions() != num_actions(policy)) throw std::invalid_argument(std::string(who) + ": action count mismatch");
}

void require_eta(double eta, const char* who) {
  if (!(eta > 0.0)) throw std::invalid_argument(std::string(who) + ": eta must be positive");
}

}  // namespace

// ---------------------------------------------------------------- losses

LossValue loss_cpo(const ImprovementBatch& batch, const SoftmaxPolicy& policy, const SoftmaxPolicy& /*snapshot*/) {
  const Mat probs = action_probs(policy, batch.states());
  const auto n = static_cast<double>(batch.size());
  Mat g = Mat::Zero(probs.rows(), probs.cols());
  double loss = 0.0;

  if (batch.mode() == ImprovementBatch::Mode::kAllActions) {
    if (batch.num_actions() != num_actions(policy)) throw std::invalid_argument("loss_cpo: action count mismatch");
    const Mat& adv = batch.advantages();
    for (Eigen::Index i = 0; i < probs.rows(); ++i) {
      const double expected = probs.row(i).dot(adv.row(i));
      loss -= expected;
      g.row(i) = -(probs.row(i).array() * (adv.row(i).array() - expected)) / n;
    }
  } else {
    const auto& actions = batch.actions();
    const Vec& adv = batch.sampled_advantages();
    const Vec& behavior = batch.behavior_probs();
    for (Eigen::Index i = 0; i < probs.rows(); ++i) {
      const auto a = static_cast<Eigen::Index>(actions[static_cast<std::size_t>(i)]);
      if (a >= probs.cols()) throw std::out_of_range("loss_cpo: action index out of range");
      if (!(behavior[i] > 0.0)) throw std::invalid_argument("loss_cpo: behavior probability must be positive");
      const double scale = adv[i] / behavior[i];
      const double p_a = probs(i, a);
      loss -= scale * p_a;
      g.row(i) = scale * p_a * probs.row(i) / n;
      g(i, a) -= scale * p_a / n;
    }
  }
  return {loss / n, backprop_from_activation_grad(policy, batch.states(), g)};
}

LossValue loss_mdpo(const ImprovementBatch& batch, const SoftmaxPolicy& policy, const SoftmaxPolicy& snapshot,
                    double eta) {
  require_all_actions(batch, policy, "loss_mdpo");
  require_eta(eta, "loss_mdpo");
  const Mat log_p = log_softmax_rows(activations(policy, batch.states()));
  const Mat log_k = log_softmax_rows(activations(snapshot, batch.states()));
  const Mat& adv = batch.advantages();
  const auto n = static_cast<double>(batch.size());
  Mat g(log_p.rows(), log_p.cols());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < log_p.rows(); ++i) {
    const Eigen::RowVectorXd p = log_p.row(i).array().exp();
    const Eigen::RowVectorXd ratio = log_p.row(i) - log_k.row(i);
    const double expected = p.dot(adv.row(i));
    const double kl = p.dot(ratio);
    loss += -expected + kl / eta;
    g.row(i) = (-(p.array() * (adv.row(i).array() - expected)) + (p.array() * (ratio.array() - kl)) / eta) / n;
  }
  return {loss / n, backprop_from_activation_grad(policy, batch.states(), g)};
}

double mdpo_kl_form(const ImprovementBatch& batch, const SoftmaxPolicy& policy, const SoftmaxPolicy& snapshot,
                    double eta) {
  require_all_actions(batch, policy, "mdpo_kl_form");
  require_eta(eta, "mdpo_kl_form");
  const Mat log_p = log_softmax_rows(activations(policy, batch.states()));
  const Mat log_psi = log_psi_rows(activations(snapshot, batch.states()), batch.advantages(), eta);
  return mean_row_kl(log_p, log_psi);
}

double mdpo_kl_form_offset(const ImprovementBatch& batch, const SoftmaxPolicy& snapshot, double eta) {
  require_all_actions(batch, snapshot, "mdpo_kl_form_offset");
  require_eta(eta, "mdpo_kl_form_offset");
  const Mat tilted = log_softmax_rows(activations(snapshot, batch.states())) + eta * batch.advantages();
  double total = 0.0;
  for (Eigen::Index i = 0; i < tilted.rows(); ++i) total += log_sum_exp(tilted.row(i).transpose());
  return total / (eta * static_cast<double>(tilted.rows()));
}

LossValue loss_surrogate(const ImprovementBatch& batch, const SoftmaxPolicy& policy, const SoftmaxPolicy& snapshot,
                         double eta) {
  require_all_actions(batch, policy, "loss_surrogate");
  require_eta(eta, "loss_surrogate");
  const Mat q = activations(policy, batch.states());
  const Mat target = activations(snapshot, batch.states()) + eta * batch.advantages();
  const Mat log_p = log_softmax_rows(q);
  const Mat log_psi = log_softmax_rows(target);
  const auto n = static_cast<double>(batch.size());
  Mat g(q.rows(), q.cols());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    const Eigen::RowVectorXd psi = log_psi.row(i).array().exp();
    const Eigen::RowVectorXd p = log_p.row(i).array().exp();
    Eigen::RowVectorXd residual = target.row(i) - q.row(i);
    residual.array() -= residual.mean();  // optimal baseline v(x)
    loss += psi.dot(log_psi.row(i) - log_p.row(i)) + 0.25 * residual.squaredNorm();
    g.row(i) = (p - psi - 0.5 * residual) / n;
  }
  return {loss / n, backprop_from_activation_grad(policy, batch.states(), g)};
}

LossValue loss_vmpo(const ImprovementBatch& batch, const SoftmaxPolicy& policy, const SoftmaxPolicy& snapshot,
                    double eta) {
  require_all_actions(batch, policy, "loss_vmpo");
  require_eta(eta, "loss_vmpo");
  const Mat log_p = log_softmax_rows(activations(policy, batch.states()));
  const Mat psi = log_psi_rows(activations(snapshot, batch.states()), batch.advantages(), eta).array().exp();
  const auto n = static_cast<double>(batch.size());
  const double loss = -(psi.array() * log_p.array()).sum() / n;
  const Mat g = (log_p.array().exp().matrix() - psi) / n;
  return {loss, backprop_from_activation_grad(policy, batch.states(), g)};
}

LossValue evaluate_loss(LossKind kind, const ImprovementBatch& batch, const SoftmaxPolicy& policy,
                        const SoftmaxPolicy& snapshot, double eta) {
  switch (kind) {
    case LossKind::kCpo: return loss_cpo(batch, policy, snapshot);
    case LossKind::kMdpo: return loss_mdpo(batch, policy, snapshot, eta);
    case LossKind::kSurrogate: return loss_surrogate(batch, policy, snapshot, eta);
    case LossKind::kVmpo: return loss_vmpo(batch, policy, snapshot, eta);
  }
  throw std::invalid_argument("evaluate_loss: unknown kind");
}

// ---------------------------------------------------------------- updates

TabularSoftmaxPolicy exact_md_update(const TabularSoftmaxPolicy& pi_k, const RowMat& adv, double eta) {
  if (static_cast<std::size_t>(adv.rows()) != pi_k.num_states() ||
      static_cast<std::size_t>(adv.cols()) != pi_k.num_actions()) {
    throw std::invalid_argument("exact_md_update: advantage table must be |X| x |A|");
  }
  const Eigen::Map<const Vec> flat(adv.data(), adv.size());
  return pi_k.with_params(pi_k.params() + eta * flat);
}

namespace {

AdamState make_adam(const OptimizerConfig& config, Eigen::Index dim) {
  AdamState s = AdamState::for_dimension(dim, config.learning_rate);
  s.beta1 = config.beta1;
  s.beta2 = config.beta2;
  s.epsilon = config.epsilon;
  return s;
}

void fill_kls(ImprovementReport& report, const SoftmaxPolicy& pi_k, const SoftmaxPolicy& pi_new, const StateSet& states) {
  report.kl_prev_new = empirical_kl(pi_k, pi_new, states, KlDirection::kAB);
  report.kl_new_prev = empirical_kl(pi_k, pi_new, states, KlDirection::kBA);
}

}  // namespace

ImprovementResult improve_cpo(const ImprovementBatch& batch, const SoftmaxPolicy& pi_k, double eta,
                              const OptimizerConfig& optimizer, int max_steps) {
  if (max_steps < 1) throw std::invalid_argument("improve_cpo: max_steps must be >= 1");
  if (!(eta >= 0.0)) throw std::invalid_argument("improve_cpo: eta must be nonnegative");
  AdamState adam = make_adam(optimizer, parameters(pi_k).size());
  SoftmaxPolicy current = pi_k;
  ImprovementReport report;
  for (int step = 0; step < max_steps; ++step) {
    const LossValue value = loss_cpo(batch, current, pi_k);
    auto [next_adam, next_params] = adam_step(adam, parameters(current), value.grad);
    SoftmaxPolicy candidate = with_parameters(pi_k, std::move(next_params));
    if (empirical_kl(pi_k, candidate, batch.states(), KlDirection::kAB) > eta) {
      report.stop_reason = StopReason::kKlConstraint;
      break;
    }
    adam = std::move(next_adam);
    current = std::move(candidate);
    ++report.steps;
  }
  report.final_loss = loss_cpo(batch, current, pi_k).loss;
  fill_kls(report, pi_k, current, batch.states());
  return {std::move(current), report};
}

ImprovementResult improve_regularized(const ImprovementBatch& batch, const SoftmaxPolicy& pi_k, double eta,
                                      LossKind kind, const OptimizerConfig& optimizer, int n_steps) {
  if (n_steps < 1) throw std::invalid_argument("improve_regularized: n_steps must be >= 1");
  if (kind == LossKind::kCpo) throw std::invalid_argument("improve_regularized: CPO is handled by improve_cpo");
  AdamState adam = make_adam(optimizer, parameters(pi_k).size());
  SoftmaxPolicy current = pi_k;
  ImprovementReport report;
  for (int step = 0; step < n_steps; ++step) {
    const LossValue value = evaluate_loss(kind, batch, current, pi_k, eta);
    if (optimizer.grad_tolerance > 0.0 && value.grad.norm() <= optimizer.grad_tolerance) {
      report.stop_reason = StopReason::kConverged;
      break;
    }
    auto [next_adam, next_params] = adam_step(adam, parameters(current), value.grad);
    adam = std::move(next_adam);
    current = with_parameters(pi_k, std::move(next_params));
    ++report.steps;
  }
  report.final_loss = evaluate_loss(kind, batch, current, pi_k, eta).loss;
  fill_kls(report, pi_k, current, batch.states());
  return {std::move(current), report};
}

GapCheck suboptimality_gap_check(const ProbVec& candidate, const ProbVec& pi_k, const Vec& q_hat, double eta) {
  if (candidate.size() != pi_k.size() || static_cast<std::size_t>(q_hat.size()) != pi_k.size()) {
    throw std::invalid_argument("suboptimality_gap_check: dimension mismatch");
  }
  if (!(eta > 0.0)) throw std::invalid_argument("suboptimality_gap_check: eta must be positive");
  const ProbVec best = psi_target(pi_k, q_hat, eta);
  auto objective = [&](const ProbVec& p) { return eta * q_hat.dot(p.values()) - kl_divergence(p, pi_k); };
  return {objective(best) - objective(candidate), kl_divergence(candidate, best)};
}

}  // namespace klapi
