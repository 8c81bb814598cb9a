#include "klapi/checks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "klapi/objectives.hpp"
#include "klapi/policies.hpp"
#include "klapi/rng.hpp"

namespace klapi::checks {

namespace {

constexpr double kFdStep = 1e-5;

Vec normal_vec(Eigen::Index n, RngStream& rng, double scale = 1.0) {
  Vec v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = scale * rng.normal();
  return v;
}

Mat normal_mat(Eigen::Index r, Eigen::Index c, RngStream& rng, double scale = 1.0) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < r; ++i) {
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = scale * rng.normal();
  }
  return m;
}

ProbVec random_dist(std::size_t n, RngStream& rng) {
  Vec logits = normal_vec(static_cast<Eigen::Index>(n), rng, 1.5);
  return softmax(logits);
}

std::size_t between(RngStream& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng.uniform_index(hi - lo + 1));
}

struct Instance {
  SoftmaxPolicy policy;
  SoftmaxPolicy snapshot;
  StateSet states;
  std::size_t num_actions;
};

/// Random policy pair of the given kind on a random multiset of states.
Instance random_instance(PolicyKind kind, RngStream& rng) {
  const std::size_t actions = between(rng, 2, 5);
  const std::size_t n = between(rng, 1, 8);
  StateSet states;
  switch (kind) {
    case PolicyKind::kTabular: {
      const std::size_t num_states = between(rng, 1, 4);
      for (std::size_t i = 0; i < n; ++i) states.indices.push_back(rng.uniform_index(num_states));
      states.features = Mat(static_cast<Eigen::Index>(n), 0);
      const TabularSoftmaxPolicy shape(num_states, actions);
      const auto dim = shape.params().size();
      return {shape.with_params(normal_vec(dim, rng)), shape.with_params(normal_vec(dim, rng)), states, actions};
    }
    case PolicyKind::kLogLinear: {
      const std::size_t d = between(rng, 1, 4);
      states = StateSet::from_features(normal_mat(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d), rng));
      const LogLinearSoftmaxPolicy shape(actions, d);
      const auto dim = shape.params().size();
      return {shape.with_params(normal_vec(dim, rng, 0.7)), shape.with_params(normal_vec(dim, rng, 0.7)), states,
              actions};
    }
    case PolicyKind::kMlp: {
      const std::size_t d = between(rng, 1, 4);
      states = StateSet::from_features(normal_mat(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d), rng));
      const std::vector<std::size_t> sizes{d, between(rng, 2, 6), actions};
      const MlpSoftmaxPolicy a = MlpSoftmaxPolicy::glorot(sizes, rng);
      const MlpSoftmaxPolicy b = MlpSoftmaxPolicy::glorot(sizes, rng);
      // Nonzero biases keep ReLU kinks away from the probe points.
      Vec pa = a.params() + normal_vec(a.params().size(), rng, 0.1);
      Vec pb = b.params() + normal_vec(b.params().size(), rng, 0.1);
      return {a.with_params(std::move(pa)), b.with_params(std::move(pb)), states, actions};
    }
  }
  throw std::invalid_argument("random_instance: unknown policy kind");
}

ImprovementBatch random_all_actions_batch(const Instance& inst, RngStream& rng) {
  return ImprovementBatch::all_actions(
      inst.states, normal_mat(static_cast<Eigen::Index>(inst.states.size()), static_cast<Eigen::Index>(inst.num_actions), rng));
}

ImprovementBatch random_sampled_batch(const Instance& inst, RngStream& rng) {
  const std::size_t n = inst.states.size();
  std::vector<std::size_t> actions;
  for (std::size_t i = 0; i < n; ++i) actions.push_back(rng.uniform_index(inst.num_actions));
  Vec behavior(static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < behavior.size(); ++i) behavior[i] = 0.05 + 0.95 * rng.uniform();
  return ImprovementBatch::sampled(inst.states, std::move(actions), normal_vec(static_cast<Eigen::Index>(n), rng),
                                   std::move(behavior));
}

std::string fmt(double v) {
  std::ostringstream out;
  out.precision(3);
  out << v;
  return out.str();
}

}  // namespace

std::vector<CheckResult> gradient_suite(const CheckOptions& options) {
  std::vector<CheckResult> results;
  const PolicyKind kinds[] = {PolicyKind::kTabular, PolicyKind::kLogLinear, PolicyKind::kMlp};
  const LossKind losses[] = {LossKind::kCpo, LossKind::kMdpo, LossKind::kSurrogate, LossKind::kVmpo};
  std::uint64_t salt = 0;
  for (LossKind loss : losses) {
    for (PolicyKind kind : kinds) {
      const int modes = loss == LossKind::kCpo ? 2 : 1;
      for (int mode = 0; mode < modes; ++mode) {
        RngStream rng(RngStream::mix_seed(options.seed, ++salt));
        const double tolerance = kind == PolicyKind::kMlp ? 1e-5 : 1e-6;
        double worst = 0.0;
        for (int i = 0; i < options.gradient_instances; ++i) {
          const Instance inst = random_instance(kind, rng);
          const ImprovementBatch batch = mode == 0 ? random_all_actions_batch(inst, rng) : random_sampled_batch(inst, rng);
          const double eta = 0.1 + 4.9 * rng.uniform();
          Vec analytic = evaluate_loss(loss, batch, inst.policy, inst.snapshot, eta).grad;
          if (options.corrupt_gradient) analytic[0] += 1e-3 * (1.0 + std::abs(analytic[0]));
          const Vec numeric = finite_diff_grad(
              [&](const Vec& p) { return evaluate_loss(loss, batch, with_parameters(inst.policy, p), inst.snapshot, eta).loss; },
              parameters(inst.policy), kFdStep);
          worst = std::max(worst, relative_error(analytic, numeric));
        }
        CheckResult r;
        r.suite = "gradient";
        r.name = to_string(loss) + "/" + to_string(kind) + (modes == 2 ? (mode == 0 ? "/all-actions" : "/sampled") : "");
        r.value = worst;
        r.threshold = tolerance;
        r.passed = worst <= tolerance;
        r.detail = "max relative error over " + std::to_string(options.gradient_instances) + " instances";
        results.push_back(r);
      }
    }
  }
  return results;
}

std::vector<CheckResult> exact_update_suite(const CheckOptions& options) {
  RngStream rng(RngStream::mix_seed(options.seed, 101));
  double worst_grad = 0.0;
  double worst_margin = std::numeric_limits<double>::infinity();
  for (int i = 0; i < options.exact_update_instances; ++i) {
    const std::size_t num_states = between(rng, 1, 4);
    const std::size_t actions = between(rng, 2, 5);
    const TabularSoftmaxPolicy shape(num_states, actions);
    const TabularSoftmaxPolicy pi_k = shape.with_params(normal_vec(shape.params().size(), rng));
    const RowMat adv = normal_mat(static_cast<Eigen::Index>(num_states), static_cast<Eigen::Index>(actions), rng);
    const double eta = 0.1 + 2.9 * rng.uniform();
    std::vector<std::size_t> all;
    for (std::size_t x = 0; x < num_states; ++x) all.push_back(x);
    const StateSet states = StateSet::from_indices(all);
    Mat adv_rows = adv;
    const ImprovementBatch batch = ImprovementBatch::all_actions(states, adv_rows);
    const TabularSoftmaxPolicy exact = exact_md_update(pi_k, adv, eta);
    const LossValue at_exact = loss_mdpo(batch, exact, pi_k, eta);
    worst_grad = std::max(worst_grad, at_exact.grad.norm());
    for (int j = 0; j < options.exact_update_perturbations; ++j) {
      const double scale = std::pow(10.0, -3.0 + 3.0 * rng.uniform());
      const Vec perturbed = exact.params() + normal_vec(exact.params().size(), rng, scale);
      const double loss = loss_mdpo(batch, exact.with_params(perturbed), pi_k, eta).loss;
      worst_margin = std::min(worst_margin, loss - at_exact.loss);
    }
  }
  CheckResult grad{"exact-update", "mdpo-gradient-norm", worst_grad, 1e-8, worst_grad <= 1e-8,
                   "max gradient norm at the closed-form update"};
  CheckResult best{"exact-update", "beats-perturbations", worst_margin, 0.0, worst_margin >= 0.0,
                   "min loss(perturbed) - loss(exact) over " +
                       std::to_string(options.exact_update_instances * options.exact_update_perturbations) + " draws"};
  return {grad, best};
}

std::vector<CheckResult> gap_identity_suite(const CheckOptions& options) {
  RngStream rng(RngStream::mix_seed(options.seed, 202));
  double worst = 0.0;
  for (int i = 0; i < options.identity_instances; ++i) {
    const std::size_t n = between(rng, 2, 6);
    const ProbVec pi_k = random_dist(n, rng);
    const ProbVec candidate = random_dist(n, rng);
    const Vec q = normal_vec(static_cast<Eigen::Index>(n), rng);
    const double eta = 0.1 + 4.9 * rng.uniform();
    const GapCheck check = suboptimality_gap_check(candidate, pi_k, q, eta);
    worst = std::max(worst, std::abs(check.gap - check.kl));
  }
  return {{"gap-identity", "gap-equals-kl", worst, 1e-10, worst <= 1e-10,
           "max |gap - KL(candidate || exact)| over " + std::to_string(options.identity_instances) + " instances"}};
}

std::vector<CheckResult> surrogate_bound_suite(const CheckOptions& options) {
  RngStream rng(RngStream::mix_seed(options.seed, 303));
  double worst = std::numeric_limits<double>::infinity();
  const PolicyKind kinds[] = {PolicyKind::kTabular, PolicyKind::kLogLinear, PolicyKind::kMlp};
  for (int i = 0; i < options.bound_instances; ++i) {
    const Instance inst = random_instance(kinds[i % 3], rng);
    const ImprovementBatch batch = random_all_actions_batch(inst, rng);
    const double eta = 0.1 + 4.9 * rng.uniform();
    const double surrogate = loss_surrogate(batch, inst.policy, inst.snapshot, eta).loss;
    const double kl = mdpo_kl_form(batch, inst.policy, inst.snapshot, eta);
    worst = std::min(worst, surrogate - kl);
  }
  return {{"surrogate-bound", "surrogate-dominates-kl", worst, -1e-12, worst >= -1e-12,
           "min L_surr - E KL(pi || psi) over " + std::to_string(options.bound_instances) + " instances"}};
}

std::vector<CheckResult> convexity_suite(const CheckOptions& options) {
  RngStream rng(RngStream::mix_seed(options.seed, 404));
  double worst_vmpo = -std::numeric_limits<double>::infinity();
  double worst_surr = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < options.convexity_pairs; ++i) {
    const Instance inst = random_instance(PolicyKind::kTabular, rng);
    const ImprovementBatch batch = random_all_actions_batch(inst, rng);
    const double eta = 0.1 + 4.9 * rng.uniform();
    const Vec q0 = parameters(inst.policy);
    const Vec q1 = normal_vec(q0.size(), rng, 2.0);
    const Vec mid = 0.5 * (q0 + q1);
    for (LossKind kind : {LossKind::kVmpo, LossKind::kSurrogate}) {
      auto loss = [&](const Vec& q) { return evaluate_loss(kind, batch, with_parameters(inst.policy, q), inst.snapshot, eta).loss; };
      const double violation = loss(mid) - 0.5 * (loss(q0) + loss(q1));
      (kind == LossKind::kVmpo ? worst_vmpo : worst_surr) =
          std::max(kind == LossKind::kVmpo ? worst_vmpo : worst_surr, violation);
    }
  }

  // Expected advantage under a log-linear policy with fewer features than actions.
  RngStream wrng(RngStream::mix_seed(options.seed, 505));
  int tried = 0;
  double witness = 0.0;
  std::string where = "none found";
  for (; tried < options.witness_budget && witness <= 0.0; ++tried) {
    const std::size_t actions = between(wrng, 3, 5);
    const std::size_t d = between(wrng, 1, actions - 1);
    const std::size_t n = between(wrng, 1, 4);
    const StateSet states = StateSet::from_features(normal_mat(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d), wrng));
    const ImprovementBatch batch = ImprovementBatch::all_actions(
        states, normal_mat(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(actions), wrng));
    const LogLinearSoftmaxPolicy shape(actions, d);
    const Vec t0 = normal_vec(shape.params().size(), wrng, 2.0);
    const Vec t1 = normal_vec(shape.params().size(), wrng, 2.0);
    auto loss = [&](const Vec& t) { return loss_cpo(batch, shape.with_params(t), shape).loss; };
    const double violation = loss(0.5 * (t0 + t1)) - 0.5 * (loss(t0) + loss(t1));
    if (violation > 1e-9) {
      witness = violation;
      where = "|A|=" + std::to_string(actions) + " d=" + std::to_string(d) + " after " + std::to_string(tried + 1) +
              " pairs, violation " + fmt(violation);
    }
  }

  return {
      {"convexity", "vmpo-midpoint", worst_vmpo, 1e-12, worst_vmpo <= 1e-12,
       "max L(mid) - mean(L) over " + std::to_string(options.convexity_pairs) + " tabular pairs"},
      {"convexity", "surrogate-midpoint", worst_surr, 1e-12, worst_surr <= 1e-12,
       "max L(mid) - mean(L) over " + std::to_string(options.convexity_pairs) + " tabular pairs"},
      {"convexity", "expected-advantage-witness", witness, 0.0, witness > 0.0, where},
  };
}

std::vector<CheckResult> run_all(const CheckOptions& options) {
  std::vector<CheckResult> all;
  for (auto suite : {gradient_suite, exact_update_suite, gap_identity_suite, surrogate_bound_suite, convexity_suite}) {
    auto part = suite(options);
    all.insert(all.end(), part.begin(), part.end());
  }
  return all;
}

bool all_passed(const std::vector<CheckResult>& results) {
  return std::all_of(results.begin(), results.end(), [](const CheckResult& r) { return r.passed; });
}

}  // namespace klapi::checks
