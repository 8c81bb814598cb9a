#include <cmath>
#include <sstream>
#include <stdexcept>

#include "doctest.h"
#include "klapi/policies.hpp"

using namespace klapi;

namespace {

Mat random_mat(RngStream& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.normal(0.0, scale);
  return m;
}

Vec random_vec(RngStream& rng, Eigen::Index n, double scale = 1.0) { return random_mat(rng, n, 1, scale).col(0); }

SoftmaxPolicy random_policy(PolicyKind kind, RngStream& rng, std::size_t d, std::size_t actions) {
  switch (kind) {
    case PolicyKind::kTabular: return TabularSoftmaxPolicy(RowMat(random_mat(rng, 4, static_cast<Eigen::Index>(actions))));
    case PolicyKind::kLogLinear: return LogLinearSoftmaxPolicy(RowMat(random_mat(rng, static_cast<Eigen::Index>(actions), static_cast<Eigen::Index>(d))));
    case PolicyKind::kMlp: {
      // Random biases keep pre-activations off the ReLU kink.
      const MlpSoftmaxPolicy shape({d, 5, 4, actions});
      return shape.with_params(random_vec(rng, shape.params().size(), 0.7));
    }
  }
  throw std::logic_error("unreachable");
}

StateSet random_states(PolicyKind kind, RngStream& rng, std::size_t d, int n) {
  if (kind == PolicyKind::kTabular) {
    std::vector<std::size_t> idx;
    for (int i = 0; i < n; ++i) idx.push_back(rng.uniform_index(4));
    return StateSet::from_indices(idx);
  }
  return StateSet::from_features(random_mat(rng, n, static_cast<Eigen::Index>(d)));
}

}  // namespace

TEST_CASE("activations of simple policies") {
  const TabularSoftmaxPolicy tab(3, 3);
  CHECK(activations(SoftmaxPolicy(tab), Observation{1, {}}).isZero());

  RowMat theta(3, 3);
  theta << 1, 2, 3, 4, 5, 6, 7, 8, 9;
  const SoftmaxPolicy lin = LogLinearSoftmaxPolicy(theta);
  Observation e1{0, Vec::Unit(3, 0)};
  CHECK(activations(lin, e1) == theta.col(0));

  const SoftmaxPolicy mlp = MlpSoftmaxPolicy({3, 4, 2});
  CHECK(activations(mlp, Observation{0, Vec::Constant(3, 7.0)}).isZero());
  CHECK(MlpSoftmaxPolicy::count_params({3, 4, 2}) == 3 * 4 + 4 + 4 * 2 + 2);

  CHECK_THROWS_AS(activations(lin, Observation{0, Vec::Zero(2)}), std::invalid_argument);
  CHECK_THROWS_AS(activations(SoftmaxPolicy(tab), Observation{3, {}}), std::out_of_range);
  CHECK_THROWS_AS(MlpSoftmaxPolicy({3}), std::invalid_argument);
  CHECK_THROWS_AS(MlpSoftmaxPolicy({3, 0, 2}), std::invalid_argument);
}

TEST_CASE("action_dist") {
  CHECK(action_dist(SoftmaxPolicy(TabularSoftmaxPolicy(2, 4)), Observation{0, {}}).values().isApprox(Vec::Constant(4, 0.25)));

  RowMat logits(1, 3);
  logits << 0.3, -1.0, 2.0;
  RowMat shifted = logits.array() + 17.0;
  const ProbVec p = action_dist(SoftmaxPolicy(TabularSoftmaxPolicy(logits)), Observation{0, {}});
  const ProbVec q = action_dist(SoftmaxPolicy(TabularSoftmaxPolicy(shifted)), Observation{0, {}});
  CHECK((p.values() - q.values()).cwiseAbs().maxCoeff() < 1e-12);

  RowMat theta(2, 1);
  theta << std::log(1.0), std::log(3.0);
  const ProbVec r = action_dist(SoftmaxPolicy(LogLinearSoftmaxPolicy(theta)), Observation{0, Vec::Ones(1)});
  CHECK(std::abs(r[0] - 0.25) < 1e-15);
  CHECK(std::abs(r[1] - 0.75) < 1e-15);
}

TEST_CASE("action_probs stay valid for large logits") {
  RngStream rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const RowMat logits = random_mat(rng, 3, 5, 1e3);
    const Mat p = action_probs(SoftmaxPolicy(TabularSoftmaxPolicy(logits)), StateSet::from_indices({0, 1, 2}));
    CHECK(p.allFinite());
    for (Eigen::Index i = 0; i < 3; ++i) CHECK_NOTHROW(ProbVec(p.row(i).transpose()));
  }
}

TEST_CASE("backprop matches finite differences for every policy kind") {
  RngStream rng(17);
  for (PolicyKind kind : {PolicyKind::kTabular, PolicyKind::kLogLinear, PolicyKind::kMlp}) {
    CAPTURE(to_string(kind));
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      const SoftmaxPolicy policy = random_policy(kind, rng, 3, 4);
      const StateSet states = random_states(kind, rng, 3, 5);
      const Mat g = random_mat(rng, 5, 4);
      // Composed scalar loss: sum of g * log pi, exercising the softmax too.
      auto loss = [&](const Vec& params) {
        const SoftmaxPolicy p = with_parameters(policy, params);
        return (g.array() * log_softmax_rows(activations(p, states)).array()).sum();
      };
      const Mat logp = log_softmax_rows(activations(policy, states));
      const Mat probs = logp.array().exp();
      Mat dq = g;
      for (Eigen::Index i = 0; i < g.rows(); ++i) dq.row(i) -= g.row(i).sum() * probs.row(i);
      const Vec analytic = backprop_from_activation_grad(policy, states, dq);
      const Vec numeric = finite_diff_grad(loss, parameters(policy), 1e-5);
      worst = std::max(worst, relative_error(analytic, numeric, 1e-6));
    }
    CHECK(worst <= (kind == PolicyKind::kMlp ? 1e-5 : 1e-8));
  }
}

TEST_CASE("backprop basics") {
  RngStream rng(2);
  const SoftmaxPolicy lin = random_policy(PolicyKind::kLogLinear, rng, 3, 4);
  const Observation obs{0, random_vec(rng, 3)};
  CHECK(backprop_from_activation_grad(lin, obs, Vec::Zero(4)).isZero());
  const Vec gq = random_vec(rng, 4);
  const Vec analytic = backprop_from_activation_grad(lin, obs, gq);
  const Vec numeric = finite_diff_grad(
      [&](const Vec& p) { return gq.dot(activations(with_parameters(lin, p), obs)); }, parameters(lin), 1e-5);
  CHECK((analytic - numeric).cwiseAbs().maxCoeff() < 1e-8);
  CHECK_THROWS_AS(backprop_from_activation_grad(lin, obs, Vec::Zero(3)), std::invalid_argument);

  const TabularSoftmaxPolicy tab(3, 2);
  const Vec g = backprop_from_activation_grad(SoftmaxPolicy(tab), Observation{1, {}}, Vec::Ones(2));
  Vec expected = Vec::Zero(6);
  expected.segment(2, 2).setOnes();
  CHECK(g == expected);
}

TEST_CASE("sample_action") {
  RngStream rng(4);
  RowMat logits(1, 3);
  logits << -1e4, 0.0, -1e4;
  const SoftmaxPolicy det = TabularSoftmaxPolicy(logits);
  for (int i = 0; i < 100; ++i) CHECK(sample_action(det, Observation{0, {}}, rng) == 1);

  const SoftmaxPolicy uni = TabularSoftmaxPolicy(1, 4);
  std::vector<int> counts(4, 0);
  const int n = 100000;
  for (int i = 0; i < n; ++i) ++counts[sample_action(uni, Observation{0, {}}, rng)];
  for (int c : counts) CHECK(std::abs(c / static_cast<double>(n) - 0.25) < 0.01);

  RngStream a(8), b(8);
  for (int i = 0; i < 100; ++i) CHECK(sample_action(uni, Observation{0, {}}, a) == sample_action(uni, Observation{0, {}}, b));
}

TEST_CASE("empirical_kl") {
  RngStream rng(6);
  const SoftmaxPolicy a = random_policy(PolicyKind::kTabular, rng, 0, 3);
  const SoftmaxPolicy b = random_policy(PolicyKind::kTabular, rng, 0, 3);
  const StateSet states = StateSet::from_indices({0, 1, 2, 3, 1});
  CHECK(empirical_kl(a, a, states, KlDirection::kAB) == 0.0);
  const double ab = empirical_kl(a, b, states, KlDirection::kAB);
  const double ba = empirical_kl(a, b, states, KlDirection::kBA);
  CHECK(ab > 0.0);
  CHECK(ba > 0.0);
  CHECK(ab != doctest::Approx(ba));

  const StateSet one = StateSet::from_indices({2});
  const ProbVec pa = action_dist(a, one.at(0));
  const ProbVec pb = action_dist(b, one.at(0));
  CHECK(empirical_kl(a, b, one, KlDirection::kAB) == doctest::Approx(kl_divergence(pa, pb)).epsilon(1e-12));
  CHECK(empirical_kl(a, b, one, KlDirection::kBA) == doctest::Approx(kl_divergence(pb, pa)).epsilon(1e-12));
  CHECK_THROWS_AS(empirical_kl(a, b, StateSet::from_indices({}), KlDirection::kAB), std::invalid_argument);
}

TEST_CASE("tabular closure under the exact update") {
  RngStream rng(10);
  const RowMat logits = random_mat(rng, 3, 4);
  const RowMat adv = random_mat(rng, 3, 4);
  const double eta = 0.7;
  const TabularSoftmaxPolicy next(RowMat(logits + eta * adv));
  for (std::size_t x = 0; x < 3; ++x) {
    const Vec pk = action_dist(SoftmaxPolicy(TabularSoftmaxPolicy(logits)), Observation{x, {}}).values();
    Vec tilt = pk.array() * (eta * adv.row(static_cast<Eigen::Index>(x)).transpose().array()).exp();
    tilt /= tilt.sum();
    CHECK((action_dist(SoftmaxPolicy(next), Observation{x, {}}).values() - tilt).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("policy snapshots round-trip") {
  RngStream rng(12);
  for (PolicyKind kind : {PolicyKind::kTabular, PolicyKind::kLogLinear, PolicyKind::kMlp}) {
    const SoftmaxPolicy p = random_policy(kind, rng, 3, 4);
    std::stringstream buf;
    write_policy(buf, p);
    const SoftmaxPolicy q = read_policy(buf);
    CHECK(kind_of(q) == kind);
    CHECK(parameters(q) == parameters(p));
  }
  std::stringstream bad("XXXX");
  CHECK_THROWS_AS(read_policy(bad), std::runtime_error);
  std::stringstream buf;
  write_policy(buf, SoftmaxPolicy(TabularSoftmaxPolicy(2, 2)));
  std::string bytes = buf.str();
  bytes.resize(bytes.size() - 3);
  std::stringstream truncated(bytes);
  CHECK_THROWS_AS(read_policy(truncated), std::runtime_error);
}

TEST_CASE("policy kind names") {
  CHECK(parse_policy_kind("tabular") == PolicyKind::kTabular);
  CHECK(parse_policy_kind(to_string(PolicyKind::kLogLinear)) == PolicyKind::kLogLinear);
  CHECK(parse_policy_kind("mlp") == PolicyKind::kMlp);
  CHECK_THROWS_AS(parse_policy_kind("cnn"), std::invalid_argument);
}

TEST_CASE("StateSet helpers") {
  const StateSet s = StateSet::from_indices({3, 1, 4});
  CHECK(s.size() == 3);
  CHECK(s.at(2).index == 4);
  const StateSet sub = s.subset({2, 0});
  CHECK(sub.indices == std::vector<std::size_t>{4, 3});
  Mat f(2, 2);
  f << 1, 2, 3, 4;
  const StateSet fs = StateSet::from_features(f);
  CHECK(fs.at(1).features == f.row(1).transpose());
}
