#include <cmath>
#include <stdexcept>

#include "doctest.h"
#include "klapi/objectives.hpp"

using namespace klapi;

namespace {

Mat random_mat(RngStream& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.normal(0.0, scale);
  return m;
}

ProbVec pv(std::initializer_list<double> xs) {
  Vec v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v[i++] = x;
  return ProbVec(v);
}

Vec vec(std::initializer_list<double> xs) {
  Vec v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v[i++] = x;
  return v;
}

struct Instance {
  SoftmaxPolicy policy;
  SoftmaxPolicy snapshot;
  ImprovementBatch batch;
};

Instance tabular_instance(RngStream& rng, int states = 3, int actions = 4) {
  std::vector<std::size_t> idx;
  for (int i = 0; i < states; ++i) idx.push_back(static_cast<std::size_t>(i));
  return {TabularSoftmaxPolicy(RowMat(random_mat(rng, states, actions))),
          TabularSoftmaxPolicy(RowMat(random_mat(rng, states, actions))),
          ImprovementBatch::all_actions(StateSet::from_indices(idx), random_mat(rng, states, actions))};
}

double fd_error(LossKind kind, const Instance& in, double eta) {
  const LossValue v = evaluate_loss(kind, in.batch, in.policy, in.snapshot, eta);
  const Vec numeric = finite_diff_grad(
      [&](const Vec& p) { return evaluate_loss(kind, in.batch, with_parameters(in.policy, p), in.snapshot, eta).loss; },
      parameters(in.policy), 1e-5);
  return relative_error(v.grad, numeric, 1e-6);
}

}  // namespace

TEST_CASE("ImprovementBatch contracts") {
  const StateSet s = StateSet::from_indices({0, 1});
  CHECK_THROWS_AS(ImprovementBatch::all_actions(s, Mat::Zero(3, 2)), std::invalid_argument);
  CHECK_THROWS_AS(ImprovementBatch::all_actions(StateSet::from_indices({}), Mat::Zero(0, 2)), std::invalid_argument);
  CHECK_THROWS_AS(ImprovementBatch::sampled(s, {0, 1}, Vec::Zero(2), vec({0.5, 0.0})), std::invalid_argument);
  const ImprovementBatch b = ImprovementBatch::sampled(s, {0, 1}, Vec::Zero(2), vec({0.5, 0.5}));
  CHECK(b.mode() == ImprovementBatch::Mode::kSampled);
  CHECK_THROWS_AS(b.advantages(), std::logic_error);
  const ImprovementBatch a = ImprovementBatch::all_actions(s, Mat::Zero(2, 3));
  CHECK(a.num_actions() == 3);
  CHECK_THROWS_AS(a.actions(), std::logic_error);
}

TEST_CASE("psi_target") {
  const ProbVec pk = pv({0.2, 0.3, 0.5});
  CHECK((psi_target(pk, Vec::Constant(3, 4.0), 2.0).values() - pk.values()).cwiseAbs().maxCoeff() < 1e-15);
  CHECK((psi_target(pk, vec({1.0, -1.0, 0.5}), 1e-12).values() - pk.values()).cwiseAbs().maxCoeff() < 1e-11);
  const double eta = 3.0;
  const ProbVec psi = psi_target(ProbVec::uniform(2), vec({0.0, std::log(9.0) / eta}), eta);
  CHECK(std::abs(psi[0] - 0.1) < 1e-15);
  CHECK(std::abs(psi[1] - 0.9) < 1e-15);
  const ProbVec tilt = psi_target(pk, vec({1.0, -1.0, 0.5}), 2.0);
  CHECK(std::abs(tilt[0] - 0.51356529805179673) < 1e-15);
  CHECK(std::abs(tilt[1] - 0.014109414817352773) < 1e-15);
  CHECK(std::abs(tilt[2] - 0.47232528713085049) < 1e-15);
  CHECK_THROWS_AS(psi_target(pk, vec({1.0}), 1.0), std::invalid_argument);
}

TEST_CASE("loss_cpo") {
  RngStream rng(1);
  Instance in = tabular_instance(rng);
  const ImprovementBatch zero = ImprovementBatch::all_actions(in.batch.states(), Mat::Zero(3, 4));
  const LossValue z = loss_cpo(zero, in.policy, in.snapshot);
  CHECK(z.loss == 0.0);
  CHECK(z.grad.isZero());

  RowMat greedy(1, 3);
  greedy << -1e4, 0.0, -1e4;
  Mat adv(1, 3);
  adv << 0.2, 1.5, -0.4;
  const ImprovementBatch one = ImprovementBatch::all_actions(StateSet::from_indices({0}), adv);
  const SoftmaxPolicy g = TabularSoftmaxPolicy(greedy);
  CHECK(loss_cpo(one, g, g).loss == doctest::Approx(-1.5).epsilon(1e-12));

  CHECK(fd_error(LossKind::kCpo, tabular_instance(rng, 3, 4), 1.0) <= 1e-6);

  const StateSet s = StateSet::from_indices({0, 2, 1});
  const ImprovementBatch sampled = ImprovementBatch::sampled(s, {1, 3, 0}, vec({0.5, -1.0, 2.0}), vec({0.3, 0.2, 0.6}));
  const Mat probs = action_probs(in.policy, s);
  const double expected = -(probs(0, 1) / 0.3 * 0.5 + probs(1, 3) / 0.2 * -1.0 + probs(2, 0) / 0.6 * 2.0) / 3.0;
  const LossValue sv = loss_cpo(sampled, in.policy, in.snapshot);
  CHECK(sv.loss == doctest::Approx(expected).epsilon(1e-12));
  const Vec numeric = finite_diff_grad(
      [&](const Vec& p) { return loss_cpo(sampled, with_parameters(in.policy, p), in.snapshot).loss; }, parameters(in.policy), 1e-5);
  CHECK(relative_error(sv.grad, numeric, 1e-6) <= 1e-6);
}

TEST_CASE("loss_mdpo") {
  RngStream rng(2);
  Instance in = tabular_instance(rng);
  const double eta = 0.8;
  const RowMat logits_k = std::get<TabularSoftmaxPolicy>(in.snapshot).logits();
  const SoftmaxPolicy at_psi = TabularSoftmaxPolicy(RowMat(logits_k + eta * RowMat(in.batch.advantages())));
  CHECK(loss_mdpo(in.batch, at_psi, in.snapshot, eta).grad.norm() <= 1e-12);

  const double cpo = loss_cpo(in.batch, in.policy, in.snapshot).loss;
  CHECK(loss_mdpo(in.batch, in.policy, in.snapshot, 1e12).loss == doctest::Approx(cpo).epsilon(1e-9));

  CHECK(fd_error(LossKind::kMdpo, in, eta) <= 1e-6);

  const double form = mdpo_kl_form(in.batch, in.policy, in.snapshot, eta);
  const double mdpo = loss_mdpo(in.batch, in.policy, in.snapshot, eta).loss;
  CHECK(form == doctest::Approx(eta * (mdpo + mdpo_kl_form_offset(in.batch, in.snapshot, eta))).epsilon(1e-12));

  const ImprovementBatch sampled =
      ImprovementBatch::sampled(StateSet::from_indices({0}), {1}, vec({1.0}), vec({0.5}));
  CHECK_THROWS_AS(loss_mdpo(sampled, in.policy, in.snapshot, eta), std::invalid_argument);
  CHECK_THROWS_AS(loss_mdpo(in.batch, in.policy, in.snapshot, 0.0), std::invalid_argument);
}

TEST_CASE("loss_surrogate") {
  RngStream rng(3);
  Instance in = tabular_instance(rng);
  const double eta = 1.3;
  const RowMat logits_k = std::get<TabularSoftmaxPolicy>(in.snapshot).logits();
  const RowMat target = logits_k + eta * RowMat(in.batch.advantages());
  const SoftmaxPolicy exact = TabularSoftmaxPolicy(target);
  CHECK(std::abs(loss_surrogate(in.batch, exact, in.snapshot, eta).loss) < 1e-12);

  RowMat shifted = std::get<TabularSoftmaxPolicy>(in.policy).logits();
  const double base = loss_surrogate(in.batch, in.policy, in.snapshot, eta).loss;
  for (Eigen::Index x = 0; x < shifted.rows(); ++x) shifted.row(x).array() += 3.0 * static_cast<double>(x + 1);
  CHECK(loss_surrogate(in.batch, SoftmaxPolicy(TabularSoftmaxPolicy(shifted)), in.snapshot, eta).loss ==
        doctest::Approx(base).epsilon(1e-12));

  CHECK(base >= mdpo_kl_form(in.batch, in.policy, in.snapshot, eta) - 1e-12);
  CHECK(fd_error(LossKind::kSurrogate, in, eta) <= 1e-6);
}

TEST_CASE("loss_vmpo") {
  RngStream rng(4);
  Instance in = tabular_instance(rng);
  const double eta = 0.6;
  const RowMat logits_k = std::get<TabularSoftmaxPolicy>(in.snapshot).logits();
  const SoftmaxPolicy at_psi = TabularSoftmaxPolicy(RowMat(logits_k + eta * RowMat(in.batch.advantages())));
  const LossValue v = loss_vmpo(in.batch, at_psi, in.snapshot, eta);
  CHECK(v.grad.norm() <= 1e-12);
  double entropy = 0.0;
  const Mat psi = action_probs(at_psi, in.batch.states());
  for (Eigen::Index i = 0; i < psi.rows(); ++i) entropy -= (psi.row(i).array() * psi.row(i).array().log()).sum();
  CHECK(v.loss == doctest::Approx(entropy / static_cast<double>(psi.rows())).epsilon(1e-12));

  // A huge advantage gap makes psi one-hot: the loss is the log-loss.
  Mat adv = Mat::Zero(3, 4);
  const std::vector<Eigen::Index> labels{2, 0, 3};
  for (Eigen::Index x = 0; x < 3; ++x) adv(x, labels[static_cast<std::size_t>(x)]) = 1.0;
  const ImprovementBatch onehot = ImprovementBatch::all_actions(in.batch.states(), adv);
  const Mat logp = log_softmax_rows(activations(in.policy, in.batch.states()));
  double logloss = 0.0;
  for (Eigen::Index x = 0; x < 3; ++x) logloss -= logp(x, labels[static_cast<std::size_t>(x)]) / 3.0;
  CHECK(loss_vmpo(onehot, in.policy, in.snapshot, 1e6).loss == doctest::Approx(logloss).epsilon(1e-9));

  CHECK(fd_error(LossKind::kVmpo, in, eta) <= 1e-6);
}

TEST_CASE("loss kind names") {
  for (LossKind k : {LossKind::kCpo, LossKind::kMdpo, LossKind::kSurrogate, LossKind::kVmpo}) {
    CHECK(parse_loss_kind(to_string(k)) == k);
  }
  CHECK_THROWS_AS(parse_loss_kind("PPO"), std::invalid_argument);
  CHECK(to_string(StopReason::kKlConstraint) != to_string(StopReason::kMaxSteps));
}

TEST_CASE("exact_md_update") {
  RngStream rng(5);
  const TabularSoftmaxPolicy pk(RowMat(random_mat(rng, 3, 4)));
  CHECK(exact_md_update(pk, RowMat::Zero(3, 4), 0.5).params() == pk.params());

  RowMat constant(3, 4);
  for (Eigen::Index x = 0; x < 3; ++x) constant.row(x).setConstant(static_cast<double>(x) - 1.0);
  const TabularSoftmaxPolicy shifted = exact_md_update(pk, constant, 0.5);
  const StateSet all = StateSet::from_indices({0, 1, 2});
  CHECK((action_probs(SoftmaxPolicy(shifted), all) - action_probs(SoftmaxPolicy(pk), all)).cwiseAbs().maxCoeff() < 1e-12);

  for (int trial = 0; trial < 20; ++trial) {
    const TabularSoftmaxPolicy base(RowMat(random_mat(rng, 3, 4)));
    const RowMat adv = random_mat(rng, 3, 4);
    const double eta = 0.1 + rng.uniform() * 2.0;
    const TabularSoftmaxPolicy next = exact_md_update(base, adv, eta);
    CHECK((next.logits() - base.logits() - eta * adv).cwiseAbs().maxCoeff() < 1e-12);
    const ImprovementBatch batch = ImprovementBatch::all_actions(all, Mat(adv));
    CHECK(loss_mdpo(batch, next, base, eta).grad.norm() <= 1e-8);
  }
  CHECK_THROWS_AS(exact_md_update(pk, RowMat::Zero(2, 4), 0.5), std::invalid_argument);
}

TEST_CASE("improve_cpo") {
  RngStream rng(6);
  OptimizerConfig opt;
  opt.learning_rate = 0.05;

  SUBCASE("zero advantage leaves the policy unchanged") {
    Instance in = tabular_instance(rng);
    const ImprovementBatch zero = ImprovementBatch::all_actions(in.batch.states(), Mat::Zero(3, 4));
    const ImprovementResult r = improve_cpo(zero, in.snapshot, 0.1, opt, 20);
    CHECK(parameters(r.policy) == parameters(in.snapshot));
    CHECK(r.report.stop_reason == StopReason::kMaxSteps);
    CHECK(r.report.steps == 20);
  }

  SUBCASE("zero radius returns the snapshot") {
    Instance in = tabular_instance(rng);
    const ImprovementResult r = improve_cpo(in.batch, in.snapshot, 0.0, opt, 20);
    CHECK(parameters(r.policy) == parameters(in.snapshot));
    CHECK(r.report.stop_reason == StopReason::kKlConstraint);
  }

  SUBCASE("a misleading advantage drives the constraint to bind the wrong way") {
    const SoftmaxPolicy pk = TabularSoftmaxPolicy(1, 2);
    Mat adv(1, 2);
    adv << 0.4, -0.4;  // action 1 is truly better; the noisy estimate says otherwise
    const ImprovementBatch batch = ImprovementBatch::all_actions(StateSet::from_indices({0}), adv);
    const double eta = 0.05;
    const ImprovementResult r = improve_cpo(batch, pk, eta, opt, 500);
    CHECK(r.report.stop_reason == StopReason::kKlConstraint);
    CHECK(r.report.kl_prev_new <= eta);
    CHECK(r.report.kl_prev_new > 0.8 * eta);
    CHECK(action_dist(r.policy, Observation{0, {}})[1] < 0.5);
  }

  CHECK_THROWS_AS(improve_cpo(tabular_instance(rng).batch, TabularSoftmaxPolicy(3, 4), 0.1, opt, 0), std::invalid_argument);
}

TEST_CASE("improve_regularized") {
  RngStream rng(7);
  OptimizerConfig opt;
  opt.learning_rate = 0.05;

  SUBCASE("MDPO converges to the closed form") {
    Instance in = tabular_instance(rng);
    const double eta = 0.5;
    const ImprovementResult r = improve_regularized(in.batch, in.snapshot, eta, LossKind::kMdpo, opt, 3000);
    const TabularSoftmaxPolicy exact =
        exact_md_update(std::get<TabularSoftmaxPolicy>(in.snapshot), RowMat(in.batch.advantages()), eta);
    CHECK(empirical_kl(r.policy, exact, in.batch.states(), KlDirection::kAB) <= 1e-4);
    CHECK(r.report.stop_reason == StopReason::kMaxSteps);
  }

  SUBCASE("one step is one Adam step") {
    Instance in = tabular_instance(rng);
    const double eta = 0.5;
    const ImprovementResult r = improve_regularized(in.batch, in.snapshot, eta, LossKind::kVmpo, opt, 1);
    const Vec g = loss_vmpo(in.batch, in.snapshot, in.snapshot, eta).grad;
    AdamState s = AdamState::for_dimension(g.size(), opt.learning_rate);
    const auto [next, x] = adam_step(s, parameters(in.snapshot), g);
    CHECK((parameters(r.policy) - x).cwiseAbs().maxCoeff() < 1e-15);
    CHECK(r.report.steps == 1);
    CHECK_THROWS_AS(improve_regularized(in.batch, in.snapshot, eta, LossKind::kVmpo, opt, 0), std::invalid_argument);
    CHECK_THROWS_AS(improve_regularized(in.batch, in.snapshot, eta, LossKind::kCpo, opt, 1), std::invalid_argument);
  }

  SUBCASE("VMPO on a one-hot target lowers the log-loss every step") {
    Instance in = tabular_instance(rng);
    Mat adv = Mat::Zero(3, 4);
    adv(0, 1) = adv(1, 3) = adv(2, 0) = 1.0;
    const ImprovementBatch batch = ImprovementBatch::all_actions(in.batch.states(), adv);
    OptimizerConfig small;
    small.learning_rate = 0.005;
    SoftmaxPolicy p = in.snapshot;
    double prev = loss_vmpo(batch, p, in.snapshot, 1e3).loss;
    for (int i = 0; i < 50; ++i) {
      // Single-step calls restart Adam, so each is a normalized descent step.
      p = improve_regularized(batch, p, 1e3, LossKind::kVmpo, small, 1).policy;
      const double cur = loss_vmpo(batch, p, in.snapshot, 1e3).loss;
      CHECK(cur < prev);
      prev = cur;
    }
  }
}

TEST_CASE("suboptimality_gap_check") {
  const ProbVec pk = pv({0.2, 0.3, 0.5});
  const Vec q = vec({1.0, -0.5, 0.25});
  const double eta = 1.7;
  const ProbVec u = psi_target(pk, q, eta);
  const GapCheck at_u = suboptimality_gap_check(u, pk, q, eta);
  CHECK(std::abs(at_u.gap) < 1e-14);
  CHECK(std::abs(at_u.kl) < 1e-14);
  const GapCheck at_pk = suboptimality_gap_check(pk, pk, q, eta);
  CHECK(at_pk.gap == doctest::Approx(kl_divergence(pk, u)).epsilon(1e-12));
  CHECK(at_pk.kl == doctest::Approx(kl_divergence(pk, u)).epsilon(1e-12));

  RngStream rng(8);
  for (int trial = 0; trial < 1000; ++trial) {
    Vec w1(4), w2(4), qq(4);
    for (int i = 0; i < 4; ++i) {
      w1[i] = -std::log(1.0 - rng.uniform());
      w2[i] = -std::log(1.0 - rng.uniform());
      qq[i] = rng.normal();
    }
    const GapCheck c = suboptimality_gap_check(ProbVec::normalized(w1), ProbVec::normalized(w2), qq, 0.1 + 3.0 * rng.uniform());
    CHECK(std::abs(c.gap - c.kl) <= 1e-10);
  }
  CHECK_THROWS_AS(suboptimality_gap_check(pk, ProbVec::uniform(2), q, eta), std::invalid_argument);
}
