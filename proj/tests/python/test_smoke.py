import math

import numpy as np
import pytest

import klapi


def test_softmax_and_kl():
    p = klapi.softmax(np.array([0.0, 1.0, 2.0]))
    assert p.sum() == pytest.approx(1.0, abs=1e-15)
    assert np.all(np.diff(p) > 0)
    assert klapi.kl_divergence(p, p) == pytest.approx(0.0, abs=1e-15)
    q = np.array([1 / 3, 1 / 3, 1 / 3])
    expected = float(np.sum(p * np.log(p / q)))
    assert klapi.kl_divergence(p, q) == pytest.approx(expected, rel=1e-12)
    assert klapi.log_sum_exp(np.array([1000.0, 1000.0])) == pytest.approx(1000.0 + math.log(2.0))


def test_bernoulli_kl_matches_formula():
    a, b = 0.3, 0.6
    expected = a * math.log(a / b) + (1 - a) * math.log((1 - a) / (1 - b))
    assert klapi.bernoulli_kl(a, b) == pytest.approx(expected, rel=1e-12)


def test_bandit_updates():
    assert klapi.md_bandit_update(2.0, 0.5) == pytest.approx(1 / (1 + math.exp(-1.0)), rel=1e-14)
    p = klapi.trpo_bandit_update(0.5, 1.0, 0.1)
    assert p > 0.5
    assert klapi.bernoulli_kl(0.5, p) == pytest.approx(0.1, abs=1e-9)
    assert klapi.trpo_bandit_update(0.5, -1.0, 0.1) == pytest.approx(1.0 - p, abs=1e-12)


def test_regret_bound_value():
    assert klapi.regret_lower_bound(1.0, 1.0, 0.5, 20, 2000) == pytest.approx(4.93682942, rel=1e-8)
    assert klapi.gap_failure_probability(1.0, 1.0, 0.5, 20) == pytest.approx(0.0126736593, rel=1e-8)


def test_bandit_experiment_is_deterministic():
    a = klapi.run_bandit_experiment("TRPO", phases=20, seed=3)
    b = klapi.run_bandit_experiment("TRPO", phases=20, seed=3)
    assert a == b
    assert len(a["theta"]) == 21
    assert a["cumulative_regret"] == pytest.approx(sum(a["phase_regret"]), rel=1e-12)


def test_optimal_solution_dominates_uniform():
    transitions, rewards = klapi.mdp_fixture("riverswim")
    num_states, num_actions = rewards.shape
    assert transitions.shape == (num_states * num_actions, num_states)
    np.testing.assert_allclose(transitions.sum(axis=1), 1.0, atol=1e-12)
    best = klapi.solve_optimal("riverswim")["J_star"]
    assert best == pytest.approx(0.916666974, abs=1e-8)
    uniform = np.full((num_states, num_actions), 1.0 / num_actions)
    assert klapi.solve_policy("riverswim", uniform)["J"] < best


def test_synthetic_clusters_are_separable():
    linear_model = pytest.importorskip("sklearn.linear_model")
    x_train, y_train = klapi.synthetic_contexts(10, 16, 4.0, 2024, 5000, sample_seed=1)
    x_test, y_test = klapi.synthetic_contexts(10, 16, 4.0, 2024, 5000, sample_seed=2)
    model = linear_model.LogisticRegression(max_iter=2000).fit(x_train, y_train)
    assert model.score(x_test, y_test) > 0.95


def test_run_api_improves_on_riverswim():
    logs = klapi.run_api("riverswim", "ExactMD", eta=0.2, tau=2000, phases=10, seed=0)
    assert len(logs) == 10
    assert logs[-1]["avg_reward"] > logs[0]["avg_reward"]


def test_checks_pass():
    results = klapi.run_checks(gradient_instances=5)
    assert {r["suite"] for r in results} >= {"gradient", "exact-update", "gap-identity"}
    assert all(r["passed"] for r in results)


def test_cli_usage_error():
    code, _, err = klapi.cli(["bandit", "--no-such-flag"])
    assert code == 2
    assert err
