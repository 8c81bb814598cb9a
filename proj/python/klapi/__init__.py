"""KL-regularized and KL-constrained approximate policy iteration."""

from ._klapi import (
    bernoulli_kl,
    cli,
    find_lemma1_instance,
    gap_failure_probability,
    kl_divergence,
    log_sum_exp,
    md_bandit_update,
    mdp_fixture,
    regret_lower_bound,
    run_api,
    run_bandit_experiment,
    run_checks,
    softmax,
    solve_optimal,
    solve_policy,
    std_normal_cdf,
    synthetic_contexts,
    trpo_bandit_update,
)

__all__ = [
    "bernoulli_kl",
    "cli",
    "find_lemma1_instance",
    "gap_failure_probability",
    "kl_divergence",
    "log_sum_exp",
    "md_bandit_update",
    "mdp_fixture",
    "regret_lower_bound",
    "run_api",
    "run_bandit_experiment",
    "run_checks",
    "softmax",
    "solve_optimal",
    "solve_policy",
    "std_normal_cdf",
    "synthetic_contexts",
    "trpo_bandit_update",
]
