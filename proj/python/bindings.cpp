#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "klapi/api_loop.hpp"
#include "klapi/bandit.hpp"
#include "klapi/checks.hpp"
#include "klapi/cli.hpp"
#include "klapi/envs.hpp"
#include "klapi/mathcore.hpp"

namespace py = pybind11;
using namespace klapi;

namespace {

py::dict phase_log_dict(const api::PhaseLog& log) {
  py::dict d;
  d["phase"] = log.k;
  d["avg_reward"] = log.average_reward;
  d["loss"] = log.report.final_loss;
  d["log_loss"] = log.log_loss;
  d["kl_prev_new"] = log.kl_prev_new;
  d["kl_new_prev"] = log.kl_new_prev;
  d["steps"] = log.report.steps;
  return d;
}

api::Environment make_environment(const std::string& env, std::size_t num_classes, std::size_t dim,
                                  double separation, std::uint64_t env_seed) {
  if (env == "contextual") {
    return api::ContextualEnvironment(envs::ContextualBanditEnv::synthetic_clusters(num_classes, dim, separation, env_seed));
  }
  return api::MdpEnvironment(envs::fixture_by_name(env));
}

}  // namespace

PYBIND11_MODULE(_klapi, m) {
  m.doc() = "KL-regularized and KL-constrained approximate policy iteration";

  m.def("log_sum_exp", [](const Vec& v) { return log_sum_exp(v); }, py::arg("v"));
  m.def("softmax", [](const Vec& v) { return Vec(softmax(v).values()); }, py::arg("v"));
  m.def(
      "kl_divergence", [](const Vec& p, const Vec& q) { return kl_divergence(ProbVec(p), ProbVec(q)); }, py::arg("p"),
      py::arg("q"));
  m.def("bernoulli_kl", &bernoulli_kl, py::arg("a"), py::arg("b"));
  m.def("std_normal_cdf", &std_normal_cdf, py::arg("z"));

  m.def(
      "md_bandit_update", [](double gap_sum, double eta) { return bandit::md_bandit_update(gap_sum, eta).p1; },
      py::arg("cumulative_gap_sum"), py::arg("eta"));
  m.def(
      "trpo_bandit_update",
      [](double theta, double delta_hat, double eta) {
        return bandit::trpo_bandit_update(bandit::BanditPolicy(theta), delta_hat, eta).p1;
      },
      py::arg("theta"), py::arg("delta_hat"), py::arg("eta"));
  m.def(
      "gap_failure_probability",
      [](double delta, double sigma, double theta, int tau) {
        return bandit::gap_failure_probability(bandit::BanditInstance(delta, sigma), theta, tau);
      },
      py::arg("delta"), py::arg("sigma"), py::arg("theta"), py::arg("tau"));
  m.def(
      "regret_lower_bound",
      [](double delta, double sigma, double eta, int tau, long horizon) {
        return bandit::regret_lower_bound(bandit::BanditInstance(delta, sigma), eta, tau, horizon);
      },
      py::arg("delta"), py::arg("sigma"), py::arg("eta"), py::arg("tau"), py::arg("horizon"));
  m.def(
      "run_bandit_experiment",
      [](const std::string& algo, double delta, double sigma, double eta, int tau, int phases, std::uint64_t seed,
         bool use_all_data) {
        bandit::ExperimentConfig cfg;
        cfg.algo = bandit::parse_algo(algo);
        cfg.eta = eta;
        cfg.tau = tau;
        cfg.phases = phases;
        cfg.seed = seed;
        cfg.use_all_data = use_all_data;
        const auto r = bandit::run_bandit_experiment(bandit::BanditInstance(delta, sigma), cfg);
        py::dict d;
        d["theta"] = r.theta_trace;
        d["delta_hat"] = r.delta_hats;
        d["phase_regret"] = r.phase_regret;
        d["cumulative_regret"] = r.cumulative_regret;
        return d;
      },
      py::arg("algo"), py::arg("delta") = 1.0, py::arg("sigma") = 1.0, py::arg("eta") = 0.5, py::arg("tau") = 20,
      py::arg("phases") = 100, py::arg("seed") = 0, py::arg("use_all_data") = false);
  m.def(
      "find_lemma1_instance",
      [](double eta, double theta, int tau, long n_trials, std::uint64_t seed) {
        bandit::Lemma1SearchOptions opt;
        opt.n_trials = n_trials;
        opt.seed = seed;
        const auto r = bandit::find_lemma1_instance(eta, theta, tau, opt);
        py::dict d;
        d["delta"] = r.instance.delta;
        d["sigma"] = r.instance.sigma;
        d["mean"] = r.estimate.mean;
        d["ci95"] = r.estimate.ci_half_width;
        d["trials"] = r.estimate.trials;
        return d;
      },
      py::arg("eta"), py::arg("theta"), py::arg("tau"), py::arg("n_trials") = 100000, py::arg("seed") = 0);

  m.def(
      "synthetic_contexts",
      [](std::size_t num_classes, std::size_t dim, double separation, std::uint64_t env_seed, std::size_t n,
         std::uint64_t sample_seed) {
        const auto env = envs::ContextualBanditEnv::synthetic_clusters(num_classes, dim, separation, env_seed);
        RngStream rng(sample_seed);
        RowMat x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
        std::vector<std::size_t> labels(n);
        for (std::size_t i = 0; i < n; ++i) {
          const auto c = env.sample(rng);
          x.row(static_cast<Eigen::Index>(i)) = c.features.transpose();
          labels[i] = c.label;
        }
        return py::make_tuple(x, labels);
      },
      py::arg("num_classes"), py::arg("dim"), py::arg("separation"), py::arg("env_seed"), py::arg("n"),
      py::arg("sample_seed") = 0);

  m.def(
      "mdp_fixture",
      [](const std::string& name) {
        const auto mdp = envs::fixture_by_name(name);
        return py::make_tuple(RowMat(mdp.transitions()), RowMat(mdp.rewards()));
      },
      py::arg("name"), "Returns (transitions with row x * |A| + a, rewards |X| x |A|).");
  m.def(
      "solve_optimal",
      [](const std::string& name) {
        const auto s = envs::solve_optimal(envs::fixture_by_name(name));
        py::dict d;
        d["J_star"] = s.J_star;
        d["greedy_policy"] = s.greedy_policy;
        d["bias"] = s.bias;
        return d;
      },
      py::arg("name"));
  m.def(
      "solve_policy",
      [](const std::string& name, const RowMat& policy) {
        const auto s = envs::solve_policy(envs::fixture_by_name(name), policy);
        py::dict d;
        d["J"] = s.J;
        d["mu"] = s.mu;
        d["Q"] = s.Q;
        d["V"] = s.V;
        return d;
      },
      py::arg("name"), py::arg("policy"));

  m.def(
      "run_api",
      [](const std::string& env, const std::string& algo, double eta, int tau, int phases, std::uint64_t seed,
         const std::string& policy, const std::string& evaluation, double learning_rate, int policy_steps,
         std::size_t num_classes, std::size_t dim, double separation, std::uint64_t env_seed) {
        api::ApiConfig cfg;
        cfg.kind = api::parse_improvement_kind(algo);
        cfg.eta = eta;
        cfg.tau = tau;
        cfg.phases = phases;
        cfg.seed = seed;
        cfg.policy.kind = parse_policy_kind(policy);
        cfg.evaluation = api::parse_evaluation(evaluation);
        cfg.optimizer.learning_rate = learning_rate;
        cfg.policy_steps = policy_steps;
        const auto run = api::run_api(make_environment(env, num_classes, dim, separation, env_seed), cfg);
        py::list logs;
        for (const auto& log : run.logs) logs.append(phase_log_dict(log));
        return logs;
      },
      py::arg("env"), py::arg("algo"), py::arg("eta"), py::arg("tau") = 1000, py::arg("phases") = 10,
      py::arg("seed") = 0, py::arg("policy") = "tabular", py::arg("evaluation") = "tabular",
      py::arg("learning_rate") = 0.05, py::arg("policy_steps") = 500, py::arg("num_classes") = 10,
      py::arg("dim") = 16, py::arg("separation") = 4.0, py::arg("env_seed") = 2024,
      "env is 'contextual' or an MDP fixture name. Returns one dict per phase.");

  m.def(
      "run_checks",
      [](std::uint64_t seed, int gradient_instances) {
        checks::CheckOptions opt;
        opt.seed = seed;
        opt.gradient_instances = gradient_instances;
        py::list out;
        for (const auto& r : checks::run_all(opt)) {
          py::dict d;
          d["suite"] = r.suite;
          d["check"] = r.name;
          d["value"] = r.value;
          d["threshold"] = r.threshold;
          d["passed"] = r.passed;
          out.append(d);
        }
        return out;
      },
      py::arg("seed") = 0, py::arg("gradient_instances") = 100);

  m.def(
      "cli",
      [](const std::vector<std::string>& args) {
        std::vector<std::string> full{"klapi"};
        full.insert(full.end(), args.begin(), args.end());
        std::vector<const char*> argv;
        for (const auto& a : full) argv.push_back(a.c_str());
        std::ostringstream out, err;
        const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs the command line in-process. Returns (exit_code, stdout, stderr).");
}
