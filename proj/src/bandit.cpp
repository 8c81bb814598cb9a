#include "klapi/bandit.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "klapi/mathcore.hpp"

namespace klapi::bandit {

namespace {

// Zero width: bisect until the bracket holds adjacent doubles.
constexpr double kBisectTol = 0.0;
constexpr double kProbClamp = 1e-15;

double logistic(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

BanditInstance::BanditInstance(double delta_, double sigma_) : delta(delta_), sigma(sigma_) {
  if (!(delta >= 0.0) || !std::isfinite(delta)) throw std::invalid_argument("BanditInstance: delta must be >= 0");
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw std::invalid_argument("BanditInstance: sigma must be >= 0");
}

BanditPolicy::BanditPolicy(double p) : p1(p) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("BanditPolicy: p1 must lie in [0, 1]");
}

std::string to_string(Algo algo) { return algo == Algo::kMirrorDescent ? "MD" : "TRPO"; }

Algo parse_algo(const std::string& name) {
  if (name == "MD" || name == "md") return Algo::kMirrorDescent;
  if (name == "TRPO" || name == "trpo") return Algo::kTrpo;
  throw std::invalid_argument("unknown bandit algorithm: " + name);
}

double pull_arm(const BanditInstance& instance, int arm, RngStream& rng) {
  if (arm != 0 && arm != 1) throw std::invalid_argument("pull_arm: arm must be 0 or 1");
  return instance.mean(arm) + instance.sigma * rng.normal();
}

double empirical_gap(double sum0, int pulls0, double sum1, int pulls1) {
  const double mean0 = pulls0 > 0 ? sum0 / pulls0 : 0.0;
  const double mean1 = pulls1 > 0 ? sum1 / pulls1 : 0.0;
  return mean1 - mean0;
}

PhaseEstimate run_phase(const BanditInstance& instance, const BanditPolicy& policy, int tau, RngStream& rng) {
  if (tau < 1) throw std::invalid_argument("run_phase: tau must be >= 1");
  PhaseEstimate est;
  est.arms.reserve(static_cast<std::size_t>(tau));
  est.rewards.reserve(static_cast<std::size_t>(tau));
  double sum0 = 0.0;
  double sum1 = 0.0;
  for (int t = 0; t < tau; ++t) {
    // Inverse-CDF in arm order: arm 0 covers [0, 1 - p1).
    const int arm = rng.uniform() < 1.0 - policy.p1 ? 0 : 1;
    const double r = pull_arm(instance, arm, rng);
    est.arms.push_back(arm);
    est.rewards.push_back(r);
    if (arm == 1) {
      ++est.pulls1;
      sum1 += r;
    } else {
      ++est.pulls0;
      sum0 += r;
    }
  }
  est.delta_hat = empirical_gap(sum0, est.pulls0, sum1, est.pulls1);
  return est;
}

BanditPolicy md_bandit_update(double cumulative_gap_sum, double eta) {
  if (!(eta > 0.0)) throw std::invalid_argument("md_bandit_update: eta must be positive");
  return BanditPolicy(logistic(eta * cumulative_gap_sum));
}

BanditPolicy trpo_bandit_update(const BanditPolicy& theta_k, double delta_hat, double eta) {
  if (!(eta > 0.0)) throw std::invalid_argument("trpo_bandit_update: eta must be positive");
  const double theta = theta_k.p1;
  if (delta_hat == 0.0) return theta_k;
  auto constraint = [&](double p) { return bernoulli_kl(theta, p) - eta; };
  if (delta_hat > 0.0) {
    if (theta >= 1.0) return BanditPolicy(1.0);
    const double hi = 1.0 - kProbClamp;
    if (constraint(hi) <= 0.0) return BanditPolicy(1.0);
    return BanditPolicy(bisect(constraint, theta, hi, kBisectTol));
  }
  if (theta <= 0.0) return BanditPolicy(0.0);
  const double lo = kProbClamp;
  if (constraint(lo) <= 0.0) return BanditPolicy(0.0);
  return BanditPolicy(bisect(constraint, lo, theta, kBisectTol));
}

BanditRunResult run_bandit_experiment(const BanditInstance& instance, const ExperimentConfig& config) {
  if (config.phases < 1) throw std::invalid_argument("run_bandit_experiment: phases must be >= 1");
  if (config.tau < 1) throw std::invalid_argument("run_bandit_experiment: tau must be >= 1");
  if (!(config.eta > 0.0)) throw std::invalid_argument("run_bandit_experiment: eta must be positive");

  RngStream rng(config.seed);
  BanditRunResult result;
  result.theta_trace.reserve(static_cast<std::size_t>(config.phases) + 1);
  BanditPolicy policy(0.5);
  result.theta_trace.push_back(policy.p1);

  double gap_sum = 0.0;
  double all_sum0 = 0.0, all_sum1 = 0.0;
  int all_pulls0 = 0, all_pulls1 = 0;

  for (int k = 0; k < config.phases; ++k) {
    const PhaseEstimate est = run_phase(instance, policy, config.tau, rng);

    double regret = 0.0;
    for (double r : est.rewards) regret += 0.5 * instance.delta - r;
    result.phase_regret.push_back(regret);
    result.cumulative_regret += regret;

    double delta_hat = est.delta_hat;
    if (config.use_all_data) {
      for (std::size_t t = 0; t < est.arms.size(); ++t) {
        if (est.arms[t] == 1) {
          all_sum1 += est.rewards[t];
          ++all_pulls1;
        } else {
          all_sum0 += est.rewards[t];
          ++all_pulls0;
        }
      }
      delta_hat = empirical_gap(all_sum0, all_pulls0, all_sum1, all_pulls1);
    }
    result.delta_hats.push_back(delta_hat);

    if (config.algo == Algo::kMirrorDescent) {
      gap_sum += delta_hat;
      policy = md_bandit_update(gap_sum, config.eta);
    } else {
      policy = trpo_bandit_update(policy, delta_hat, config.eta);
    }
    result.theta_trace.push_back(policy.p1);
  }
  return result;
}

double gap_failure_probability(const BanditInstance& instance, double theta, int tau) {
  if (!(theta > 0.0 && theta < 1.0)) {
    throw std::domain_error("gap_failure_probability: theta must lie strictly inside (0, 1)");
  }
  if (tau < 1) throw std::invalid_argument("gap_failure_probability: tau must be >= 1");
  if (instance.delta == 0.0) return 0.5;
  if (instance.sigma == 0.0) return 0.0;
  const double z = (instance.delta / instance.sigma) * std::sqrt(tau * theta * (1.0 - theta));
  return std_normal_cdf(-z);
}

double regret_lower_bound(const BanditInstance& instance, double eta, int tau, long horizon) {
  if (tau < 1 || horizon <= tau) throw std::invalid_argument("regret_lower_bound: need T > tau >= 1");
  if (!(eta > 0.0)) throw std::invalid_argument("regret_lower_bound: eta must be positive");
  if (instance.delta == 0.0) return 0.0;
  const double failure =
      instance.sigma == 0.0 ? 0.0 : std_normal_cdf(-std::sqrt(static_cast<double>(tau)) * instance.delta / (2.0 * instance.sigma));
  return 0.5 * instance.delta * failure * (1.0 - std::exp(-eta)) * static_cast<double>(horizon - tau);
}

MeanEstimate lemma1_expected_next_theta(const BanditInstance& instance, double theta_k, double eta, int tau,
                                        long n_trials, RngStream& rng) {
  if (n_trials < 1) throw std::invalid_argument("lemma1_expected_next_theta: n_trials must be >= 1");
  const BanditPolicy start(theta_k);
  // Welford accumulation keeps the variance stable for 1e5+ trials.
  double mean = 0.0;
  double m2 = 0.0;
  for (long i = 0; i < n_trials; ++i) {
    const PhaseEstimate est = run_phase(instance, start, tau, rng);
    const double next = trpo_bandit_update(start, est.delta_hat, eta).p1;
    const double d = next - mean;
    mean += d / static_cast<double>(i + 1);
    m2 += d * (next - mean);
  }
  MeanEstimate out;
  out.mean = mean;
  out.trials = n_trials;
  if (n_trials > 1) {
    const double sd = std::sqrt(m2 / static_cast<double>(n_trials - 1));
    out.ci_half_width = 1.96 * sd / std::sqrt(static_cast<double>(n_trials));
  }
  return out;
}

Lemma1Search search_lemma1_instance(double eta, double theta_k, int tau, const Lemma1SearchOptions& options) {
  if (!(eta > 0.0)) throw std::invalid_argument("find_lemma1_instance: eta must be positive");
  const double radius = std::sqrt(eta / 8.0);
  if (!(theta_k > 1.0 - radius && theta_k < 1.0)) {
    std::ostringstream msg;
    msg << "find_lemma1_instance: theta_k=" << theta_k << " outside the near-optimal class (" << 1.0 - radius
        << ", 1)";
    throw std::invalid_argument(msg.str());
  }
  if (!(options.sigma > 0.0) || !(options.initial_ratio > 0.0) || !(options.shrink > 0.0 && options.shrink < 1.0) ||
      options.max_candidates < 1) {
    throw std::invalid_argument("find_lemma1_instance: invalid search options");
  }
  Lemma1Search search;
  double ratio = options.initial_ratio;
  for (int c = 0; c < options.max_candidates; ++c, ratio *= options.shrink) {
    const BanditInstance candidate(ratio * options.sigma, options.sigma);
    RngStream rng(RngStream::mix_seed(options.seed, static_cast<std::uint64_t>(c)));
    const MeanEstimate est = lemma1_expected_next_theta(candidate, theta_k, eta, tau, options.n_trials, rng);
    search.last = {candidate, est, c + 1};
    if (est.mean + est.ci_half_width <= theta_k) {
      search.found = true;
      break;
    }
  }
  return search;
}

Lemma1Instance find_lemma1_instance(double eta, double theta_k, int tau, const Lemma1SearchOptions& options) {
  const Lemma1Search search = search_lemma1_instance(eta, theta_k, tau, options);
  if (search.found) return search.last;
  std::ostringstream msg;
  msg << "find_lemma1_instance: no certified instance after " << options.max_candidates
      << " candidates; frontier delta/sigma=" << search.last.instance.delta / options.sigma
      << ", upper bound " << search.last.estimate.mean + search.last.estimate.ci_half_width << " vs theta_k " << theta_k;
  throw std::runtime_error(msg.str());
}

}  // namespace klapi::bandit
