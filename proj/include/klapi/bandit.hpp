#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "klapi/rng.hpp"

namespace klapi::bandit {

/// Two-armed Gaussian bandit with arm means -delta/2 and +delta/2.
struct BanditInstance {
  double delta = 1.0;
  double sigma = 1.0;

  BanditInstance() = default;
  BanditInstance(double delta, double sigma);

  double mean(int arm) const { return arm == 1 ? 0.5 * delta : -0.5 * delta; }
};

/// Probability of pulling arm 1.
struct BanditPolicy {
  double p1 = 0.5;

  BanditPolicy() = default;
  explicit BanditPolicy(double p1);
};

struct PhaseEstimate {
  double delta_hat = 0.0;
  int pulls0 = 0;
  int pulls1 = 0;
  std::vector<int> arms;
  std::vector<double> rewards;
};

enum class Algo { kMirrorDescent, kTrpo };

std::string to_string(Algo algo);
Algo parse_algo(const std::string& name);

struct BanditRunResult {
  /// Policy at the start of each phase plus the final policy (K + 1 values).
  std::vector<double> theta_trace;
  std::vector<double> delta_hats;
  std::vector<double> phase_regret;
  double cumulative_regret = 0.0;
};

struct ExperimentConfig {
  Algo algo = Algo::kMirrorDescent;
  double eta = 0.5;
  int tau = 20;
  int phases = 100;
  std::uint64_t seed = 0;
  /// Estimate the gap from all data collected so far instead of the current
  /// phase only.
  bool use_all_data = false;
};

double pull_arm(const BanditInstance& instance, int arm, RngStream& rng);

PhaseEstimate run_phase(const BanditInstance& instance, const BanditPolicy& policy, int tau, RngStream& rng);

/// Empirical gap with the unpulled-arm mean set to zero.
double empirical_gap(double sum0, int pulls0, double sum1, int pulls1);

/// Closed-form regularized update: logistic(eta * cumulative_gap_sum).
BanditPolicy md_bandit_update(double cumulative_gap_sum, double eta);

/// Exact maximizer of delta_hat * p subject to KL(Bern(theta_k) || Bern(p)) <= eta.
BanditPolicy trpo_bandit_update(const BanditPolicy& theta_k, double delta_hat, double eta);

BanditRunResult run_bandit_experiment(const BanditInstance& instance, const ExperimentConfig& config);

/// Probability that the empirical gap is nonpositive when arm 1 is pulled
/// exactly tau * theta times: Phi(-(delta/sigma) sqrt(tau theta (1 - theta))).
double gap_failure_probability(const BanditInstance& instance, double theta, int tau);

/// Linear lower bound on the expected regret of the constrained update:
/// (delta/2) Phi(-sqrt(tau) delta / (2 sigma)) (1 - exp(-eta)) (T - tau).
double regret_lower_bound(const BanditInstance& instance, double eta, int tau, long horizon);

struct MeanEstimate {
  double mean = 0.0;
  double ci_half_width = 0.0;  ///< 95% normal interval from the sample standard deviation
  long trials = 0;
};

/// Monte-Carlo estimate of E[theta_{k+1} | theta_k] under the exact constrained update.
MeanEstimate lemma1_expected_next_theta(const BanditInstance& instance, double theta_k, double eta, int tau,
                                        long n_trials, RngStream& rng);

struct Lemma1SearchOptions {
  long n_trials = 100000;
  std::uint64_t seed = 0;
  double sigma = 1.0;
  double initial_ratio = 1.0;  ///< first delta/sigma tried
  double shrink = 0.5;         ///< geometric factor between candidates
  int max_candidates = 40;
};

struct Lemma1Instance {
  BanditInstance instance;
  MeanEstimate estimate;
  int candidates_tried = 0;
};

struct Lemma1Search {
  bool found = false;
  Lemma1Instance last;  ///< the certified instance, or the last candidate tried
};

/// Non-throwing search; see find_lemma1_instance.
Lemma1Search search_lemma1_instance(double eta, double theta_k, int tau, const Lemma1SearchOptions& options = {});

/// Searches delta/sigma geometrically downward for an instance whose 95% upper
/// confidence bound on E[theta_{k+1}] is at most theta_k. Requires
/// 1 - sqrt(eta/8) < theta_k < 1.
Lemma1Instance find_lemma1_instance(double eta, double theta_k, int tau, const Lemma1SearchOptions& options = {});

}  // namespace klapi::bandit
