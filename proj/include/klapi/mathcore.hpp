#pragma once

#include <cstddef>
#include <functional>
#include <utility>

#include <Eigen/Core>

namespace klapi {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Probability vector over a finite action set.
///
/// Construction validates the simplex invariant: entries are nonnegative
/// and sum to one within kSumTolerance.
class ProbVec {
public:
  static constexpr double kSumTolerance = 1e-12;

  ProbVec() = default;
  explicit ProbVec(Vec values);

  /// Normalizes a nonnegative vector with positive mass.
  static ProbVec normalized(const Vec& weights);
  static ProbVec uniform(std::size_t n);
  static ProbVec one_hot(std::size_t n, std::size_t index);

  const Vec& values() const { return values_; }
  std::size_t size() const { return static_cast<std::size_t>(values_.size()); }
  double operator[](std::size_t i) const { return values_[static_cast<Eigen::Index>(i)]; }

private:
  Vec values_;
};

/// log(sum(exp(v))) with the maximum subtracted first. Throws on empty input.
double log_sum_exp(const Eigen::Ref<const Vec>& v);

/// Shift-stable softmax.
ProbVec softmax(const Eigen::Ref<const Vec>& v);

/// Row-wise log-softmax of a matrix of activations.
Mat log_softmax_rows(const Mat& activations);
/// Row-wise softmax of a matrix of activations.
Mat softmax_rows(const Mat& activations);

/// KL(p || q) with 0 log(0/q) = 0. Returns +infinity when p_i > 0 and q_i = 0.
double kl_divergence(const ProbVec& p, const ProbVec& q);

/// KL(Bern(a) || Bern(b)); b is clamped to [1e-15, 1 - 1e-15].
double bernoulli_kl(double a, double b);

/// Standard normal cumulative distribution function.
double std_normal_cdf(double z);

/// Root of a scalar function on a sign-changing bracket. Stops when the
/// bracket width is at most tol. Throws when f(lo) and f(hi) share a sign.
double bisect(const std::function<double(double)>& f, double lo, double hi, double tol);

struct AdamState {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  long step = 0;
  Vec first_moment;
  Vec second_moment;

  static AdamState for_dimension(Eigen::Index dim, double learning_rate);
};

/// One bias-corrected Adam update. Pure: returns the advanced state and the
/// updated parameters.
std::pair<AdamState, Vec> adam_step(const AdamState& state, const Vec& params, const Vec& grad);

/// Central finite-difference gradient.
Vec finite_diff_grad(const std::function<double(const Vec&)>& f, const Vec& x, double h);

/// |a - b| / max(|a|, |b|, floor); the floor keeps near-zero comparisons absolute.
double relative_error(const Vec& a, const Vec& b, double floor = 1e-8);

}  // namespace klapi
