#include "klapi/mathcore.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

namespace klapi {

ProbVec::ProbVec(Vec values) : values_(std::move(values)) {
  if (values_.size() == 0) throw std::invalid_argument("ProbVec: empty vector");
  double sum = 0.0;
  for (Eigen::Index i = 0; i < values_.size(); ++i) {
    const double v = values_[i];
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw std::invalid_argument("ProbVec: entry " + std::to_string(i) + " is negative or not finite");
    }
    sum += v;
  }
  if (std::abs(sum - 1.0) > kSumTolerance * std::max<double>(1.0, static_cast<double>(values_.size()) / 16.0)) {
    throw std::invalid_argument("ProbVec: entries sum to " + std::to_string(sum));
  }
}

ProbVec ProbVec::normalized(const Vec& weights) {
  const double total = weights.sum();
  if (!(total > 0.0) || !std::isfinite(total)) {
    throw std::invalid_argument("ProbVec::normalized: total mass must be positive and finite");
  }
  return ProbVec(weights / total);
}

ProbVec ProbVec::uniform(std::size_t n) {
  if (n == 0) throw std::invalid_argument("ProbVec::uniform: n must be positive");
  return ProbVec(Vec::Constant(static_cast<Eigen::Index>(n), 1.0 / static_cast<double>(n)));
}

ProbVec ProbVec::one_hot(std::size_t n, std::size_t index) {
  if (index >= n) throw std::out_of_range("ProbVec::one_hot: index out of range");
  Vec v = Vec::Zero(static_cast<Eigen::Index>(n));
  v[static_cast<Eigen::Index>(index)] = 1.0;
  return ProbVec(std::move(v));
}

double log_sum_exp(const Eigen::Ref<const Vec>& v) {
  if (v.size() == 0) throw std::invalid_argument("log_sum_exp: empty vector");
  const double m = v.maxCoeff();
  if (std::isinf(m)) return m;
  return m + std::log((v.array() - m).exp().sum());
}

ProbVec softmax(const Eigen::Ref<const Vec>& v) {
  const double lse = log_sum_exp(v);
  Vec p = (v.array() - lse).exp();
  // Renormalize once so the sum matches 1 to the last ulp.
  p /= p.sum();
  return ProbVec(std::move(p));
}

Mat log_softmax_rows(const Mat& activations) {
  Mat out(activations.rows(), activations.cols());
  for (Eigen::Index i = 0; i < activations.rows(); ++i) {
    const double m = activations.row(i).maxCoeff();
    const double lse = m + std::log((activations.row(i).array() - m).exp().sum());
    out.row(i) = activations.row(i).array() - lse;
  }
  return out;
}

Mat softmax_rows(const Mat& activations) {
  Mat out = log_softmax_rows(activations).array().exp().matrix();
  for (Eigen::Index i = 0; i < out.rows(); ++i) out.row(i) /= out.row(i).sum();
  return out;
}

double kl_divergence(const ProbVec& p, const ProbVec& q) {
  if (p.size() != q.size()) throw std::invalid_argument("kl_divergence: dimension mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    if (q[i] == 0.0) return std::numeric_limits<double>::infinity();
    total += p[i] * std::log(p[i] / q[i]);
  }
  return std::max(total, 0.0);
}

double bernoulli_kl(double a, double b) {
  constexpr double kClamp = 1e-15;
  b = std::clamp(b, kClamp, 1.0 - kClamp);
  double total = 0.0;
  if (a > 0.0) total += a * std::log(a / b);
  if (a < 1.0) total += (1.0 - a) * std::log((1.0 - a) / (1.0 - b));
  return std::max(total, 0.0);
}

double std_normal_cdf(double z) {
  return 0.5 * std::erfc(-z / std::numbers::sqrt2);
}

double bisect(const std::function<double(double)>& f, double lo, double hi, double tol) {
  if (!(lo < hi)) throw std::invalid_argument("bisect: need lo < hi");
  double f_lo = f(lo);
  const double f_hi = f(hi);
  if (f_lo == 0.0) return lo;
  if (f_hi == 0.0) return hi;
  if ((f_lo < 0.0) == (f_hi < 0.0)) throw std::domain_error("bisect: no sign change on bracket");
  while (hi - lo > tol) {
    const double mid = lo + 0.5 * (hi - lo);
    if (mid <= lo || mid >= hi) break;
    const double f_mid = f(mid);
    if (f_mid == 0.0) return mid;
    if ((f_mid < 0.0) == (f_lo < 0.0)) {
      lo = mid;
      f_lo = f_mid;
    } else {
      hi = mid;
    }
  }
  return lo + 0.5 * (hi - lo);
}

AdamState AdamState::for_dimension(Eigen::Index dim, double learning_rate) {
  AdamState s;
  s.learning_rate = learning_rate;
  s.first_moment = Vec::Zero(dim);
  s.second_moment = Vec::Zero(dim);
  return s;
}

std::pair<AdamState, Vec> adam_step(const AdamState& state, const Vec& params, const Vec& grad) {
  if (params.size() != grad.size() || state.first_moment.size() != params.size() ||
      state.second_moment.size() != params.size()) {
    throw std::invalid_argument("adam_step: dimension mismatch");
  }
  AdamState next = state;
  next.step = state.step + 1;
  next.first_moment = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad;
  next.second_moment = state.beta2 * state.second_moment + (1.0 - state.beta2) * grad.cwiseProduct(grad);
  const double t = static_cast<double>(next.step);
  const double bias1 = 1.0 - std::pow(state.beta1, t);
  const double bias2 = 1.0 - std::pow(state.beta2, t);
  Vec updated = params.array() - state.learning_rate * (next.first_moment.array() / bias1) /
                                     ((next.second_moment.array() / bias2).sqrt() + state.epsilon);
  return {std::move(next), std::move(updated)};
}

Vec finite_diff_grad(const std::function<double(const Vec&)>& f, const Vec& x, double h) {
  Vec grad(x.size());
  Vec probe = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double up = f(probe);
    probe[i] = x[i] - h;
    const double down = f(probe);
    probe[i] = x[i];
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

double relative_error(const Vec& a, const Vec& b, double floor) {
  if (a.size() != b.size()) throw std::invalid_argument("relative_error: dimension mismatch");
  const double scale = std::max({a.norm(), b.norm(), floor});
  return (a - b).norm() / scale;
}

}  // namespace klapi
