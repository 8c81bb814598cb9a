#include "klapi/envs.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <istream>
#include <iterator>
#include <limits>
#include <numbers>
#include <ostream>
#include <sstream>

#include <Eigen/Cholesky>
#include <Eigen/LU>

namespace klapi::envs {

// ---------------------------------------------------------------- contextual bandit

ContextualBanditEnv ContextualBanditEnv::synthetic_clusters(std::size_t num_classes, std::size_t dim,
                                                            double separation, std::uint64_t seed) {
  if (num_classes < 2) throw std::invalid_argument("synthetic_clusters: need at least two classes");
  if (dim < 1) throw std::invalid_argument("synthetic_clusters: dim must be >= 1");
  if (!(separation >= 0.0) || !std::isfinite(separation)) {
    throw std::invalid_argument("synthetic_clusters: separation must be finite and >= 0");
  }
  ContextualBanditEnv env;
  env.num_classes_ = num_classes;
  env.dim_ = dim;
  env.means_ = Mat(static_cast<Eigen::Index>(num_classes), static_cast<Eigen::Index>(dim));
  RngStream rng(seed);
  for (Eigen::Index c = 0; c < env.means_.rows(); ++c) {
    Vec direction(static_cast<Eigen::Index>(dim));
    do {
      for (Eigen::Index j = 0; j < direction.size(); ++j) direction[j] = rng.normal();
    } while (direction.norm() == 0.0);
    env.means_.row(c) = separation * direction.normalized().transpose();
  }
  return env;
}

ContextualBanditEnv ContextualBanditEnv::from_dataset(Mat features, std::vector<std::size_t> labels,
                                                      std::size_t num_classes) {
  if (features.rows() == 0 || static_cast<std::size_t>(features.rows()) != labels.size()) {
    throw std::invalid_argument("from_dataset: need one label per feature row");
  }
  if (num_classes < 2) throw std::invalid_argument("from_dataset: need at least two classes");
  for (std::size_t label : labels) {
    if (label >= num_classes) throw std::invalid_argument("from_dataset: label out of range");
  }
  ContextualBanditEnv env;
  env.num_classes_ = num_classes;
  env.dim_ = static_cast<std::size_t>(features.cols());
  env.dataset_features_ = std::move(features);
  env.dataset_labels_ = std::move(labels);
  return env;
}

LabeledContext ContextualBanditEnv::sample(RngStream& rng) const {
  LabeledContext ctx;
  if (is_synthetic()) {
    ctx.label = static_cast<std::size_t>(rng.uniform_index(num_classes_));
    ctx.features = means_.row(static_cast<Eigen::Index>(ctx.label)).transpose();
    for (Eigen::Index j = 0; j < ctx.features.size(); ++j) ctx.features[j] += rng.normal();
  } else {
    const auto row = rng.uniform_index(dataset_labels_.size());
    ctx.label = dataset_labels_[row];
    ctx.features = dataset_features_.row(static_cast<Eigen::Index>(row)).transpose();
  }
  return ctx;
}

// ---------------------------------------------------------------- IDX

namespace {

std::vector<unsigned char> read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IdxError(IdxError::Kind::kIo, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t offset, const std::string& what) {
  if (bytes.size() < offset + 4) throw IdxError(IdxError::Kind::kTruncated, what + ": truncated header");
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void write_be32(std::ostream& out, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>((v >> 24) & 0xFF), static_cast<char>((v >> 16) & 0xFF),
                              static_cast<char>((v >> 8) & 0xFF), static_cast<char>(v & 0xFF)};
  out.write(b.data(), 4);
}

}  // namespace

IdxDataset idx_load(const std::filesystem::path& images, const std::filesystem::path& labels) {
  const auto image_bytes = read_all(images);
  const auto label_bytes = read_all(labels);

  const auto image_magic = read_be32(image_bytes, 0, "images");
  if (image_magic != kIdxImageMagic) {
    throw IdxError(IdxError::Kind::kWrongMagic, "images: wrong magic " + std::to_string(image_magic));
  }
  const auto label_magic = read_be32(label_bytes, 0, "labels");
  if (label_magic != kIdxLabelMagic) {
    throw IdxError(IdxError::Kind::kWrongMagic, "labels: wrong magic " + std::to_string(label_magic));
  }
  const std::size_t n_images = read_be32(image_bytes, 4, "images");
  const std::size_t rows = read_be32(image_bytes, 8, "images");
  const std::size_t cols = read_be32(image_bytes, 12, "images");
  const std::size_t n_labels = read_be32(label_bytes, 4, "labels");
  if (rows == 0 || cols == 0) throw IdxError(IdxError::Kind::kBadHeader, "images: zero image dimension");
  if (n_images != n_labels) {
    throw IdxError(IdxError::Kind::kCountMismatch, "image count " + std::to_string(n_images) +
                                                       " differs from label count " + std::to_string(n_labels));
  }
  const std::size_t pixels = rows * cols;
  if (image_bytes.size() < 16 + n_images * pixels) throw IdxError(IdxError::Kind::kTruncated, "images: truncated data");
  if (label_bytes.size() < 8 + n_labels) throw IdxError(IdxError::Kind::kTruncated, "labels: truncated data");

  IdxDataset data;
  data.rows = rows;
  data.cols = cols;
  data.features = Mat(static_cast<Eigen::Index>(n_images), static_cast<Eigen::Index>(pixels));
  for (std::size_t i = 0; i < n_images; ++i) {
    for (std::size_t j = 0; j < pixels; ++j) {
      data.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = image_bytes[16 + i * pixels + j] / 255.0;
    }
  }
  data.labels.reserve(n_labels);
  for (std::size_t i = 0; i < n_labels; ++i) data.labels.push_back(label_bytes[8 + i]);
  return data;
}

void idx_save(const IdxDataset& data, const std::filesystem::path& images, const std::filesystem::path& labels) {
  if (static_cast<std::size_t>(data.features.rows()) != data.labels.size() ||
      static_cast<std::size_t>(data.features.cols()) != data.rows * data.cols) {
    throw std::invalid_argument("idx_save: inconsistent dataset shape");
  }
  std::ofstream img(images, std::ios::binary);
  std::ofstream lab(labels, std::ios::binary);
  if (!img || !lab) throw IdxError(IdxError::Kind::kIo, "idx_save: cannot open output");
  write_be32(img, kIdxImageMagic);
  write_be32(img, static_cast<std::uint32_t>(data.labels.size()));
  write_be32(img, static_cast<std::uint32_t>(data.rows));
  write_be32(img, static_cast<std::uint32_t>(data.cols));
  for (Eigen::Index i = 0; i < data.features.rows(); ++i) {
    for (Eigen::Index j = 0; j < data.features.cols(); ++j) {
      const double v = std::clamp(std::round(data.features(i, j) * 255.0), 0.0, 255.0);
      img.put(static_cast<char>(static_cast<unsigned char>(v)));
    }
  }
  write_be32(lab, kIdxLabelMagic);
  write_be32(lab, static_cast<std::uint32_t>(data.labels.size()));
  for (std::size_t label : data.labels) lab.put(static_cast<char>(static_cast<unsigned char>(label)));
}

// ---------------------------------------------------------------- Fourier

namespace {

std::size_t fourier_size(std::size_t dim, int order, std::size_t budget) {
  if (order < 0) throw std::invalid_argument("fourier_features: order must be >= 0");
  std::size_t size = 1;
  const auto base = static_cast<std::size_t>(order) + 1;
  for (std::size_t j = 0; j < dim; ++j) {
    if (size > budget / base) {
      throw std::length_error("fourier_features: (order+1)^d exceeds the budget of " + std::to_string(budget));
    }
    size *= base;
  }
  if (size > budget) throw std::length_error("fourier_features: (order+1)^d exceeds the budget of " + std::to_string(budget));
  return size;
}

}  // namespace

Vec fourier_features(const Vec& x, int order, std::size_t budget) {
  const auto dim = static_cast<std::size_t>(x.size());
  const std::size_t size = fourier_size(dim, order, budget);
  const auto base = static_cast<std::size_t>(order) + 1;
  const Vec clamped = x.cwiseMax(0.0).cwiseMin(1.0);
  Vec out(static_cast<Eigen::Index>(size));
  for (std::size_t i = 0; i < size; ++i) {
    std::size_t code = i;
    double dot = 0.0;
    for (std::size_t j = dim; j-- > 0;) {
      dot += static_cast<double>(code % base) * clamped[static_cast<Eigen::Index>(j)];
      code /= base;
    }
    out[static_cast<Eigen::Index>(i)] = std::cos(std::numbers::pi * dot);
  }
  return out;
}

FourierBasis::FourierBasis(Vec lower, Vec upper, int order, std::size_t budget)
    : lower_(std::move(lower)), upper_(std::move(upper)), order_(order), budget_(budget) {
  if (lower_.size() != upper_.size() || lower_.size() == 0) throw std::invalid_argument("FourierBasis: bad range");
  if (((upper_ - lower_).array() <= 0.0).any()) throw std::invalid_argument("FourierBasis: empty range");
  size_ = fourier_size(static_cast<std::size_t>(lower_.size()), order_, budget_);
}

Vec FourierBasis::operator()(const Vec& observation) const {
  if (observation.size() != lower_.size()) throw std::invalid_argument("FourierBasis: observation dimension mismatch");
  const Vec scaled = (observation - lower_).cwiseQuotient(upper_ - lower_);
  return fourier_features(scaled, order_, budget_);
}

// ---------------------------------------------------------------- tabular MDP

TabularMDP::TabularMDP(RowMat transitions, RowMat rewards)
    : num_states_(static_cast<std::size_t>(rewards.rows())), num_actions_(static_cast<std::size_t>(rewards.cols())),
      transitions_(std::move(transitions)), rewards_(std::move(rewards)) {
  if (num_states_ == 0 || num_actions_ == 0) throw std::invalid_argument("TabularMDP: empty state or action set");
  if (static_cast<std::size_t>(transitions_.rows()) != num_states_ * num_actions_ ||
      static_cast<std::size_t>(transitions_.cols()) != num_states_) {
    throw std::invalid_argument("TabularMDP: transition matrix must be (|X||A|) x |X|");
  }
  if (!rewards_.allFinite()) throw std::invalid_argument("TabularMDP: rewards must be finite");
  for (Eigen::Index row = 0; row < transitions_.rows(); ++row) {
    if ((transitions_.row(row).array() < 0.0).any() || std::abs(transitions_.row(row).sum() - 1.0) > 1e-12) {
      throw std::invalid_argument("TabularMDP: transition row " + std::to_string(row) + " is not a distribution");
    }
  }
}

TabularMDP TabularMDP::with_observations(Mat observations, Vec lower, Vec upper) const {
  if (static_cast<std::size_t>(observations.rows()) != num_states_ || observations.cols() != lower.size() ||
      lower.size() != upper.size()) {
    throw std::invalid_argument("TabularMDP: observation table shape mismatch");
  }
  TabularMDP out = *this;
  out.observations_ = std::move(observations);
  out.obs_lower_ = std::move(lower);
  out.obs_upper_ = std::move(upper);
  return out;
}

std::size_t TabularMDP::sample_next(std::size_t x, std::size_t a, RngStream& rng) const {
  const auto row = transitions_.row(static_cast<Eigen::Index>(x * num_actions_ + a));
  const double u = rng.uniform();
  double cumulative = 0.0;
  std::size_t last_positive = 0;
  for (Eigen::Index j = 0; j < row.size(); ++j) {
    if (row[j] > 0.0) last_positive = static_cast<std::size_t>(j);
    cumulative += row[j];
    if (u < cumulative) return static_cast<std::size_t>(j);
  }
  return last_positive;
}

TabularMDP TabularMDP::relabeled(const std::vector<std::size_t>& state_perm,
                                 const std::vector<std::size_t>& action_perm) const {
  if (state_perm.size() != num_states_ || action_perm.size() != num_actions_) {
    throw std::invalid_argument("relabeled: permutation size mismatch");
  }
  std::vector<std::size_t> inverse_state(num_states_);
  for (std::size_t i = 0; i < num_states_; ++i) inverse_state.at(state_perm[i]) = i;
  RowMat r(rewards_.rows(), rewards_.cols());
  RowMat p(transitions_.rows(), transitions_.cols());
  for (std::size_t x = 0; x < num_states_; ++x) {
    for (std::size_t a = 0; a < num_actions_; ++a) {
      const std::size_t old_x = state_perm[x];
      const std::size_t old_a = action_perm[a];
      r(static_cast<Eigen::Index>(x), static_cast<Eigen::Index>(a)) = reward(old_x, old_a);
      for (std::size_t y = 0; y < num_states_; ++y) {
        p(static_cast<Eigen::Index>(x * num_actions_ + a), static_cast<Eigen::Index>(inverse_state[y])) =
            transitions_(static_cast<Eigen::Index>(old_x * num_actions_ + old_a), static_cast<Eigen::Index>(y));
      }
    }
  }
  return TabularMDP(std::move(p), std::move(r));
}

TabularMDP read_mdp_text(std::istream& in) {
  long states = 0, actions = 0;
  if (!(in >> states >> actions) || states <= 0 || actions <= 0) {
    throw std::runtime_error("read_mdp_text: bad header, expected '|X| |A|'");
  }
  RowMat r(states, actions);
  for (long x = 0; x < states; ++x) {
    for (long a = 0; a < actions; ++a) {
      if (!(in >> r(x, a))) throw std::runtime_error("read_mdp_text: truncated reward table");
    }
  }
  RowMat p(states * actions, states);
  for (long row = 0; row < states * actions; ++row) {
    for (long y = 0; y < states; ++y) {
      if (!(in >> p(row, y))) throw std::runtime_error("read_mdp_text: truncated transition table");
    }
  }
  return TabularMDP(std::move(p), std::move(r));
}

TabularMDP load_mdp_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open MDP file " + path.string());
  return read_mdp_text(in);
}

void write_mdp_text(std::ostream& out, const TabularMDP& mdp) {
  out.precision(17);
  out << mdp.num_states() << ' ' << mdp.num_actions() << '\n';
  const auto write_rows = [&](const RowMat& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) out << (j ? " " : "") << m(i, j);
      out << '\n';
    }
  };
  write_rows(mdp.rewards());
  write_rows(mdp.transitions());
}

TabularMDP riverswim_fixture() {
  constexpr std::size_t n = 6;
  constexpr std::size_t left = 0, right = 1;
  RowMat p = RowMat::Zero(n * 2, n);
  RowMat r = RowMat::Zero(n, 2);
  for (std::size_t x = 0; x < n; ++x) {
    const auto li = static_cast<Eigen::Index>(x * 2 + left);
    const auto ri = static_cast<Eigen::Index>(x * 2 + right);
    p(li, static_cast<Eigen::Index>(x == 0 ? 0 : x - 1)) = 1.0;
    if (x == 0) {
      p(ri, 0) = 0.4;
      p(ri, 1) = 0.6;
    } else if (x + 1 == n) {
      p(ri, static_cast<Eigen::Index>(x)) = 0.95;
      p(ri, static_cast<Eigen::Index>(x - 1)) = 0.05;
    } else {
      p(ri, static_cast<Eigen::Index>(x - 1)) = 0.05;
      p(ri, static_cast<Eigen::Index>(x)) = 0.35;
      p(ri, static_cast<Eigen::Index>(x + 1)) = 0.6;
    }
  }
  r(0, left) = 0.05;
  r(n - 1, right) = 1.0;
  Mat obs(n, 1);
  for (std::size_t x = 0; x < n; ++x) obs(static_cast<Eigen::Index>(x), 0) = static_cast<double>(x);
  return TabularMDP(std::move(p), std::move(r))
      .with_observations(std::move(obs), Vec::Constant(1, 0.0), Vec::Constant(1, static_cast<double>(n - 1)));
}

TabularMDP gridworld_fixture() {
  constexpr int side = 4;
  constexpr int n = side * side;
  constexpr int goal = n - 1;
  // up, down, left, right
  constexpr std::array<int, 4> dr{-1, 1, 0, 0};
  constexpr std::array<int, 4> dc{0, 0, -1, 1};
  RowMat p = RowMat::Zero(n * 4, n);
  RowMat r = RowMat::Zero(n, 4);
  const auto move = [&](int s, int a) {
    const int row = std::clamp(s / side + dr[static_cast<std::size_t>(a)], 0, side - 1);
    const int col = std::clamp(s % side + dc[static_cast<std::size_t>(a)], 0, side - 1);
    return row * side + col;
  };
  for (int s = 0; s < n; ++s) {
    for (int a = 0; a < 4; ++a) {
      const auto row = static_cast<Eigen::Index>(s * 4 + a);
      if (s == goal) {
        r(s, a) = 1.0;
        p(row, 0) = 1.0;
        continue;
      }
      // Intended move with probability 0.8, each perpendicular move 0.1.
      const bool vertical = a < 2;
      const int side_a = vertical ? 2 : 0;
      p(row, move(s, a)) += 0.8;
      p(row, move(s, side_a)) += 0.1;
      p(row, move(s, side_a + 1)) += 0.1;
    }
  }
  Mat obs(n, 2);
  for (int s = 0; s < n; ++s) {
    obs(s, 0) = s / side;
    obs(s, 1) = s % side;
  }
  return TabularMDP(std::move(p), std::move(r))
      .with_observations(std::move(obs), Vec::Zero(2), Vec::Constant(2, side - 1.0));
}

TabularMDP fixture_by_name(const std::string& name) {
  if (name == "riverswim") return riverswim_fixture();
  if (name == "gridworld") return gridworld_fixture();
  throw std::invalid_argument("unknown MDP fixture: " + name);
}

// ---------------------------------------------------------------- exact solvers

namespace {

RowMat induced_chain(const TabularMDP& mdp, const PolicyTable& policy) {
  const auto n = static_cast<Eigen::Index>(mdp.num_states());
  const auto m = static_cast<Eigen::Index>(mdp.num_actions());
  RowMat chain = RowMat::Zero(n, n);
  for (Eigen::Index x = 0; x < n; ++x) {
    for (Eigen::Index a = 0; a < m; ++a) chain.row(x) += policy(x, a) * mdp.transitions().row(x * m + a);
  }
  return chain;
}

void validate_policy_table(const TabularMDP& mdp, const PolicyTable& policy) {
  if (static_cast<std::size_t>(policy.rows()) != mdp.num_states() ||
      static_cast<std::size_t>(policy.cols()) != mdp.num_actions()) {
    throw std::invalid_argument("policy table must be |X| x |A|");
  }
  for (Eigen::Index x = 0; x < policy.rows(); ++x) {
    if ((policy.row(x).array() < 0.0).any() || std::abs(policy.row(x).sum() - 1.0) > 1e-9) {
      throw std::invalid_argument("policy table row " + std::to_string(x) + " is not a distribution");
    }
  }
}

}  // namespace

StationaryAnalysis solve_policy(const TabularMDP& mdp, const PolicyTable& policy) {
  validate_policy_table(mdp, policy);
  const auto n = static_cast<Eigen::Index>(mdp.num_states());
  const RowMat chain = induced_chain(mdp, policy);
  const Vec r_pi = policy.cwiseProduct(mdp.rewards()).rowwise().sum();

  // Power iteration on the lazy chain (I + P)/2: same stationary
  // distribution, no periodicity.
  constexpr int kMaxIterations = 2000000;
  Eigen::RowVectorXd mu = Eigen::RowVectorXd::Constant(n, 1.0 / static_cast<double>(n));
  bool converged = false;
  for (int it = 0; it < kMaxIterations; ++it) {
    Eigen::RowVectorXd next = 0.5 * (mu + mu * chain);
    next /= next.sum();
    const double change = (next - mu).lpNorm<1>();
    mu = next;
    if (change <= 1e-14) {
      converged = true;
      break;
    }
  }
  if (!converged) throw std::runtime_error("solve_policy: power iteration did not converge (chain not ergodic?)");

  // (I - P + 1 mu) V = r_pi - J 1 has a unique solution iff the chain is
  // unichain; it also enforces <mu, V> = 0.
  const double J = mu.dot(r_pi);
  Mat system = Mat::Identity(n, n) - Mat(chain);
  system += Vec::Ones(n) * mu;
  Eigen::FullPivLU<Mat> lu(system);
  if (!lu.isInvertible()) throw std::runtime_error("solve_policy: stationary distribution is not unique");
  const Vec V = lu.solve(r_pi - J * Vec::Ones(n));

  // Polish mu against the same system: mu (I - P + 1 mu) = mu.
  Eigen::FullPivLU<Mat> lu_t(Mat(Mat::Identity(n, n) - Mat(chain)).transpose() + mu.transpose() * Eigen::RowVectorXd::Ones(n));
  if (lu_t.isInvertible()) {
    Vec refined = lu_t.solve(mu.transpose());
    if ((refined.array() >= -1e-12).all()) {
      refined = refined.cwiseMax(0.0);
      mu = refined.transpose() / refined.sum();
    }
  }

  StationaryAnalysis out;
  out.mu = mu.transpose();
  out.J = out.mu.dot(r_pi);
  out.V = V;
  const auto m = static_cast<Eigen::Index>(mdp.num_actions());
  out.Q = RowMat(n, m);
  out.nu = RowMat(n, m);
  for (Eigen::Index x = 0; x < n; ++x) {
    for (Eigen::Index a = 0; a < m; ++a) {
      out.Q(x, a) = mdp.rewards()(x, a) - out.J + mdp.transitions().row(x * m + a).dot(V);
      out.nu(x, a) = out.mu[x] * policy(x, a);
    }
  }
  out.A = out.Q.colwise() - out.V;
  return out;
}

OptimalSolution solve_optimal(const TabularMDP& mdp, double span_tol, int max_iterations) {
  const auto n = static_cast<Eigen::Index>(mdp.num_states());
  const auto m = static_cast<Eigen::Index>(mdp.num_actions());
  // Aperiodicity transform P' = (I + P)/2 keeps every policy's gain.
  Vec h = Vec::Zero(n);
  Vec backup(n);
  std::vector<std::size_t> greedy(static_cast<std::size_t>(n), 0);
  for (int it = 1; it <= max_iterations; ++it) {
    for (Eigen::Index x = 0; x < n; ++x) {
      double best = -std::numeric_limits<double>::infinity();
      for (Eigen::Index a = 0; a < m; ++a) {
        const double value = mdp.rewards()(x, a) + 0.5 * h[x] + 0.5 * mdp.transitions().row(x * m + a).dot(h);
        if (value > best + 1e-15) {
          best = value;
          greedy[static_cast<std::size_t>(x)] = static_cast<std::size_t>(a);
        }
      }
      backup[x] = best;
    }
    const Vec diff = backup - h;
    const double hi = diff.maxCoeff();
    const double lo = diff.minCoeff();
    h = backup.array() - backup[0];
    if (hi - lo < span_tol) {
      return {0.5 * (hi + lo), greedy, h, it};
    }
  }
  throw std::runtime_error("solve_optimal: relative value iteration did not converge within the iteration budget");
}

PolicyTable deterministic_policy_table(const std::vector<std::size_t>& actions, std::size_t num_actions) {
  PolicyTable table = PolicyTable::Zero(static_cast<Eigen::Index>(actions.size()), static_cast<Eigen::Index>(num_actions));
  for (std::size_t x = 0; x < actions.size(); ++x) {
    table(static_cast<Eigen::Index>(x), static_cast<Eigen::Index>(actions[x])) = 1.0;
  }
  return table;
}

// ---------------------------------------------------------------- Monte-Carlo evaluation

namespace {

/// sum_{s=t}^{min(t+H,T)-1} x_s for every t.
std::vector<double> window_sums(const std::vector<double>& x, std::size_t horizon) {
  const std::size_t T = x.size();
  std::vector<double> prefix(T + 1, 0.0);
  for (std::size_t t = 0; t < T; ++t) prefix[t + 1] = prefix[t] + x[t];
  std::vector<double> out(T);
  for (std::size_t t = 0; t < T; ++t) out[t] = prefix[std::min(T, t + horizon)] - prefix[t];
  return out;
}

}  // namespace

TabularEstimate mc_policy_eval_tabular(const Trajectory& trajectory, std::size_t num_states, std::size_t num_actions,
                                       std::size_t horizon) {
  if (trajectory.empty()) throw std::invalid_argument("mc_policy_eval: empty trajectory");
  if (horizon < 1) throw std::invalid_argument("mc_policy_eval: horizon must be >= 1");
  const std::size_t T = trajectory.size();
  TabularEstimate est;
  double reward_sum = 0.0;
  for (const Transition& tr : trajectory) {
    if (tr.state >= num_states || tr.next_state >= num_states || tr.action >= num_actions) {
      throw std::out_of_range("mc_policy_eval: transition outside the declared state/action sets");
    }
    reward_sum += tr.reward;
  }
  est.J_hat = reward_sum / static_cast<double>(T);

  std::vector<double> centered(T);
  for (std::size_t t = 0; t < T; ++t) centered[t] = trajectory[t].reward - est.J_hat;
  const std::vector<double> suffix = window_sums(centered, horizon);

  const auto n = static_cast<Eigen::Index>(num_states);
  const auto m = static_cast<Eigen::Index>(num_actions);
  Vec v_sum = Vec::Zero(n);
  Eigen::VectorXi state_visits = Eigen::VectorXi::Zero(n);
  for (std::size_t t = 0; t < T; ++t) {
    const auto x = static_cast<Eigen::Index>(trajectory[t].state);
    v_sum[x] += suffix[t];
    ++state_visits[x];
  }
  est.V = Vec::Zero(n);
  double weighted = 0.0;
  for (Eigen::Index x = 0; x < n; ++x) {
    if (state_visits[x] == 0) continue;
    est.V[x] = v_sum[x] / state_visits[x];
    weighted += est.V[x] * state_visits[x];
  }
  const double center = weighted / static_cast<double>(T);
  for (Eigen::Index x = 0; x < n; ++x) {
    if (state_visits[x] > 0) est.V[x] -= center;
  }

  est.Q = RowMat::Zero(n, m);
  est.visits = Eigen::MatrixXi::Zero(n, m);
  for (const Transition& tr : trajectory) {
    const auto x = static_cast<Eigen::Index>(tr.state);
    const auto a = static_cast<Eigen::Index>(tr.action);
    est.Q(x, a) += tr.reward + est.V[static_cast<Eigen::Index>(tr.next_state)];
    ++est.visits(x, a);
  }
  for (Eigen::Index x = 0; x < n; ++x) {
    for (Eigen::Index a = 0; a < m; ++a) {
      if (est.visits(x, a) > 0) est.Q(x, a) /= est.visits(x, a);
    }
  }
  return est;
}

Vec differential_targets(const Vec& rewards, std::size_t horizon) {
  if (rewards.size() == 0) throw std::invalid_argument("differential_targets: empty reward sequence");
  if (horizon < 1) throw std::invalid_argument("differential_targets: horizon must be >= 1");
  const double j_hat = rewards.mean();
  std::vector<double> centered(static_cast<std::size_t>(rewards.size()));
  for (Eigen::Index t = 0; t < rewards.size(); ++t) centered[static_cast<std::size_t>(t)] = rewards[t] - j_hat;
  // r_t + sum_{s=t+1}^{min(t+H,T)-1} (r_s - J_hat)
  const std::vector<double> tail = window_sums(centered, horizon - 1);
  Vec targets(rewards.size());
  for (Eigen::Index t = 0; t < rewards.size(); ++t) {
    const auto i = static_cast<std::size_t>(t);
    targets[t] = rewards[t] + (i + 1 < centered.size() ? tail[i + 1] : 0.0);
  }
  return targets;
}

LinearQModel fit_linear_q(const Mat& features, const std::vector<std::size_t>& actions, const Vec& targets,
                          std::size_t num_actions, const LinearQModel* previous, double ridge) {
  const auto n = features.rows();
  const auto d = features.cols();
  if (static_cast<std::size_t>(n) != actions.size() || targets.size() != n || n == 0) {
    throw std::invalid_argument("fit_linear_q: need one action and target per feature row");
  }
  if (previous && (static_cast<std::size_t>(previous->weights.rows()) != num_actions || previous->weights.cols() != d)) {
    throw std::invalid_argument("fit_linear_q: warm-start weights have the wrong shape");
  }
  LinearQModel model;
  model.weights = RowMat::Zero(static_cast<Eigen::Index>(num_actions), d);
  model.J_hat = targets.mean();
  // The per-action blocks of the design matrix are disjoint, so the normal
  // equations decouple by action.
  std::vector<Mat> gram(num_actions, Mat::Zero(d, d));
  std::vector<Vec> rhs(num_actions, Vec::Zero(d));
  for (Eigen::Index t = 0; t < n; ++t) {
    const std::size_t a = actions[static_cast<std::size_t>(t)];
    if (a >= num_actions) throw std::out_of_range("fit_linear_q: action out of range");
    gram[a].selfadjointView<Eigen::Lower>().rankUpdate(features.row(t).transpose());
    rhs[a] += targets[t] * features.row(t).transpose();
  }
  for (std::size_t a = 0; a < num_actions; ++a) {
    Mat g = gram[a].selfadjointView<Eigen::Lower>();
    g.diagonal().array() += ridge;
    Vec b = rhs[a];
    if (previous) b += ridge * previous->weights.row(static_cast<Eigen::Index>(a)).transpose();
    model.weights.row(static_cast<Eigen::Index>(a)) = g.ldlt().solve(b).transpose();
  }
  return model;
}

RowMat mc_policy_eval(const Trajectory& trajectory, EvalMode mode, std::size_t num_states, std::size_t num_actions,
                      const Mat* state_features, LinearQModel* warm_start, std::size_t horizon) {
  if (mode == EvalMode::kTabularEmpirical) return mc_policy_eval_tabular(trajectory, num_states, num_actions, horizon).Q;
  if (trajectory.empty()) throw std::invalid_argument("mc_policy_eval: empty trajectory");
  if (!state_features || static_cast<std::size_t>(state_features->rows()) != num_states) {
    throw std::invalid_argument("mc_policy_eval: least-squares mode needs one feature row per state");
  }
  const auto T = static_cast<Eigen::Index>(trajectory.size());
  Mat design(T, state_features->cols());
  std::vector<std::size_t> actions(trajectory.size());
  Vec rewards(T);
  for (Eigen::Index t = 0; t < T; ++t) {
    const Transition& tr = trajectory[static_cast<std::size_t>(t)];
    if (tr.state >= num_states) throw std::out_of_range("mc_policy_eval: state out of range");
    design.row(t) = state_features->row(static_cast<Eigen::Index>(tr.state));
    actions[static_cast<std::size_t>(t)] = tr.action;
    rewards[t] = tr.reward;
  }
  const bool warm = warm_start && warm_start->weights.size() > 0;
  LinearQModel model = fit_linear_q(design, actions, differential_targets(rewards, horizon), num_actions,
                                    warm ? warm_start : nullptr);
  if (warm_start) *warm_start = model;
  return model.predict_all(*state_features);
}

}  // namespace klapi::envs
