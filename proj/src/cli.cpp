#include "klapi/cli.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "CLI11.hpp"
#include "klapi/api_loop.hpp"
#include "klapi/bandit.hpp"
#include "klapi/checks.hpp"
#include "klapi/envs.hpp"

namespace klapi::cli {

namespace {

constexpr int kExitCheckFailed = 1;
constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r\n");
  return s.substr(begin, end - begin + 1);
}

std::uint64_t parse_u64(const std::string& s) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
    throw UsageError("invalid seed '" + s + "'");
  }
  return std::stoull(s);
}

/// Runs task(i) for i in [0, n) on up to `jobs` threads. Each task owns its slot.
void run_parallel(std::size_t n, int jobs, const std::function<void(std::size_t)>& task) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, jobs)));
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        task(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::ofstream open_output(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string file_token(double v) {
  std::string s = format_number(v);
  std::replace(s.begin(), s.end(), '.', 'p');
  return s;
}

// ---------------------------------------------------------------- config files

/// Expands `--config FILE` into flags placed before the command-line flags.
/// Keys given explicitly on the command line are skipped, so flags win.
std::vector<std::string> expand_config(const std::vector<std::string>& args, const CLI::App& app) {
  if (args.empty()) return args;
  const CLI::App* sub = nullptr;
  for (const CLI::App* candidate : app.get_subcommands([](const CLI::App*) { return true; })) {
    if (candidate->get_name() == args[0]) sub = candidate;
  }
  if (!sub) return args;

  std::optional<std::string> config_path;
  std::vector<std::string> rest{args[0]};
  std::set<std::string> given;
  for (std::size_t i = 1; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a == "--config") {
      if (i + 1 >= args.size()) throw UsageError("--config needs a file name");
      config_path = args[++i];
      continue;
    }
    if (a.rfind("--config=", 0) == 0) {
      config_path = a.substr(9);
      continue;
    }
    if (a.rfind("--", 0) == 0) given.insert(a.substr(2, a.find('=') == std::string::npos ? std::string::npos : a.find('=') - 2));
    rest.push_back(a);
  }
  if (!config_path) return args;

  std::ifstream in(*config_path);
  if (!in) throw UsageError("cannot read config file " + *config_path);
  std::vector<std::string> expanded{args[0]};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError(*config_path + ":" + std::to_string(line_no) + ": expected key=value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const CLI::Option* opt = nullptr;
    try {
      opt = sub->get_option("--" + key);
    } catch (const CLI::OptionNotFound&) {
      throw UsageError(*config_path + ":" + std::to_string(line_no) + ": unknown key '" + key + "'");
    }
    if (given.count(key)) continue;
    if (opt->get_type_size() == 0) {
      if (value == "true" || value == "1" || value == "yes") expanded.push_back("--" + key);
      else if (!(value == "false" || value == "0" || value == "no")) {
        throw UsageError(*config_path + ":" + std::to_string(line_no) + ": '" + key + "' expects true or false");
      }
      continue;
    }
    expanded.push_back("--" + key);
    expanded.push_back(value);
  }
  expanded.insert(expanded.end(), rest.begin() + 1, rest.end());
  return expanded;
}

// ---------------------------------------------------------------- shared options

struct Common {
  std::string seeds;
  int jobs = 1;
  std::string out = "out";
};

void add_common(CLI::App* sub, Common& common, const std::string& default_seeds) {
  common.seeds = default_seeds;
  sub->add_option("--seeds", common.seeds, "Seed list, e.g. 0..4 or 1,5,9")->capture_default_str();
  sub->add_option("--jobs", common.jobs, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
  sub->add_option("--out", common.out, "Output directory")->capture_default_str();
  sub->add_option("--config", "Plain-text key=value file; command-line flags take precedence");
}

std::filesystem::path prepare_out(const Common& common) {
  std::filesystem::path dir(common.out);
  std::filesystem::create_directories(dir);
  return dir;
}

// ---------------------------------------------------------------- bandit

struct BanditArgs {
  Common common;
  std::vector<double> deltas{0.5, 1.0};
  std::vector<double> etas{0.1, 0.5, 1.0};
  std::vector<std::string> algos{"MD", "TRPO"};
  double sigma = 1.0;
  int tau = 20;
  int phases = 100;
  bool all_data = false;
  bool certify = false;
};

int cmd_bandit(const BanditArgs& args, std::ostream& out) {
  const auto seeds = parse_seed_list(args.common.seeds);
  std::vector<bandit::Algo> algos;
  for (const auto& a : args.algos) algos.push_back(bandit::parse_algo(a));
  for (double d : args.deltas) {
    if (!(d >= 0.0)) throw UsageError("--delta values must be >= 0");
  }
  for (double e : args.etas) {
    if (!(e > 0.0)) throw UsageError("--eta values must be positive");
  }
  if (args.tau < 1 || args.phases < 1) throw UsageError("--tau and --phases must be >= 1");
  if (!(args.sigma >= 0.0)) throw UsageError("--sigma must be >= 0");
  const auto dir = prepare_out(args.common);

  struct Task {
    bandit::Algo algo;
    double delta;
    double eta;
    std::uint64_t seed;
    bandit::BanditRunResult result;
  };
  std::vector<Task> tasks;
  for (double delta : args.deltas) {
    for (double eta : args.etas) {
      for (bandit::Algo algo : algos) {
        for (std::uint64_t seed : seeds) tasks.push_back({algo, delta, eta, seed, {}});
      }
    }
  }
  run_parallel(tasks.size(), args.common.jobs, [&](std::size_t i) {
    Task& t = tasks[i];
    bandit::ExperimentConfig config;
    config.algo = t.algo;
    config.eta = t.eta;
    config.tau = args.tau;
    config.phases = args.phases;
    config.seed = t.seed;
    config.use_all_data = args.all_data;
    t.result = bandit::run_bandit_experiment(bandit::BanditInstance(t.delta, args.sigma), config);
  });

  {
    auto file = open_output(dir / "bandit.csv");
    CsvWriter csv(file, kBanditHeader);
    for (const Task& t : tasks) {
      for (int k = 0; k < args.phases; ++k) {
        csv.row({bandit::to_string(t.algo), format_number(t.delta), format_number(t.eta), std::to_string(t.seed),
                 std::to_string(k + 1), format_number(t.result.theta_trace[static_cast<std::size_t>(k) + 1]),
                 format_number(t.result.phase_regret[static_cast<std::size_t>(k)])});
      }
    }
  }

  bool all_certified = true;
  const long horizon = static_cast<long>(args.tau) * args.phases;
  {
    auto file = open_output(dir / "bandit_summary.csv");
    CsvWriter csv(file, kBanditSummaryHeader);
    for (std::size_t begin = 0; begin < tasks.size(); begin += seeds.size()) {
      const Task& first = tasks[begin];
      double mean = 0.0;
      for (std::size_t i = 0; i < seeds.size(); ++i) mean += tasks[begin + i].result.cumulative_regret;
      mean /= static_cast<double>(seeds.size());
      double var = 0.0;
      for (std::size_t i = 0; i < seeds.size(); ++i) {
        const double d = tasks[begin + i].result.cumulative_regret - mean;
        var += d * d;
      }
      const double se = seeds.size() > 1 ? std::sqrt(var / static_cast<double>(seeds.size() - 1) / static_cast<double>(seeds.size())) : 0.0;
      // One-sided 95% normal interval.
      const double ci = 1.6448536269514722 * se;
      std::string bound_text;
      std::string certified;
      if (horizon > args.tau) {
        const double bound = bandit::regret_lower_bound(bandit::BanditInstance(first.delta, args.sigma), first.eta,
                                                        args.tau, horizon);
        bound_text = format_number(bound);
        if (args.certify && first.algo == bandit::Algo::kTrpo) {
          const bool ok = mean - ci >= bound && seeds.size() > 1;
          all_certified = all_certified && ok;
          certified = ok ? "1" : "0";
          out << "lemma2 delta=" << format_number(first.delta) << " eta=" << format_number(first.eta)
              << " mean_regret=" << format_number(mean) << " lower95=" << format_number(mean - ci)
              << " bound=" << bound_text << (ok ? " PASS" : " FAIL") << '\n';
        }
      }
      csv.row({bandit::to_string(first.algo), format_number(first.delta), format_number(first.eta),
               std::to_string(seeds.size()), format_number(mean), format_number(ci), bound_text, certified});
    }
  }

  for (double delta : args.deltas) {
    for (double eta : args.etas) {
      std::vector<Series> series;
      for (const Task& t : tasks) {
        if (t.delta != delta || t.eta != eta) continue;
        Series s{bandit::to_string(t.algo) + " seed " + std::to_string(t.seed), {}, {}};
        for (std::size_t k = 0; k < t.result.theta_trace.size(); ++k) {
          s.x.push_back(static_cast<double>(k));
          s.y.push_back(t.result.theta_trace[k]);
        }
        series.push_back(std::move(s));
      }
      write_svg(dir / ("bandit_delta" + file_token(delta) + "_eta" + file_token(eta) + ".svg"),
                "Two-armed bandit, delta=" + format_number(delta) + ", eta=" + format_number(eta), "phase",
                "pi(arm 1)", series);
    }
  }
  out << "wrote " << tasks.size() * static_cast<std::size_t>(args.phases) << " rows to " << (dir / "bandit.csv").string()
      << '\n';
  return args.certify && !all_certified ? kExitCheckFailed : 0;
}

// ---------------------------------------------------------------- API runs

struct ApiArgs {
  Common common;
  std::vector<std::string> algos;
  std::vector<double> etas;
  int tau = 1000;
  int phases = 100;
  double lr = 0.05;
  int policy_steps = 500;
  std::string policy = "log-linear";
  std::vector<std::size_t> hidden{32};
  std::string evaluation = "least-squares";
};

struct ApiTask {
  api::ImprovementKind kind;
  double eta;
  std::uint64_t seed;
  std::optional<api::ApiRun> result;
  const api::ApiRun& run() const { return *result; }
};

std::vector<ApiTask> run_api_grid(const api::Environment& env, const ApiArgs& args) {
  const auto seeds = parse_seed_list(args.common.seeds);
  if (args.etas.empty()) throw UsageError("--eta needs at least one value");
  api::ApiConfig base;
  base.tau = args.tau;
  base.phases = args.phases;
  base.optimizer.learning_rate = args.lr;
  base.policy_steps = args.policy_steps;
  base.policy.kind = parse_policy_kind(args.policy);
  base.policy.hidden = args.hidden;
  base.evaluation = api::parse_evaluation(args.evaluation);

  std::vector<ApiTask> tasks;
  for (const auto& name : args.algos) {
    const api::ImprovementKind kind = api::parse_improvement_kind(name);
    if (kind == api::ImprovementKind::kExactMd && base.policy.kind != PolicyKind::kTabular) {
      throw UsageError("ExactMD requires --policy tabular");
    }
    for (double eta : args.etas) {
      api::ApiConfig probe = base;
      probe.eta = eta;
      try {
        probe.validate();
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
      for (std::uint64_t seed : seeds) tasks.push_back({kind, eta, seed, std::nullopt});
    }
  }
  run_parallel(tasks.size(), args.common.jobs, [&](std::size_t i) {
    api::ApiConfig config = base;
    config.kind = tasks[i].kind;
    config.eta = tasks[i].eta;
    config.seed = tasks[i].seed;
    tasks[i].result = api::run_api(env, config);
  });
  return tasks;
}

void plot_api(const std::filesystem::path& dir, const std::string& prefix, const std::string& title,
              const std::vector<ApiTask>& tasks, std::optional<double> reference) {
  std::map<std::pair<std::string, double>, std::vector<Series>> groups;
  std::vector<std::pair<std::string, double>> order;
  for (const ApiTask& t : tasks) {
    const auto key = std::make_pair(api::to_string(t.kind), t.eta);
    if (!groups.count(key)) order.push_back(key);
    Series s{key.first + " seed " + std::to_string(t.seed), {}, {}};
    for (const auto& log : t.run().logs) {
      s.x.push_back(log.k);
      s.y.push_back(log.average_reward);
    }
    groups[key].push_back(std::move(s));
  }
  for (const auto& key : order) {
    write_svg(dir / (prefix + "_" + key.first + "_eta" + file_token(key.second) + ".svg"),
              title + ", " + key.first + ", eta=" + format_number(key.second), "phase", "average reward",
              groups[key], reference);
  }
}

struct ContextualArgs {
  ApiArgs api;
  bool synthetic = false;
  std::string idx_images;
  std::string idx_labels;
  std::size_t classes = 10;
  std::size_t dim = 16;
  double separation = 4.0;
  std::uint64_t env_seed = 2024;
};

int cmd_contextual(const ContextualArgs& args, std::ostream& out) {
  const bool use_idx = !args.idx_images.empty() || !args.idx_labels.empty();
  if (use_idx && args.synthetic) throw UsageError("--synthetic and --idx-images/--idx-labels are exclusive");
  if (use_idx && (args.idx_images.empty() || args.idx_labels.empty())) {
    throw UsageError("--idx-images and --idx-labels must be given together");
  }
  std::optional<envs::ContextualBanditEnv> env;
  if (use_idx) {
    envs::IdxDataset data = envs::idx_load(args.idx_images, args.idx_labels);
    std::size_t classes = args.classes;
    for (std::size_t label : data.labels) classes = std::max(classes, label + 1);
    env = envs::ContextualBanditEnv::from_dataset(std::move(data.features), std::move(data.labels), classes);
  } else {
    try {
      env = envs::ContextualBanditEnv::synthetic_clusters(args.classes, args.dim, args.separation, args.env_seed);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  const api::Environment environment = api::ContextualEnvironment(*env);
  const auto dir = prepare_out(args.api.common);
  const auto tasks = run_api_grid(environment, args.api);

  auto file = open_output(dir / "contextual.csv");
  CsvWriter csv(file, kContextualHeader);
  for (const ApiTask& t : tasks) {
    for (const auto& log : t.run().logs) {
      csv.row({api::to_string(t.kind), format_number(t.eta), std::to_string(t.seed), std::to_string(log.k),
               format_number(log.average_reward), format_number(log.report.final_loss), format_number(log.log_loss),
               format_number(log.kl_prev_new), format_number(log.kl_new_prev), std::to_string(log.report.steps),
               to_string(log.report.stop_reason)});
    }
  }
  plot_api(dir, "contextual", "Contextual bandit", tasks, std::nullopt);
  out << "wrote " << tasks.size() * static_cast<std::size_t>(args.api.phases) << " rows to "
      << (dir / "contextual.csv").string() << '\n';
  return 0;
}

struct MdpArgs {
  ApiArgs api;
  std::string fixture = "riverswim";
  std::string mdp_file;
  std::string features = "raw";
  int order = 3;
};

int cmd_mdp(const MdpArgs& args, std::ostream& out) {
  std::optional<envs::TabularMDP> mdp;
  if (!args.mdp_file.empty()) {
    mdp = envs::load_mdp_text(args.mdp_file);
  } else {
    try {
      mdp = envs::fixture_by_name(args.fixture);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  const double j_star = envs::solve_optimal(*mdp).J_star;
  const api::Environment environment = api::MdpEnvironment(*mdp, api::parse_feature_map(args.features), args.order);
  const auto dir = prepare_out(args.api.common);
  const auto tasks = run_api_grid(environment, args.api);

  auto file = open_output(dir / "mdp.csv");
  CsvWriter csv(file, kMdpHeader);
  for (const ApiTask& t : tasks) {
    for (const auto& log : t.run().logs) {
      csv.row({api::to_string(t.kind), format_number(t.eta), std::to_string(t.seed), std::to_string(log.k),
               format_number(log.average_reward), format_number(j_star), format_number(log.report.final_loss),
               format_number(log.kl_prev_new), format_number(log.kl_new_prev), std::to_string(log.report.steps)});
    }
  }
  plot_api(dir, "mdp", args.mdp_file.empty() ? args.fixture : std::filesystem::path(args.mdp_file).stem().string(), tasks,
           j_star);
  out << "J* = " << format_number(j_star) << "; wrote " << tasks.size() * static_cast<std::size_t>(args.api.phases)
      << " rows to " << (dir / "mdp.csv").string() << '\n';
  return 0;
}

// ---------------------------------------------------------------- checks

struct GradcheckArgs {
  std::string out = "out";
  std::uint64_t seed = 0;
  int instances = 100;
  bool corrupt = false;
};

int cmd_gradcheck(const GradcheckArgs& args, std::ostream& out) {
  checks::CheckOptions options;
  options.seed = args.seed;
  options.gradient_instances = args.instances;
  options.corrupt_gradient = args.corrupt;
  const auto results = checks::run_all(options);
  std::filesystem::create_directories(args.out);
  auto file = open_output(std::filesystem::path(args.out) / "gradcheck.csv");
  CsvWriter csv(file, kGradcheckHeader);
  for (const auto& r : results) {
    csv.row({r.suite, r.name, format_number(r.value), format_number(r.threshold), r.passed ? "1" : "0"});
    out << (r.passed ? "PASS " : "FAIL ") << r.suite << ' ' << r.name << " value=" << format_number(r.value)
        << " threshold=" << format_number(r.threshold) << " (" << r.detail << ")\n";
  }
  return checks::all_passed(results) ? 0 : kExitCheckFailed;
}

struct LemmaArgs {
  std::string out = "out";
  double eta = 0.05;
  double theta = 0.95;
  int tau = 20;
  long trials = 100000;
  double sigma = 1.0;
  int max_candidates = 40;
  std::uint64_t seed = 0;
  double l2_delta = 1.0;
  double l2_eta = 0.5;
  int l2_tau = 20;
  long l2_horizon = 2000;
  std::string l2_seeds = "0..1999";
  int jobs = 1;
  bool skip_lemma2 = false;
};

int cmd_lemma(const LemmaArgs& args, std::ostream& out, std::ostream& err) {
  std::filesystem::create_directories(args.out);
  auto file = open_output(std::filesystem::path(args.out) / "lemma.csv");
  CsvWriter csv(file, kLemmaHeader);

  bandit::Lemma1SearchOptions options;
  options.n_trials = args.trials;
  options.seed = args.seed;
  options.sigma = args.sigma;
  options.max_candidates = args.max_candidates;
  bandit::Lemma1Search search;
  try {
    search = bandit::search_lemma1_instance(args.eta, args.theta, args.tau, options);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const auto& est = search.last.estimate;
  csv.row({"lemma1", format_number(search.last.instance.delta), format_number(search.last.instance.sigma),
           format_number(args.eta), format_number(args.theta), std::to_string(args.tau), std::to_string(est.trials),
           format_number(est.mean), format_number(est.ci_half_width), format_number(args.theta),
           search.found ? "1" : "0"});
  out << "lemma1 delta/sigma=" << format_number(search.last.instance.delta / args.sigma)
      << " mean=" << format_number(est.mean) << " ucb95=" << format_number(est.mean + est.ci_half_width)
      << " theta_k=" << format_number(args.theta) << (search.found ? " PASS" : " FAIL") << '\n';
  if (!search.found) {
    err << "lemma1: no instance certified after " << search.last.candidates_tried
        << " candidates; smallest delta/sigma tried " << format_number(search.last.instance.delta / args.sigma)
        << " has upper bound " << format_number(est.mean + est.ci_half_width) << " > theta_k\n";
  }

  bool lemma2_ok = true;
  if (!args.skip_lemma2) {
    const auto seeds = parse_seed_list(args.l2_seeds);
    if (args.l2_horizon % args.l2_tau != 0 || args.l2_horizon <= args.l2_tau) {
      throw UsageError("--l2-horizon must be a multiple of --l2-tau larger than it");
    }
    const bandit::BanditInstance instance(args.l2_delta, args.sigma);
    std::vector<double> regrets(seeds.size());
    run_parallel(seeds.size(), args.jobs, [&](std::size_t i) {
      bandit::ExperimentConfig config;
      config.algo = bandit::Algo::kTrpo;
      config.eta = args.l2_eta;
      config.tau = args.l2_tau;
      config.phases = static_cast<int>(args.l2_horizon / args.l2_tau);
      config.seed = seeds[i];
      regrets[i] = bandit::run_bandit_experiment(instance, config).cumulative_regret;
    });
    double mean = 0.0;
    for (double r : regrets) mean += r;
    mean /= static_cast<double>(regrets.size());
    double var = 0.0;
    for (double r : regrets) var += (r - mean) * (r - mean);
    const double n = static_cast<double>(regrets.size());
    const double ci = regrets.size() > 1 ? 1.6448536269514722 * std::sqrt(var / (n - 1.0) / n) : 0.0;
    const double bound = bandit::regret_lower_bound(instance, args.l2_eta, args.l2_tau, args.l2_horizon);
    lemma2_ok = regrets.size() > 1 && mean - ci >= bound;
    csv.row({"lemma2", format_number(args.l2_delta), format_number(args.sigma), format_number(args.l2_eta), "",
             std::to_string(args.l2_tau), std::to_string(regrets.size()), format_number(mean), format_number(ci),
             format_number(bound), lemma2_ok ? "1" : "0"});
    out << "lemma2 mean_regret=" << format_number(mean) << " lower95=" << format_number(mean - ci)
        << " bound=" << format_number(bound) << (lemma2_ok ? " PASS" : " FAIL") << '\n';
  }
  return search.found && lemma2_ok ? 0 : kExitCheckFailed;
}

void add_api_options(CLI::App* sub, ApiArgs& a) {
  sub->add_option("--algos", a.algos, "Improvement kinds (CPO, MDPO, Surrogate, VMPO, ExactMD)")
      ->delimiter(',')
      ->capture_default_str();
  sub->add_option("--eta", a.etas, "Step parameter values")->delimiter(',')->capture_default_str();
  sub->add_option("--tau", a.tau, "Phase length")->capture_default_str();
  sub->add_option("--phases", a.phases, "Phase count K")->capture_default_str();
  sub->add_option("--lr", a.lr, "Adam learning rate")->capture_default_str();
  sub->add_option("--policy-steps", a.policy_steps, "Adam steps per improvement")->capture_default_str();
  sub->add_option("--hidden", a.hidden, "MLP hidden widths")->delimiter(',')->capture_default_str();
}

}  // namespace

// ---------------------------------------------------------------- public helpers

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    part = trim(part);
    if (part.empty()) throw UsageError("empty entry in seed list '" + text + "'");
    const auto dots = part.find("..");
    if (dots == std::string::npos) {
      seeds.push_back(parse_u64(part));
      continue;
    }
    const std::uint64_t lo = parse_u64(trim(part.substr(0, dots)));
    const std::uint64_t hi = parse_u64(trim(part.substr(dots + 2)));
    if (hi < lo) throw UsageError("descending seed range '" + part + "'");
    if (hi - lo >= 10000000) throw UsageError("seed range '" + part + "' is too long");
    for (std::uint64_t s = lo; s <= hi; ++s) seeds.push_back(s);
  }
  if (seeds.empty()) throw UsageError("empty seed list");
  return seeds;
}

std::string format_number(double value) {
  if (std::isnan(value)) return "nan";
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  if (value == 0.0) return "0";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", value);
  return buf;
}

CsvWriter::CsvWriter(std::ostream& out, const std::vector<std::string>& header) : out_(out), columns_(header.size()) {
  row(header);
}

void CsvWriter::row(const std::vector<std::string>& fields) {
  if (fields.size() != columns_) throw std::logic_error("CsvWriter: wrong column count");
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out_ << ',';
    const std::string& f = fields[i];
    if (f.find_first_of(",\"\n") == std::string::npos) {
      out_ << f;
    } else {
      out_ << '"';
      for (char c : f) out_ << (c == '"' ? "\"\"" : std::string(1, c));
      out_ << '"';
    }
  }
  out_ << '\n';
}

void write_svg(const std::filesystem::path& path, const std::string& title, const std::string& x_label,
               const std::string& y_label, const std::vector<Series>& series, std::optional<double> reference) {
  constexpr double kWidth = 720, kHeight = 440, kLeft = 70, kRight = 190, kTop = 40, kBottom = 50;
  double x_min = 0, x_max = 1, y_min = 0, y_max = 1;
  bool first = true;
  for (const Series& s : series) {
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      if (first) {
        x_min = x_max = s.x[i];
        y_min = y_max = s.y[i];
        first = false;
      }
      x_min = std::min(x_min, s.x[i]);
      x_max = std::max(x_max, s.x[i]);
      y_min = std::min(y_min, s.y[i]);
      y_max = std::max(y_max, s.y[i]);
    }
  }
  if (reference) {
    y_min = std::min(y_min, *reference);
    y_max = std::max(y_max, *reference);
  }
  if (x_max == x_min) x_max = x_min + 1;
  if (y_max == y_min) {
    y_min -= 0.5;
    y_max += 0.5;
  }
  const double plot_w = kWidth - kLeft - kRight;
  const double plot_h = kHeight - kTop - kBottom;
  auto px = [&](double x) { return kLeft + (x - x_min) / (x_max - x_min) * plot_w; };
  auto py = [&](double y) { return kTop + (1.0 - (y - y_min) / (y_max - y_min)) * plot_h; };
  static const char* kColors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                  "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

  auto out = open_output(path);
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return std::string(buf);
  };
  out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << kWidth << "\" height=\"" << kHeight
      << "\" viewBox=\"0 0 " << kWidth << ' ' << kHeight << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << kLeft << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\">" << xml_escape(title)
      << "</text>\n"
      << "<line x1=\"" << kLeft << "\" y1=\"" << kTop + plot_h << "\" x2=\"" << kLeft + plot_w << "\" y2=\""
      << kTop + plot_h << "\" stroke=\"black\"/>\n"
      << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << kTop + plot_h
      << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x_min + (x_max - x_min) * i / 4.0;
    const double yv = y_min + (y_max - y_min) * i / 4.0;
    out << "<text x=\"" << num(px(xv)) << "\" y=\"" << kTop + plot_h + 16
        << "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">" << format_number(xv) << "</text>\n"
        << "<text x=\"" << kLeft - 6 << "\" y=\"" << num(py(yv) + 4)
        << "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">" << xml_escape(format_number(yv))
        << "</text>\n";
  }
  out << "<text x=\"" << kLeft + plot_w / 2 << "\" y=\"" << kHeight - 12
      << "\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">" << xml_escape(x_label) << "</text>\n"
      << "<text x=\"16\" y=\"" << kTop + plot_h / 2 << "\" font-family=\"sans-serif\" font-size=\"12\" "
      << "text-anchor=\"middle\" transform=\"rotate(-90 16 " << kTop + plot_h / 2 << ")\">" << xml_escape(y_label)
      << "</text>\n";
  if (reference) {
    out << "<line x1=\"" << kLeft << "\" y1=\"" << num(py(*reference)) << "\" x2=\"" << kLeft + plot_w << "\" y2=\""
        << num(py(*reference)) << "\" stroke=\"black\" stroke-dasharray=\"6 4\"/>\n";
  }
  for (std::size_t i = 0; i < series.size(); ++i) {
    const Series& s = series[i];
    const char* color = kColors[i % 10];
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    bool first_point = true;
    for (std::size_t j = 0; j < s.x.size(); ++j) {
      if (!std::isfinite(s.y[j])) continue;
      out << (first_point ? "" : " ") << num(px(s.x[j])) << ',' << num(py(s.y[j]));
      first_point = false;
    }
    out << "\"/>\n";
    const double ly = kTop + 14.0 * static_cast<double>(i);
    out << "<text x=\"" << kLeft + plot_w + 12 << "\" y=\"" << num(ly + 4)
        << "\" font-family=\"sans-serif\" font-size=\"11\" fill=\"" << color << "\">" << xml_escape(s.label)
        << "</text>\n";
  }
  out << "</svg>\n";
}

// ---------------------------------------------------------------- entry point

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"KL-regularized and KL-constrained approximate policy iteration experiments", "klapi"};
  app.require_subcommand(1);

  BanditArgs bandit_args;
  auto* bandit_cmd = app.add_subcommand("bandit", "Mirror descent vs exact TRPO on the two-armed Gaussian bandit");
  add_common(bandit_cmd, bandit_args.common, "0..4");
  bandit_cmd->add_option("--delta", bandit_args.deltas, "Arm gaps")->delimiter(',')->capture_default_str();
  bandit_cmd->add_option("--eta", bandit_args.etas, "Step parameters")->delimiter(',')->capture_default_str();
  bandit_cmd->add_option("--algos", bandit_args.algos, "MD, TRPO")->delimiter(',')->capture_default_str();
  bandit_cmd->add_option("--sigma", bandit_args.sigma, "Reward noise standard deviation")->capture_default_str();
  bandit_cmd->add_option("--tau", bandit_args.tau, "Pulls per phase")->capture_default_str();
  bandit_cmd->add_option("--phases", bandit_args.phases, "Phase count K")->capture_default_str();
  bandit_cmd->add_flag("--all-data", bandit_args.all_data, "Estimate the gap from all data so far");
  bandit_cmd->add_flag("--certify-lemma2", bandit_args.certify,
                       "Check TRPO mean regret against the linear lower bound (T = tau * phases)");

  ContextualArgs ctx_args;
  ctx_args.api.algos = {"CPO", "MDPO", "Surrogate", "VMPO"};
  ctx_args.api.etas = {20.0};
  auto* ctx_cmd = app.add_subcommand("contextual", "Classification contextual bandit");
  add_common(ctx_cmd, ctx_args.api.common, "0..4");
  add_api_options(ctx_cmd, ctx_args.api);
  ctx_cmd->add_option("--policy", ctx_args.api.policy, "log-linear or mlp")->capture_default_str();
  ctx_cmd->add_option("--eval", ctx_args.api.evaluation, "least-squares or oracle")->capture_default_str();
  ctx_cmd->add_flag("--synthetic", ctx_args.synthetic, "Synthetic Gaussian clusters (the default source)");
  ctx_cmd->add_option("--idx-images", ctx_args.idx_images, "IDX image file");
  ctx_cmd->add_option("--idx-labels", ctx_args.idx_labels, "IDX label file");
  ctx_cmd->add_option("--classes", ctx_args.classes, "Class count")->capture_default_str();
  ctx_cmd->add_option("--dim", ctx_args.dim, "Context dimension (synthetic)")->capture_default_str();
  ctx_cmd->add_option("--separation", ctx_args.separation, "Cluster mean norm (synthetic)")->capture_default_str();
  ctx_cmd->add_option("--env-seed", ctx_args.env_seed, "Seed for the cluster means")->capture_default_str();

  MdpArgs mdp_args;
  mdp_args.api.algos = {"ExactMD", "MDPO", "Surrogate", "VMPO", "CPO"};
  mdp_args.api.etas = {0.2};
  mdp_args.api.tau = 5000;
  mdp_args.api.phases = 50;
  mdp_args.api.policy = "tabular";
  mdp_args.api.evaluation = "tabular";
  auto* mdp_cmd = app.add_subcommand("mdp", "Tabular average-reward MDP");
  add_common(mdp_cmd, mdp_args.api.common, "0..4");
  add_api_options(mdp_cmd, mdp_args.api);
  mdp_cmd->add_option("--policy", mdp_args.api.policy, "tabular, log-linear or mlp")->capture_default_str();
  mdp_cmd->add_option("--eval", mdp_args.api.evaluation, "tabular or least-squares")->capture_default_str();
  auto* fixture_opt = mdp_cmd->add_option("--fixture", mdp_args.fixture, "riverswim or gridworld")->capture_default_str();
  mdp_cmd->add_option("--mdp-file", mdp_args.mdp_file, "Plain-text MDP file")->excludes(fixture_opt);
  mdp_cmd->add_option("--features", mdp_args.features, "raw or fourier")->capture_default_str();
  mdp_cmd->add_option("--order", mdp_args.order, "Fourier order")->capture_default_str();

  GradcheckArgs grad_args;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Gradient, bound, convexity and identity suites");
  grad_cmd->add_option("--out", grad_args.out, "Output directory")->capture_default_str();
  grad_cmd->add_option("--seed", grad_args.seed, "Instance seed")->capture_default_str();
  grad_cmd->add_option("--instances", grad_args.instances, "Random instances per gradient case")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  grad_cmd->add_flag("--corrupt-gradient", grad_args.corrupt, "Test hook: perturb analytic gradients");
  grad_cmd->add_option("--config", "Plain-text key=value file; command-line flags take precedence");

  LemmaArgs lemma_args;
  auto* lemma_cmd = app.add_subcommand("lemma", "Non-improvement instance search and regret lower-bound check");
  lemma_cmd->add_option("--out", lemma_args.out, "Output directory")->capture_default_str();
  lemma_cmd->add_option("--eta", lemma_args.eta, "Constraint radius for the instance search")->capture_default_str();
  lemma_cmd->add_option("--theta", lemma_args.theta, "Current policy pi_k(arm 1)")->capture_default_str();
  lemma_cmd->add_option("--tau", lemma_args.tau, "Pulls per phase")->capture_default_str();
  lemma_cmd->add_option("--trials", lemma_args.trials, "Monte-Carlo trials per candidate")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  lemma_cmd->add_option("--sigma", lemma_args.sigma, "Reward noise standard deviation")->capture_default_str();
  lemma_cmd->add_option("--max-candidates", lemma_args.max_candidates, "Instance search budget")->capture_default_str();
  lemma_cmd->add_option("--seed", lemma_args.seed, "Search seed")->capture_default_str();
  lemma_cmd->add_option("--l2-delta", lemma_args.l2_delta, "Gap for the regret check")->capture_default_str();
  lemma_cmd->add_option("--l2-eta", lemma_args.l2_eta, "Constraint radius for the regret check")->capture_default_str();
  lemma_cmd->add_option("--l2-tau", lemma_args.l2_tau, "Phase length for the regret check")->capture_default_str();
  lemma_cmd->add_option("--l2-horizon", lemma_args.l2_horizon, "Horizon T for the regret check")->capture_default_str();
  lemma_cmd->add_option("--l2-seeds", lemma_args.l2_seeds, "Seeds for the regret check")->capture_default_str();
  lemma_cmd->add_option("--jobs", lemma_args.jobs, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
  lemma_cmd->add_flag("--skip-lemma2", lemma_args.skip_lemma2, "Only run the instance search");
  lemma_cmd->add_option("--config", "Plain-text key=value file; command-line flags take precedence");

  try {
    std::vector<std::string> args(argv + std::min(argc, 1), argv + argc);
    args = expand_config(args, app);
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << e.what() << "\nRun with --help for usage.\n";
    return kExitUsage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    if (bandit_cmd->parsed()) return cmd_bandit(bandit_args, out);
    if (ctx_cmd->parsed()) return cmd_contextual(ctx_args, out);
    if (mdp_cmd->parsed()) return cmd_mdp(mdp_args, out);
    if (grad_cmd->parsed()) return cmd_gradcheck(grad_args, out);
    if (lemma_cmd->parsed()) return cmd_lemma(lemma_args, out, err);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitCheckFailed;
  }
  return kExitUsage;
}

}  // namespace klapi::cli
