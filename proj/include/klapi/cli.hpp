#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace klapi::cli {

inline const std::vector<std::string> kBanditHeader{"algo", "delta", "eta", "seed", "phase", "theta", "phase_regret"};
inline const std::vector<std::string> kBanditSummaryHeader{"algo",          "delta", "eta",          "seeds",
                                                           "mean_regret",   "ci95",  "lemma2_bound", "certified"};
inline const std::vector<std::string> kContextualHeader{"algo", "eta",         "seed",        "phase", "avg_reward", "loss",
                                                        "log_loss", "kl_prev_new", "kl_new_prev", "steps", "stop_reason"};
inline const std::vector<std::string> kMdpHeader{"algo", "eta",         "seed",        "phase", "avg_reward",
                                                 "j_star", "loss", "kl_prev_new", "kl_new_prev", "steps"};
inline const std::vector<std::string> kGradcheckHeader{"suite", "check", "value", "threshold", "passed"};
inline const std::vector<std::string> kLemmaHeader{"check", "delta", "sigma", "eta",   "theta", "tau",
                                                   "trials", "value", "ci95",  "bound", "passed"};

/// "0..4", "1,3,9" or a mix such as "0..2,10". Ranges are inclusive.
std::vector<std::uint64_t> parse_seed_list(const std::string& text);

/// Nine significant digits, "%.9g".
std::string format_number(double value);

/// Comma-separated rows; fields containing commas or quotes are quoted.
class CsvWriter {
public:
  CsvWriter(std::ostream& out, const std::vector<std::string>& header);
  void row(const std::vector<std::string>& fields);

private:
  std::ostream& out_;
  std::size_t columns_;
};

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

/// Minimal SVG 1.1 line plot: axes, one polyline per series, legend text,
/// and an optional dashed horizontal reference line.
void write_svg(const std::filesystem::path& path, const std::string& title, const std::string& x_label,
               const std::string& y_label, const std::vector<Series>& series,
               std::optional<double> reference = std::nullopt);

/// Full command-line entry point. Returns the process exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace klapi::cli
