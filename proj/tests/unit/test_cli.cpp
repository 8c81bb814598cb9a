#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "klapi/cli.hpp"

using namespace klapi::cli;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "klapi");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("klapi_cli_" + name);
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) out.push_back(line);
  return out;
}

std::string join(const std::vector<std::string>& fields) {
  std::string s;
  for (std::size_t i = 0; i < fields.size(); ++i) s += (i ? "," : "") + fields[i];
  return s;
}

std::size_t count(const std::string& text, const std::string& needle) {
  std::size_t n = 0;
  for (std::size_t pos = text.find(needle); pos != std::string::npos; pos = text.find(needle, pos + 1)) ++n;
  return n;
}

}  // namespace

TEST_CASE("parse_seed_list") {
  CHECK(parse_seed_list("0..4") == std::vector<std::uint64_t>{0, 1, 2, 3, 4});
  CHECK(parse_seed_list("1,3") == std::vector<std::uint64_t>{1, 3});
  CHECK(parse_seed_list("0..2,10") == std::vector<std::uint64_t>{0, 1, 2, 10});
  CHECK_THROWS(parse_seed_list("4..1"));
  CHECK_THROWS(parse_seed_list("a"));
  CHECK_THROWS(parse_seed_list(""));
}

TEST_CASE("format_number and CsvWriter") {
  CHECK(format_number(0.1) == "0.1");
  CHECK(format_number(1.0 / 3.0) == "0.333333333");
  CHECK(format_number(123456789012.0) == "1.23456789e+11");
  CHECK(format_number(std::nan("")) == "nan");
  std::ostringstream out;
  CsvWriter csv(out, {"a", "b"});
  csv.row({"1", "x,y"});
  csv.row({"say \"hi\"", "2"});
  CHECK(out.str() == "a,b\n1,\"x,y\"\n\"say \"\"hi\"\"\",2\n");
  CHECK_THROWS(csv.row({"1"}));
}

TEST_CASE("write_svg") {
  const fs::path dir = fresh_dir("svg");
  fs::create_directories(dir);
  write_svg(dir / "a.svg", "T & <title>", "x", "y",
            {{"one", {0, 1, 2}, {0.1, 0.5, 0.2}}, {"two", {0, 1, 2}, {0.3, 0.3, 0.9}}}, 0.75);
  const std::string svg = slurp(dir / "a.svg");
  CHECK(svg.rfind("<?xml", 0) == 0);
  CHECK(svg.find("version=\"1.1\"") != std::string::npos);
  CHECK(count(svg, "<polyline") == 2);
  CHECK(svg.find("T &amp; &lt;title&gt;") != std::string::npos);
  CHECK(svg.find("stroke-dasharray") != std::string::npos);
  CHECK(svg.find("</svg>") != std::string::npos);
}

TEST_CASE("bandit subcommand") {
  const fs::path dir = fresh_dir("bandit");
  const Outcome r = invoke({"bandit", "--phases", "5", "--seeds", "0..1", "--out", dir.string()});
  REQUIRE(r.code == 0);
  const auto csv = lines(slurp(dir / "bandit.csv"));
  CHECK(csv[0] == join(kBanditHeader));
  CHECK(csv.size() == 1 + 2 * 3 * 2 * 2 * 5);  // deltas x etas x algos x seeds x phases
  CHECK(lines(slurp(dir / "bandit_summary.csv"))[0] == join(kBanditSummaryHeader));
  for (const char* delta : {"0p5", "1"}) {
    for (const char* eta : {"0p1", "0p5", "1"}) {
      const fs::path svg = dir / (std::string("bandit_delta") + delta + "_eta" + eta + ".svg");
      REQUIRE(fs::exists(svg));
      CHECK(count(slurp(svg), "<polyline") == 4);  // algos x seeds
    }
  }
  const std::string text = slurp(dir / "bandit.csv");
  CHECK(text.find("\nMD,0.5,0.1,") != std::string::npos);
  CHECK(text.find("\nTRPO,1,1,") != std::string::npos);
}

TEST_CASE("bandit lemma-2 certification summary") {
  const fs::path dir = fresh_dir("certify");
  const Outcome r = invoke({"bandit", "--delta", "1", "--eta", "0.5", "--algos", "TRPO", "--seeds", "0..199",
                            "--certify-lemma2", "--out", dir.string()});
  CHECK(r.out.find("lemma2") != std::string::npos);
  const auto summary = lines(slurp(dir / "bandit_summary.csv"));
  REQUIRE(summary.size() == 2);
  CHECK(summary[1].rfind("TRPO,1,0.5,200,", 0) == 0);
  CHECK(summary[1].find("4.93682942") != std::string::npos);
}

TEST_CASE("CSV output is byte-identical across repeats and thread counts") {
  const fs::path a = fresh_dir("det_a"), b = fresh_dir("det_b");
  CHECK(invoke({"bandit", "--phases", "10", "--seeds", "0..5", "--jobs", "1", "--out", a.string()}).code == 0);
  CHECK(invoke({"bandit", "--phases", "10", "--seeds", "0..5", "--jobs", "3", "--out", b.string()}).code == 0);
  CHECK(slurp(a / "bandit.csv") == slurp(b / "bandit.csv"));
  CHECK(slurp(a / "bandit_summary.csv") == slurp(b / "bandit_summary.csv"));

  const std::vector<std::string> mdp{"mdp", "--phases", "3", "--tau", "300", "--policy-steps", "10", "--seeds", "0..1"};
  auto with_out = [&](std::vector<std::string> args, const fs::path& dir, const char* jobs) {
    args.insert(args.end(), {"--jobs", jobs, "--out", dir.string()});
    return invoke(args).code;
  };
  CHECK(with_out(mdp, a, "1") == 0);
  CHECK(with_out(mdp, b, "2") == 0);
  CHECK(slurp(a / "mdp.csv") == slurp(b / "mdp.csv"));
}

TEST_CASE("contextual subcommand") {
  const fs::path dir = fresh_dir("ctx");
  const Outcome r = invoke({"contextual", "--synthetic", "--phases", "2", "--tau", "100", "--policy-steps", "5",
                            "--seeds", "0..1", "--out", dir.string()});
  REQUIRE(r.code == 0);
  const auto csv = lines(slurp(dir / "contextual.csv"));
  CHECK(csv[0] == join(kContextualHeader));
  CHECK(csv.size() == 1 + 4 * 2 * 2);
  for (const char* algo : {"CPO", "MDPO", "Surrogate", "VMPO"}) {
    CHECK(count(slurp(dir / (std::string("contextual_") + algo + "_eta20.svg")), "<polyline") == 2);
  }
}

TEST_CASE("contextual oracle evaluation: VMPO loss is the log-loss") {
  const fs::path dir = fresh_dir("oracle");
  const Outcome r = invoke({"contextual", "--algos", "VMPO", "--eval", "oracle", "--eta", "1000", "--phases", "2",
                            "--tau", "100", "--policy-steps", "5", "--seeds", "0", "--out", dir.string()});
  REQUIRE(r.code == 0);
  const auto csv = lines(slurp(dir / "contextual.csv"));
  REQUIRE(csv.size() == 3);
  for (std::size_t i = 1; i < csv.size(); ++i) {
    std::vector<std::string> f;
    std::stringstream row(csv[i]);
    std::string cell;
    while (std::getline(row, cell, ',')) f.push_back(cell);
    const double loss = std::stod(f[5]);
    const double log_loss = std::stod(f[6]);
    CHECK(loss == doctest::Approx(log_loss).epsilon(1e-6));
  }
}

TEST_CASE("contextual eta sweep accepts a multi-value grid") {
  const fs::path dir = fresh_dir("sweep");
  const Outcome r = invoke({"contextual", "--algos", "MDPO", "--eta", "10,20,50,100,200,400,1000", "--phases", "1",
                            "--tau", "50", "--policy-steps", "2", "--seeds", "0", "--out", dir.string()});
  REQUIRE(r.code == 0);
  CHECK(lines(slurp(dir / "contextual.csv")).size() == 8);
}

TEST_CASE("contextual IDX source") {
  const fs::path dir = fresh_dir("idx");
  fs::create_directories(dir);
  auto be32 = [](std::uint32_t v) {
    return std::string{static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8), static_cast<char>(v)};
  };
  std::ofstream(dir / "img", std::ios::binary) << be32(2051) << be32(3) << be32(1) << be32(2) << std::string("\x00\xff\xff\x00\x80\x80", 6);
  std::ofstream(dir / "lab", std::ios::binary) << be32(2049) << be32(3) << std::string("\x00\x01\x02", 3);
  const Outcome r = invoke({"contextual", "--idx-images", (dir / "img").string(), "--idx-labels", (dir / "lab").string(),
                            "--algos", "VMPO", "--phases", "1", "--tau", "20", "--policy-steps", "2", "--seeds", "0",
                            "--out", (dir / "out").string()});
  CHECK(r.code == 0);
  const Outcome missing = invoke({"contextual", "--idx-images", (dir / "nope").string(), "--idx-labels",
                                  (dir / "lab").string(), "--out", (dir / "out").string()});
  CHECK(missing.code != 0);
  CHECK(invoke({"contextual", "--synthetic", "--idx-images", "x", "--idx-labels", "y"}).code == 2);
}

TEST_CASE("mdp subcommand") {
  const fs::path dir = fresh_dir("mdp");
  const Outcome r = invoke({"mdp", "--fixture", "gridworld", "--algos", "MDPO,Surrogate,VMPO,CPO", "--phases", "2",
                            "--tau", "200", "--policy-steps", "5", "--seeds", "0", "--out", dir.string()});
  REQUIRE(r.code == 0);
  const auto csv = lines(slurp(dir / "mdp.csv"));
  CHECK(csv[0] == join(kMdpHeader));
  CHECK(csv.size() == 1 + 4 * 2);
  for (std::size_t i = 1; i < csv.size(); ++i) CHECK(csv[i].find(",0.118996144,") != std::string::npos);
  CHECK(slurp(dir / "mdp_VMPO_eta0p2.svg").find("stroke-dasharray") != std::string::npos);

  const fs::path f = fresh_dir("fourier");
  CHECK(invoke({"mdp", "--algos", "MDPO", "--policy", "log-linear", "--eval", "least-squares", "--features", "fourier",
                "--order", "3", "--phases", "1", "--tau", "100", "--policy-steps", "3", "--seeds", "0", "--out",
                f.string()})
            .code == 0);

  CHECK(invoke({"mdp", "--mdp-file", "/nonexistent/file.txt", "--out", f.string()}).code != 0);
  CHECK(invoke({"mdp", "--algos", "ExactMD", "--policy", "log-linear", "--out", f.string()}).code == 2);
  CHECK(invoke({"mdp", "--fixture", "riverswim", "--mdp-file", "x.txt"}).code == 2);
}

TEST_CASE("mdp file input") {
  const fs::path dir = fresh_dir("mdpfile");
  fs::create_directories(dir);
  std::ofstream(dir / "m.txt") << "2 2\n0.1 0\n0.5 1\n0.9 0.1\n0.2 0.8\n0.7 0.3\n0.4 0.6\n";
  const Outcome r = invoke({"mdp", "--mdp-file", (dir / "m.txt").string(), "--algos", "ExactMD", "--phases", "2",
                            "--tau", "100", "--seeds", "0", "--out", dir.string()});
  REQUIRE(r.code == 0);
  CHECK(lines(slurp(dir / "mdp.csv"))[1].find(",0.666666667,") != std::string::npos);
}

TEST_CASE("gradcheck subcommand") {
  const fs::path dir = fresh_dir("grad");
  const Outcome ok = invoke({"gradcheck", "--instances", "10", "--out", dir.string()});
  CHECK(ok.code == 0);
  const auto csv = lines(slurp(dir / "gradcheck.csv"));
  CHECK(csv[0] == join(kGradcheckHeader));
  CHECK(csv.size() > 10);
  CHECK(ok.out.find("PASS") != std::string::npos);
  for (const char* loss : {"CPO", "MDPO", "Surrogate", "VMPO"}) CHECK(slurp(dir / "gradcheck.csv").find(loss) != std::string::npos);

  const Outcome bad = invoke({"gradcheck", "--instances", "10", "--corrupt-gradient", "--out", dir.string()});
  CHECK(bad.code == 1);
  CHECK(bad.out.find("FAIL") != std::string::npos);
}

TEST_CASE("lemma subcommand") {
  const fs::path dir = fresh_dir("lemma");
  const Outcome r = invoke({"lemma", "--trials", "10", "--skip-lemma2", "--out", dir.string()});
  const auto csv = lines(slurp(dir / "lemma.csv"));
  REQUIRE(csv.size() >= 2);
  CHECK(csv[0] == join(kLemmaHeader));
  CHECK(csv[1].rfind("lemma1,", 0) == 0);
  CHECK((r.code == 0 || r.code == 1));

  const Outcome full = invoke({"lemma", "--l2-seeds", "0..299", "--out", dir.string()});
  CHECK(full.code == 0);
  const auto rows = lines(slurp(dir / "lemma.csv"));
  REQUIRE(rows.size() == 3);
  CHECK(rows[2].rfind("lemma2,", 0) == 0);
  CHECK(rows[1].substr(rows[1].size() - 2) == ",1");

  CHECK(invoke({"lemma", "--theta", "0.5", "--skip-lemma2", "--out", dir.string()}).code == 2);
}

TEST_CASE("usage errors") {
  CHECK(invoke({}).code == 2);
  CHECK(invoke({"bandit", "--no-such-flag"}).code == 2);
  CHECK(invoke({"bandit", "--eta", "-1", "--out", fresh_dir("neg").string()}).code == 2);
  CHECK(invoke({"bandit", "--seeds", "5..1"}).code == 2);
  CHECK(invoke({"frobnicate"}).code == 2);
  CHECK(invoke({"--help"}).code == 0);
}

TEST_CASE("config files: flags take precedence") {
  const fs::path dir = fresh_dir("config");
  fs::create_directories(dir);
  std::ofstream(dir / "run.cfg") << "# bandit settings\nphases = 4\nseeds = 0..2\ndelta = 1\neta = 0.5\nalgos = MD\nout = "
                                 << (dir / "from_config").string() << "\n";
  CHECK(invoke({"bandit", "--config", (dir / "run.cfg").string()}).code == 0);
  CHECK(lines(slurp(dir / "from_config" / "bandit.csv")).size() == 1 + 3 * 4);

  CHECK(invoke({"bandit", "--config", (dir / "run.cfg").string(), "--phases", "2", "--out", (dir / "flags").string()})
            .code == 0);
  CHECK(lines(slurp(dir / "flags" / "bandit.csv")).size() == 1 + 3 * 2);

  std::ofstream(dir / "bad.cfg") << "no_such_key = 1\n";
  CHECK(invoke({"bandit", "--config", (dir / "bad.cfg").string()}).code == 2);
  std::ofstream(dir / "garbled.cfg") << "phases 4\n";
  CHECK(invoke({"bandit", "--config", (dir / "garbled.cfg").string()}).code == 2);
  CHECK(invoke({"bandit", "--config", (dir / "missing.cfg").string()}).code == 2);
}
