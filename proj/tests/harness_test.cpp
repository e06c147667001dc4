#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "tmf/harness.hpp"
#include "tmf/weights_io.hpp"

using namespace tmf;
namespace fs = std::filesystem;

namespace {

ExperimentConfig small_cfg() {
  ExperimentConfig cfg;
  cfg.name = "harness_small";
  cfg.rounds = 10;
  cfg.clients = 3;
  cfg.seed = 7;
  cfg.hidden = {8, 8};
  cfg.k_passes = 1;
  cfg.support_size = 4;
  cfg.query_size = 4;
  cfg.eval_every = 5;
  cfg.eval_repeats = 2;
  cfg.fine_tune_steps = 4;
  return cfg;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir =
      fs::temp_directory_path() / ("tmf_harness_" + std::to_string(::getpid()) + "_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

std::vector<std::vector<std::string>> parse_csv(const fs::path& path) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(slurp(path));
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> fields;
    std::string cur;
    for (char c : line) {
      if (c == ',') {
        fields.push_back(cur);
        cur.clear();
      } else {
        cur += c;
      }
    }
    fields.push_back(cur);
    rows.push_back(fields);
  }
  return rows;
}

}  // namespace

TEST_CASE("a run directory contains every artifact and is reproducible") {
  const ExperimentConfig cfg = small_cfg();
  const fs::path a = fresh_dir("repro_a");
  const fs::path b = fresh_dir("repro_b");
  const RunResult res = run_experiment(cfg, a);
  run_experiment(cfg, b);

  for (const char* name :
       {"rounds.csv", "evals.csv", "metrics.csv", "config.ini", "checkpoint.tmfc"}) {
    CHECK(fs::exists(a / name));
  }
  for (const char* name : {"rounds.csv", "evals.csv", "metrics.csv", "config.ini"}) {
    CHECK(slurp(a / name) == slurp(b / name));
  }

  const auto rounds = parse_csv(a / "rounds.csv");
  REQUIRE(rounds.size() == res.rounds.size() + 1);
  CHECK(rounds.front() ==
        std::vector<std::string>{"round", "client_id", "bytes_up", "bytes_down",
                                 "support_loss", "query_loss", "f_t"});

  // The final checkpoint holds the finished run.
  const Checkpoint c = load_checkpoint(a / "checkpoint.tmfc");
  CHECK(c.round == 10u);
  CHECK(c.seed == cfg.seed);
  CHECK(c.config_hash == cfg.config_hash());
  RunContext ctx(cfg);
  CHECK(c.weights == ctx.partition.gather_global(res.final_full));

  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("eval rows account for exactly the bytes of the rounds before them") {
  const ExperimentConfig cfg = small_cfg();
  const fs::path dir = fresh_dir("bytes");
  run_experiment(cfg, dir);

  const auto rounds = parse_csv(dir / "rounds.csv");
  const auto evals = parse_csv(dir / "evals.csv");
  REQUIRE(evals.size() >= 2);
  CHECK(evals.front() == std::vector<std::string>{"round", "mean_loss", "stddev",
                                                  "cumulative_bytes"});
  for (std::size_t i = 1; i < evals.size(); ++i) {
    const auto eval_round = std::stoul(evals[i][0]);
    std::size_t expected = 0;
    for (std::size_t j = 1; j < rounds.size(); ++j) {
      if (std::stoul(rounds[j][0]) < eval_round) {
        expected += std::stoul(rounds[j][2]) + std::stoul(rounds[j][3]);
      }
    }
    CHECK(std::stoul(evals[i][3]) == expected);
  }
  fs::remove_all(dir);
}

TEST_CASE("a zero-round run still evaluates the initialization once") {
  ExperimentConfig cfg = small_cfg();
  cfg.rounds = 0;
  const fs::path dir = fresh_dir("zero");
  run_experiment(cfg, dir);
  const auto evals = parse_csv(dir / "evals.csv");
  REQUIRE(evals.size() == 2);
  CHECK(evals[1][0] == "0");
  CHECK(evals[1][3] == "0");
  const auto rounds = parse_csv(dir / "rounds.csv");
  CHECK(rounds.size() == 1);  // header only
  fs::remove_all(dir);
}

TEST_CASE("read_run_dir parses back what run_experiment wrote") {
  const ExperimentConfig cfg = small_cfg();
  const fs::path dir = fresh_dir("readback");
  const RunResult res = run_experiment(cfg, dir);

  const RunInfo info = read_run_dir(dir);
  CHECK(info.name == "harness_small");
  CHECK(info.algorithm == "tmf");
  CHECK(info.task_family == "sine");
  CHECK_FALSE(info.aborted);
  CHECK(info.total_wire_bytes == res.total_bytes_up + res.total_bytes_down);
  CHECK(info.total_values ==
        static_cast<long>(res.parameters_up + res.parameters_down));
  REQUIRE(info.curve.size() == res.evals.size());
  for (std::size_t i = 0; i < res.evals.size(); ++i) {
    CHECK(info.curve[i].round == res.evals[i].round);
    CHECK(info.curve[i].mean_loss ==
          doctest::Approx(res.evals[i].result.mean_loss).epsilon(1e-10));
    CHECK(info.curve[i].stddev ==
          doctest::Approx(res.evals[i].result.stddev).epsilon(1e-10));
    CHECK(info.curve[i].cumulative_bytes == res.evals[i].cumulative_bytes);
  }
  fs::remove_all(dir);
}

TEST_CASE("comparing a run against itself reports unit relative costs") {
  const ExperimentConfig cfg = small_cfg();
  const fs::path dir = fresh_dir("self");
  run_experiment(cfg, dir);
  const RunInfo info = read_run_dir(dir);

  const Comparison cmp = compare_runs({info, info});
  CHECK(cmp.warnings.empty());

  std::istringstream in(cmp.summary_csv);
  std::string line;
  std::getline(in, line);
  CHECK(line == "run,algorithm,final_round,final_mean_loss,final_stddev,total_wire_bytes,"
                "total_values,rel_cost_values,rel_cost_wire_bytes,aborted");
  int data_lines = 0;
  while (std::getline(in, line)) {
    ++data_lines;
    std::vector<std::string> fields;
    std::string cur;
    for (char c : line) {
      if (c == ',') {
        fields.push_back(cur);
        cur.clear();
      } else {
        cur += c;
      }
    }
    fields.push_back(cur);
    REQUIRE(fields.size() == 10);
    CHECK(fields[7] == "1");  // rel_cost_values
    CHECK(fields[8] == "1");  // rel_cost_wire_bytes
    CHECK(fields[9] == "0");
  }
  CHECK(data_lines == 2);
  fs::remove_all(dir);
}

TEST_CASE("mismatched evaluation grids are resampled onto the coarsest with a warning") {
  ExperimentConfig fine = small_cfg();
  fine.name = "fine";
  fine.rounds = 8;
  fine.eval_every = 2;  // evaluates at 0,2,4,6,8
  ExperimentConfig coarse = small_cfg();
  coarse.name = "coarse";
  coarse.rounds = 8;
  coarse.eval_every = 3;  // evaluates at 0,3,6,8

  const fs::path fd = fresh_dir("grid_fine");
  const fs::path cd = fresh_dir("grid_coarse");
  run_experiment(fine, fd);
  run_experiment(coarse, cd);
  const RunInfo fi = read_run_dir(fd);
  const RunInfo ci = read_run_dir(cd);
  REQUIRE(fi.curve.size() == 5);
  REQUIRE(ci.curve.size() == 4);

  const Comparison cmp = compare_runs({fi, ci});
  REQUIRE(cmp.warnings.size() == 1);
  CHECK(cmp.warnings[0].find("fine") != std::string::npos);
  CHECK(cmp.warnings[0].find("different evaluation grid") != std::string::npos);

  // One curve row per run per grid point, plus the header.
  std::istringstream in(cmp.curves_csv);
  std::string line;
  std::getline(in, line);
  CHECK(line == "run,algorithm,round,cumulative_bytes,mean_loss,stddev");
  std::vector<std::string> rounds_seen;
  int rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    rounds_seen.push_back(line.substr(0, line.find(',')));
  }
  CHECK(rows == 8);
  fs::remove_all(fd);
  fs::remove_all(cd);
}

TEST_CASE("comparison input validation") {
  CHECK_THROWS_AS(compare_runs({}), std::invalid_argument);

  RunInfo sine;
  sine.name = "a";
  sine.task_family = "sine";
  sine.curve.push_back({0, 1.0, 0.1, 0});
  RunInfo other = sine;
  other.name = "b";
  other.task_family = "synthetic_class";
  CHECK_THROWS_AS(compare_runs({sine, other}), std::invalid_argument);

  RunInfo bare;
  bare.name = "c";
  bare.task_family = "sine";
  CHECK_THROWS_AS(compare_runs({sine, bare}), std::invalid_argument);
}
