#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tmf/runner.hpp"

namespace tmf {

// Runs the configured experiment and writes the run directory:
//
//   rounds.csv    one row per exchange attempt
//   evals.csv     one row per periodic evaluation
//   metrics.csv   key,value totals for programmatic consumers
//   config.ini    the fully resolved configuration
//   checkpoint.tmfc  final server state
//
// The transport comes from cfg.transport; "tcp" serves on cfg.bind (or
// bind_override) and expects cfg.clients agent processes to register.
// Checkpoints land in checkpoint_dir when given, else in out_dir. Partial
// CSVs are still written when the run aborts mid-way.
RunResult run_experiment(const ExperimentConfig& cfg,
                         const std::filesystem::path& out_dir,
                         const std::string& bind_override = "",
                         const std::filesystem::path& checkpoint_dir = {});

// CSV snapshots of one run directory, parsed back for comparison.
struct RunInfo {
  std::filesystem::path dir;
  std::string name;
  std::string algorithm;
  std::string task_family;
  struct Point {
    std::uint32_t round = 0;
    double mean_loss = 0.0;
    double stddev = 0.0;
    std::size_t cumulative_bytes = 0;
  };
  std::vector<Point> curve;
  std::size_t total_wire_bytes = 0;  // protocol frames, both directions
  long total_values = 0;             // weight/delta/gradient values moved
  bool aborted = false;
};

RunInfo read_run_dir(const std::filesystem::path& dir);

struct Comparison {
  std::vector<std::string> warnings;
  std::string summary_table;  // human-readable, one row per run
  std::string summary_csv;
  std::string curves_csv;  // aligned eval curves, long format
};

// Aligns the runs on the coarsest evaluation grid and computes, per run,
// the final loss, the communication totals and the cost relative to the
// TinyReptile run (or the first run when none is a TinyReptile run). Cost
// ratios use value and byte counters only, never wall-clock.
Comparison compare_runs(const std::vector<RunInfo>& runs);

}  // namespace tmf
