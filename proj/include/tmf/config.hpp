#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tmf/meta.hpp"
#include "tmf/nn.hpp"
#include "tmf/partition.hpp"
#include "tmf/tasks.hpp"

namespace tmf {

enum class Algorithm { Tmf, TinyReptile, FedSgd, Reptile };

Algorithm parse_algorithm(const std::string& text);
std::string to_string(Algorithm a);

struct ValidationReport {
  std::vector<std::string> errors;
  std::vector<std::string> warnings;

  bool ok() const { return errors.empty(); }
  std::string joined_errors() const;
};

// Everything an experiment needs, filled with runnable defaults. Parsed
// from an INI-style file with [experiment], [task], [model], [training],
// [eval] and [transport] sections.
struct ExperimentConfig {
  // [experiment]
  std::string name = "experiment";
  Algorithm algorithm = Algorithm::Tmf;
  int rounds = 10000;
  int clients = 100;
  std::uint64_t seed = 1;

  // [task]
  TaskFamilySpec task;
  int support_size = 10;
  int query_size = 10;

  // [model]
  std::vector<int> hidden = {16, 16, 16};

  // [training]
  float beta = 0.01f;
  int k_passes = 5;  // k: online-SGD passes per learning phase
  double p_percent = 50.0;
  PartitionPolicy partition{PartitionPolicy::Kind::LastLayerLocal, {}};
  ScheduleKind schedule_kind = ScheduleKind::Cosine;
  double eta_max = 1.0;
  double eta_min = 0.0;
  int reptile_n = 1;       // devices averaged per Reptile iteration
  int reptile_epochs = 1;  // passes over the stored episode

  // [eval]
  int eval_every = 200;
  int eval_repeats = 20;
  int fine_tune_steps = 32;

  // [transport]
  std::string transport = "sim";
  std::string bind = "127.0.0.1:4700";
  int checkpoint_every = 0;
  int timeout_ms = 30000;
  int cooldown_rounds = 2;
  int max_consecutive_failures = 100;

  NetworkSpec make_network() const;
  ScheduleSpec make_schedule() const;
  std::string resolved_text() const;
  std::uint64_t config_hash() const;
};

// Parses without validating; for error reporting keyed to line numbers.
ExperimentConfig parse_config_text(const std::string& text, ValidationReport& report);

ValidationReport validate_config(const ExperimentConfig& cfg);

// Parse + validate; throws std::invalid_argument listing every error.
// Warnings are appended to *warnings when given, otherwise printed to
// stderr.
ExperimentConfig load_config_file(const std::filesystem::path& path,
                                  std::vector<std::string>* warnings = nullptr);
ExperimentConfig load_config_text(const std::string& text,
                                  std::vector<std::string>* warnings = nullptr);

std::uint64_t fnv1a64(const std::string& text);

}  // namespace tmf
