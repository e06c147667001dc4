#include <cstdio>
#include <exception>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tmf/harness.hpp"
#include "tmf/transport.hpp"

namespace {

tmf::ExperimentConfig load_with_warnings(const std::string& path) {
  std::vector<std::string> warnings;
  tmf::ExperimentConfig cfg = tmf::load_config_file(path, &warnings);
  for (const std::string& w : warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  return cfg;
}

int cmd_run(const std::string& config_path, const std::string& out_dir,
            std::uint64_t seed, bool seed_set, const std::string& transport,
            const std::string& bind) {
  tmf::ExperimentConfig cfg = load_with_warnings(config_path);
  if (seed_set) cfg.seed = seed;
  if (!transport.empty()) cfg.transport = transport;
  const tmf::ValidationReport report = tmf::validate_config(cfg);
  if (!report.errors.empty()) {
    std::fprintf(stderr, "%s\n", report.joined_errors().c_str());
    return 1;
  }

  const tmf::RunResult res = tmf::run_experiment(cfg, out_dir, bind);
  if (!res.evals.empty()) {
    std::printf("final eval loss %.6g (stddev %.6g) after round %u\n",
                res.evals.back().result.mean_loss, res.evals.back().result.stddev,
                res.evals.back().round);
  }
  std::printf("artifacts written to %s\n", out_dir.c_str());
  if (res.aborted) {
    std::fprintf(stderr, "run aborted: %s\n", res.abort_reason.c_str());
    return 1;
  }
  return 0;
}

int cmd_compare(const std::vector<std::string>& dirs, const std::string& out_dir) {
  std::vector<tmf::RunInfo> runs;
  runs.reserve(dirs.size());
  for (const std::string& d : dirs) runs.push_back(tmf::read_run_dir(d));
  const tmf::Comparison cmp = tmf::compare_runs(runs);
  for (const std::string& w : cmp.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  std::fputs(cmp.summary_table.c_str(), stdout);
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream(std::filesystem::path(out_dir) / "summary.csv") << cmp.summary_csv;
    std::ofstream(std::filesystem::path(out_dir) / "curves.csv") << cmp.curves_csv;
    std::printf("summary.csv and curves.csv written to %s\n", out_dir.c_str());
  }
  return 0;
}

int cmd_validate(const std::string& config_path) {
  std::ifstream in(config_path);
  if (!in) {
    std::fprintf(stderr, "cannot read %s\n", config_path.c_str());
    return 1;
  }
  std::ostringstream text;
  text << in.rdbuf();
  tmf::ValidationReport report;
  const tmf::ExperimentConfig cfg = tmf::parse_config_text(text.str(), report);
  if (report.errors.empty()) {
    const tmf::ValidationReport ranges = tmf::validate_config(cfg);
    report.errors = ranges.errors;
    report.warnings.insert(report.warnings.end(), ranges.warnings.begin(),
                           ranges.warnings.end());
  }
  for (const std::string& e : report.errors) std::fprintf(stderr, "error: %s\n", e.c_str());
  for (const std::string& w : report.warnings) {
    std::fprintf(stderr, "warning: %s\n", w.c_str());
  }
  if (report.errors.empty()) {
    std::printf("%s: valid (%zu warnings)\n", config_path.c_str(), report.warnings.size());
    return 0;
  }
  return 1;
}

int cmd_serve(const std::string& config_path, const std::string& bind, int rounds,
              bool rounds_set, std::uint64_t seed, bool seed_set,
              const std::string& checkpoint_dir, const std::string& out_dir) {
  tmf::ExperimentConfig cfg = load_with_warnings(config_path);
  cfg.transport = "tcp";
  if (rounds_set) cfg.rounds = rounds;
  if (seed_set) cfg.seed = seed;
  const tmf::ValidationReport report = tmf::validate_config(cfg);
  if (!report.errors.empty()) {
    std::fprintf(stderr, "%s\n", report.joined_errors().c_str());
    return 1;
  }
  const tmf::RunResult res = tmf::run_experiment(cfg, out_dir, bind, checkpoint_dir);
  if (res.aborted) {
    std::fprintf(stderr, "run aborted: %s\n", res.abort_reason.c_str());
    return 1;
  }
  return 0;
}

int cmd_client(const std::string& config_path, const std::string& server,
               std::uint32_t task_seed) {
  const tmf::ExperimentConfig cfg = load_with_warnings(config_path);
  const tmf::RunContext ctx(cfg);
  tmf::AgentOptions opts;
  opts.server = server;
  opts.task_seed = task_seed;
  return tmf::client_agent(ctx, opts);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TinyMetaFed: federated meta-learning over a compact binary protocol"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir = "tmf_out";
  std::string transport;
  std::string bind;
  std::string server = "127.0.0.1:4700";
  std::string checkpoint_dir;
  std::vector<std::string> compare_dirs;
  std::string compare_out;
  std::uint64_t seed = 0;
  std::uint32_t task_seed = 0;
  int rounds = 0;

  CLI::App* run = app.add_subcommand("run", "Run an experiment and write its artifacts");
  run->add_option("--config", config_path, "Experiment config file")
      ->required()
      ->check(CLI::ExistingFile);
  run->add_option("--out", out_dir, "Output directory");
  run->add_option("--seed", seed, "Override the config seed");
  run->add_option("--transport", transport, "Transport override")
      ->check(CLI::IsMember({"sim", "tcp"}));
  run->add_option("--bind", bind, "Listen address in tcp mode (host:port)");

  CLI::App* cmp = app.add_subcommand("compare", "Compare finished run directories");
  cmp->add_option("dirs", compare_dirs, "Run output directories")
      ->required()
      ->expected(-1);
  cmp->add_option("--out", compare_out, "Where to write summary.csv and curves.csv");

  CLI::App* val = app.add_subcommand("validate", "Check a config without running it");
  val->add_option("--config", config_path, "Experiment config file")->required();

  CLI::App* srv = app.add_subcommand("serve", "Run the server over TCP");
  srv->add_option("--config", config_path, "Experiment config file")
      ->required()
      ->check(CLI::ExistingFile);
  srv->add_option("--bind", bind, "Listen address (host:port)");
  srv->add_option("--rounds", rounds, "Override the configured round count");
  srv->add_option("--seed", seed, "Override the config seed");
  srv->add_option("--checkpoint-dir", checkpoint_dir, "Checkpoint directory");
  srv->add_option("--out", out_dir, "Output directory");

  CLI::App* cli = app.add_subcommand("client", "Run a client agent");
  cli->add_option("--config", config_path, "Experiment config file")
      ->required()
      ->check(CLI::ExistingFile);
  cli->add_option("--server", server, "Server address (host:port)");
  cli->add_option("--task-seed", task_seed,
                  "Index of the task this client owns; doubles as its id");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) {
      return cmd_run(config_path, out_dir, seed, run->count("--seed") > 0, transport,
                     bind);
    }
    if (cmp->parsed()) return cmd_compare(compare_dirs, compare_out);
    if (val->parsed()) return cmd_validate(config_path);
    if (srv->parsed()) {
      return cmd_serve(config_path, bind, rounds, srv->count("--rounds") > 0, seed,
                       srv->count("--seed") > 0, checkpoint_dir, out_dir);
    }
    if (cli->parsed()) return cmd_client(config_path, server, task_seed);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
