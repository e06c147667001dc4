#include "tmf/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "tmf/transport.hpp"
#include "tmf/weights_io.hpp"

namespace tmf {
namespace {

// %.9g round-trips every float32; keeps identical runs byte-identical and
// the parsed-back curves exact.
std::string f32_text(float v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

std::string f64_text(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string rounds_csv_text(const RunResult& res, bool socket_mode) {
  std::ostringstream out;
  out << "round,client_id,bytes_up,bytes_down,support_loss,query_loss,f_t";
  if (socket_mode) out << ",wall_ms";
  out << "\n";
  char wall[32];
  for (const RoundRecord& r : res.rounds) {
    out << r.round << ',' << r.client_id << ',' << r.bytes_up << ',' << r.bytes_down
        << ',' << f32_text(r.support_loss) << ',' << f32_text(r.query_loss) << ','
        << f32_text(r.schedule_value);
    if (socket_mode) {
      std::snprintf(wall, sizeof(wall), "%.3f", r.wall_ms);
      out << ',' << wall;
    }
    out << "\n";
  }
  return out.str();
}

std::string evals_csv_text(const RunResult& res, bool with_accuracy) {
  std::ostringstream out;
  out << "round,mean_loss,stddev";
  if (with_accuracy) out << ",accuracy";
  out << ",cumulative_bytes\n";
  for (const EvalRecord& e : res.evals) {
    out << e.round << ',' << f64_text(e.result.mean_loss) << ','
        << f64_text(e.result.stddev);
    if (with_accuracy) out << ',' << f64_text(e.result.accuracy);
    out << ',' << e.cumulative_bytes << "\n";
  }
  return out.str();
}

std::string metrics_csv_text(const ExperimentConfig& cfg, const RunResult& res) {
  std::string reason = res.abort_reason;
  std::replace(reason.begin(), reason.end(), ',', ';');
  std::ostringstream out;
  out << "key,value\n";
  out << "name," << cfg.name << "\n";
  out << "algorithm," << to_string(cfg.algorithm) << "\n";
  out << "task," << to_string(cfg.task.family) << "\n";
  out << "transport," << cfg.transport << "\n";
  out << "seed," << cfg.seed << "\n";
  out << "clients," << cfg.clients << "\n";
  out << "rounds," << cfg.rounds << "\n";
  out << "final_round," << res.final_round << "\n";
  out << "aborted," << (res.aborted ? 1 : 0) << "\n";
  out << "abort_reason," << reason << "\n";
  out << "total_bytes_down," << res.total_bytes_down << "\n";
  out << "total_bytes_up," << res.total_bytes_up << "\n";
  out << "total_values_down," << res.parameters_down << "\n";
  out << "total_values_up," << res.parameters_up << "\n";
  out << "peak_stored_samples," << res.peak_stored_samples << "\n";
  return out.str();
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  fields.push_back(cur);
  return fields;
}

std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) rows.push_back(split_csv_line(line));
  }
  return rows;
}

}  // namespace

RunResult run_experiment(const ExperimentConfig& cfg,
                         const std::filesystem::path& out_dir,
                         const std::string& bind_override,
                         const std::filesystem::path& checkpoint_dir) {
  std::filesystem::create_directories(out_dir);
  const std::filesystem::path ckpt_dir = checkpoint_dir.empty() ? out_dir : checkpoint_dir;
  std::filesystem::create_directories(ckpt_dir);
  RunContext ctx(cfg);

  const bool socket_mode = cfg.transport == "tcp";
  RunResult res;
  if (socket_mode) {
    ServeOptions opts;
    opts.bind = bind_override;
    opts.checkpoint_dir = ckpt_dir;
    res = serve(ctx, opts);
  } else {
    res = run_simulation(ctx);
    Checkpoint c;
    c.round = res.final_round;
    c.seed = cfg.seed;
    c.config_hash = cfg.config_hash();
    c.weights = ctx.partition.gather_global(res.final_full);
    save_checkpoint(ckpt_dir / "checkpoint.tmfc", c);
  }

  const bool with_accuracy = !res.evals.empty() && res.evals.front().result.has_accuracy;
  write_text_file(out_dir / "rounds.csv", rounds_csv_text(res, socket_mode));
  write_text_file(out_dir / "evals.csv", evals_csv_text(res, with_accuracy));
  write_text_file(out_dir / "metrics.csv", metrics_csv_text(cfg, res));
  write_text_file(out_dir / "config.ini", cfg.resolved_text());
  return res;
}

RunInfo read_run_dir(const std::filesystem::path& dir) {
  RunInfo info;
  info.dir = dir;

  std::map<std::string, std::string> metrics;
  for (const auto& row : read_csv(dir / "metrics.csv")) {
    if (row.size() >= 2 && row[0] != "key") metrics[row[0]] = row[1];
  }
  info.name = metrics["name"];
  info.algorithm = metrics["algorithm"];
  info.task_family = metrics["task"];
  info.aborted = metrics["aborted"] == "1";
  info.total_wire_bytes = std::strtoull(metrics["total_bytes_down"].c_str(), nullptr, 10) +
                          std::strtoull(metrics["total_bytes_up"].c_str(), nullptr, 10);
  info.total_values = std::strtol(metrics["total_values_down"].c_str(), nullptr, 10) +
                      std::strtol(metrics["total_values_up"].c_str(), nullptr, 10);

  const auto rows = read_csv(dir / "evals.csv");
  if (rows.empty()) throw std::runtime_error("empty evals.csv in " + dir.string());
  const auto& header = rows.front();
  const auto col = [&](const std::string& name) {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) {
      throw std::runtime_error("evals.csv in " + dir.string() + " lacks column " + name);
    }
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t c_round = col("round");
  const std::size_t c_mean = col("mean_loss");
  const std::size_t c_std = col("stddev");
  const std::size_t c_bytes = col("cumulative_bytes");
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& row = rows[i];
    RunInfo::Point p;
    p.round = static_cast<std::uint32_t>(std::strtoul(row.at(c_round).c_str(), nullptr, 10));
    p.mean_loss = std::strtod(row.at(c_mean).c_str(), nullptr);
    p.stddev = std::strtod(row.at(c_std).c_str(), nullptr);
    p.cumulative_bytes = std::strtoull(row.at(c_bytes).c_str(), nullptr, 10);
    info.curve.push_back(p);
  }
  return info;
}

Comparison compare_runs(const std::vector<RunInfo>& runs) {
  if (runs.empty()) throw std::invalid_argument("nothing to compare");
  for (const RunInfo& r : runs) {
    if (r.task_family != runs.front().task_family) {
      throw std::invalid_argument("runs mix task families: " + r.task_family + " vs " +
                                  runs.front().task_family);
    }
    if (r.curve.empty()) throw std::invalid_argument("run " + r.name + " has no evaluations");
  }

  Comparison cmp;

  // The coarsest grid wins; runs evaluated more often are sampled down to it.
  std::size_t coarsest = 0;
  for (std::size_t i = 1; i < runs.size(); ++i) {
    if (runs[i].curve.size() < runs[coarsest].curve.size()) coarsest = i;
  }
  const std::vector<RunInfo::Point>& grid = runs[coarsest].curve;

  const auto nearest = [](const RunInfo& run, std::uint32_t round, bool* exact) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < run.curve.size(); ++i) {
      const auto d = [&](std::size_t k) {
        return run.curve[k].round > round ? run.curve[k].round - round
                                          : round - run.curve[k].round;
      };
      if (d(i) < d(best)) best = i;
    }
    *exact = run.curve[best].round == round;
    return run.curve[best];
  };

  std::ostringstream curves;
  curves << "run,algorithm,round,cumulative_bytes,mean_loss,stddev\n";
  std::vector<bool> warned(runs.size(), false);
  for (const RunInfo::Point& gp : grid) {
    for (std::size_t i = 0; i < runs.size(); ++i) {
      bool exact = true;
      const RunInfo::Point p = nearest(runs[i], gp.round, &exact);
      if (!exact && !warned[i]) {
        warned[i] = true;
        cmp.warnings.push_back("run " + runs[i].name +
                               " has a different evaluation grid; resampled to the "
                               "coarsest one (nearest round)");
      }
      curves << runs[i].name << ',' << runs[i].algorithm << ',' << gp.round << ','
             << p.cumulative_bytes << ',' << f64_text(p.mean_loss) << ','
             << f64_text(p.stddev) << "\n";
    }
  }
  cmp.curves_csv = curves.str();

  // Cost baseline: the TinyReptile run when present, otherwise the first.
  std::size_t base = 0;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    if (runs[i].algorithm == "tiny_reptile") {
      base = i;
      break;
    }
  }

  std::ostringstream table;
  std::ostringstream summary;
  summary << "run,algorithm,final_round,final_mean_loss,final_stddev,total_wire_bytes,"
             "total_values,rel_cost_values,rel_cost_wire_bytes,aborted\n";
  char line[256];
  std::snprintf(line, sizeof(line), "%-20s %-13s %12s %12s %14s %11s %10s\n", "run",
                "algorithm", "final loss", "stddev", "wire bytes", "rel values",
                "rel bytes");
  table << line;
  for (const RunInfo& r : runs) {
    const RunInfo::Point& last = r.curve.back();
    const double rel_values = r.total_values == 0 || runs[base].total_values == 0
                                  ? std::nan("")
                                  : static_cast<double>(r.total_values) /
                                        static_cast<double>(runs[base].total_values);
    const double rel_bytes = runs[base].total_wire_bytes == 0
                                 ? std::nan("")
                                 : static_cast<double>(r.total_wire_bytes) /
                                       static_cast<double>(runs[base].total_wire_bytes);
    summary << r.name << ',' << r.algorithm << ',' << last.round << ','
            << f64_text(last.mean_loss) << ',' << f64_text(last.stddev) << ','
            << r.total_wire_bytes << ',' << r.total_values << ',' << f64_text(rel_values)
            << ',' << f64_text(rel_bytes) << ',' << (r.aborted ? 1 : 0) << "\n";
    std::snprintf(line, sizeof(line), "%-20s %-13s %12.5g %12.5g %14zu %11.4g %10.4g\n",
                  r.name.c_str(), r.algorithm.c_str(), last.mean_loss, last.stddev,
                  r.total_wire_bytes, rel_values, rel_bytes);
    table << line;
  }
  cmp.summary_csv = summary.str();
  cmp.summary_table = table.str();
  return cmp;
}

}  // namespace tmf
