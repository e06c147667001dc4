#include "tmf/config.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace tmf {

Algorithm parse_algorithm(const std::string& text) {
  if (text == "tmf") return Algorithm::Tmf;
  if (text == "tiny_reptile") return Algorithm::TinyReptile;
  if (text == "fedsgd") return Algorithm::FedSgd;
  if (text == "reptile") return Algorithm::Reptile;
  throw std::invalid_argument("unknown algorithm '" + text + "'");
}

std::string to_string(Algorithm a) {
  switch (a) {
    case Algorithm::Tmf: return "tmf";
    case Algorithm::TinyReptile: return "tiny_reptile";
    case Algorithm::FedSgd: return "fedsgd";
    case Algorithm::Reptile: return "reptile";
  }
  return "";
}

std::string ValidationReport::joined_errors() const {
  std::string out;
  for (const std::string& e : errors) {
    if (!out.empty()) out += "\n";
    out += e;
  }
  return out;
}

namespace {

std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

struct Entry {
  std::string value;
  int line;
};

using SectionMap = std::map<std::string, std::map<std::string, Entry>>;

SectionMap parse_ini(const std::string& text, ValidationReport& report) {
  SectionMap sections;
  std::string section;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = raw;
    const std::size_t comment = line.find_first_of("#;");
    if (comment != std::string::npos) line = line.substr(0, comment);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        report.errors.push_back("line " + std::to_string(line_no) + ": unterminated section header");
        continue;
      }
      section = trim(line.substr(1, line.size() - 2));
      sections[section];
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      report.errors.push_back("line " + std::to_string(line_no) + ": expected key=value");
      continue;
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) {
      report.errors.push_back("line " + std::to_string(line_no) + ": empty key");
      continue;
    }
    auto& sec = sections[section];
    if (sec.count(key)) {
      report.errors.push_back("line " + std::to_string(line_no) + ": duplicate key '" + key +
                              "' in [" + section + "]");
      continue;
    }
    sec[key] = Entry{value, line_no};
  }
  return sections;
}

// Pulls typed values out of the section map, recording every failure with
// its line number and every key it never consumed as an unknown-key error.
class Reader {
 public:
  Reader(SectionMap sections, ValidationReport& report)
      : sections_(std::move(sections)), report_(&report) {}

  bool has(const std::string& section, const std::string& key) {
    auto s = sections_.find(section);
    return s != sections_.end() && s->second.count(key) > 0;
  }

  template <typename Fn>
  void take(const std::string& section, const std::string& key, Fn&& apply) {
    auto s = sections_.find(section);
    if (s == sections_.end()) return;
    auto k = s->second.find(key);
    if (k == s->second.end()) return;
    try {
      apply(k->second.value);
    } catch (const std::exception& e) {
      report_->errors.push_back("line " + std::to_string(k->second.line) + ": [" + section +
                                "] " + key + ": " + e.what());
    }
    s->second.erase(k);
  }

  void finish(const std::vector<std::string>& known_sections) {
    for (const auto& [section, keys] : sections_) {
      const bool known = std::find(known_sections.begin(), known_sections.end(), section) !=
                         known_sections.end();
      if (!known) {
        report_->errors.push_back("unknown section [" + section + "]");
        continue;
      }
      for (const auto& [key, entry] : keys) {
        report_->errors.push_back("line " + std::to_string(entry.line) + ": unknown key '" +
                                  key + "' in [" + section + "]");
      }
    }
  }

 private:
  SectionMap sections_;
  ValidationReport* report_;
};

long long to_int(const std::string& v) {
  std::size_t pos = 0;
  const long long n = std::stoll(v, &pos);
  if (pos != v.size()) throw std::invalid_argument("not an integer: '" + v + "'");
  return n;
}

double to_double(const std::string& v) {
  std::size_t pos = 0;
  const double d = std::stod(v, &pos);
  if (pos != v.size()) throw std::invalid_argument("not a number: '" + v + "'");
  return d;
}

std::uint64_t to_u64(const std::string& v) {
  std::size_t pos = 0;
  const unsigned long long n = std::stoull(v, &pos);
  if (pos != v.size()) throw std::invalid_argument("not an unsigned integer: '" + v + "'");
  return n;
}

std::vector<int> to_int_list(const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) throw std::invalid_argument("empty list element");
    out.push_back(static_cast<int>(to_int(item)));
  }
  return out;
}

}  // namespace

ExperimentConfig parse_config_text(const std::string& text, ValidationReport& report) {
  ExperimentConfig cfg;
  Reader r(parse_ini(text, report), report);

  r.take("experiment", "name", [&](const std::string& v) { cfg.name = v; });
  r.take("experiment", "algorithm",
         [&](const std::string& v) { cfg.algorithm = parse_algorithm(v); });
  r.take("experiment", "rounds",
         [&](const std::string& v) { cfg.rounds = static_cast<int>(to_int(v)); });
  r.take("experiment", "clients",
         [&](const std::string& v) { cfg.clients = static_cast<int>(to_int(v)); });
  r.take("experiment", "seed", [&](const std::string& v) { cfg.seed = to_u64(v); });

  r.take("task", "family",
         [&](const std::string& v) { cfg.task.family = parse_task_family(v); });
  r.take("task", "input_dim",
         [&](const std::string& v) { cfg.task.input_dim = static_cast<int>(to_int(v)); });
  r.take("task", "classes",
         [&](const std::string& v) { cfg.task.class_count = static_cast<int>(to_int(v)); });
  r.take("task", "noise",
         [&](const std::string& v) { cfg.task.noise = static_cast<float>(to_double(v)); });
  r.take("task", "support_size",
         [&](const std::string& v) { cfg.support_size = static_cast<int>(to_int(v)); });
  r.take("task", "query_size",
         [&](const std::string& v) { cfg.query_size = static_cast<int>(to_int(v)); });

  r.take("model", "hidden", [&](const std::string& v) { cfg.hidden = to_int_list(v); });

  r.take("training", "beta",
         [&](const std::string& v) { cfg.beta = static_cast<float>(to_double(v)); });
  r.take("training", "k",
         [&](const std::string& v) { cfg.k_passes = static_cast<int>(to_int(v)); });
  r.take("training", "p_percent",
         [&](const std::string& v) { cfg.p_percent = to_double(v); });
  r.take("training", "partition",
         [&](const std::string& v) { cfg.partition = PartitionPolicy::parse(v); });
  r.take("training", "schedule", [&](const std::string& v) {
    if (v == "cosine") {
      cfg.schedule_kind = ScheduleKind::Cosine;
    } else if (v == "constant") {
      cfg.schedule_kind = ScheduleKind::Constant;
    } else {
      throw std::invalid_argument("unknown schedule '" + v + "'");
    }
  });
  r.take("training", "eta_max", [&](const std::string& v) { cfg.eta_max = to_double(v); });
  r.take("training", "eta_min", [&](const std::string& v) { cfg.eta_min = to_double(v); });
  r.take("training", "reptile_n",
         [&](const std::string& v) { cfg.reptile_n = static_cast<int>(to_int(v)); });
  r.take("training", "reptile_epochs",
         [&](const std::string& v) { cfg.reptile_epochs = static_cast<int>(to_int(v)); });

  r.take("eval", "every",
         [&](const std::string& v) { cfg.eval_every = static_cast<int>(to_int(v)); });
  r.take("eval", "repeats",
         [&](const std::string& v) { cfg.eval_repeats = static_cast<int>(to_int(v)); });
  r.take("eval", "fine_tune_steps",
         [&](const std::string& v) { cfg.fine_tune_steps = static_cast<int>(to_int(v)); });

  r.take("transport", "mode", [&](const std::string& v) {
    if (v != "sim" && v != "tcp") throw std::invalid_argument("mode must be sim or tcp");
    cfg.transport = v;
  });
  r.take("transport", "bind", [&](const std::string& v) { cfg.bind = v; });
  r.take("transport", "checkpoint_every",
         [&](const std::string& v) { cfg.checkpoint_every = static_cast<int>(to_int(v)); });
  r.take("transport", "timeout_ms",
         [&](const std::string& v) { cfg.timeout_ms = static_cast<int>(to_int(v)); });
  r.take("transport", "cooldown_rounds",
         [&](const std::string& v) { cfg.cooldown_rounds = static_cast<int>(to_int(v)); });
  r.take("transport", "max_consecutive_failures", [&](const std::string& v) {
    cfg.max_consecutive_failures = static_cast<int>(to_int(v));
  });

  r.finish({"", "experiment", "task", "model", "training", "eval", "transport"});
  return cfg;
}

ValidationReport validate_config(const ExperimentConfig& cfg) {
  ValidationReport rep;
  auto err = [&rep](const std::string& m) { rep.errors.push_back(m); };
  auto warn = [&rep](const std::string& m) { rep.warnings.push_back(m); };

  if (cfg.rounds < 0) err("rounds must be >= 0");
  if (cfg.clients < 1) err("clients must be >= 1");
  if (cfg.reptile_n < 1) err("reptile_n must be >= 1");
  if (cfg.reptile_epochs < 1) err("reptile_epochs must be >= 1");
  if (cfg.support_size < kMinSetSize || cfg.support_size > kMaxSetSize) {
    err("support_size must be in [" + std::to_string(kMinSetSize) + ", " +
        std::to_string(kMaxSetSize) + "]");
  }
  if (cfg.query_size < kMinSetSize || cfg.query_size > kMaxSetSize) {
    err("query_size must be in [" + std::to_string(kMinSetSize) + ", " +
        std::to_string(kMaxSetSize) + "]");
  }
  if (cfg.hidden.empty()) err("model needs at least one hidden layer");
  for (int h : cfg.hidden) {
    if (h < 1) err("hidden layer widths must be positive");
  }
  if (cfg.task.family == TaskFamily::SyntheticClass) {
    if (cfg.task.input_dim < 1) err("input_dim must be positive");
    if (cfg.task.class_count < 2) err("classes must be >= 2");
    if (!(cfg.task.noise >= 0.0f)) err("noise must be non-negative");
  }
  if (!(cfg.beta > 0.0f) || !(cfg.beta < 1.0f)) {
    err("beta must be in (0, 1)");
  } else if (cfg.beta < 0.001f || cfg.beta > 0.02f) {
    warn("beta " + std::to_string(cfg.beta) + " is outside the usual 0.001-0.02 range");
  }
  if (cfg.k_passes < 1) err("k must be >= 1");
  if (!(cfg.p_percent > 0.0) || cfg.p_percent > 100.0) {
    err("p_percent must be in (0, 100]");
  } else if (cfg.p_percent < 10.0 || cfg.p_percent > 80.0) {
    warn("p_percent " + std::to_string(cfg.p_percent) +
         " is outside the usual 10-80 range");
  }
  if (!(cfg.eta_min >= 0.0) || !(cfg.eta_max >= cfg.eta_min) || !(cfg.eta_max <= 1.0)) {
    err("schedule requires 0 <= eta_min <= eta_max <= 1");
  }
  if (cfg.eval_every < 0) err("eval every must be >= 0");
  if (cfg.eval_repeats < 1) err("eval repeats must be >= 1");
  if (cfg.fine_tune_steps < 0) err("fine_tune_steps must be >= 0");
  if (cfg.timeout_ms < 1) err("timeout_ms must be positive");
  if (cfg.cooldown_rounds < 0) err("cooldown_rounds must be >= 0");
  if (cfg.max_consecutive_failures < 1) err("max_consecutive_failures must be >= 1");

  if (cfg.algorithm != Algorithm::Tmf &&
      cfg.partition.kind != PartitionPolicy::Kind::AllGlobal) {
    err("algorithm " + to_string(cfg.algorithm) + " requires partition = all_global");
  }
  if (cfg.transport == "tcp" &&
      (cfg.algorithm == Algorithm::FedSgd || cfg.algorithm == Algorithm::Reptile)) {
    err("tcp transport supports tmf and tiny_reptile only; " + to_string(cfg.algorithm) +
        " runs on the simulator");
  }

  if (rep.ok()) {
    try {
      const NetworkSpec spec = cfg.make_network();
      const Partition part(spec, cfg.partition);
      if (part.global_count() == 0) err("partition leaves no global parameters");
    } catch (const std::exception& e) {
      err(e.what());
    }
  }
  return rep;
}

NetworkSpec ExperimentConfig::make_network() const {
  if (task.family == TaskFamily::Sine) {
    return NetworkSpec::dense(1, hidden, 1, Activation::Tanh, Loss::MSE);
  }
  return NetworkSpec::dense(task.input_dim, hidden, task.class_count, Activation::Tanh,
                            Loss::CrossEntropy);
}

ScheduleSpec ExperimentConfig::make_schedule() const {
  ScheduleSpec s;
  s.kind = schedule_kind;
  s.eta_max = eta_max;
  s.eta_min = eta_min;
  s.t_max = rounds;
  return s;
}

std::string ExperimentConfig::resolved_text() const {
  char buf[64];
  auto num = [&buf](double v) {
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return std::string(buf);
  };
  std::ostringstream out;
  out << "[experiment]\n";
  out << "name = " << name << "\n";
  out << "algorithm = " << to_string(algorithm) << "\n";
  out << "rounds = " << rounds << "\n";
  out << "clients = " << clients << "\n";
  out << "seed = " << seed << "\n\n";
  out << "[task]\n";
  out << "family = " << to_string(task.family) << "\n";
  if (task.family == TaskFamily::SyntheticClass) {
    out << "input_dim = " << task.input_dim << "\n";
    out << "classes = " << task.class_count << "\n";
    out << "noise = " << num(task.noise) << "\n";
  }
  out << "support_size = " << support_size << "\n";
  out << "query_size = " << query_size << "\n\n";
  out << "[model]\n";
  out << "hidden = ";
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    if (i) out << ",";
    out << hidden[i];
  }
  out << "\n\n";
  out << "[training]\n";
  out << "beta = " << num(beta) << "\n";
  out << "k = " << k_passes << "\n";
  out << "p_percent = " << num(p_percent) << "\n";
  out << "partition = " << partition.to_string() << "\n";
  out << "schedule = " << (schedule_kind == ScheduleKind::Cosine ? "cosine" : "constant")
      << "\n";
  out << "eta_max = " << num(eta_max) << "\n";
  out << "eta_min = " << num(eta_min) << "\n";
  out << "reptile_n = " << reptile_n << "\n";
  out << "reptile_epochs = " << reptile_epochs << "\n\n";
  out << "[eval]\n";
  out << "every = " << eval_every << "\n";
  out << "repeats = " << eval_repeats << "\n";
  out << "fine_tune_steps = " << fine_tune_steps << "\n\n";
  out << "[transport]\n";
  out << "mode = " << transport << "\n";
  out << "bind = " << bind << "\n";
  out << "checkpoint_every = " << checkpoint_every << "\n";
  out << "timeout_ms = " << timeout_ms << "\n";
  out << "cooldown_rounds = " << cooldown_rounds << "\n";
  out << "max_consecutive_failures = " << max_consecutive_failures << "\n";
  return out.str();
}

std::uint64_t fnv1a64(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::uint64_t ExperimentConfig::config_hash() const { return fnv1a64(resolved_text()); }

namespace {

ExperimentConfig finish_load(const std::string& text, std::vector<std::string>* warnings) {
  ValidationReport report;
  ExperimentConfig cfg = parse_config_text(text, report);
  if (report.ok()) {
    ValidationReport checks = validate_config(cfg);
    report.errors = std::move(checks.errors);
    for (std::string& w : checks.warnings) report.warnings.push_back(std::move(w));
  }
  for (const std::string& w : report.warnings) {
    if (warnings) {
      warnings->push_back(w);
    } else {
      std::fprintf(stderr, "warning: %s\n", w.c_str());
    }
  }
  if (!report.ok()) throw std::invalid_argument(report.joined_errors());
  return cfg;
}

}  // namespace

ExperimentConfig load_config_text(const std::string& text,
                                  std::vector<std::string>* warnings) {
  return finish_load(text, warnings);
}

ExperimentConfig load_config_file(const std::filesystem::path& path,
                                  std::vector<std::string>* warnings) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return finish_load(buf.str(), warnings);
}

}  // namespace tmf
