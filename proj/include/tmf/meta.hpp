#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "tmf/nn.hpp"
#include "tmf/partition.hpp"
#include "tmf/sparse.hpp"
#include "tmf/tasks.hpp"
#include "tmf/util.hpp"

namespace tmf {

// Violation of the round protocol (stale round, malformed delta, wrong
// parameter count) as opposed to a byte-level decode failure.
struct ProtocolError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class ScheduleKind { Constant, Cosine };

struct ScheduleSpec {
  ScheduleKind kind = ScheduleKind::Cosine;
  double eta_max = 1.0;
  double eta_min = 0.0;
  int t_max = 1;  // final round index; cosine reaches eta_min here

  void validate() const {
    if (!(eta_min >= 0.0) || !(eta_max >= eta_min) || !(eta_max <= 1.0)) {
      throw std::invalid_argument("schedule requires 0 <= eta_min <= eta_max <= 1");
    }
    if (t_max < 0) throw std::invalid_argument("t_max must be non-negative");
  }
};

// Server-side aggregation factor for round t. The cosine curve is pinned to
// its exact endpoints: f(0) == eta_max and f(t_max) == eta_min, which a
// floating-point cos(pi) would miss by an ulp.
inline double schedule_value(const ScheduleSpec& s, int t) {
  s.validate();
  if (t < 0) throw std::out_of_range("round index is negative");
  if (s.kind == ScheduleKind::Constant) return s.eta_max;
  if (t > s.t_max) {
    throw std::out_of_range("round " + std::to_string(t) + " beyond schedule end " +
                            std::to_string(s.t_max));
  }
  if (t == 0) return s.eta_max;
  if (t == s.t_max) return s.eta_min;
  // t_max == 0 only admits t == 0, handled above; the division is safe.
  constexpr double kPi = 3.141592653589793238462643383279502884;
  const double phase = kPi * static_cast<double>(t) / static_cast<double>(s.t_max);
  return s.eta_min + 0.5 * (s.eta_max - s.eta_min) * (1.0 + std::cos(phase));
}

struct SgdOutcome {
  double loss_sum = 0.0;
  int steps = 0;
  int samples = 0;
  float last_loss = std::numeric_limits<float>::quiet_NaN();  // before the final step

  float mean_loss() const {
    return steps == 0 ? std::numeric_limits<float>::quiet_NaN()
                      : static_cast<float>(loss_sum / steps);
  }
};

// Online SGD over a one-shot stream: one gradient step per arriving sample,
// then the sample is discarded. Nothing is stored, so peak sample memory
// stays at one.
inline SgdOutcome online_sgd(const NetworkSpec& spec, VectorF& w, SampleStream stream,
                             float beta, const BoolMask* trainable,
                             BackwardWorkspace<float>& ws) {
  SgdOutcome out;
  VectorF grad;
  while (stream.has_next()) {
    const Sample s = stream.next();
    const float loss = backward_into(spec, w, s, grad, ws, trainable);
    sgd_step_in_place(w, grad, beta);
    out.loss_sum += loss;
    out.last_loss = loss;
    ++out.steps;
    ++out.samples;
  }
  return out;
}

// k passes over a deterministic sequence. The factory returns a fresh
// one-shot stream that replays the same samples, so each pass consumes every
// sample exactly once and nothing is stored between passes.
template <typename StreamFactory>
SgdOutcome online_sgd_passes(const NetworkSpec& spec, VectorF& w, StreamFactory&& stream,
                             float beta, int passes, const BoolMask* trainable,
                             BackwardWorkspace<float>& ws) {
  if (passes < 1) throw std::invalid_argument("pass count must be >= 1");
  SgdOutcome out;
  for (int pass = 0; pass < passes; ++pass) {
    const SgdOutcome one = online_sgd(spec, w, stream(), beta, trainable, ws);
    out.loss_sum += one.loss_sum;
    out.steps += one.steps;
    out.samples += one.samples;
    out.last_loss = one.last_loss;
  }
  return out;
}

// How a client spends its episode.
//   TwoPhase:    support trains only local weights (reconstruction), query
//                trains only global weights.
//   SingleOnAll: both streams train every weight in arrival order; requires
//                an all-global partition.
enum class PhaseMode { TwoPhase, SingleOnAll };

struct UpdateResult {
  VectorF weights;                // full layout, after all phases
  VectorF weights_after_support;  // snapshot between the two phases
  float support_loss = std::numeric_limits<float>::quiet_NaN();  // last step
  float query_loss = std::numeric_limits<float>::quiet_NaN();    // last step
};

// The local partition's starting values for reconstruction: the values the
// model was born with. Clients are stateless, so every round resets the
// local part to this same vector; anyone holding the run seed can rebuild
// it, and evaluation adapts the final initialization from the exact same
// starting point.
inline VectorF local_init_values(const NetworkSpec& spec, const Partition& part,
                                 std::uint64_t experiment_seed) {
  const VectorF born = init_weights<float>(spec, seed_mix(experiment_seed, seed_tag::kInitWeights));
  return part.gather_local(born);
}

// One client round. `global_compact` is what the server sent; the local
// partition starts from `local_start` (stateless clients hand in the birth
// values from local_init_values). `passes` is the protocol's k: how many
// times each learning phase traverses its stream. Returns the trained full
// vector plus the last-step loss of each phase.
inline UpdateResult run_client_phases(const NetworkSpec& spec, const Partition& part,
                                      const VectorF& global_compact,
                                      const VectorF& local_start, const Episode& episode,
                                      float beta, int passes, PhaseMode mode) {
  if (passes < 1) throw std::invalid_argument("pass count must be >= 1");
  UpdateResult out;
  out.weights = part.merge(spec, global_compact, local_start);
  BackwardWorkspace<float> ws;
  const auto support = [&] { return episode.support_stream(); };
  const auto query = [&] { return episode.query_stream(); };
  switch (mode) {
    case PhaseMode::TwoPhase: {
      if (part.local_count() > 0) {
        const SgdOutcome rec = online_sgd_passes(spec, out.weights, support, beta, passes,
                                                 &part.local_mask(), ws);
        out.support_loss = rec.last_loss;
      }
      out.weights_after_support = out.weights;
      const SgdOutcome upd = online_sgd_passes(spec, out.weights, query, beta, passes,
                                               &part.global_mask(), ws);
      out.query_loss = upd.last_loss;
      break;
    }
    case PhaseMode::SingleOnAll: {
      if (part.local_count() != 0) {
        throw std::invalid_argument("single-phase mode needs an all-global partition");
      }
      // One learning phase over the whole episode: each pass walks support
      // then query with every weight trainable.
      for (int pass = 0; pass < passes; ++pass) {
        const SgdOutcome s = online_sgd(spec, out.weights, episode.support_stream(), beta,
                                        nullptr, ws);
        const SgdOutcome q = online_sgd(spec, out.weights, episode.query_stream(), beta,
                                        nullptr, ws);
        out.support_loss = s.last_loss;
        out.query_loss = q.last_loss;
      }
      out.weights_after_support = out.weights;
      break;
    }
  }
  return out;
}

// Each client owns one fixed task (index = client id in the training
// sampler) and regenerates a fresh episode every time it participates.
// Everything a client does in round t is a pure function of
// (experiment seed, client id, t), so a simulated client and a TCP client
// process produce identical traces.
struct ClientRoundSeeds {
  std::uint64_t episode;
};

inline ClientRoundSeeds client_round_seeds(std::uint64_t experiment_seed,
                                           std::uint32_t client_id, std::uint32_t round) {
  ClientRoundSeeds s;
  s.episode = seed_mix(experiment_seed, seed_tag::kEpisode, client_id, round);
  return s;
}

inline std::uint64_t train_sampler_seed(std::uint64_t experiment_seed) {
  return seed_mix(experiment_seed, seed_tag::kTrainTasks);
}

// Server-side state shared by the simulator and the TCP server: the global
// weight vector, the current round and the aggregation schedule. Updates
// are applied serially, one client at a time.
class Server {
 public:
  Server(const NetworkSpec& spec, const Partition& part, ScheduleSpec schedule,
         std::uint64_t experiment_seed)
      : spec_(&spec), part_(&part), schedule_(schedule) {
    schedule_.validate();
    init_full_ = init_weights<float>(spec, seed_mix(experiment_seed, seed_tag::kInitWeights));
    global_ = part.gather_global(init_full_);
  }

  const VectorF& global() const { return global_; }
  std::uint32_t round() const { return round_; }
  const NetworkSpec& spec() const { return *spec_; }
  const Partition& partition() const { return *part_; }

  float factor() const {
    return static_cast<float>(schedule_value(schedule_, static_cast<int>(round_)));
  }

  // Full weight vector an evaluator should start from: current global
  // values plus the local partition as originally initialized.
  VectorF full_for_eval() const {
    return part_->merge(*spec_, global_, part_->gather_local(init_full_));
  }

  void apply_sparse(std::uint32_t round, const SparseDelta& delta) {
    check_round(round);
    try {
      apply_delta(global_, delta, factor());
    } catch (const std::exception& e) {
      throw ProtocolError(std::string("rejecting delta: ") + e.what());
    }
  }

  void apply_dense(std::uint32_t round, const VectorF& client_weights) {
    check_round(round);
    if (client_weights.size() != global_.size()) {
      throw ProtocolError("dense update length " + std::to_string(client_weights.size()) +
                          " does not match global vector " + std::to_string(global_.size()));
    }
    const float f = factor();
    for (Eigen::Index i = 0; i < global_.size(); ++i) {
      global_[i] += f * (client_weights[i] - global_[i]);
    }
  }

  // FedSGD-style step: subtract a learning-rate-scaled gradient.
  void apply_gradient(std::uint32_t round, const VectorF& grad, float lr) {
    check_round(round);
    if (grad.size() != global_.size()) {
      throw ProtocolError("gradient length does not match global vector");
    }
    global_ -= lr * grad;
  }

  void advance_round() { ++round_; }

  void restore(std::uint32_t round, VectorF global) {
    if (global.size() != global_.size()) {
      throw ProtocolError("checkpoint weight count does not match model");
    }
    round_ = round;
    global_ = std::move(global);
  }

 private:
  void check_round(std::uint32_t round) const {
    if (round != round_) {
      throw ProtocolError("update for round " + std::to_string(round) +
                          " arrived during round " + std::to_string(round_));
    }
  }

  const NetworkSpec* spec_;
  const Partition* part_;
  ScheduleSpec schedule_;
  VectorF init_full_;
  VectorF global_;
  std::uint32_t round_ = 0;
};

struct EvalResult {
  double mean_loss = 0.0;
  double stddev = 0.0;      // population stddev across evaluation tasks
  double accuracy = 0.0;    // classification only
  bool has_accuracy = false;
};

// Measures how good a weight vector is as an initialization: for each held
// out task, fine-tune a copy on a small stored support set, then score it
// on fresh query samples. Storing the support set is fine here; the
// no-storage rule binds training clients, not the evaluator.
inline EvalResult evaluate_initialization(const NetworkSpec& spec, const VectorF& init_full,
                                          const TaskSampler& test_tasks, int task_count,
                                          int support_size, int query_size, float beta,
                                          int fine_tune_steps, std::uint64_t eval_seed) {
  if (task_count < 1) throw std::invalid_argument("need at least one evaluation task");
  EvalResult out;
  out.has_accuracy = spec.loss() == Loss::CrossEntropy;

  std::vector<double> task_losses;
  task_losses.reserve(static_cast<std::size_t>(task_count));
  long correct = 0, total = 0;
  BackwardWorkspace<float> ws;
  VectorF grad;

  for (int t = 0; t < task_count; ++t) {
    const auto task = test_tasks.task_at(static_cast<std::uint32_t>(t));
    const std::uint64_t episode_seed = seed_mix(eval_seed, seed_tag::kEval, t);
    Episode episode = make_episode(*task, episode_seed, support_size, query_size);

    std::vector<Sample> support;
    support.reserve(static_cast<std::size_t>(support_size));
    {
      SampleStream s = episode.support_stream();
      while (s.has_next()) support.push_back(s.next());
    }

    VectorF w = init_full;
    for (int step = 0; step < fine_tune_steps; ++step) {
      const Sample& s = support[static_cast<std::size_t>(step) % support.size()];
      backward_into(spec, w, s, grad, ws);
      sgd_step_in_place(w, grad, beta);
    }

    double loss_sum = 0.0;
    int n = 0;
    SampleStream query = episode.query_stream();
    while (query.has_next()) {
      const Sample s = query.next();
      ForwardTrace<float> trace;
      forward_into(spec, w, s.input, trace);
      loss_sum += detail::loss_from_trace(spec, trace, s.target);
      if (out.has_accuracy) {
        Eigen::Index got = 0, want = 0;
        trace.post.back().maxCoeff(&got);
        s.target.maxCoeff(&want);
        correct += (got == want);
        ++total;
      }
      ++n;
    }
    task_losses.push_back(loss_sum / n);
  }

  double sum = 0.0;
  for (double l : task_losses) sum += l;
  out.mean_loss = sum / task_losses.size();
  double var = 0.0;
  for (double l : task_losses) var += (l - out.mean_loss) * (l - out.mean_loss);
  out.stddev = std::sqrt(var / task_losses.size());
  if (out.has_accuracy && total > 0) {
    out.accuracy = static_cast<double>(correct) / static_cast<double>(total);
  }
  return out;
}

}  // namespace tmf
