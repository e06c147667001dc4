#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "tmf/bytes.hpp"
#include "tmf/config.hpp"
#include "tmf/meta.hpp"
#include "tmf/nn.hpp"
#include "tmf/partition.hpp"
#include "tmf/tasks.hpp"
#include "tmf/wire.hpp"

namespace tmf {

struct RoundRecord {
  std::uint32_t round = 0;
  std::uint32_t client_id = 0;
  std::size_t bytes_up = 0;
  std::size_t bytes_down = 0;
  float support_loss = std::numeric_limits<float>::quiet_NaN();  // last step
  float query_loss = std::numeric_limits<float>::quiet_NaN();    // last step
  float schedule_value = 0.0f;
  bool ok = true;
  double wall_ms = std::numeric_limits<double>::quiet_NaN();  // tcp mode only
};

struct EvalRecord {
  std::uint32_t round = 0;
  EvalResult result;
  std::size_t cumulative_bytes = 0;
};

struct RunResult {
  std::vector<RoundRecord> rounds;  // one row per exchange attempt
  std::vector<EvalRecord> evals;
  VectorF final_full;  // global weights merged with the evaluator's local part
  std::size_t total_bytes_down = 0;
  std::size_t total_bytes_up = 0;
  long parameters_down = 0;  // weight/delta values moved, excluding framing
  long parameters_up = 0;
  int peak_stored_samples = 0;  // per client, during training
  std::uint32_t final_round = 0;  // the round a resumed run would execute next
  bool aborted = false;
  std::string abort_reason;
};

// Immutable per-run state everything else borrows from.
struct RunContext {
  ExperimentConfig cfg;
  NetworkSpec spec;
  Partition partition;
  TaskSampler train_tasks;  // client i owns task_at(i)
  TaskSampler test_tasks;

  explicit RunContext(const ExperimentConfig& c)
      : cfg(c),
        spec(c.make_network()),
        partition(spec, c.partition),
        train_tasks(c.task, train_sampler_seed(c.seed)),
        test_tasks(c.task, seed_mix(c.seed, seed_tag::kTestTasks)) {}
};

// The client-side computation for one round, shared verbatim by the
// simulator and the TCP client process. `global_compact` is the server's
// current global vector as received over the wire. The fresh local
// initialization is copied to *local_start_out when requested.
UpdateResult compute_client_round(const RunContext& ctx, std::uint32_t client_id,
                                  std::uint32_t round, const VectorF& global_compact,
                                  VectorF* local_start_out = nullptr);

// Mean episode gradient at fixed weights, for the FedSGD baseline.
struct FedSgdUplink {
  VectorF grad;
  float support_loss = std::numeric_limits<float>::quiet_NaN();  // last sample
  float query_loss = std::numeric_limits<float>::quiet_NaN();
};
FedSgdUplink fedsgd_gradient(const NetworkSpec& spec, const VectorF& w,
                             const Episode& episode);

// Observes the client-side state before the uplink is built: the fresh
// local initialization and the trained result.
using ClientObserver = std::function<void(std::uint32_t round, std::uint32_t client_id,
                                          const VectorF& local_start,
                                          const UpdateResult& result)>;

// Everything a client answers one assignment with: the encoded protocol
// frame plus the loss telemetry the round record reports. Shared verbatim
// by the simulator and the TCP agent so the two transports produce the
// same bytes and the same numbers.
struct ClientReply {
  ByteBuffer frame;
  float support_loss = std::numeric_limits<float>::quiet_NaN();
  float query_loss = std::numeric_limits<float>::quiet_NaN();
  long parameters = 0;  // values inside the frame
};

ClientReply client_reply(const RunContext& ctx, std::uint32_t client_id,
                         std::uint32_t round, const VectorF& global_compact,
                         const ClientObserver& observer = {});

// Server-side handling of one decoded uplink: checks the message type the
// configured algorithm expects and applies the update. Throws on a type or
// round mismatch, leaving the server untouched.
void apply_uplink(Server& server, const ExperimentConfig& cfg, const Message& uplink);

struct RoundOutcome {
  bool ok = false;
  std::string error;
  std::size_t bytes_down = 0;
  std::size_t bytes_up = 0;
  long parameters_down = 0;
  long parameters_up = 0;
  float support_loss = std::numeric_limits<float>::quiet_NaN();
  float query_loss = std::numeric_limits<float>::quiet_NaN();
  double wall_ms = std::numeric_limits<double>::quiet_NaN();
};

// One client's exchange with the server for the current round. The
// simulator and the TCP transport each implement this; everything above it
// (selection, scheduling, evaluation, failure handling) is shared.
class ClientChannel {
 public:
  virtual ~ClientChannel() = default;
  virtual RoundOutcome run_round(Server& server, std::uint32_t client_id) = 0;
  virtual std::vector<std::uint32_t> client_ids() = 0;
  virtual void shutdown(std::uint32_t /*round*/) {}
};

enum class Direction { Down, Up };

// Observes every encoded frame as it crosses the (simulated) wire.
using FrameObserver = std::function<void(Direction, std::uint32_t round,
                                         std::uint32_t client_id, const ByteBuffer&)>;

// Returns true when the exchange with this client should fail this round
// (the simulator's stand-in for a timeout).
using FaultInjector = std::function<bool(std::uint32_t round, std::uint32_t client_id)>;

// Mutates frames in flight, for corruption tests.
using FrameMutator = std::function<void(Direction, ByteBuffer&)>;

// In-process channel: client logic runs inline, but every payload still
// passes through the real encoder and decoder, so byte counts and decode
// behavior match the TCP transport exactly.
class SimChannel : public ClientChannel {
 public:
  explicit SimChannel(const RunContext& ctx) : ctx_(&ctx) {}

  RoundOutcome run_round(Server& server, std::uint32_t client_id) override;
  std::vector<std::uint32_t> client_ids() override;

  void set_frame_observer(FrameObserver obs) { frame_observer_ = std::move(obs); }
  void set_client_observer(ClientObserver obs) { client_observer_ = std::move(obs); }
  void set_fault_injector(FaultInjector f) { fault_injector_ = std::move(f); }
  void set_frame_mutator(FrameMutator m) { frame_mutator_ = std::move(m); }

 private:
  RoundOutcome reptile_round(Server& server, std::uint32_t client_id);

  const RunContext* ctx_;
  FrameObserver frame_observer_;
  ClientObserver client_observer_;
  FaultInjector fault_injector_;
  FrameMutator frame_mutator_;
};

struct DriverHooks {
  // Called after every round slot, successful or not, before the round
  // counter advances.
  std::function<void(std::uint32_t round, const Server&)> on_round_end;
  // Polled at the top of every round slot; returning true ends the run
  // early with the result marked aborted.
  std::function<bool()> should_stop;
};

// Runs the experiment loop against whatever channel is supplied: uniform
// client selection with resampling after failures, serial client updates,
// scheduled aggregation, periodic evaluation, cooldown and abort handling.
// Resumes from server.round() when the server was restored from a
// checkpoint.
RunResult run_rounds(const RunContext& ctx, Server& server, ClientChannel& channel,
                     const DriverHooks& hooks = {});

// Builds server + sim channel and runs.
RunResult run_simulation(const RunContext& ctx, const DriverHooks& hooks = {});

}  // namespace tmf
