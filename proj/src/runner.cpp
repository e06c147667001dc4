#include "tmf/runner.hpp"

#include <map>
#include <utility>

#include "tmf/sparse.hpp"
#include "tmf/wire.hpp"

namespace tmf {

namespace {

// Reptile stores the episode and revisits it for several epochs; this is
// the one training path allowed to hold more than a single sample.
UpdateResult reptile_episode(const NetworkSpec& spec, VectorF start, const Episode& episode,
                             float beta, int epochs) {
  std::vector<Sample> samples;
  samples.reserve(static_cast<std::size_t>(episode.support_size + episode.query_size));
  const int support_count = episode.support_size;
  {
    SampleStream s = episode.support_stream();
    while (s.has_next()) samples.push_back(s.next());
    SampleStream q = episode.query_stream();
    while (q.has_next()) samples.push_back(q.next());
  }

  UpdateResult out;
  out.weights = std::move(start);
  BackwardWorkspace<float> ws;
  VectorF grad;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const float loss = backward_into(spec, out.weights, samples[i], grad, ws);
      sgd_step_in_place(out.weights, grad, beta);
      if (static_cast<int>(i) < support_count) {
        out.support_loss = loss;
      } else {
        out.query_loss = loss;
      }
    }
  }
  return out;
}

}  // namespace

UpdateResult compute_client_round(const RunContext& ctx, std::uint32_t client_id,
                                  std::uint32_t round, const VectorF& global_compact,
                                  VectorF* local_start_out) {
  const ExperimentConfig& cfg = ctx.cfg;
  const auto task = ctx.train_tasks.task_at(client_id);
  const ClientRoundSeeds seeds = client_round_seeds(cfg.seed, client_id, round);
  Episode episode = make_episode(*task, seeds.episode, cfg.support_size, cfg.query_size);

  switch (cfg.algorithm) {
    case Algorithm::Tmf: {
      VectorF local_start = local_init_values(ctx.spec, ctx.partition, cfg.seed);
      if (local_start_out) *local_start_out = local_start;
      return run_client_phases(ctx.spec, ctx.partition, global_compact, local_start,
                               episode, cfg.beta, cfg.k_passes, PhaseMode::TwoPhase);
    }
    case Algorithm::TinyReptile: {
      // Identical loop, but a single learning phase over the whole episode
      // with every weight trainable and communicated.
      VectorF empty_local(0);
      if (local_start_out) *local_start_out = empty_local;
      return run_client_phases(ctx.spec, ctx.partition, global_compact, empty_local,
                               episode, cfg.beta, cfg.k_passes, PhaseMode::SingleOnAll);
    }
    case Algorithm::Reptile: {
      if (local_start_out) local_start_out->resize(0);
      return reptile_episode(ctx.spec, global_compact, episode, cfg.beta,
                             cfg.reptile_epochs);
    }
    case Algorithm::FedSgd:
      break;
  }
  throw std::logic_error("fedsgd clients send gradients, not weights");
}

FedSgdUplink fedsgd_gradient(const NetworkSpec& spec, const VectorF& w,
                             const Episode& episode) {
  FedSgdUplink out;
  out.grad = VectorF::Zero(spec.param_count());
  BackwardWorkspace<float> ws;
  VectorF grad;
  int n = 0;
  SampleStream support = episode.support_stream();
  while (support.has_next()) {
    const Sample s = support.next();
    out.support_loss = backward_into(spec, w, s, grad, ws);
    out.grad += grad;
    ++n;
  }
  SampleStream query = episode.query_stream();
  while (query.has_next()) {
    const Sample s = query.next();
    out.query_loss = backward_into(spec, w, s, grad, ws);
    out.grad += grad;
    ++n;
  }
  out.grad /= static_cast<float>(n);
  return out;
}

ClientReply client_reply(const RunContext& ctx, std::uint32_t client_id,
                         std::uint32_t round, const VectorF& global_compact,
                         const ClientObserver& observer) {
  const ExperimentConfig& cfg = ctx.cfg;
  const int global_count = ctx.partition.global_count();
  if (global_compact.size() != static_cast<Eigen::Index>(global_count)) {
    throw DecodeError("downlink does not cover the global partition");
  }

  ClientReply reply;
  if (cfg.algorithm == Algorithm::FedSgd) {
    const auto task = ctx.train_tasks.task_at(client_id);
    const ClientRoundSeeds seeds = client_round_seeds(cfg.seed, client_id, round);
    Episode episode =
        make_episode(*task, seeds.episode, cfg.support_size, cfg.query_size);
    const FedSgdUplink uplink = fedsgd_gradient(ctx.spec, global_compact, episode);
    reply.support_loss = uplink.support_loss;
    reply.query_loss = uplink.query_loss;
    reply.frame = encode_dense(round, uplink.grad);
    reply.parameters = ctx.spec.param_count();
    return reply;
  }

  VectorF local_start;
  const UpdateResult r =
      compute_client_round(ctx, client_id, round, global_compact, &local_start);
  if (observer) observer(round, client_id, local_start, r);
  reply.support_loss = r.support_loss;
  reply.query_loss = r.query_loss;
  if (cfg.algorithm == Algorithm::Tmf) {
    const VectorF updated_global = ctx.partition.gather_global(r.weights);
    const SparseDelta delta = top_p_select(updated_global, global_compact, cfg.p_percent);
    reply.frame = encode_sparse(round, static_cast<std::uint32_t>(global_count), delta);
    reply.parameters = static_cast<long>(delta.size());
  } else {
    reply.frame = encode_dense(round, r.weights);
    reply.parameters = ctx.spec.param_count();
  }
  return reply;
}

void apply_uplink(Server& server, const ExperimentConfig& cfg, const Message& uplink) {
  switch (cfg.algorithm) {
    case Algorithm::Tmf:
      if (uplink.type != MsgType::SparseDelta) throw ProtocolError("expected sparse delta");
      server.apply_sparse(uplink.round, uplink.delta);
      return;
    case Algorithm::TinyReptile:
      if (uplink.type != MsgType::DenseWeights) throw ProtocolError("expected dense weights");
      server.apply_dense(uplink.round, uplink.dense);
      return;
    case Algorithm::FedSgd:
      if (uplink.type != MsgType::DenseWeights) throw ProtocolError("expected dense gradient");
      server.apply_gradient(uplink.round, uplink.dense, cfg.beta);
      return;
    case Algorithm::Reptile:
      // Reptile aggregates the N-device mean out of band, in the channel.
      throw ProtocolError("reptile has no single-client uplink");
  }
  throw std::logic_error("unhandled algorithm");
}

std::vector<std::uint32_t> SimChannel::client_ids() {
  std::vector<std::uint32_t> ids(static_cast<std::size_t>(ctx_->cfg.clients));
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<std::uint32_t>(i);
  return ids;
}

RoundOutcome SimChannel::run_round(Server& server, std::uint32_t client_id) {
  const ExperimentConfig& cfg = ctx_->cfg;
  if (cfg.algorithm == Algorithm::Reptile) return reptile_round(server, client_id);

  RoundOutcome o;
  const std::uint32_t t = server.round();
  const int global_count = ctx_->partition.global_count();

  ByteBuffer assign = encode_round_start(t, static_cast<std::uint32_t>(global_count));
  ByteBuffer down = encode_dense(t, server.global());
  if (frame_mutator_) {
    frame_mutator_(Direction::Down, assign);
    frame_mutator_(Direction::Down, down);
  }
  if (frame_observer_) {
    frame_observer_(Direction::Down, t, client_id, assign);
    frame_observer_(Direction::Down, t, client_id, down);
  }
  o.bytes_down = assign.size() + down.size();
  o.parameters_down = global_count;

  if (fault_injector_ && fault_injector_(t, client_id)) {
    o.error = "injected fault: no response";
    return o;
  }

  ByteBuffer up;
  try {
    const Message am = decode_message(assign);
    const Message dm = decode_message(down);
    if (am.type != MsgType::RoundStart || dm.type != MsgType::DenseWeights) {
      throw DecodeError("unexpected downlink message order");
    }
    ClientReply reply = client_reply(*ctx_, client_id, dm.round, dm.dense, client_observer_);
    o.support_loss = reply.support_loss;
    o.query_loss = reply.query_loss;
    o.parameters_up = reply.parameters;
    up = std::move(reply.frame);
  } catch (const std::exception& e) {
    o.error = std::string("client failed: ") + e.what();
    return o;
  }

  if (frame_mutator_) frame_mutator_(Direction::Up, up);
  if (frame_observer_) frame_observer_(Direction::Up, t, client_id, up);
  o.bytes_up = up.size();

  try {
    apply_uplink(server, cfg, decode_message(up));
  } catch (const std::exception& e) {
    o.error = std::string("uplink rejected: ") + e.what();
    return o;
  }
  o.ok = true;
  return o;
}

// Reptile iteration: N devices each adapt a copy of the current weights to
// their own task; the server interpolates toward the average result.
RoundOutcome SimChannel::reptile_round(Server& server, std::uint32_t client_id) {
  const ExperimentConfig& cfg = ctx_->cfg;
  RoundOutcome o;
  const std::uint32_t t = server.round();
  const int n = ctx_->spec.param_count();

  std::vector<std::uint32_t> ids{client_id};
  Rng extra(seed_mix(cfg.seed, seed_tag::kClientSampler, t, 1));
  for (int i = 1; i < cfg.reptile_n; ++i) {
    ids.push_back(extra.index(static_cast<std::uint32_t>(cfg.clients)));
  }

  VectorF mean = VectorF::Zero(n);
  try {
    for (std::uint32_t id : ids) {
      ByteBuffer assign = encode_round_start(t, static_cast<std::uint32_t>(n));
      ByteBuffer down = encode_dense(t, server.global());
      if (frame_observer_) {
        frame_observer_(Direction::Down, t, id, assign);
        frame_observer_(Direction::Down, t, id, down);
      }
      o.bytes_down += assign.size() + down.size();
      o.parameters_down += n;

      const Message dm = decode_message(down);
      const UpdateResult r = compute_client_round(*ctx_, id, dm.round, dm.dense, nullptr);
      o.support_loss = r.support_loss;
      o.query_loss = r.query_loss;

      ByteBuffer up = encode_dense(dm.round, r.weights);
      if (frame_observer_) frame_observer_(Direction::Up, t, id, up);
      o.bytes_up += up.size();
      o.parameters_up += n;
      mean += decode_message(up).dense;
    }
    mean /= static_cast<float>(ids.size());
    server.apply_dense(t, mean);
  } catch (const std::exception& e) {
    o.error = std::string("reptile iteration failed: ") + e.what();
    return o;
  }
  o.ok = true;
  return o;
}

RunResult run_rounds(const RunContext& ctx, Server& server, ClientChannel& channel,
                     const DriverHooks& hooks) {
  const ExperimentConfig& cfg = ctx.cfg;
  RunResult res;
  res.peak_stored_samples = cfg.algorithm == Algorithm::Reptile
                                ? cfg.support_size + cfg.query_size
                                : 1;

  std::map<std::uint32_t, std::uint32_t> next_eligible_round;
  int consecutive_failures = 0;
  const std::uint64_t eval_seed = seed_mix(cfg.seed, seed_tag::kEval);

  const auto should_eval = [&cfg](std::uint32_t t) {
    if (t == 0 || static_cast<int>(t) == cfg.rounds) return true;
    return cfg.eval_every > 0 && t % static_cast<std::uint32_t>(cfg.eval_every) == 0;
  };

  while (true) {
    const std::uint32_t t = server.round();
    if (hooks.should_stop && hooks.should_stop()) {
      res.aborted = true;
      res.abort_reason = "interrupted before round " + std::to_string(t);
      break;
    }
    if (should_eval(t)) {
      EvalRecord er;
      er.round = t;
      er.result = evaluate_initialization(ctx.spec, server.full_for_eval(), ctx.test_tasks,
                                          cfg.eval_repeats, cfg.support_size,
                                          cfg.query_size, cfg.beta, cfg.fine_tune_steps,
                                          eval_seed);
      er.cumulative_bytes = res.total_bytes_down + res.total_bytes_up;
      res.evals.push_back(er);
      log_info("round %u: eval loss %.6g", t, er.result.mean_loss);
    }
    if (static_cast<int>(t) >= cfg.rounds) break;

    Rng rng(seed_mix(cfg.seed, seed_tag::kClientSampler, t));
    std::vector<std::uint32_t> eligible;
    for (std::uint32_t id : channel.client_ids()) {
      const auto it = next_eligible_round.find(id);
      if (it == next_eligible_round.end() || it->second <= t) eligible.push_back(id);
    }

    bool success = false;
    if (eligible.empty()) {
      ++consecutive_failures;
      log_info("round %u: no eligible clients", t);
    }
    while (!eligible.empty()) {
      const std::size_t pick = rng.index(static_cast<std::uint32_t>(eligible.size()));
      const std::uint32_t id = eligible[pick];
      const RoundOutcome oc = channel.run_round(server, id);

      RoundRecord rec;
      rec.round = t;
      rec.client_id = id;
      rec.bytes_up = oc.bytes_up;
      rec.bytes_down = oc.bytes_down;
      rec.support_loss = oc.support_loss;
      rec.query_loss = oc.query_loss;
      rec.schedule_value = server.factor();
      rec.ok = oc.ok;
      rec.wall_ms = oc.wall_ms;
      res.rounds.push_back(rec);
      res.total_bytes_down += oc.bytes_down;
      res.total_bytes_up += oc.bytes_up;
      res.parameters_down += oc.parameters_down;
      res.parameters_up += oc.parameters_up;

      if (oc.ok) {
        success = true;
        consecutive_failures = 0;
        break;
      }
      ++consecutive_failures;
      log_info("round %u client %u failed: %s", t, id, oc.error.c_str());
      next_eligible_round[id] = t + 1 + static_cast<std::uint32_t>(cfg.cooldown_rounds);
      eligible.erase(eligible.begin() + static_cast<std::ptrdiff_t>(pick));
      if (consecutive_failures >= cfg.max_consecutive_failures) break;
    }

    if (!success && consecutive_failures >= cfg.max_consecutive_failures) {
      res.aborted = true;
      res.abort_reason = "aborting at round " + std::to_string(t) + " after " +
                         std::to_string(consecutive_failures) +
                         " consecutive failed exchanges";
      break;
    }
    if (hooks.on_round_end) hooks.on_round_end(t, server);
    server.advance_round();
  }

  res.final_full = server.full_for_eval();
  res.final_round = server.round();
  return res;
}

RunResult run_simulation(const RunContext& ctx, const DriverHooks& hooks) {
  Server server(ctx.spec, ctx.partition, ctx.cfg.make_schedule(), ctx.cfg.seed);
  SimChannel channel(ctx);
  return run_rounds(ctx, server, channel, hooks);
}

}  // namespace tmf
