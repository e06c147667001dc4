#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <set>

#include "tmf/runner.hpp"

using namespace tmf;

namespace {

ExperimentConfig small_cfg() {
  ExperimentConfig cfg;
  cfg.name = "small";
  cfg.rounds = 12;
  cfg.clients = 4;
  cfg.seed = 3;
  cfg.hidden = {8, 8};
  cfg.k_passes = 1;
  cfg.support_size = 4;
  cfg.query_size = 4;
  cfg.eval_every = 6;
  cfg.eval_repeats = 3;
  cfg.fine_tune_steps = 4;
  return cfg;
}

bool same_float(float a, float b) {
  return (std::isnan(a) && std::isnan(b)) || a == b;
}

void check_identical(const RunResult& a, const RunResult& b) {
  REQUIRE(a.rounds.size() == b.rounds.size());
  for (std::size_t i = 0; i < a.rounds.size(); ++i) {
    CHECK(a.rounds[i].round == b.rounds[i].round);
    CHECK(a.rounds[i].client_id == b.rounds[i].client_id);
    CHECK(a.rounds[i].bytes_up == b.rounds[i].bytes_up);
    CHECK(a.rounds[i].bytes_down == b.rounds[i].bytes_down);
    CHECK(same_float(a.rounds[i].support_loss, b.rounds[i].support_loss));
    CHECK(same_float(a.rounds[i].query_loss, b.rounds[i].query_loss));
    CHECK(a.rounds[i].schedule_value == b.rounds[i].schedule_value);
    CHECK(a.rounds[i].ok == b.rounds[i].ok);
  }
  REQUIRE(a.evals.size() == b.evals.size());
  for (std::size_t i = 0; i < a.evals.size(); ++i) {
    CHECK(a.evals[i].round == b.evals[i].round);
    CHECK(a.evals[i].result.mean_loss == b.evals[i].result.mean_loss);
    CHECK(a.evals[i].result.stddev == b.evals[i].result.stddev);
    CHECK(a.evals[i].cumulative_bytes == b.evals[i].cumulative_bytes);
  }
  CHECK(a.final_full == b.final_full);
  CHECK(a.total_bytes_down == b.total_bytes_down);
  CHECK(a.total_bytes_up == b.total_bytes_up);
}

}  // namespace

TEST_CASE("two simulations from the same seed are bitwise identical") {
  const ExperimentConfig cfg = small_cfg();
  const RunContext ctx_a(cfg);
  const RunContext ctx_b(cfg);
  const RunResult a = run_simulation(ctx_a);
  const RunResult b = run_simulation(ctx_b);
  CHECK_FALSE(a.aborted);
  CHECK(a.rounds.size() == 12);
  CHECK(a.evals.size() == 3);  // rounds 0, 6, 12
  check_identical(a, b);
}

TEST_CASE("every client trains its own fixed task") {
  ExperimentConfig cfg = small_cfg();
  const RunContext ctx(cfg);
  const VectorF g0 = VectorF::Zero(ctx.partition.global_count());

  for (std::uint32_t id : {0u, 3u}) {
    const UpdateResult got = compute_client_round(ctx, id, 5, g0);

    const auto task = ctx.train_tasks.task_at(id);
    const Episode ep = make_episode(*task, client_round_seeds(cfg.seed, id, 5).episode,
                                    cfg.support_size, cfg.query_size);
    const VectorF l0 = local_init_values(ctx.spec, ctx.partition, cfg.seed);
    const UpdateResult want = run_client_phases(ctx.spec, ctx.partition, g0, l0, ep,
                                                cfg.beta, cfg.k_passes, PhaseMode::TwoPhase);
    CHECK(got.weights == want.weights);
    CHECK(got.support_loss == want.support_loss);
    CHECK(got.query_loss == want.query_loss);
  }
  // Different clients produce different updates (different tasks).
  CHECK(compute_client_round(ctx, 0, 5, g0).weights !=
        compute_client_round(ctx, 1, 5, g0).weights);
}

TEST_CASE("per-round frame sizes match the published table at sine defaults") {
  ExperimentConfig cfg;  // sine defaults: 593 params, 576 global, P = 50
  cfg.rounds = 1;
  cfg.clients = 3;
  cfg.eval_repeats = 2;
  cfg.fine_tune_steps = 4;

  SUBCASE("tmf sparse uplink") {
    const RunContext ctx(cfg);
    const RunResult r = run_simulation(ctx);
    REQUIRE(r.rounds.size() == 1);
    CHECK(r.rounds[0].bytes_down == 2330);  // 13 + (13 + 4 * 576)
    CHECK(r.rounds[0].bytes_up == 2321);    // 17 + 8 * 288
    CHECK(r.parameters_down == 576);
    CHECK(r.parameters_up == 288);
    CHECK(r.peak_stored_samples == 1);
  }
  SUBCASE("tiny reptile dense uplink") {
    cfg.algorithm = Algorithm::TinyReptile;
    cfg.partition = PartitionPolicy{PartitionPolicy::Kind::AllGlobal, {}};
    cfg.p_percent = 100.0;
    const RunContext ctx(cfg);
    const RunResult r = run_simulation(ctx);
    REQUIRE(r.rounds.size() == 1);
    CHECK(r.rounds[0].bytes_down == 2398);  // 13 + (13 + 4 * 593)
    CHECK(r.rounds[0].bytes_up == 2385);    // 13 + 4 * 593
    CHECK(r.peak_stored_samples == 1);
  }
  SUBCASE("fedsgd dense gradient uplink") {
    cfg.algorithm = Algorithm::FedSgd;
    cfg.partition = PartitionPolicy{PartitionPolicy::Kind::AllGlobal, {}};
    const RunContext ctx(cfg);
    const RunResult r = run_simulation(ctx);
    REQUIRE(r.rounds.size() == 1);
    CHECK(r.rounds[0].bytes_up == 2385);
  }
}

TEST_CASE("a failed exchange cools the client down and resamples in-round") {
  ExperimentConfig cfg = small_cfg();
  cfg.rounds = 2;
  cfg.cooldown_rounds = 0;

  const RunContext ctx(cfg);
  Server server(ctx.spec, ctx.partition, cfg.make_schedule(), cfg.seed);
  SimChannel channel(ctx);
  int attempts = 0;
  channel.set_fault_injector([&attempts](std::uint32_t, std::uint32_t) {
    return ++attempts <= 2;  // first two exchanges time out
  });
  const RunResult r = run_rounds(ctx, server, channel);

  CHECK_FALSE(r.aborted);
  REQUIRE(r.rounds.size() == 4);  // 2 failures + success in round 0, success in round 1
  CHECK(r.rounds[0].round == 0);
  CHECK_FALSE(r.rounds[0].ok);
  CHECK(std::isnan(r.rounds[0].query_loss));
  CHECK(r.rounds[0].bytes_down > 0);  // the downlink was spent
  CHECK(r.rounds[0].bytes_up == 0);
  CHECK(r.rounds[1].round == 0);
  CHECK_FALSE(r.rounds[1].ok);
  CHECK(r.rounds[2].round == 0);
  CHECK(r.rounds[2].ok);
  CHECK(r.rounds[3].round == 1);
  CHECK(r.rounds[3].ok);
  // Resampling never retries the client that just failed.
  CHECK(r.rounds[0].client_id != r.rounds[1].client_id);
  CHECK(r.rounds[1].client_id != r.rounds[2].client_id);
}

TEST_CASE("cooldown keeps failed clients out for the configured rounds") {
  ExperimentConfig cfg = small_cfg();
  cfg.rounds = 4;
  cfg.cooldown_rounds = 2;
  cfg.eval_every = 0;

  const RunContext ctx(cfg);
  Server server(ctx.spec, ctx.partition, cfg.make_schedule(), cfg.seed);
  SimChannel channel(ctx);
  channel.set_fault_injector([](std::uint32_t round, std::uint32_t) { return round == 0; });
  const RunResult r = run_rounds(ctx, server, channel);

  CHECK_FALSE(r.aborted);
  // Round 0: every client fails once. Rounds 1-2: everyone is cooling down,
  // no exchange happens at all. Round 3: eligible again and succeeding.
  REQUIRE(r.rounds.size() == static_cast<std::size_t>(cfg.clients) + 1);
  std::set<std::uint32_t> failed;
  for (int i = 0; i < cfg.clients; ++i) {
    CHECK(r.rounds[static_cast<std::size_t>(i)].round == 0);
    CHECK_FALSE(r.rounds[static_cast<std::size_t>(i)].ok);
    failed.insert(r.rounds[static_cast<std::size_t>(i)].client_id);
  }
  CHECK(failed.size() == static_cast<std::size_t>(cfg.clients));  // each tried once
  CHECK(r.rounds.back().round == 3);
  CHECK(r.rounds.back().ok);
}

TEST_CASE("persistent failures abort the run with a reason") {
  ExperimentConfig cfg = small_cfg();
  cfg.max_consecutive_failures = 3;

  const RunContext ctx(cfg);
  Server server(ctx.spec, ctx.partition, cfg.make_schedule(), cfg.seed);
  SimChannel channel(ctx);
  channel.set_fault_injector([](std::uint32_t, std::uint32_t) { return true; });
  const RunResult r = run_rounds(ctx, server, channel);

  CHECK(r.aborted);
  CHECK(r.rounds.size() == 3);
  CHECK(r.abort_reason.find("consecutive failed exchanges") != std::string::npos);
  // Partial results are still returned.
  CHECK(r.evals.size() == 1);  // the round-0 eval ran before the abort
}

TEST_CASE("a corrupted uplink is rejected without touching the server") {
  ExperimentConfig cfg = small_cfg();
  cfg.rounds = 1;
  cfg.eval_every = 1;
  cfg.cooldown_rounds = 0;

  const RunContext ctx(cfg);
  Server server(ctx.spec, ctx.partition, cfg.make_schedule(), cfg.seed);
  const VectorF g0 = server.global();
  SimChannel channel(ctx);
  int uplinks = 0;
  channel.set_frame_mutator([&uplinks](Direction d, ByteBuffer& frame) {
    if (d == Direction::Up && ++uplinks == 1) frame[0] ^= 0xff;  // break the magic
  });
  const RunResult r = run_rounds(ctx, server, channel);

  CHECK_FALSE(r.aborted);
  REQUIRE(r.rounds.size() == 2);
  CHECK_FALSE(r.rounds[0].ok);
  CHECK(r.rounds[1].ok);
  CHECK(r.rounds[1].round == 0);  // the round was completed by another client
  // The rejected frame changed nothing: the applied update is the second
  // client's, computed against the untouched g0.
  CHECK(server.global() != g0);
  CHECK(server.round() == 1u);
}

TEST_CASE("a run with zero rounds still evaluates the initialization") {
  ExperimentConfig cfg = small_cfg();
  cfg.rounds = 0;
  const RunContext ctx(cfg);
  const RunResult r = run_simulation(ctx);
  CHECK(r.rounds.empty());
  REQUIRE(r.evals.size() == 1);
  CHECK(r.evals[0].round == 0);
  CHECK(r.evals[0].cumulative_bytes == 0);
  const VectorF born = init_weights<float>(ctx.spec, seed_mix(cfg.seed, seed_tag::kInitWeights));
  CHECK(r.final_full == born);
}

TEST_CASE("reptile with one device and one epoch equals tiny reptile with one pass") {
  ExperimentConfig tr = small_cfg();
  tr.algorithm = Algorithm::TinyReptile;
  tr.partition = PartitionPolicy{PartitionPolicy::Kind::AllGlobal, {}};
  tr.p_percent = 100.0;
  tr.k_passes = 1;

  ExperimentConfig rp = tr;
  rp.algorithm = Algorithm::Reptile;
  rp.reptile_n = 1;
  rp.reptile_epochs = 1;

  const RunResult a = run_simulation(RunContext(tr));
  const RunResult b = run_simulation(RunContext(rp));
  REQUIRE(a.rounds.size() == b.rounds.size());
  for (std::size_t i = 0; i < a.rounds.size(); ++i) {
    CHECK(a.rounds[i].client_id == b.rounds[i].client_id);
    CHECK(same_float(a.rounds[i].support_loss, b.rounds[i].support_loss));
    CHECK(same_float(a.rounds[i].query_loss, b.rounds[i].query_loss));
    CHECK(a.rounds[i].bytes_down == b.rounds[i].bytes_down);
    CHECK(a.rounds[i].bytes_up == b.rounds[i].bytes_up);
  }
  CHECK(a.final_full == b.final_full);
  for (std::size_t i = 0; i < a.evals.size(); ++i) {
    CHECK(a.evals[i].result.mean_loss == b.evals[i].result.mean_loss);
  }
  // Reptile is the one path allowed to store its episode.
  CHECK(a.peak_stored_samples == 1);
  CHECK(b.peak_stored_samples == tr.support_size + tr.query_size);
}

TEST_CASE("reptile averages over several devices per iteration") {
  ExperimentConfig cfg = small_cfg();
  cfg.algorithm = Algorithm::Reptile;
  cfg.partition = PartitionPolicy{PartitionPolicy::Kind::AllGlobal, {}};
  cfg.rounds = 2;
  cfg.reptile_n = 3;
  const RunContext ctx(cfg);
  const RunResult r = run_simulation(ctx);
  REQUIRE(r.rounds.size() == 2);
  const std::size_t per_device_down = kHeaderBytes + dense_message_bytes(ctx.spec.param_count());
  CHECK(r.rounds[0].bytes_down == 3 * per_device_down);
  CHECK(r.rounds[0].bytes_up == 3 * dense_message_bytes(ctx.spec.param_count()));
  CHECK(r.parameters_down == 2 * 3 * ctx.spec.param_count());
}

TEST_CASE("should_stop interrupts between rounds") {
  ExperimentConfig cfg = small_cfg();
  cfg.eval_every = 0;
  const RunContext ctx(cfg);
  Server server(ctx.spec, ctx.partition, cfg.make_schedule(), cfg.seed);
  SimChannel channel(ctx);
  int slots = 0;
  DriverHooks hooks;
  hooks.should_stop = [&slots] { return ++slots > 5; };
  const RunResult r = run_rounds(ctx, server, channel, hooks);
  CHECK(r.aborted);
  CHECK(r.rounds.size() == 5);
  CHECK(r.final_round == 5u);
  CHECK(r.abort_reason.find("interrupted") != std::string::npos);
}
