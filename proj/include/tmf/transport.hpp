#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>

#include "tmf/runner.hpp"

namespace tmf {

struct TransportError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// "host:port"; an empty host means every interface on the server side and
// the loopback on the client side.
struct SocketAddress {
  std::string host;
  std::uint16_t port = 0;
};

SocketAddress parse_address(const std::string& text);

struct ServeOptions {
  std::string bind;                      // empty falls back to cfg.bind
  std::filesystem::path checkpoint_dir;  // empty disables checkpointing
  // Invoked once the listener is up, so callers can bind port 0 and learn
  // the chosen port.
  std::function<void(std::uint16_t)> on_bound;
  // Optional external stop request, polled between rounds; SIGINT and
  // SIGTERM are honored regardless.
  const std::atomic<bool>* stop = nullptr;
};

// The full experiment loop over TCP: binds, waits until every client id
// below cfg.clients has registered, then drives the same round loop as the
// simulator. A checkpoint is written every cfg.checkpoint_every rounds and
// once more on exit, always holding the last completed round's weights.
// Stop requests checkpoint, broadcast Shutdown and return the partial
// result. Throws TransportError when the address cannot be bound or an
// existing checkpoint belongs to a different configuration.
RunResult serve(const RunContext& ctx, const ServeOptions& opts);

struct AgentOptions {
  std::string server;           // host:port
  std::uint32_t task_seed = 0;  // selects the client's task; doubles as its id
  int backoff_cap_ms = 30000;
};

// The client process body: connect, register, answer assignments until a
// Shutdown message arrives. Holds no state between rounds; everything is
// derived from the config, the task seed and the round number. Connection
// loss triggers reconnection with exponential backoff. Returns a process
// exit code.
int client_agent(const RunContext& ctx, const AgentOptions& opts);

}  // namespace tmf
