#include "tmf/transport.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <sys/types.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <condition_variable>
#include <csignal>
#include <cstring>
#include <map>
#include <mutex>
#include <optional>
#include <thread>
#include <utility>

#include "tmf/weights_io.hpp"
#include "tmf/wire.hpp"

namespace tmf {
namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

// Owning socket descriptor.
struct Fd {
  int fd = -1;
  Fd() = default;
  explicit Fd(int f) : fd(f) {}
  Fd(const Fd&) = delete;
  Fd& operator=(const Fd&) = delete;
  Fd(Fd&& o) noexcept : fd(o.fd) { o.fd = -1; }
  Fd& operator=(Fd&& o) noexcept {
    if (this != &o) {
      reset();
      fd = o.fd;
      o.fd = -1;
    }
    return *this;
  }
  ~Fd() { reset(); }
  void reset() {
    if (fd >= 0) ::close(fd);
    fd = -1;
  }
  explicit operator bool() const { return fd >= 0; }
};

// Set by the signal handler the server installs; the executor and any
// blocked socket wait poll it.
std::atomic<bool>* g_signal_stop = nullptr;

bool signal_stop_requested() { return g_signal_stop && g_signal_stop->load(); }

void on_stop_signal(int) {
  if (g_signal_stop) g_signal_stop->store(true);
}

class SignalGuard {
 public:
  explicit SignalGuard(std::atomic<bool>* flag) {
    g_signal_stop = flag;
    struct sigaction sa {};
    sa.sa_handler = on_stop_signal;
    ::sigaction(SIGINT, &sa, &old_int_);
    ::sigaction(SIGTERM, &sa, &old_term_);
  }
  ~SignalGuard() {
    ::sigaction(SIGINT, &old_int_, nullptr);
    ::sigaction(SIGTERM, &old_term_, nullptr);
    g_signal_stop = nullptr;
  }

 private:
  struct sigaction old_int_ {};
  struct sigaction old_term_ {};
};

void set_nodelay(int fd) {
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
}

bool send_all(int fd, const std::uint8_t* data, std::size_t n) {
  while (n > 0) {
    const ssize_t k = ::send(fd, data, n, MSG_NOSIGNAL);
    if (k < 0) {
      if (errno == EINTR && !signal_stop_requested()) continue;
      return false;
    }
    data += k;
    n -= static_cast<std::size_t>(k);
  }
  return true;
}

// Each protocol message crosses the socket prefixed by its u32 LE length.
// The prefix is stream bookkeeping, like the TCP headers themselves, so
// the per-round byte counters never include it.
bool send_frame(int fd, const ByteBuffer& msg) {
  ByteBuffer framed;
  framed.reserve(4 + msg.size());
  put_u32(framed, static_cast<std::uint32_t>(msg.size()));
  framed.insert(framed.end(), msg.begin(), msg.end());
  return send_all(fd, framed.data(), framed.size());
}

// timeout_ms < 0 waits indefinitely. False on close, error or deadline.
bool recv_all(int fd, std::uint8_t* data, std::size_t n, int timeout_ms) {
  const auto deadline = Clock::now() + std::chrono::milliseconds(timeout_ms);
  while (n > 0) {
    int wait = -1;
    if (timeout_ms >= 0) {
      const auto left =
          std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now());
      wait = static_cast<int>(left.count());
      if (wait <= 0) return false;
    }
    struct pollfd p {
      fd, POLLIN, 0
    };
    const int pr = ::poll(&p, 1, wait);
    if (pr < 0) {
      if (errno == EINTR && !signal_stop_requested()) continue;
      return false;
    }
    if (pr == 0) return false;
    const ssize_t k = ::recv(fd, data, n, 0);
    if (k < 0) {
      if (errno == EINTR && !signal_stop_requested()) continue;
      return false;
    }
    if (k == 0) return false;
    data += k;
    n -= static_cast<std::size_t>(k);
  }
  return true;
}

constexpr std::uint32_t kMaxFrameBytes = 1u << 26;

std::optional<ByteBuffer> recv_frame(int fd, int timeout_ms) {
  std::uint8_t raw[4];
  if (!recv_all(fd, raw, 4, timeout_ms)) return std::nullopt;
  const std::uint32_t len = static_cast<std::uint32_t>(raw[0]) |
                            static_cast<std::uint32_t>(raw[1]) << 8 |
                            static_cast<std::uint32_t>(raw[2]) << 16 |
                            static_cast<std::uint32_t>(raw[3]) << 24;
  if (len > kMaxFrameBytes) return std::nullopt;
  ByteBuffer msg(len);
  if (len > 0 && !recv_all(fd, msg.data(), len, timeout_ms)) return std::nullopt;
  return msg;
}

// The wire has no loss fields, but round records must match the simulator's
// exactly, so every uplink is followed by a fixed 12-byte telemetry frame:
// "TMFm" | support f32 | query f32. Like the length prefixes it is not a
// protocol message and is never counted as communication.
struct LossTelemetry {
  float support = 0.0f;
  float query = 0.0f;
};

ByteBuffer encode_telemetry(float support, float query) {
  ByteBuffer out;
  out.reserve(12);
  out.push_back('T');
  out.push_back('M');
  out.push_back('F');
  out.push_back('m');
  put_f32(out, support);
  put_f32(out, query);
  return out;
}

LossTelemetry decode_telemetry(const ByteBuffer& buf) {
  ByteReader r(buf);
  r.magic("TMFm", "telemetry frame");
  LossTelemetry t;
  t.support = r.f32();
  t.query = r.f32();
  if (r.remaining() != 0) throw DecodeError("trailing bytes after telemetry");
  return t;
}

Fd make_listener(const SocketAddress& addr) {
  struct addrinfo hints {};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  hints.ai_flags = AI_PASSIVE;
  struct addrinfo* res = nullptr;
  const std::string port = std::to_string(addr.port);
  const int rc = ::getaddrinfo(addr.host.empty() ? nullptr : addr.host.c_str(),
                               port.c_str(), &hints, &res);
  if (rc != 0) {
    throw TransportError("cannot resolve " + addr.host + ": " + gai_strerror(rc));
  }
  Fd fd(::socket(res->ai_family, res->ai_socktype, res->ai_protocol));
  if (!fd) {
    ::freeaddrinfo(res);
    throw TransportError(std::string("socket: ") + std::strerror(errno));
  }
  int one = 1;
  ::setsockopt(fd.fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  const int brc = ::bind(fd.fd, res->ai_addr, res->ai_addrlen);
  ::freeaddrinfo(res);
  if (brc != 0) {
    throw TransportError("cannot bind " + addr.host + ":" + port + ": " +
                         std::strerror(errno));
  }
  if (::listen(fd.fd, 16) != 0) {
    throw TransportError(std::string("listen: ") + std::strerror(errno));
  }
  return fd;
}

std::uint16_t local_port(int fd) {
  struct sockaddr_in sin {};
  socklen_t len = sizeof(sin);
  if (::getsockname(fd, reinterpret_cast<struct sockaddr*>(&sin), &len) != 0) return 0;
  return ntohs(sin.sin_port);
}

Fd try_connect(const SocketAddress& addr) {
  struct addrinfo hints {};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  struct addrinfo* res = nullptr;
  const std::string port = std::to_string(addr.port);
  const std::string host = addr.host.empty() ? "127.0.0.1" : addr.host;
  if (::getaddrinfo(host.c_str(), port.c_str(), &hints, &res) != 0) return Fd();
  Fd fd(::socket(res->ai_family, res->ai_socktype, res->ai_protocol));
  if (fd && ::connect(fd.fd, res->ai_addr, res->ai_addrlen) != 0) fd.reset();
  ::freeaddrinfo(res);
  if (fd) set_nodelay(fd.fd);
  return fd;
}

// Registrations flow from the acceptor thread to the round executor through
// this table; it is the only state the two contexts share. The executor
// borrows a connection for the duration of one exchange and returns it
// afterwards unless the client re-registered in the meantime, in which case
// the newer connection wins.
class Registry {
 public:
  void add(std::uint32_t id, Fd fd) {
    {
      std::lock_guard<std::mutex> lk(mu_);
      Slot& s = slots_[id];
      s.fd = std::move(fd);
      ++s.generation;
    }
    cv_.notify_all();
  }

  Fd take(std::uint32_t id, std::uint64_t* generation) {
    std::lock_guard<std::mutex> lk(mu_);
    auto it = slots_.find(id);
    if (it == slots_.end() || !it->second.fd) return Fd();
    *generation = it->second.generation;
    return std::move(it->second.fd);
  }

  void give_back(std::uint32_t id, Fd fd, std::uint64_t generation) {
    std::lock_guard<std::mutex> lk(mu_);
    Slot& s = slots_[id];
    if (s.generation == generation && !s.fd) s.fd = std::move(fd);
  }

  // Blocks until ids 0..count-1 have all registered at least once.
  bool wait_until_registered(std::uint32_t count, const std::function<bool()>& cancelled) {
    std::unique_lock<std::mutex> lk(mu_);
    while (true) {
      bool all = true;
      for (std::uint32_t id = 0; id < count; ++id) {
        if (slots_.find(id) == slots_.end()) {
          all = false;
          break;
        }
      }
      if (all) return true;
      if (cancelled()) return false;
      cv_.wait_for(lk, std::chrono::milliseconds(100));
    }
  }

  void broadcast_shutdown(std::uint32_t round) {
    std::lock_guard<std::mutex> lk(mu_);
    const ByteBuffer bye = encode_shutdown(round);
    for (auto& [id, slot] : slots_) {
      if (slot.fd) send_frame(slot.fd.fd, bye);
      slot.fd.reset();
    }
  }

 private:
  struct Slot {
    Fd fd;
    std::uint64_t generation = 0;
  };
  std::mutex mu_;
  std::condition_variable cv_;
  std::map<std::uint32_t, Slot> slots_;
};

// Wire tag carried in registration messages.
std::uint8_t family_tag(TaskFamily f) {
  return f == TaskFamily::Sine ? std::uint8_t{0} : std::uint8_t{1};
}

void acceptor_loop(int listen_fd, Registry& registry, const ExperimentConfig& cfg,
                   const std::atomic<bool>& stop) {
  while (!stop.load()) {
    struct pollfd p {
      listen_fd, POLLIN, 0
    };
    const int pr = ::poll(&p, 1, 200);
    if (pr < 0) {
      if (errno == EINTR) continue;
      break;
    }
    if (pr == 0) continue;
    Fd conn(::accept(listen_fd, nullptr, nullptr));
    if (!conn) continue;
    set_nodelay(conn.fd);
    // Registration must arrive promptly; a silent connection cannot hold
    // the acceptor hostage for long.
    const auto frame = recv_frame(conn.fd, 5000);
    if (!frame) continue;
    try {
      const Message m = decode_message(*frame);
      if (m.type != MsgType::ClientHello) {
        throw ProtocolError("expected a registration message");
      }
      if (m.family_tag != family_tag(cfg.task.family)) {
        log_info("rejecting client %u: task family mismatch", m.client_id);
        continue;
      }
      if (m.client_id >= static_cast<std::uint32_t>(cfg.clients)) {
        log_info("rejecting client %u: outside the configured population of %d",
                 m.client_id, cfg.clients);
        continue;
      }
      log_info("client %u registered", m.client_id);
      registry.add(m.client_id, std::move(conn));
    } catch (const std::exception& e) {
      log_info("rejecting connection: %s", e.what());
    }
  }
}

long uplink_value_count(const Message& m) {
  return m.type == MsgType::SparseDelta ? static_cast<long>(m.delta.size())
                                        : static_cast<long>(m.count);
}

class SocketChannel final : public ClientChannel {
 public:
  SocketChannel(const RunContext& ctx, Registry& registry)
      : ctx_(&ctx), registry_(&registry) {}

  // The sampling population is the configured id space, exactly as in the
  // simulator; whether an id currently has a live connection is a per-round
  // concern handled through failure and cooldown.
  std::vector<std::uint32_t> client_ids() override {
    std::vector<std::uint32_t> ids(static_cast<std::size_t>(ctx_->cfg.clients));
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<std::uint32_t>(i);
    return ids;
  }

  RoundOutcome run_round(Server& server, std::uint32_t client_id) override {
    RoundOutcome o;
    const auto start = Clock::now();
    std::uint64_t generation = 0;
    Fd fd = registry_->take(client_id, &generation);
    if (!fd) {
      o.error = "client not connected";
      o.wall_ms = ms_since(start);
      return o;
    }

    const std::uint32_t t = server.round();
    const int global_count = ctx_->partition.global_count();
    const ByteBuffer assign =
        encode_round_start(t, static_cast<std::uint32_t>(global_count));
    const ByteBuffer down = encode_dense(t, server.global());

    // A connection that fails mid-exchange is dropped rather than returned;
    // the client notices and re-registers on a fresh socket, which keeps the
    // frame stream aligned.
    if (!send_frame(fd.fd, assign) || !send_frame(fd.fd, down)) {
      o.error = "downlink send failed";
      o.wall_ms = ms_since(start);
      return o;
    }
    o.bytes_down = assign.size() + down.size();
    o.parameters_down = global_count;

    const int timeout = ctx_->cfg.timeout_ms;
    const auto up = recv_frame(fd.fd, timeout);
    if (!up) {
      o.error = "no uplink within " + std::to_string(timeout) + " ms";
      o.wall_ms = ms_since(start);
      return o;
    }
    const auto telemetry = recv_frame(fd.fd, timeout);
    if (!telemetry) {
      o.error = "uplink telemetry missing";
      o.wall_ms = ms_since(start);
      return o;
    }

    o.bytes_up = up->size();
    try {
      const Message um = decode_message(*up);
      const LossTelemetry losses = decode_telemetry(*telemetry);
      o.support_loss = losses.support;
      o.query_loss = losses.query;
      o.parameters_up = uplink_value_count(um);
      apply_uplink(server, ctx_->cfg, um);
    } catch (const std::exception& e) {
      // Undecodable, stale or mismatched uplinks leave the server untouched;
      // the connection itself is still aligned, so it goes back in the pool.
      o.error = std::string("uplink rejected: ") + e.what();
      registry_->give_back(client_id, std::move(fd), generation);
      o.wall_ms = ms_since(start);
      return o;
    }
    registry_->give_back(client_id, std::move(fd), generation);
    o.wall_ms = ms_since(start);
    o.ok = true;
    return o;
  }

 private:
  const RunContext* ctx_;
  Registry* registry_;
};

}  // namespace

SocketAddress parse_address(const std::string& text) {
  const auto colon = text.rfind(':');
  if (colon == std::string::npos) {
    throw TransportError("address must look like host:port, got \"" + text + "\"");
  }
  SocketAddress a;
  a.host = text.substr(0, colon);
  const std::string port = text.substr(colon + 1);
  char* end = nullptr;
  const unsigned long v = std::strtoul(port.c_str(), &end, 10);
  if (port.empty() || *end != '\0' || v > 65535) {
    throw TransportError("bad port \"" + port + "\" in \"" + text + "\"");
  }
  a.port = static_cast<std::uint16_t>(v);
  return a;
}

RunResult serve(const RunContext& ctx, const ServeOptions& opts) {
  const ExperimentConfig& cfg = ctx.cfg;
  const SocketAddress addr = parse_address(opts.bind.empty() ? cfg.bind : opts.bind);
  Fd listener = make_listener(addr);
  const std::uint16_t port = local_port(listener.fd);
  if (opts.on_bound) opts.on_bound(port);
  log_info("serving on %s:%u", addr.host.empty() ? "0.0.0.0" : addr.host.c_str(), port);

  std::atomic<bool> stop(false);
  SignalGuard signals(&stop);
  const auto stopped = [&] {
    return stop.load() || (opts.stop && opts.stop->load());
  };

  Registry registry;
  std::thread acceptor(acceptor_loop, listener.fd, std::ref(registry), std::cref(cfg),
                       std::cref(stop));

  Server server(ctx.spec, ctx.partition, cfg.make_schedule(), cfg.seed);

  const std::filesystem::path checkpoint_path =
      opts.checkpoint_dir.empty() ? std::filesystem::path()
                                  : opts.checkpoint_dir / "checkpoint.tmfc";
  if (!checkpoint_path.empty() && std::filesystem::exists(checkpoint_path)) {
    const Checkpoint c = load_checkpoint(checkpoint_path);
    if (c.seed != cfg.seed || c.config_hash != cfg.config_hash()) {
      stop.store(true);
      acceptor.join();
      throw TransportError("existing checkpoint was written under a different "
                           "configuration; refusing to resume from it");
    }
    server.restore(c.round, c.weights);
    log_info("resumed from checkpoint at round %u", c.round);
  }

  // The stored round is the next one to execute, so a resumed server picks
  // up exactly where the previous process left off.
  const auto write_checkpoint = [&](const Server& s) {
    if (checkpoint_path.empty()) return;
    Checkpoint c;
    c.round = s.round();
    c.seed = cfg.seed;
    c.config_hash = cfg.config_hash();
    c.weights = s.global();
    save_checkpoint(checkpoint_path, c);
  };

  log_info("waiting for %d client registrations", cfg.clients);
  if (!registry.wait_until_registered(static_cast<std::uint32_t>(cfg.clients), stopped)) {
    stop.store(true);
    acceptor.join();
    RunResult res;
    res.aborted = true;
    res.abort_reason = "stopped while waiting for client registrations";
    res.final_full = server.full_for_eval();
    return res;
  }

  SocketChannel channel(ctx, registry);
  DriverHooks hooks;
  hooks.should_stop = stopped;
  hooks.on_round_end = [&](std::uint32_t t, const Server& s) {
    if (cfg.checkpoint_every > 0 &&
        (t + 1) % static_cast<std::uint32_t>(cfg.checkpoint_every) == 0) {
      // on_round_end runs before the counter advances; persist the state a
      // resumed server needs for round t+1.
      Checkpoint c;
      c.round = t + 1;
      c.seed = cfg.seed;
      c.config_hash = cfg.config_hash();
      c.weights = s.global();
      if (!checkpoint_path.empty()) save_checkpoint(checkpoint_path, c);
    }
  };

  RunResult res = run_rounds(ctx, server, channel, hooks);

  write_checkpoint(server);
  stop.store(true);
  registry.broadcast_shutdown(server.round());
  acceptor.join();
  return res;
}

int client_agent(const RunContext& ctx, const AgentOptions& opts) {
  const ExperimentConfig& cfg = ctx.cfg;
  const SocketAddress addr = parse_address(opts.server);
  const std::uint8_t family = family_tag(cfg.task.family);
  const int initial_backoff_ms = 500;
  int backoff_ms = initial_backoff_ms;

  while (true) {
    Fd fd = try_connect(addr);
    if (!fd) {
      log_debug("connect to %s failed, retrying in %d ms", opts.server.c_str(),
                backoff_ms);
      std::this_thread::sleep_for(std::chrono::milliseconds(backoff_ms));
      backoff_ms = std::min(backoff_ms * 2, opts.backoff_cap_ms);
      continue;
    }
    if (!send_frame(fd.fd, encode_hello(opts.task_seed, family))) {
      fd.reset();
      std::this_thread::sleep_for(std::chrono::milliseconds(backoff_ms));
      backoff_ms = std::min(backoff_ms * 2, opts.backoff_cap_ms);
      continue;
    }
    backoff_ms = initial_backoff_ms;
    log_info("registered with %s as client %u", opts.server.c_str(), opts.task_seed);

    // Answer assignments on this connection until it breaks. An assignment
    // is a RoundStart immediately followed by the dense global weights.
    std::optional<std::uint32_t> pending_round;
    while (true) {
      const auto frame = recv_frame(fd.fd, -1);
      if (!frame) break;
      Message m;
      try {
        m = decode_message(*frame);
      } catch (const std::exception& e) {
        log_info("ignoring undecodable frame: %s", e.what());
        pending_round.reset();
        continue;
      }
      if (m.type == MsgType::Shutdown) {
        log_info("server finished after round %u", m.round);
        return 0;
      }
      if (m.type == MsgType::RoundStart) {
        pending_round = m.round;
        continue;
      }
      if (m.type == MsgType::DenseWeights && pending_round && *pending_round == m.round) {
        pending_round.reset();
        bool sent = false;
        try {
          const ClientReply reply = client_reply(ctx, opts.task_seed, m.round, m.dense);
          sent = send_frame(fd.fd, reply.frame) &&
                 send_frame(fd.fd, encode_telemetry(reply.support_loss, reply.query_loss));
          log_debug("round %u answered with %zu bytes", m.round, reply.frame.size());
        } catch (const std::exception& e) {
          // No reply; the server times out this exchange and moves on.
          log_info("round %u failed locally: %s", m.round, e.what());
          continue;
        }
        if (!sent) break;
        continue;
      }
      log_info("ignoring unexpected %s frame", to_string(m.type).c_str());
      pending_round.reset();
    }
    fd.reset();
    log_info("%s", "connection lost, reconnecting");
  }
}

}  // namespace tmf
