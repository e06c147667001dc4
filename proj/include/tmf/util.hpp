#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <random>
#include <string>

namespace tmf {

// SplitMix64 finalizer. Used to derive independent seed streams from one
// root seed without correlated low bits.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t seed_mix(std::uint64_t seed, std::uint64_t a,
                              std::uint64_t b = 0, std::uint64_t c = 0) {
  std::uint64_t h = mix64(seed ^ 0x517cc1b727220a95ull);
  h = mix64(h ^ a);
  h = mix64(h ^ b);
  h = mix64(h ^ c);
  return h;
}

// Seed-stream tags. Every consumer of randomness mixes one of these into the
// run seed so that streams never collide across subsystems.
namespace seed_tag {
inline constexpr std::uint64_t kInitWeights = 0x01;
inline constexpr std::uint64_t kTrainTasks = 0x02;
inline constexpr std::uint64_t kTestTasks = 0x03;
inline constexpr std::uint64_t kEpisode = 0x04;
inline constexpr std::uint64_t kClientSampler = 0x06;
inline constexpr std::uint64_t kEval = 0x07;
}  // namespace seed_tag

// Deterministic draws on top of mt19937. The standard distributions are
// implementation-defined, so raw engine words are scaled by hand; this keeps
// traces reproducible across compilers.
class Rng {
 public:
  explicit Rng(std::uint64_t seed)
      : eng_(static_cast<std::mt19937::result_type>(mix64(seed))) {}

  std::uint32_t word() { return eng_(); }

  // [0, 1)
  double unit() { return word() * (1.0 / 4294967296.0); }

  double uniform(double lo, double hi) { return lo + unit() * (hi - lo); }

  // Box-Muller with a cached spare.
  double gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = (static_cast<double>(word()) + 1.0) * (1.0 / 4294967296.0);
    const double u2 = unit();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  // Uniform index in [0, n). Modulo bias is negligible for the pool sizes
  // used here and keeps the draw portable.
  std::uint32_t index(std::uint32_t n) { return word() % n; }

 private:
  std::mt19937 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Verbosity from the TMF_LOG environment variable: unset/empty is quiet,
// "info" prints progress, "debug" adds per-message detail.
inline int log_level() {
  static const int level = [] {
    const char* v = std::getenv("TMF_LOG");
    if (!v) return 0;
    const std::string s(v);
    if (s == "debug") return 2;
    if (s == "info") return 1;
    return 0;
  }();
  return level;
}

template <typename... Args>
void log_info(const char* fmt, Args... args) {
  if (log_level() >= 1) {
    std::fprintf(stderr, "[tmf] ");
    std::fprintf(stderr, fmt, args...);
    std::fputc('\n', stderr);
  }
}

template <typename... Args>
void log_debug(const char* fmt, Args... args) {
  if (log_level() >= 2) {
    std::fprintf(stderr, "[tmf] ");
    std::fprintf(stderr, fmt, args...);
    std::fputc('\n', stderr);
  }
}

}  // namespace tmf
