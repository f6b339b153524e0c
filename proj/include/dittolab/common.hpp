// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <charconv>
#include <cstdint>
#include <exception>
#include <functional>
#include <initializer_list>
#include <mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace dittolab {

using token_id = std::int32_t;

// End-of-sequence token shared by every built-in environment.
inline constexpr token_id kEosToken = 0;

// Raised for unusable configuration (unknown ids, bad ranges). CLI exit 2.
struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Raised when a loss, gradient or ratio goes non-finite. CLI exit 3.
struct numeric_error : std::runtime_error {
  explicit numeric_error(const std::string& msg, std::string diagnostic = "")
      : std::runtime_error(msg), diagnostic_json(std::move(diagnostic)) {}
  std::string diagnostic_json;
};

// Raised on malformed or inconsistent rollout traces. CLI exit 4.
struct trace_error : std::runtime_error {
  explicit trace_error(const std::string& msg, int line = 0)
      : std::runtime_error(msg), line_number(line) {}
  int line_number;
};

// splitmix64 finalizer. All hashing below is build-stable: no runtime salt,
// no std::hash, so signatures survive process restarts.
inline std::uint64_t mix64(std::uint64_t x) {
  x ^= x >> 30;
  x *= 0xBF58476D1CE4E5B9ULL;
  x ^= x >> 27;
  x *= 0x94D049BB133111EBULL;
  x ^= x >> 31;
  return x;
}

inline std::uint64_t hash_combine(std::uint64_t h, std::uint64_t v) {
  return mix64(h ^ (v + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2)));
}

inline constexpr std::uint64_t kHashInit = 0x9D3C5715B1E0C6A3ULL;

// Incremental stable hash over a stream of 64-bit words.
class StableHash {
 public:
  void add(std::uint64_t v) { h_ = hash_combine(h_, v); }
  void add_tokens(std::span<const token_id> tokens) {
    add(tokens.size());
    for (token_id t : tokens) add(static_cast<std::uint64_t>(t));
  }
  std::uint64_t digest() const { return h_; }

 private:
  std::uint64_t h_ = kHashInit;
};

// Stable seed derivation: chaining the same values always yields the same
// sub-seed regardless of worker scheduling.
inline std::uint64_t seed_chain(std::uint64_t seed,
                                std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = hash_combine(kHashInit, seed);
  for (std::uint64_t p : parts) h = hash_combine(h, p);
  return h;
}

// Deterministic splitmix64 generator. Used instead of <random> engines and
// distributions, whose outputs are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    return mix64(state_);
  }

  // Uniform in [0, 1) with 53 random bits.
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double next_range(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

  // Samples an index from an (approximately normalized) probability vector.
  int categorical(std::span<const double> probs) {
    double u = next_unit();
    double cum = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      cum += probs[i];
      if (u < cum) return static_cast<int>(i);
    }
    return static_cast<int>(probs.size()) - 1;
  }

 private:
  std::uint64_t state_;
};

// Runs body(0..n-1) on up to `workers` threads. Items must be independent;
// callers merge results in index order afterwards, which keeps every output
// byte-identical regardless of the worker count.
inline void parallel_for(std::size_t n, int workers,
                         const std::function<void(std::size_t)>& body) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (;;) {
      std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        body(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
        return;
      }
    }
  };
  std::size_t count = std::min<std::size_t>(static_cast<std::size_t>(workers), n);
  std::vector<std::thread> pool;
  pool.reserve(count);
  for (std::size_t i = 0; i < count; ++i) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

// Shortest round-trip decimal form; identical across runs of the same build.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace dittolab
