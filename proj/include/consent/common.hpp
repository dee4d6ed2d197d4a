#pragma once

// Shared plumbing: error types, deterministic RNG, worker-pool helper.

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace consent {

// ---------------------------------------------------------------------------
// Errors. The CLI maps these onto exit codes: validation/config -> 2,
// I/O -> 3, numerical failure -> 4.

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Shape or configuration mismatch.
struct DimensionError : Error {
  using Error::Error;
};

/// Invalid input data (manifest, boxes, labels, ...).
struct ValidationError : Error {
  using Error::Error;
};

/// Filesystem / stream failure.
struct IoError : Error {
  using Error::Error;
};

/// NaN/Inf reached a value that must stay finite.
struct NumericError : Error {
  using Error::Error;
};

/// API misuse (e.g. backward() on a consumed tape).
struct UsageError : Error {
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Deterministic RNG. splitmix64 core with hand-rolled transforms so that a
// seed produces the same byte stream on every platform and stdlib.

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi] inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(below(span));
  }

  /// Uniform in [0, n). Lemire multiply-shift, no rejection (bias < 2^-64·n).
  std::uint64_t below(std::uint64_t n) {
    const unsigned __int128 m =
        static_cast<unsigned __int128>(next_u64()) * static_cast<unsigned __int128>(n);
    return static_cast<std::uint64_t>(m >> 64);
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal, Box-Muller with cached second variate.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.28318530717958647692 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = below(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  /// Derive an independent stream (per image index, ablation cell, ...).
  static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    Rng r(a ^ (0xD1B54A32D192ED03ull * (b + 0x9E3779B97F4A7C15ull)));
    return r.next_u64();
  }

  /// Hex digest of the current state, for reproducibility logs.
  std::string digest() const {
    static const char* hexd = "0123456789abcdef";
    std::string out(16, '0');
    std::uint64_t s = state_;
    for (int i = 15; i >= 0; --i) {
      out[static_cast<std::size_t>(i)] = hexd[s & 0xF];
      s >>= 4;
    }
    return out;
  }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// ---------------------------------------------------------------------------
// Parallelism. CONSENT_THREADS caps the worker count; results must be
// written to per-index slots so thread scheduling cannot change output.

inline unsigned worker_count() {
  if (const char* env = std::getenv("CONSENT_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n >= 1) return static_cast<unsigned>(n);
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

/// Runs fn(i) for i in [0, n). Each index is processed exactly once; the
/// first worker exception is rethrown on the calling thread.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const unsigned workers = std::min<std::size_t>(worker_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n || failed.load()) return;
        try {
          fn(i);
        } catch (...) {
          {
            std::lock_guard<std::mutex> lock(error_mu);
            if (!error) error = std::current_exception();
          }
          failed.store(true);
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

// ---------------------------------------------------------------------------
// Order-canonical summation. Sorting the nonzero summands makes the result
// independent of their original order, which is what makes attention outputs
// bit-identical under sequence permutation and appended masked padding.

inline double canonical_sum(std::vector<double>& terms) {
  std::size_t m = 0;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i] != 0.0) terms[m++] = terms[i];
  }
  std::sort(terms.begin(), terms.begin() + static_cast<std::ptrdiff_t>(m),
            [](double a, double b) {
              if (a != b) return a < b;
              return std::bit_cast<std::uint64_t>(a) < std::bit_cast<std::uint64_t>(b);
            });
  double s = 0.0;
  for (std::size_t i = 0; i < m; ++i) s += terms[i];
  return s;
}

}  // namespace consent
