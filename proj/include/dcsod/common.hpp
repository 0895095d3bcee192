#pragma once

// Shared plumbing: error taxonomy, deterministic RNG helpers, finite checks,
// content hashing. Everything downstream assumes little-endian IEEE floats.

#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

static_assert(std::endian::native == std::endian::little,
              "serialized formats assume a little-endian host");

namespace dcsod {

class Error : public std::runtime_error {
 public:
  // Kinds map onto the CLI exit codes: config=2, prerequisite=3, numeric=4.
  enum class Kind { config, prerequisite, numeric, internal };

  Error(Kind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline Error config_error(const std::string& msg) { return Error(Error::Kind::config, msg); }
inline Error prereq_error(const std::string& msg) { return Error(Error::Kind::prerequisite, msg); }
inline Error numeric_error(const std::string& msg) { return Error(Error::Kind::numeric, msg); }
inline Error internal_error(const std::string& msg) { return Error(Error::Kind::internal, msg); }

// ---------------------------------------------------------------------------
// RNG. A thin counter-based generator (splitmix64) with hand-rolled
// distributions so streams are identical across standard libraries. Seeds for
// sub-tasks are derived from a root seed plus a path of integers, never by
// sharing generator state between components.

inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline uint64_t derive_seed(uint64_t root, std::initializer_list<uint64_t> path) {
  uint64_t s = root ^ 0xd6e8feb86659fd93ULL;
  (void)splitmix64(s);
  for (uint64_t p : path) {
    s ^= splitmix64(s) + p;
    (void)splitmix64(s);
  }
  return splitmix64(s);
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {
    // Burn a few outputs so small seeds decorrelate.
    next();
    next();
  }

  uint64_t next() { return splitmix64(state_); }

  // Uniform in [0, 1).
  double uniform() { return double(next() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). Rejection sampling keeps it unbiased.
  uint64_t below(uint64_t n) {
    if (n == 0) throw internal_error("Rng::below(0)");
    uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
      x = next();
    } while (x >= limit);
    return x % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal via Box-Muller; caches the second value.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1, u2;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // Fisher-Yates shuffle.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = size_t(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// ---------------------------------------------------------------------------

template <class S>
inline void check_finite(const S* data, size_t n, const char* context) {
  for (size_t i = 0; i < n; ++i) {
    if (!std::isfinite(double(data[i]))) {
      throw numeric_error(std::string("non-finite value in ") + context);
    }
  }
}

// Shared float formatting for CSV/JSON artifacts, so identical values always
// serialize to identical bytes.
inline std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

// Shortest decimal that parses back to exactly the same double, for files
// that must survive a write/read cycle without value drift.
inline std::string fmt_exact(double v) {
  char buf[40];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

// FNV-1a, used for content hashes in manifests and stable arch ids.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

inline std::string hex64(uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[size_t(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

}  // namespace dcsod
