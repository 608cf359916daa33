#ifndef AVTTS_COMMON_HPP
#define AVTTS_COMMON_HPP

#include <cstdint>
#include <cmath>
#include <stdexcept>
#include <string>

namespace avtts {

enum class ErrorCode {
  invalid_input,
  invalid_language,
  insufficient_data,
  shape_error,
  malformed_sequence,
  empty_input,
  missing_modality,
  sequence_too_long,
  invalid_state,
  invalid_distribution,
  unsupported_format,
  corrupt_dataset,
  corrupt_checkpoint,
  config_mismatch,
  divergence,
  invalid_config,
  empty_audio,
  not_found,
  config_error,
  io_error,
};

const char* error_code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& msg)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + msg), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

// Config validation failures carry the dotted path of the offending field.
class ConfigFieldError : public Error {
 public:
  ConfigFieldError(const std::string& field, const std::string& msg)
      : Error(ErrorCode::config_error, field + ": " + msg), field_(field) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& msg) { throw Error(code, msg); }

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

// Self-contained generator: xoshiro-free, just splitmix64 streams. Avoids
// std::normal_distribution so sequences are identical across libstdc++ builds.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(splitmix64(seed ^ 0x6a09e667f3bcc908ULL)) {}

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double next_double() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // uniform integer in [lo, hi] inclusive
  int64_t next_int(int64_t lo, int64_t hi) {
    return lo + int64_t(next_u64() % uint64_t(hi - lo + 1));
  }

  // Box-Muller, one value per call (second draw discarded for simplicity)
  double next_gaussian() {
    double u1 = 0.0;
    do {
      u1 = next_double();
    } while (u1 <= 0.0);
    double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

 private:
  uint64_t state_;
};

}  // namespace avtts

#endif  // AVTTS_COMMON_HPP
