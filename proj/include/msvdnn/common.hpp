#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace msvdnn {

// Error taxonomy. The CLI maps these onto distinct exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// Malformed external input: PLY text, bitstream bytes, bundle files.
struct ParseError : Error {
  using Error::Error;
};
// Filesystem-level failure.
struct IoError : Error {
  using Error::Error;
};
// Bitstream was produced with a different model bundle (or version).
struct MismatchError : Error {
  using Error::Error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

// Deterministic random source. All sampling goes through explicit
// arithmetic on mt19937_64 output so a seed pins the exact value
// sequence independent of the standard library's distribution code.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t bits() { return eng_(); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  // Uniform integer in [lo, hi], inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(eng_() % span);
  }

  // Standard normal via Box-Muller.
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace msvdnn
