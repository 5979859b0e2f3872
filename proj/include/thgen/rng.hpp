#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace thgen {

// Deterministic random stream. std::mt19937_64 is bit-reproducible across
// platforms; the standard distributions are not, so the transforms live here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be positive.
  std::uint64_t uniform_int(std::uint64_t n);

  // Standard normal via Box-Muller (no cached spare, so the state is
  // exactly the engine state).
  double normal();

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Fisher-Yates with uniform_int; std::shuffle is implementation-defined.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::string save_state() const;
  void restore_state(const std::string& state);

 private:
  std::mt19937_64 engine_;
};

}  // namespace thgen
