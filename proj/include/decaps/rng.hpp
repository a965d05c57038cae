#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace decaps {

// Deterministic PRNG used everywhere randomness is needed. One base stream per
// run, split into independent child streams per module/purpose so that adding
// a consumer in one place never shifts the draws seen by another.
//
// Distributions are implemented by hand on top of mt19937_64 (whose sequence
// the standard pins down exactly) because the std::*_distribution adapters are
// implementation-defined and would break cross-toolchain reproducibility.
class Rng {
 public:
  explicit Rng(uint64_t seed);

  // Child stream derived from this stream's seed and a label; independent of
  // any draws already made on the parent.
  Rng split(uint64_t stream) const;

  uint64_t next_u64();
  double uniform();  // [0, 1)
  double uniform(double lo, double hi);
  double gaussian(double mean, double stddev);
  int uniform_int(int lo, int hi);  // inclusive on both ends

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(0, static_cast<int>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

  uint64_t seed() const { return seed_; }

  // Exact engine state, for checkpointing.
  std::string serialize() const;
  void deserialize(const std::string& text);

 private:
  uint64_t seed_ = 0;
  std::mt19937_64 engine_;
};

// SplitMix64 finalizer; used for seed derivation and stable hashing.
uint64_t mix64(uint64_t x);

}  // namespace decaps
