#include "decaps/rng.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "decaps/errors.hpp"

namespace decaps {

uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Rng::Rng(uint64_t seed) : seed_(seed), engine_(mix64(seed)) {}

Rng Rng::split(uint64_t stream) const {
  return Rng(mix64(seed_ ^ mix64(stream + 1)));
}

uint64_t Rng::next_u64() { return engine_(); }

double Rng::uniform() {
  // 53 mantissa bits of the raw draw -> [0, 1).
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) {
  if (!(lo <= hi)) throw ConfigError("uniform: lo > hi");
  return lo + (hi - lo) * uniform();
}

double Rng::gaussian(double mean, double stddev) {
  // Box-Muller; u1 kept strictly positive so log() is finite.
  double u1 = uniform();
  if (u1 < 0x1.0p-53) u1 = 0x1.0p-53;
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  return mean + stddev * r * std::cos(2.0 * std::numbers::pi * u2);
}

int Rng::uniform_int(int lo, int hi) {
  if (lo > hi) throw ConfigError("uniform_int: lo > hi");
  const uint64_t range = static_cast<uint64_t>(hi) - static_cast<uint64_t>(lo) + 1;
  // Rejection sampling to avoid modulo bias.
  const uint64_t limit = UINT64_MAX - UINT64_MAX % range;
  uint64_t draw;
  do {
    draw = next_u64();
  } while (draw >= limit);
  return lo + static_cast<int>(draw % range);
}

std::string Rng::serialize() const {
  std::ostringstream out;
  out << seed_ << ' ' << engine_;
  return out.str();
}

void Rng::deserialize(const std::string& text) {
  std::istringstream in(text);
  in >> seed_ >> engine_;
  if (!in) throw DataError("rng state: malformed serialization");
}

}  // namespace decaps
