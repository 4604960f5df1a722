#pragma once

#include <cstdint>
#include <limits>

namespace ntd {

/// Named streams derived from a master seed. Every consumer of randomness in
/// a run draws from its own stream so that, e.g., changing the sampler never
/// perturbs the network initialization.
enum class Stream : std::uint64_t {
  kEnvironment = 1,
  kInit = 2,
  kSampling = 3,
  kMonteCarlo = 4,
  kAssumptions = 5,
};

/// Counter-based generator: output k is splitmix64(key + k * golden). The key
/// is a hash of (seed, stream id), so streams are independent and splitting is
/// free. Satisfies UniformRandomBitGenerator.
class CounterRng {
 public:
  using result_type = std::uint64_t;

  CounterRng() : CounterRng(0, 0) {}
  CounterRng(std::uint64_t seed, std::uint64_t stream)
      : key_(mix(mix(seed) ^ (stream * kGolden + 0x632be59bd9b4e019ULL))) {}
  CounterRng(std::uint64_t seed, Stream stream)
      : CounterRng(seed, static_cast<std::uint64_t>(stream)) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() {
    return std::numeric_limits<result_type>::max();
  }

  result_type operator()() { return mix(key_ + (++counter_) * kGolden); }

  /// Independent child stream; does not advance this generator.
  CounterRng split(std::uint64_t id) const {
    CounterRng child;
    child.key_ = mix(key_ ^ mix(id + kGolden));
    return child;
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  std::uint64_t counter() const { return counter_; }

 private:
  static constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace ntd
