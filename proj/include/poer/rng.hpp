#pragma once

#include <cstdint>
#include <initializer_list>
#include <vector>

namespace poer {

/// Counter-based 64-bit generator.
///
/// The n-th output (n = 0, 1, ...) of a stream with key k is
///
///     mix64(k + (n + 1) * 0x9E3779B97F4A7C15)
///
/// where mix64 is the SplitMix64 finalizer:
///
///     z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
///     z = (z ^ (z >> 27)) * 0x94D049BB133111EB
///     z =  z ^ (z >> 31)
///
/// The full state is the pair (key, counter), so any position in any stream can
/// be reproduced without replaying earlier draws. Independent streams are
/// obtained with derive(), which folds a list of integer tags into the key.
///
/// Uniform doubles take the top 53 bits: (u >> 11) * 2^-53, in [0, 1).
/// Normals use Box-Muller on (1 - u1, u2); both outputs of a pair are used,
/// the cosine branch first.
class CounterRng {
 public:
  struct State {
    std::uint64_t key = 0;
    std::uint64_t counter = 0;
    bool has_spare = false;
    double spare = 0.0;
    bool operator==(const State&) const = default;
  };

  explicit CounterRng(std::uint64_t key = 0) { state_.key = key; }
  explicit CounterRng(State s) : state_(s) {}

  /// Stream for (seed, tag0, tag1, ...). Each tag is absorbed with one mix64
  /// round so that nearby seeds and tags give unrelated keys.
  static CounterRng derive(std::uint64_t seed, std::initializer_list<std::uint64_t> tags);

  static std::uint64_t mix64(std::uint64_t z);

  std::uint64_t next_u64();
  double uniform();
  double normal();
  /// Uniform integer in [0, n), n > 0; rejection sampling, no modulo bias.
  std::uint64_t below(std::uint64_t n);

  /// Fisher-Yates with below().
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  const State& state() const { return state_; }

 private:
  State state_;
};

/// Named stream tags so that every subsystem draws from its own stream.
enum class Stream : std::uint64_t {
  kCategoryTemplates = 1,
  kCategoryNuisance = 2,
  kDomainEmbeddings = 3,
  kMixing = 4,
  kSamples = 5,
  kSplit = 16,
  kSampler = 17,
  kInit = 18,
  kPrototypes = 19,
  kAudit = 20,
  kGradCheck = 21,
};

inline CounterRng stream(std::uint64_t seed, Stream s) {
  return CounterRng::derive(seed, {static_cast<std::uint64_t>(s)});
}

inline CounterRng stream(std::uint64_t seed, Stream s, std::uint64_t index) {
  return CounterRng::derive(seed, {static_cast<std::uint64_t>(s), index});
}

}  // namespace poer
