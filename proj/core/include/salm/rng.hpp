#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string_view>
#include <vector>

namespace salm {

// xoshiro256** seeded through splitmix64. All randomness in the project flows
// through this generator so that runs are reproducible bit-for-bit across
// platforms and standard library implementations (std::normal_distribution et
// al. are not portable).
class Rng {
 public:
  explicit Rng(uint64_t seed) { reseed(seed); }

  void reseed(uint64_t seed) {
    uint64_t x = seed;
    for (auto& s : state_) {
      // splitmix64
      x += 0x9e3779b97f4a7c15ULL;
      uint64_t z = x;
      z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
      z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
      s = z ^ (z >> 31);
    }
    has_spare_ = false;
    spare_ = 0.0;
  }

  uint64_t next_u64() {
    const uint64_t result = rotl_(state_[1] * 5, 7) * 9;
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl_(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [lo, hi], inclusive. Unbiased via rejection.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    if (lo > hi) throw std::invalid_argument("uniform_int: empty range");
    const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    if (span == 0) return static_cast<int64_t>(next_u64());  // full 64-bit range
    const uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    uint64_t v;
    do {
      v = next_u64();
    } while (v >= limit);
    return lo + static_cast<int64_t>(v % span);
  }

  // Standard normal via Box-Muller with a cached spare.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  // normal(0, stddev) truncated at +/- 2 stddev, by resampling.
  double normal_trunc2(double stddev) {
    double v;
    do {
      v = normal();
    } while (v < -2.0 || v > 2.0);
    return v * stddev;
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(uniform_int(0, static_cast<int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Serializable state: 4 state words + the Box-Muller spare.
  struct State {
    std::array<uint64_t, 4> s;
    bool has_spare;
    double spare;
  };
  State state() const { return {state_, has_spare_, spare_}; }
  void set_state(const State& st) {
    state_ = st.s;
    has_spare_ = st.has_spare;
    spare_ = st.spare;
  }

 private:
  static uint64_t rotl_(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::array<uint64_t, 4> state_{};
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Derives a subsystem seed from the experiment seed and a label such as
// ("split", round) or ("gen", round, lang hash). FNV-1a over the label bytes,
// mixed with the numeric parts, then finalized with splitmix64 so that
// neighboring labels do not yield correlated streams.
inline uint64_t derive_seed(uint64_t base, std::string_view tag, uint64_t a = 0, uint64_t b = 0) {
  uint64_t h = 0xcbf29ce484222325ULL;
  auto mix_byte = [&h](uint8_t byte) {
    h ^= byte;
    h *= 0x100000001b3ULL;
  };
  for (char c : tag) mix_byte(static_cast<uint8_t>(c));
  for (uint64_t v : {base, a, b}) {
    for (int i = 0; i < 8; ++i) mix_byte(static_cast<uint8_t>(v >> (8 * i)));
  }
  h += 0x9e3779b97f4a7c15ULL;
  h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ULL;
  h = (h ^ (h >> 27)) * 0x94d049bb133111ebULL;
  return h ^ (h >> 31);
}

inline uint64_t derive_seed(uint64_t base, std::string_view tag, uint64_t a, std::string_view name) {
  uint64_t nh = 0xcbf29ce484222325ULL;
  for (char c : name) {
    nh ^= static_cast<uint8_t>(c);
    nh *= 0x100000001b3ULL;
  }
  return derive_seed(base, tag, a, nh);
}

}  // namespace salm
