#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <variant>
#include <vector>

namespace nsde {

namespace detail {

// Philox4x32-10 (Salmon et al., "Parallel random numbers: as easy as 1, 2, 3").
inline std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> ctr,
                                               std::array<std::uint32_t, 2> key) {
  constexpr std::uint32_t kMul0 = 0xD2511F53u;
  constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
  constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
  constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    const std::uint64_t p0 = static_cast<std::uint64_t>(kMul0) * ctr[0];
    const std::uint64_t p1 = static_cast<std::uint64_t>(kMul1) * ctr[2];
    const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
    const auto lo0 = static_cast<std::uint32_t>(p0);
    const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
    const auto lo1 = static_cast<std::uint32_t>(p1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += kWeyl0;
    key[1] += kWeyl1;
  }
  return ctr;
}

inline std::array<std::uint32_t, 2> split(std::uint64_t v) {
  return {static_cast<std::uint32_t>(v), static_cast<std::uint32_t>(v >> 32)};
}

inline std::uint64_t join(std::uint32_t lo, std::uint32_t hi) {
  return static_cast<std::uint64_t>(lo) | (static_cast<std::uint64_t>(hi) << 32);
}

// 53 random bits mapped to (0, 1].
inline double to_unit_open_closed(std::uint64_t bits) {
  return static_cast<double>((bits >> 11) + 1) * 0x1.0p-53;
}

}  // namespace detail

/// Counter-based random stream. Every output is a pure function of
/// (seed, stream_id, counter); copies are independent values, so two workers
/// holding copies never interfere.
class RandomStream {
 public:
  RandomStream() = default;
  explicit RandomStream(std::uint64_t seed, std::uint64_t stream_id = 0, std::uint64_t counter = 0)
      : seed_(seed), stream_id_(stream_id), counter_(counter) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }
  std::uint64_t counter() const { return counter_; }

  /// Two 64-bit words for the given counter position.
  std::array<std::uint64_t, 2> block(std::uint64_t counter) const {
    const auto c = detail::split(counter);
    const auto s = detail::split(stream_id_);
    const auto out = detail::philox4x32({c[0], c[1], s[0], s[1]}, detail::split(seed_));
    return {detail::join(out[0], out[1]), detail::join(out[2], out[3])};
  }

  /// Uniform on (0, 1] at an absolute counter position.
  double uniform_at(std::uint64_t counter) const {
    return detail::to_unit_open_closed(block(counter)[0]);
  }

  /// Standard normal at an absolute counter position (Box-Muller, cosine branch).
  double gaussian_at(std::uint64_t counter) const {
    const auto b = block(counter);
    const double u1 = detail::to_unit_open_closed(b[0]);
    const double u2 = detail::to_unit_open_closed(b[1]);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double uniform() { return uniform_at(counter_++); }
  double gaussian() { return gaussian_at(counter_++); }
  std::uint64_t bits() { return block(counter_++)[0]; }

  void skip(std::uint64_t n) { counter_ += n; }

  /// Independent sub-stream keyed by (this stream, index), counter reset to 0.
  RandomStream child(std::uint64_t index) const {
    const auto i = detail::split(index);
    const auto s = detail::split(stream_id_);
    const auto key = detail::split(seed_ ^ 0x243F6A8885A308D3ull);
    const auto out = detail::philox4x32({i[0], i[1], s[0], s[1]}, key);
    return RandomStream(seed_, detail::join(out[0], out[1]) ^ detail::join(out[2], out[3]));
  }

  friend bool operator==(const RandomStream&, const RandomStream&) = default;

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t stream_id_ = 0;
  std::uint64_t counter_ = 0;
};

struct Gaussian {
  double mean = 0.0;
  double stddev = 1.0;
};

struct Bernoulli {
  double p = 0.5;
};

using Distribution = std::variant<Gaussian, Bernoulli>;

/// `count` independent draws; advances the stream by `count`.
inline std::vector<double> draw(RandomStream& stream, const Distribution& dist, std::size_t count) {
  std::vector<double> out(count);
  if (const auto* g = std::get_if<Gaussian>(&dist)) {
    if (!(g->stddev >= 0.0) || !std::isfinite(g->stddev) || !std::isfinite(g->mean)) {
      throw std::invalid_argument("draw: gaussian stddev must be finite and >= 0");
    }
    for (auto& v : out) v = g->mean + g->stddev * stream.gaussian();
  } else {
    const double p = std::get<Bernoulli>(dist).p;
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("draw: bernoulli p must lie in [0, 1]");
    // uniform is on (0, 1], so p = 1 always succeeds and p = 0 never does.
    for (auto& v : out) v = stream.uniform() <= p ? 1.0 : 0.0;
  }
  return out;
}

}  // namespace nsde
