#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace kbflow {

// Philox4x32-10 (Salmon et al., SC'11). Stateless: output depends only on
// (key, counter), so any draw can be regenerated independently.
inline std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> ctr, std::array<std::uint32_t, 2> key) {
  constexpr std::uint32_t m0 = 0xD2511F53u, m1 = 0xCD9E8D57u;
  constexpr std::uint32_t w0 = 0x9E3779B9u, w1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    const std::uint64_t p0 = static_cast<std::uint64_t>(m0) * ctr[0];
    const std::uint64_t p1 = static_cast<std::uint64_t>(m1) * ctr[2];
    const auto hi0 = static_cast<std::uint32_t>(p0 >> 32), lo0 = static_cast<std::uint32_t>(p0);
    const auto hi1 = static_cast<std::uint32_t>(p1 >> 32), lo1 = static_cast<std::uint32_t>(p1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += w0;
    key[1] += w1;
  }
  return ctr;
}

// Standard normal quantile, Wichura's AS241 (PPND16), relative accuracy ~1e-16.
inline double normal_quantile(double p) {
  const double q = p - 0.5;
  if (std::abs(q) <= 0.425) {
    const double r = 0.180625 - q * q;
    return q *
           (((((((2509.0809287301226727 * r + 33430.575583588128105) * r + 67265.770927008700853) * r +
                45921.953931549871457) * r + 13731.693765509461125) * r + 1971.5909503065514427) * r +
             133.14166789178437745) * r + 3.387132872796366608) /
           (((((((5226.4952788528545610 * r + 28729.085735721942674) * r + 39307.89580009271061) * r +
                21213.794301586595867) * r + 5394.1960214247511077) * r + 687.1870074920579083) * r +
             42.313330701600911252) * r + 1.0);
  }
  double r = q < 0.0 ? p : 1.0 - p;
  r = std::sqrt(-std::log(r));
  double val;
  if (r <= 5.0) {
    r -= 1.6;
    val = (((((((7.7454501427834140764e-4 * r + 0.0227238449892691845833) * r + 0.24178072517745061177) * r +
               1.27045825245236838258) * r + 3.64784832476320460504) * r + 5.7694972214606914055) * r +
            4.6303378461565452959) * r + 1.42343711074968357734) /
          (((((((1.05075007164441684324e-9 * r + 5.475938084995344946e-4) * r + 0.0151986665636164571966) * r +
               0.14810397642748007459) * r + 0.68976733498510000455) * r + 1.6763848301838038494) * r +
            2.05319162663775882187) * r + 1.0);
  } else {
    r -= 5.0;
    val = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r + 0.0012426609473880784386) * r +
               0.026532189526576123093) * r + 0.29656057182850489123) * r + 1.7848265399172913358) * r +
            5.4637849111641143699) * r + 6.6579046435011037772) /
          (((((((2.04426310338993978564e-15 * r + 1.4215117583164458887e-7) * r + 1.8463183175100546818e-5) * r +
               7.868691311456132591e-4) * r + 0.0148753612908506148525) * r + 0.13692988092273580531) * r +
            0.59983220655588793769) * r + 1.0);
  }
  return q < 0.0 ? -val : val;
}

// Noise source identifiers. Each stream is independent of the others.
enum class Stream : std::uint32_t { W = 0, V = 1, W_bar = 2, V_bar = 3, initial = 4 };

// Addressable Gaussian noise: every draw is a pure function of
// (seed, stream, replica, member, step, component).
class NoiseBundle {
 public:
  NoiseBundle(std::uint64_t seed, double step, double horizon, bool zero_noise = false)
      : seed_(seed), step_(step), horizon_(horizon), zero_(zero_noise) {}

  std::uint64_t seed() const { return seed_; }
  double step() const { return step_; }
  double horizon() const { return horizon_; }
  bool zero_noise() const { return zero_; }

  // Uniform on (0, 1), 53 random bits.
  double uniform(Stream stream, std::uint32_t replica, std::uint32_t member, std::uint64_t step_index,
                 std::uint32_t component) const {
    const std::array<std::uint32_t, 4> ctr = {
        static_cast<std::uint32_t>(step_index), replica, member,
        (static_cast<std::uint32_t>(stream) << 24) ^ (static_cast<std::uint32_t>(step_index >> 32) << 12) ^
            (component >> 1)};
    const auto out = philox4x32(ctr, {static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32)});
    const std::uint64_t bits = (component & 1u) ? (static_cast<std::uint64_t>(out[2]) << 32 | out[3])
                                                : (static_cast<std::uint64_t>(out[0]) << 32 | out[1]);
    return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
  }

  double normal(Stream stream, std::uint32_t replica, std::uint32_t member, std::uint64_t step_index,
                std::uint32_t component) const {
    if (zero_) return 0.0;
    return normal_quantile(uniform(stream, replica, member, step_index, component));
  }

  // Brownian increment over base steps [first, first + stride).
  double increment(Stream stream, std::uint32_t replica, std::uint32_t member, std::uint64_t first,
                   std::uint32_t stride, std::uint32_t component) const {
    if (zero_) return 0.0;
    double sum = 0.0;
    for (std::uint32_t j = 0; j < stride; ++j) sum += normal(stream, replica, member, first + j, component);
    return std::sqrt(step_) * sum;
  }

 private:
  std::uint64_t seed_;
  double step_;
  double horizon_;
  bool zero_;
};

}  // namespace kbflow
