// Copyright 2026 The APMA Authors.
// SPDX-License-Identifier: Apache-2.0

#ifndef APMA_DATASET_HPP
#define APMA_DATASET_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

#include "apma/io.hpp"

namespace apma {

inline constexpr std::uint32_t kMaxSyntheticClasses = 16;
inline constexpr std::uint32_t kSyntheticSize = 32;

namespace detail {

struct PatternParams {
  double cx, cy;      // center, pixels
  double size;        // radius or half-extent, pixels
  double period;      // stripe/checker period, pixels
  double phase;       // radians
  double jitter;      // small orientation perturbation, radians
  double fg, bg;      // intensities in [0, 1]
};

inline double stripes(double x, double y, double angle, const PatternParams& p) {
  const double u = x * std::cos(angle) + y * std::sin(angle);
  return std::sin(2.0 * std::numbers::pi * u / p.period + p.phase) > 0.0 ? 1.0 : 0.0;
}

// Foreground coverage in [0, 1] of class `cls` at pixel (x, y).
inline double pattern(std::uint32_t cls, double x, double y, const PatternParams& p) {
  const double dx = x - p.cx, dy = y - p.cy;
  const double r = std::hypot(dx, dy);
  const double pi = std::numbers::pi;
  switch (cls) {
    case 0: return stripes(x, y, 0.0 + p.jitter, p);             // vertical bars
    case 1: return stripes(x, y, pi / 2 + p.jitter, p);          // horizontal bars
    case 2: return stripes(x, y, pi / 4 + p.jitter, p);          // diagonal bars
    case 3: return stripes(x, y, 3 * pi / 4 + p.jitter, p);      // anti-diagonal bars
    case 4: return r < p.size ? 1.0 : 0.0;                        // disc
    case 5: return std::abs(r - p.size) < 1.6 ? 1.0 : 0.0;        // ring
    case 6: {                                                     // checkerboard
      const auto a = static_cast<long>(std::floor((x + p.phase) / (p.period / 2)));
      const auto b = static_cast<long>(std::floor((y + p.phase) / (p.period / 2)));
      return ((a + b) & 1) ? 1.0 : 0.0;
    }
    case 7:                                                       // plus sign
      return (std::abs(dx) < 1.6 && std::abs(dy) < p.size) ||
                     (std::abs(dy) < 1.6 && std::abs(dx) < p.size)
                 ? 1.0
                 : 0.0;
    case 8: return std::max(std::abs(dx), std::abs(dy)) < p.size ? 1.0 : 0.0;  // square
    case 9: {                                                     // square outline
      const double d = std::max(std::abs(dx), std::abs(dy));
      return std::abs(d - p.size) < 1.6 ? 1.0 : 0.0;
    }
    case 10:                                                      // diagonal cross
      return (std::abs(dx - dy) < 2.2 || std::abs(dx + dy) < 2.2) && r < p.size * 1.4
                 ? 1.0
                 : 0.0;
    case 11:                                                      // triangle
      return std::abs(dy) < p.size && std::abs(dx) < (dy + p.size) / 2 ? 1.0 : 0.0;
    case 12: {                                                    // dot lattice
      const double fx = std::fmod(x + p.phase + 64.0, p.period) - p.period / 2;
      const double fy = std::fmod(y + p.phase + 64.0, p.period) - p.period / 2;
      return std::hypot(fx, fy) < p.period / 4 ? 1.0 : 0.0;
    }
    case 13: return std::sin(2.0 * pi * r / p.period + p.phase) > 0.0 ? 1.0 : 0.0;  // rings
    case 14: return x < p.cx ? 1.0 : 0.0;                         // half field
    case 15: return std::abs(dx) < p.size && std::abs(dy) < p.size / 3 ? 1.0 : 0.0;  // bar
    default: return 0.0;
  }
}

}  // namespace detail

/// Procedural 32x32 grayscale patterns, one family per class, with random
/// placement, scale, phase and contrast plus Gaussian pixel noise (sigma 0.1).
/// Deterministic in `seed`.
inline Dataset gen_dataset(std::uint64_t seed, std::uint32_t count, std::uint32_t classes) {
  if (classes == 0 || classes > kMaxSyntheticClasses)
    throw ConfigError("synthetic datasets support 1.." + std::to_string(kMaxSyntheticClasses) +
                      " classes, got " + std::to_string(classes));
  Dataset d;
  d.height = d.width = kSyntheticSize;
  d.channels = 1;
  d.num_classes = classes;
  d.pixels.resize(std::size_t(count) * kSyntheticSize * kSyntheticSize);
  d.labels.resize(count);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.1);
  const double s = kSyntheticSize;
  for (std::uint32_t n = 0; n < count; ++n) {
    const auto cls = static_cast<std::uint32_t>(rng() % classes);
    detail::PatternParams p;
    p.cx = s * (0.35 + 0.3 * u(rng));
    p.cy = s * (0.35 + 0.3 * u(rng));
    p.size = s * (0.18 + 0.12 * u(rng));
    p.period = 6.0 + 4.0 * u(rng);
    p.phase = 2.0 * std::numbers::pi * u(rng);
    p.jitter = 0.15 * (u(rng) - 0.5);
    const double contrast = 0.5 + 0.4 * u(rng);
    p.bg = (1.0 - contrast) * u(rng);
    p.fg = std::min(1.0, p.bg + contrast);
    std::uint8_t* img = d.pixels.data() + std::size_t(n) * kSyntheticSize * kSyntheticSize;
    for (std::uint32_t y = 0; y < kSyntheticSize; ++y)
      for (std::uint32_t x = 0; x < kSyntheticSize; ++x) {
        const double cov = detail::pattern(cls, x + 0.5, y + 0.5, p);
        const double v = p.bg + (p.fg - p.bg) * cov + noise(rng);
        img[y * kSyntheticSize + x] =
            static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      }
    d.labels[n] = static_cast<std::uint8_t>(cls);
  }
  return d;
}

}  // namespace apma

#endif  // APMA_DATASET_HPP
