// SPDX-License-Identifier: Apache-2.0

#include "lorkd/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <random>

#include <fmt/format.h>

#include "lorkd/error.hpp"
#include "lorkd/rng.hpp"

namespace lorkd {

namespace {

constexpr std::array<const char*, 4> kFamilyNames = {"circle", "square", "bar", "cross"};
constexpr double kNoise = 0.1;
constexpr double kBarHalfThickness = 1.0;

}  // namespace

std::string to_string(GeneratorKind kind) { return kind == GeneratorKind::pattern_cls ? "pattern_cls" : "shape_seg"; }

GeneratorKind parse_generator(const std::string& s) {
  if (s == "pattern_cls") return GeneratorKind::pattern_cls;
  if (s == "shape_seg") return GeneratorKind::shape_seg;
  throw ValueError(fmt::format("unknown generator '{}' (expected pattern_cls or shape_seg)", s));
}

std::string to_string(ShapeFamily family) { return kFamilyNames[static_cast<int>(family)]; }

ShapeFamily parse_shape_family(const std::string& s) {
  for (std::size_t i = 0; i < kFamilyNames.size(); ++i)
    if (s == kFamilyNames[i]) return static_cast<ShapeFamily>(i);
  throw ValueError(fmt::format("unknown shape family '{}'", s));
}

void SyntheticTaskSpec::validate() const {
  if (image_size < 8) throw ValueError(fmt::format("image_size must be >= 8, got {}", image_size));
  if (image_size % 4 != 0) throw ValueError(fmt::format("image_size must be a multiple of 4, got {}", image_size));
  if (classes == 0) throw ValueError("a task needs at least one class / mask channel");
  if (kind == GeneratorKind::shape_seg && classes > 4) throw ValueError("shape_seg supports at most 4 mask channels");
  if (!(conflict_coupling >= 0.0 && conflict_coupling <= 1.0)) {
    throw ValueError(fmt::format("conflict_coupling must be in [0,1], got {}", conflict_coupling));
  }
}

bool shape_contains(const ShapeInstance& s, double x, double y) {
  const double dx = std::abs(x - s.cx), dy = std::abs(y - s.cy);
  switch (s.family) {
    case ShapeFamily::circle: return dx * dx + dy * dy <= s.size * s.size;
    case ShapeFamily::square: return dx <= s.size && dy <= s.size;
    case ShapeFamily::bar:
      return s.vertical ? (dy <= s.size && dx <= kBarHalfThickness) : (dx <= s.size && dy <= kBarHalfThickness);
    case ShapeFamily::cross:
      return (dx <= s.size && dy <= kBarHalfThickness) || (dy <= s.size && dx <= kBarHalfThickness);
  }
  return false;
}

Tensor<float> rasterize(const ShapeInstance& shape, std::size_t size) {
  Tensor<float> out({size, size});
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x)
      if (shape_contains(shape, static_cast<double>(x), static_cast<double>(y))) out[y * size + x] = 1.0f;
  return out;
}

std::size_t pattern_label(const SyntheticTaskSpec& spec, std::size_t orientation, std::size_t frequency) {
  const auto shift = static_cast<std::size_t>(std::lround(spec.conflict_coupling * static_cast<double>(spec.task_id + 1)));
  return (orientation + shift * frequency) % spec.classes;
}

ClsDataset gen_synthetic_cls(const SyntheticTaskSpec& spec, std::uint64_t seed, std::size_t count) {
  spec.validate();
  if (spec.kind != GeneratorKind::pattern_cls) throw ValueError("gen_synthetic_cls needs a pattern_cls spec");
  const std::size_t S = spec.image_size, Y = spec.classes;
  ClsDataset ds;
  ds.task = spec.task_id;
  ds.images = Tensor<float>({count, 1, S, S});
  ds.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::mt19937_64 gen(derive_seed(seed, {spec.task_id, i}));
    std::uniform_int_distribution<std::size_t> level(0, Y - 1);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, kNoise);
    const std::size_t o = level(gen), f = level(gen);
    const double theta = std::numbers::pi * static_cast<double>(o) / static_cast<double>(Y);
    const double cycles = Y > 1 ? 2.0 + 3.0 * static_cast<double>(f) / static_cast<double>(Y - 1) : 3.0;
    const double phase = 2.0 * std::numbers::pi * unit(gen);
    const double amplitude = 0.7 + 0.3 * unit(gen);
    const double k = 2.0 * std::numbers::pi * cycles / static_cast<double>(S);
    const double c = std::cos(theta), s = std::sin(theta);
    float* img = ds.images.raw() + i * S * S;
    for (std::size_t y = 0; y < S; ++y)
      for (std::size_t x = 0; x < S; ++x) {
        const double v = amplitude * std::sin(k * (static_cast<double>(x) * c + static_cast<double>(y) * s) + phase);
        img[y * S + x] = static_cast<float>(v + noise(gen));
      }
    ds.labels[i] = pattern_label(spec, o, f);
  }
  return ds;
}

namespace {

ShapeInstance random_shape(std::mt19937_64& gen, ShapeFamily family, double lo, double hi, std::size_t S) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  ShapeInstance sh;
  sh.family = family;
  sh.size = lo + (hi - lo) * unit(gen);
  sh.vertical = unit(gen) < 0.5;
  const double extent = sh.size;
  const double span = static_cast<double>(S - 1) - 2 * extent;
  sh.cx = extent + span * unit(gen);
  sh.cy = extent + span * unit(gen);
  sh.intensity = static_cast<float>(0.5 + 0.5 * unit(gen));
  return sh;
}

}  // namespace

SegDataset gen_synthetic_seg(const SyntheticTaskSpec& spec, std::uint64_t seed, std::size_t count) {
  spec.validate();
  if (spec.kind != GeneratorKind::shape_seg) throw ValueError("gen_synthetic_seg needs a shape_seg spec");
  const std::size_t S = spec.image_size, K = spec.classes;
  const double lo = 2.0, hi = std::max(3.0, static_cast<double>(S) / 5.0);
  const double bin = (hi - lo) / static_cast<double>(K);
  SegDataset ds;
  ds.task = spec.task_id;
  ds.images = Tensor<float>({count, 1, S, S});
  ds.masks = Tensor<float>({count, K, S, S});
  ds.shapes.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::mt19937_64 gen(derive_seed(seed, {spec.task_id, i}));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, kNoise);
    auto& shapes = ds.shapes[i];
    for (std::size_t k = 0; k < K; ++k) {
      ShapeInstance sh = random_shape(gen, spec.family, lo + bin * static_cast<double>(k),
                                      lo + bin * static_cast<double>(k + 1), S);
      sh.channel = static_cast<int>(k);
      shapes.push_back(sh);
    }
    if (unit(gen) < spec.conflict_coupling) {
      const std::size_t extra = unit(gen) < 0.5 ? 1 : 2;
      for (std::size_t e = 0; e < extra; ++e) {
        const auto offset = 1 + static_cast<std::size_t>(unit(gen) * 3.0) % 3;
        const auto family = static_cast<ShapeFamily>((static_cast<std::size_t>(spec.family) + offset) % 4);
        shapes.push_back(random_shape(gen, family, lo, hi, S));
      }
    }
    float* img = ds.images.raw() + i * S * S;
    float* mask = ds.masks.raw() + i * K * S * S;
    for (std::size_t y = 0; y < S; ++y)
      for (std::size_t x = 0; x < S; ++x) {
        float v = 0.0f;
        for (const auto& sh : shapes) {
          if (!shape_contains(sh, static_cast<double>(x), static_cast<double>(y))) continue;
          v = std::max(v, sh.intensity);
          if (sh.channel >= 0) mask[static_cast<std::size_t>(sh.channel) * S * S + y * S + x] = 1.0f;
        }
        img[y * S + x] = v + static_cast<float>(noise(gen));
      }
  }
  return ds;
}

}  // namespace lorkd
