// SPDX-License-Identifier: Apache-2.0

// Synthetic multi-task datasets. Every sample is a pure function of
// (seed, task_id, index), so datasets can be regenerated anywhere.
//
// pattern_cls: sinusoidal gratings with an orientation level o and a frequency
// level f, both uniform over {0..Y-1}. Task t labels an image
//   y = (o + s_t * f) mod Y,   s_t = round(conflict_coupling * (t + 1))
// so at coupling 0 every task is orientation classification, and at coupling 1
// different tasks give the same texture different labels.
//
// shape_seg: noisy images holding one target shape per mask channel from the
// task's shape family (channel k draws size bin k); with probability
// conflict_coupling each image also carries distractor shapes from the other
// families, which stay out of the masks.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lorkd/tensor.hpp"

namespace lorkd {

enum class GeneratorKind { pattern_cls, shape_seg };
enum class ShapeFamily { circle, square, bar, cross };

std::string to_string(GeneratorKind kind);
GeneratorKind parse_generator(const std::string& s);
std::string to_string(ShapeFamily family);
ShapeFamily parse_shape_family(const std::string& s);

struct SyntheticTaskSpec {
  std::size_t task_id = 0;
  GeneratorKind kind = GeneratorKind::pattern_cls;
  /// Shape family for shape_seg; ignored for pattern_cls.
  ShapeFamily family = ShapeFamily::circle;
  std::size_t image_size = 32;
  /// Classes (pattern_cls) or mask channels (shape_seg).
  std::size_t classes = 4;
  double conflict_coupling = 0.0;

  void validate() const;
  bool operator==(const SyntheticTaskSpec&) const = default;
};

struct ShapeInstance {
  ShapeFamily family = ShapeFamily::circle;
  double cx = 0, cy = 0;
  double size = 0;       // radius / half-width / half-length
  bool vertical = false;  // bars only
  float intensity = 1;
  /// Mask channel, or -1 for a distractor.
  int channel = -1;
};

/// Exact pixel membership: pixel centres (x, y) with integer coordinates.
bool shape_contains(const ShapeInstance& shape, double x, double y);

/// Binary [size, size] raster of one shape.
Tensor<float> rasterize(const ShapeInstance& shape, std::size_t size);

struct ClsDataset {
  std::size_t task = 0;
  Tensor<float> images;  // [n, 1, S, S]
  std::vector<std::size_t> labels;
  std::size_t size() const noexcept { return labels.size(); }
};

struct SegDataset {
  std::size_t task = 0;
  Tensor<float> images;  // [n, 1, S, S]
  Tensor<float> masks;   // [n, K, S, S]
  std::vector<std::vector<ShapeInstance>> shapes;
  std::size_t size() const noexcept { return shapes.size(); }
};

std::size_t pattern_label(const SyntheticTaskSpec& spec, std::size_t orientation, std::size_t frequency);

ClsDataset gen_synthetic_cls(const SyntheticTaskSpec& spec, std::uint64_t seed, std::size_t count);
SegDataset gen_synthetic_seg(const SyntheticTaskSpec& spec, std::uint64_t seed, std::size_t count);

}  // namespace lorkd
