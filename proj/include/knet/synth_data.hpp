#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "knet/types.hpp"

// Synthetic scenes: two stuff bands with thing shapes drawn over them.
namespace knet::data {

enum class ShapeKind { kCircle, kRectangle, kTriangle };

// Category id of a thing shape (circle 1, rectangle 2, triangle 3).
int category_of(ShapeKind kind);
constexpr int kSky = 101;
constexpr int kGround = 102;

struct ShapeParams {
  double cy = 0, cx = 0;        // center, in pixel coordinates
  double radius = 0;            // circle
  double height = 0, width = 0; // rectangle and triangle extents
};

// Inclusive rasterization on pixel centers. Circle: (u-cy)^2 + (v-cx)^2 <= r^2;
// rectangle: |u-cy| <= h/2 and |v-cx| <= w/2; triangle: apex at the top center
// of the h x w box, base along its bottom edge.
std::vector<std::uint8_t> rasterize_shape(ShapeKind kind, const ShapeParams& params,
                                          std::size_t height, std::size_t width);

struct SceneSpec {
  std::uint64_t seed = 0;
  std::size_t height = 64, width = 64;
  std::size_t n_min = 1, n_max = 3;
  double size_min = 10, size_max = 22;  // shape extent (diameter or side) in px
  bool allow_overlap = true;
  std::size_t min_visible_pixels = 8;
  double min_visible_fraction = 0.5;  // of an instance's own area left after occlusion
  double color_jitter = 0.08;
  double noise = 0.05;
  double horizon_min = 0.35, horizon_max = 0.65;  // sky/ground boundary, fraction of H
};

nlohmann::json to_json(const SceneSpec& spec);
SceneSpec spec_from_json(const nlohmann::json& j);

// Pure function of (spec.seed, index).
GroundTruthSample generate_sample(const SceneSpec& spec, std::size_t index);

struct Dataset {
  SceneSpec spec;
  std::vector<GroundTruthSample> samples;
};

void write_dataset(const SceneSpec& spec, std::size_t count, const std::filesystem::path& dir);
// Verifies every checksum; CorruptDataError on mismatch, FormatError on a
// missing or malformed manifest.
Dataset read_dataset(const std::filesystem::path& dir);

std::uint32_t crc32_of_file(const std::filesystem::path& path);

}  // namespace knet::data
