#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "knet/tensor.hpp"

namespace knet {

enum class TaskMode { kSemantic, kInstance, kPanoptic };

std::string to_string(TaskMode mode);
TaskMode parse_task_mode(const std::string& name);

// Category ids of the dataset and the contiguous indices the model uses.
// Semantic indices list things first, then stuff.
struct ClassSpace {
  std::vector<int> thing_ids{1, 2, 3};
  std::vector<int> stuff_ids{101, 102};

  std::size_t things() const { return thing_ids.size(); }
  std::size_t stuff() const { return stuff_ids.size(); }
  std::size_t total() const { return things() + stuff(); }

  bool is_thing(int category) const;
  bool is_stuff(int category) const;
  int thing_index(int category) const;     // -1 when not a thing
  int stuff_index(int category) const;     // -1 when not stuff
  int semantic_index(int category) const;  // -1 when unknown
  int category_of_semantic(std::size_t index) const;
};

struct Segment {
  std::uint32_t id = 0;
  int category = 0;
  bool is_thing = false;
  double score = 1.0;
  std::size_t area = 0;
};

// Segment-id raster (0 = void) plus its segment table.
struct PanopticMap {
  std::size_t height = 0, width = 0;
  std::vector<std::uint32_t> ids;
  std::vector<Segment> segments;

  const Segment* find(std::uint32_t id) const;
  // Recounts areas from the raster; throws DataError on unknown ids.
  void recount_areas();
};

struct InstanceMask {
  int category = 0;
  std::vector<std::uint8_t> mask;  // H*W, 1 inside
};

struct GroundTruthSample {
  Tensor image;  // [3, H, W] in [0, 1]
  std::size_t height = 0, width = 0;
  std::vector<InstanceMask> instances;  // depth order, already occluded
  std::vector<int> semantic;            // H*W category ids
  PanopticMap panoptic;
};

}  // namespace knet
