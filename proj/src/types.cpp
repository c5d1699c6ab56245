#include "knet/types.hpp"

#include <algorithm>

namespace knet {

std::string to_string(TaskMode mode) {
  switch (mode) {
    case TaskMode::kSemantic: return "semantic";
    case TaskMode::kInstance: return "instance";
    case TaskMode::kPanoptic: return "panoptic";
  }
  return "unknown";
}

TaskMode parse_task_mode(const std::string& name) {
  if (name == "semantic") return TaskMode::kSemantic;
  if (name == "instance") return TaskMode::kInstance;
  if (name == "panoptic") return TaskMode::kPanoptic;
  throw ConfigError("unknown mode '" + name + "' (semantic, instance or panoptic)");
}

namespace {

int index_in(const std::vector<int>& ids, int category) {
  auto it = std::find(ids.begin(), ids.end(), category);
  return it == ids.end() ? -1 : static_cast<int>(it - ids.begin());
}

}  // namespace

bool ClassSpace::is_thing(int category) const { return index_in(thing_ids, category) >= 0; }
bool ClassSpace::is_stuff(int category) const { return index_in(stuff_ids, category) >= 0; }
int ClassSpace::thing_index(int category) const { return index_in(thing_ids, category); }
int ClassSpace::stuff_index(int category) const { return index_in(stuff_ids, category); }

int ClassSpace::semantic_index(int category) const {
  int t = thing_index(category);
  if (t >= 0) return t;
  int s = stuff_index(category);
  return s >= 0 ? static_cast<int>(things()) + s : -1;
}

int ClassSpace::category_of_semantic(std::size_t index) const {
  if (index < things()) return thing_ids[index];
  if (index < total()) return stuff_ids[index - things()];
  throw DimensionError("semantic index " + std::to_string(index) + " out of range");
}

const Segment* PanopticMap::find(std::uint32_t id) const {
  for (const auto& s : segments)
    if (s.id == id) return &s;
  return nullptr;
}

void PanopticMap::recount_areas() {
  for (auto& s : segments) s.area = 0;
  for (auto id : ids) {
    if (id == 0) continue;
    auto it = std::find_if(segments.begin(), segments.end(), [&](const Segment& s) { return s.id == id; });
    if (it == segments.end()) throw DataError("segment id " + std::to_string(id) + " missing from table");
    ++it->area;
  }
}

}  // namespace knet
