#pragma once

#include <iosfwd>
#include <string>

#include <nlohmann/json.hpp>

#include "knet/tensor.hpp"

// On-disk tensor record: one JSON header line {"dtype", "shape", ...extra}
// followed by the raw little-endian element buffer.
namespace knet::io {

enum class Dtype { kF32, kF64 };

void write_tensor(std::ostream& os, const Tensor& t, Dtype dtype = Dtype::kF32,
                  const nlohmann::json& extra = nlohmann::json::object());
void write_raw(std::ostream& os, const Shape& shape, std::span<const double> values,
               Dtype dtype = Dtype::kF32, const nlohmann::json& extra = nlohmann::json::object());

struct TensorRecord {
  nlohmann::json header;
  Tensor tensor;
};

// Throws FormatError on malformed headers or truncated payloads.
TensorRecord read_tensor(std::istream& is);

void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

}  // namespace knet::io
