#include "knet/serialize.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace knet::io {

namespace {

template <class U>
void put_le(std::ostream& os, U bits) {
  char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xFF);
  os.write(bytes, sizeof(U));
}

template <class U>
U get_le(const unsigned char* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

}  // namespace

void write_raw(std::ostream& os, const Shape& shape, std::span<const double> values, Dtype dtype,
               const nlohmann::json& extra) {
  nlohmann::json header = extra;
  header["dtype"] = dtype == Dtype::kF32 ? "f32" : "f64";
  header["shape"] = shape;
  os << header.dump() << '\n';
  for (double v : values) {
    if (dtype == Dtype::kF32) {
      const float f = static_cast<float>(v);
      std::uint32_t bits;
      std::memcpy(&bits, &f, sizeof bits);
      put_le(os, bits);
    } else {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      put_le(os, bits);
    }
  }
  if (!os) throw FormatError("failed writing tensor payload");
}

void write_tensor(std::ostream& os, const Tensor& t, Dtype dtype, const nlohmann::json& extra) {
  write_raw(os, t.shape(), t.data(), dtype, extra);
}

TensorRecord read_tensor(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw FormatError("missing tensor header");
  TensorRecord rec;
  try {
    rec.header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad tensor header: ") + e.what());
  }
  if (!rec.header.contains("dtype") || !rec.header.contains("shape"))
    throw FormatError("tensor header lacks dtype/shape");
  const std::string dtype = rec.header["dtype"].get<std::string>();
  if (dtype != "f32" && dtype != "f64") throw FormatError("unsupported dtype " + dtype);
  Shape shape = rec.header["shape"].get<Shape>();
  const std::size_t n = shape_numel(shape);
  const std::size_t width = dtype == "f32" ? 4 : 8;
  std::vector<unsigned char> raw(n * width);
  is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(is.gcount()) != raw.size()) throw FormatError("truncated tensor payload");
  std::vector<double> values(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (width == 4) {
      const auto bits = get_le<std::uint32_t>(raw.data() + 4 * i);
      float f;
      std::memcpy(&f, &bits, sizeof f);
      values[i] = f;
    } else {
      const auto bits = get_le<std::uint64_t>(raw.data() + 8 * i);
      std::memcpy(&values[i], &bits, sizeof(double));
    }
  }
  // Bypass precision rounding: stored values are already exact.
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  rec.tensor = Tensor::wrap(std::move(node));
  return rec;
}

void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  write_tensor(os, t);
}

Tensor load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  return read_tensor(is).tensor;
}

}  // namespace knet::io
