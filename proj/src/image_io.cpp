#include "knet/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "knet/serialize.hpp"

namespace knet::io {

namespace {

// Reads the next header token, skipping whitespace and comments.
std::string next_token(std::istream& is) {
  std::string tok;
  int c;
  while ((c = is.get()) != EOF) {
    if (c == '#') {
      while ((c = is.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  return tok;
}

std::size_t header_number(std::istream& is, const std::filesystem::path& path) {
  const std::string tok = next_token(is);
  try {
    std::size_t used = 0;
    const unsigned long v = std::stoul(tok, &used);
    if (used != tok.size()) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw FormatError(path.string() + ": bad header field '" + tok + "'");
  }
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return is;
}

}  // namespace

void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
  if (img.pixels.size() != img.height * img.width) throw DimensionError("PGM pixel count mismatch");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write " + path.string());
  os << "P5\n" << img.width << ' ' << img.height << '\n' << img.maxval << '\n';
  for (auto v : img.pixels) {
    if (v > img.maxval) throw DimensionError("PGM sample exceeds maxval");
    if (img.maxval > 255) {
      os.put(static_cast<char>(v >> 8));
    }
    os.put(static_cast<char>(v & 0xff));
  }
}

GrayImage read_pgm(const std::filesystem::path& path) {
  auto is = open_in(path);
  if (next_token(is) != "P5") throw FormatError(path.string() + ": not a binary PGM");
  GrayImage img;
  img.width = header_number(is, path);
  img.height = header_number(is, path);
  img.maxval = static_cast<std::uint32_t>(header_number(is, path));
  if (img.maxval == 0 || img.maxval > 65535) throw FormatError(path.string() + ": bad maxval");
  const std::size_t n = img.width * img.height;
  const std::size_t bytes = img.maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(n * bytes);
  is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(is.gcount()) != raw.size()) throw FormatError(path.string() + ": truncated");
  img.pixels.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    img.pixels[i] = bytes == 2 ? static_cast<std::uint16_t>(raw[2 * i] << 8 | raw[2 * i + 1]) : raw[i];
  return img;
}

Tensor read_ppm(const std::filesystem::path& path) {
  auto is = open_in(path);
  if (next_token(is) != "P6") throw FormatError(path.string() + ": not a binary PPM");
  const std::size_t w = header_number(is, path), h = header_number(is, path);
  const std::size_t maxval = header_number(is, path);
  if (maxval == 0 || maxval > 255) throw FormatError(path.string() + ": only 8-bit PPM is supported");
  std::vector<unsigned char> raw(3 * w * h);
  is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(is.gcount()) != raw.size()) throw FormatError(path.string() + ": truncated");
  std::vector<double> v(3 * h * w);
  for (std::size_t i = 0; i < h * w; ++i)
    for (std::size_t c = 0; c < 3; ++c) v[c * h * w + i] = raw[3 * i + c] / static_cast<double>(maxval);
  return Tensor({3, h, w}, std::move(v));
}

void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  if (image.dim() != 3 || image.size(0) != 3) throw DimensionError("PPM needs a [3, H, W] image");
  const std::size_t h = image.size(1), w = image.size(2);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write " + path.string());
  os << "P6\n" << w << ' ' << h << "\n255\n";
  for (std::size_t i = 0; i < h * w; ++i)
    for (std::size_t c = 0; c < 3; ++c)
      os.put(static_cast<char>(std::lround(std::clamp(image.value(c * h * w + i), 0.0, 1.0) * 255.0)));
}

Tensor read_image(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw FormatError("no such file: " + path.string());
  {
    auto is = open_in(path);
    char magic[2] = {0, 0};
    is.read(magic, 2);
    if (magic[0] == 'P' && magic[1] == '6') return read_ppm(path);
  }
  Tensor t = load_tensor(path.string());
  if (t.dim() == 4 && t.size(0) == 1) t = Tensor({t.size(1), t.size(2), t.size(3)}, t.to_vector());
  if (t.dim() != 3 || t.size(0) != 3)
    throw FormatError(path.string() + ": expected a [3, H, W] image, got " + shape_str(t.shape()));
  return t;
}

}  // namespace knet::io
