#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "knet/tensor.hpp"

namespace knet::io {

struct GrayImage {
  std::size_t height = 0, width = 0;
  std::uint32_t maxval = 255;
  std::vector<std::uint16_t> pixels;
};

// Binary PGM (P5). maxval > 255 stores big-endian 16-bit samples.
void write_pgm(const std::filesystem::path& path, const GrayImage& img);
GrayImage read_pgm(const std::filesystem::path& path);

// Binary PPM (P6) to a [3, H, W] tensor in [0, 1], and back.
Tensor read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Tensor& image);

// PPM, or a tensor file holding [3, H, W] or [1, 3, H, W].
Tensor read_image(const std::filesystem::path& path);

}  // namespace knet::io
