#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

namespace nv {

// Height x width x channels, row-major, channel-interleaved, values in [0,1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 3;
  std::vector<float> pixels;

  static Image filled(std::size_t height, std::size_t width, float value);

  float& at(std::size_t row, std::size_t col, std::size_t ch) {
    return pixels[(row * width + col) * channels + ch];
  }
  float at(std::size_t row, std::size_t col, std::size_t ch) const {
    return pixels[(row * width + col) * channels + ch];
  }
  bool operator==(const Image&) const = default;
};

// Binary P6, maxval 255. Pixels are quantized with round(v * 255).
std::string encode_ppm(const Image& image);
Image decode_ppm(const std::string& bytes);
void write_ppm(const std::filesystem::path& path, const Image& image);
Image read_ppm(const std::filesystem::path& path);

// Round-trips an image through 8-bit quantization.
Image quantize8(const Image& image);

}  // namespace nv
