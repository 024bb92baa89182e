#include "nv/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "nv/error.hpp"

namespace nv {

namespace {

unsigned char to_byte(float v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

}  // namespace

Image Image::filled(std::size_t height, std::size_t width, float value) {
  Image img;
  img.height = height;
  img.width = width;
  img.channels = 3;
  img.pixels.assign(height * width * 3, value);
  return img;
}

std::string encode_ppm(const Image& image) {
  if (image.channels != 3 || image.pixels.size() != image.height * image.width * 3)
    throw Error(Errc::BadImageShape, "PPM needs a 3-channel image");
  std::string out = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) +
                    "\n255\n";
  out.reserve(out.size() + image.pixels.size());
  for (float v : image.pixels) out.push_back(static_cast<char>(to_byte(v)));
  return out;
}

Image decode_ppm(const std::string& bytes) {
  std::istringstream in(bytes);
  std::string magic;
  std::size_t width = 0, height = 0, maxval = 0;
  in >> magic >> width >> height >> maxval;
  if (!in || magic != "P6" || maxval != 255 || width == 0 || height == 0)
    throw Error(Errc::ParseError, "not a binary 8-bit PPM");
  in.get();  // single whitespace before the raster
  const std::size_t offset = static_cast<std::size_t>(in.tellg());
  const std::size_t n = width * height * 3;
  if (bytes.size() < offset + n) throw Error(Errc::TruncatedFile, "PPM raster is truncated");
  Image img = Image::filled(height, width, 0.0f);
  for (std::size_t i = 0; i < n; ++i)
    img.pixels[i] = static_cast<unsigned char>(bytes[offset + i]) / 255.0f;
  return img;
}

void write_ppm(const std::filesystem::path& path, const Image& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::IOError, "cannot write " + path.string());
  const auto bytes = encode_ppm(image);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(Errc::IOError, "short write to " + path.string());
}

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::IOError, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_ppm(ss.str());
}

Image quantize8(const Image& image) {
  Image out = image;
  for (auto& v : out.pixels) v = to_byte(v) / 255.0f;
  return out;
}

}  // namespace nv
