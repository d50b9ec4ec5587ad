#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

namespace splatmap {

// Row-major, interleaved channels.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<double> data;

  Image() = default;
  Image(int w, int h, int c, double fill = 0.0)
      : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {}

  bool empty() const { return data.empty(); }
  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
  bool same_shape(const Image& o) const {
    return width == o.width && height == o.height && channels == o.channels;
  }

  double& at(int x, int y, int c = 0) {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  double at(int x, int y, int c = 0) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
};

struct Mask {
  int width = 0;
  int height = 0;
  std::vector<unsigned char> data;

  Mask() = default;
  Mask(int w, int h, bool fill = false)
      : width(w), height(h), data(static_cast<std::size_t>(w) * h, fill ? 1 : 0) {}

  bool at(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x] != 0; }
  void set(int x, int y, bool v) { data[static_cast<std::size_t>(y) * width + x] = v ? 1 : 0; }
  std::size_t count() const;
};

// 8-bit RGB PNG, values mapped to [0,1].
Image read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& rgb);

// Single-channel little-endian float32 PFM ("Pf"). Rows are stored bottom-up per the format.
Image read_pfm(const std::filesystem::path& path);
void write_pfm(const std::filesystem::path& path, const Image& gray);

}  // namespace splatmap
