#include "splatmap/image.hpp"

#include "splatmap/error.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <numeric>
#include <sstream>

namespace splatmap {

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count(data.begin(), data.end(), 1));
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw Error(ErrorCode::IoError, "io", "cannot open " + path.string());
  return f;
}

}  // namespace

Image read_png(const std::filesystem::path& path) {
  auto file = open_file(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(ErrorCode::IoError, "io", "corrupt png " + path.string());
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_expand(png);
  png_set_strip_alpha(png);
  if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY ||
      png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY_ALPHA) {
    png_set_gray_to_rgb(png);
  }
  png_read_update_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * 3);
  std::vector<png_bytep> rows(h);
  for (int y = 0; y < h; ++y) rows[y] = buf.data() + static_cast<std::size_t>(y) * w * 3;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);

  Image img(w, h, 3);
  for (std::size_t i = 0; i < buf.size(); ++i) img.data[i] = buf[i] / 255.0;
  return img;
}

void write_png(const std::filesystem::path& path, const Image& rgb) {
  if (rgb.channels != 3) throw Error(ErrorCode::DimensionMismatch, "io", "png writer expects 3 channels");
  auto file = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error(ErrorCode::IoError, "io", "png write failed " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, rgb.width, rgb.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<unsigned char> row(static_cast<std::size_t>(rgb.width) * 3);
  for (int y = 0; y < rgb.height; ++y) {
    for (int x = 0; x < rgb.width * 3; ++x) {
      const double v = std::clamp(rgb.data[static_cast<std::size_t>(y) * rgb.width * 3 + x], 0.0, 1.0);
      row[x] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Image read_pfm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::IoError, "io", "cannot open " + path.string());
  std::string magic;
  int w = 0, h = 0;
  double scale = 0.0;
  is >> magic >> w >> h >> scale;
  is.get();
  if (magic != "Pf" || w <= 0 || h <= 0) {
    throw Error(ErrorCode::IoError, "io", "unsupported pfm " + path.string());
  }
  const bool little = scale < 0.0;
  std::vector<float> buf(static_cast<std::size_t>(w) * h);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!is) throw Error(ErrorCode::IoError, "io", "truncated pfm " + path.string());
  const bool host_little = std::endian::native == std::endian::little;
  if (little != host_little) {
    for (auto& v : buf) {
      std::uint32_t u;
      std::memcpy(&u, &v, 4);
      u = __builtin_bswap32(u);
      std::memcpy(&v, &u, 4);
    }
  }
  Image img(w, h, 1);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      img.at(x, h - 1 - y) = buf[static_cast<std::size_t>(y) * w + x];
    }
  }
  return img;
}

void write_pfm(const std::filesystem::path& path, const Image& gray) {
  if (gray.channels != 1) throw Error(ErrorCode::DimensionMismatch, "io", "pfm writer expects 1 channel");
  static_assert(std::endian::native == std::endian::little, "pfm writer assumes a little-endian host");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorCode::IoError, "io", "cannot write " + path.string());
  os << "Pf\n" << gray.width << ' ' << gray.height << "\n-1.0\n";
  std::vector<float> row(gray.width);
  for (int y = gray.height - 1; y >= 0; --y) {
    for (int x = 0; x < gray.width; ++x) row[x] = static_cast<float>(gray.at(x, y));
    os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size() * sizeof(float)));
  }
}

}  // namespace splatmap
