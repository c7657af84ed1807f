#include "vqat2i/io/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cstdio>
#include <memory>
#include <stdexcept>
#include <vector>

namespace vqat2i::io {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

unsigned char to_byte(Scalar v) {
  Scalar x = (std::clamp(v, Scalar(-1), Scalar(1)) + 1.0) * 127.5;
  return static_cast<unsigned char>(std::lround(x));
}

}  // namespace

void save_png(const std::filesystem::path& file, const Tensor& chw) {
  const auto& s = chw.shape();
  if (s.size() != 3 || s[0] != 3) throw std::invalid_argument("save_png: need [3,H,W]");
  index_t H = s[1], W = s[2];

  FilePtr fp(std::fopen(file.string().c_str(), "wb"));
  if (!fp) throw std::runtime_error("cannot open for writing: " + file.string());

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (!png || !info) throw std::runtime_error("libpng init failed");
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng write failed: " + file.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(W), static_cast<png_uint_32>(H), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  std::vector<unsigned char> row(static_cast<size_t>(W) * 3);
  for (index_t h = 0; h < H; ++h) {
    for (index_t w = 0; w < W; ++w)
      for (index_t c = 0; c < 3; ++c)
        row[static_cast<size_t>(w * 3 + c)] = to_byte(chw[(c * H + h) * W + w]);
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Tensor load_png(const std::filesystem::path& file) {
  FilePtr fp(std::fopen(file.string().c_str(), "rb"));
  if (!fp) throw std::runtime_error("cannot open: " + file.string());

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (!png || !info) throw std::runtime_error("libpng init failed");
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("libpng read failed: " + file.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);

  png_uint_32 W = png_get_image_width(png, info);
  png_uint_32 H = png_get_image_height(png, info);
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_byte color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  png_read_update_info(png, info);

  Tensor out({3, static_cast<index_t>(H), static_cast<index_t>(W)});
  std::vector<unsigned char> row(static_cast<size_t>(W) * 3);
  for (png_uint_32 h = 0; h < H; ++h) {
    png_read_row(png, row.data(), nullptr);
    for (png_uint_32 w = 0; w < W; ++w)
      for (index_t c = 0; c < 3; ++c)
        out[(c * H + h) * W + w] = row[static_cast<size_t>(w * 3 + c)] / 127.5 - 1.0;
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

Tensor tile_grid(const Tensor& batch, index_t cols) {
  const auto& s = batch.shape();
  if (s.size() != 4 || s[1] != 3) throw std::invalid_argument("tile_grid: need [N,3,H,W]");
  index_t N = s[0], H = s[2], W = s[3];
  index_t rows = (N + cols - 1) / cols;
  Tensor grid = Tensor::full({3, rows * H, cols * W}, -1.0);
  for (index_t n = 0; n < N; ++n) {
    index_t r = n / cols, c = n % cols;
    for (index_t ch = 0; ch < 3; ++ch)
      for (index_t h = 0; h < H; ++h)
        for (index_t w = 0; w < W; ++w)
          grid[(ch * rows * H + r * H + h) * cols * W + c * W + w] =
              batch[((n * 3 + ch) * H + h) * W + w];
  }
  return grid;
}

}  // namespace vqat2i::io
