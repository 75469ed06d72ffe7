#include <png.h>

#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <memory>
#include <vector>

#include "esc/io.hpp"

namespace esc {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::string& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f)
    throw IoError("cannot open '" + path + "' for " +
                  (mode[0] == 'r' ? "reading" : "writing"));
  return f;
}

std::string read_file(const std::string& path) {
  FilePtr f = open_file(path, "rb");
  std::string buf;
  char chunk[65536];
  size_t got;
  while ((got = std::fread(chunk, 1, sizeof(chunk), f.get())) > 0)
    buf.append(chunk, got);
  return buf;
}

// --- PPM (P6) ---------------------------------------------------------------

struct PpmReader {
  const std::string& b;
  const std::string& path;
  size_t pos = 2;  // past "P6"

  void skip_space_and_comments() {
    while (pos < b.size()) {
      const char c = b[pos];
      if (c == '#') {
        while (pos < b.size() && b[pos] != '\n') ++pos;
      } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
        ++pos;
      } else {
        return;
      }
    }
  }
  long header_int() {
    skip_space_and_comments();
    if (pos >= b.size() || b[pos] < '0' || b[pos] > '9')
      throw IoError("malformed PPM header in '" + path + "'");
    long v = 0;
    while (pos < b.size() && b[pos] >= '0' && b[pos] <= '9') {
      v = v * 10 + (b[pos] - '0');
      if (v > 1 << 24) throw IoError("implausible PPM dimension in '" + path + "'");
      ++pos;
    }
    return v;
  }
};

Tensor4f load_ppm(const std::string& bytes, const std::string& path) {
  PpmReader r{bytes, path};
  const long w = r.header_int();
  const long h = r.header_int();
  const long maxval = r.header_int();
  if (maxval != 255)
    throw IoError("unsupported depth in '" + path + "': PPM maxval " +
                  std::to_string(maxval) + ", only 8-bit (255) is supported");
  if (w < 1 || h < 1) throw IoError("empty PPM image '" + path + "'");
  ++r.pos;  // single whitespace byte after maxval
  const size_t need = size_t(w) * size_t(h) * 3;
  if (r.pos + need > bytes.size()) throw IoError("truncated PPM file '" + path + "'");

  Tensor4f img(1, 3, h, w);
  const unsigned char* p =
      reinterpret_cast<const unsigned char*>(bytes.data()) + r.pos;
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x)
      for (Index c = 0; c < 3; ++c)
        img(0, c, y, x) = float(*p++) / 255.0f;
  return img;
}

// --- PNG --------------------------------------------------------------------

struct PngRead {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngRead() {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
  }
};

struct PngWrite {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngWrite() {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
  }
};

Tensor4f load_png(const std::string& path) {
  FilePtr f = open_file(path, "rb");
  PngRead ctx;
  ctx.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!ctx.png) throw IoError("libpng initialization failed");
  ctx.info = png_create_info_struct(ctx.png);
  if (!ctx.info) throw IoError("libpng initialization failed");
  if (setjmp(png_jmpbuf(ctx.png)))
    throw IoError("failed to decode PNG '" + path + "'");

  png_init_io(ctx.png, f.get());
  png_read_info(ctx.png, ctx.info);

  const int depth = png_get_bit_depth(ctx.png, ctx.info);
  if (depth == 16)
    throw IoError("unsupported depth in '" + path +
                  "': 16-bit PNG, only 8-bit is supported");

  const int color = png_get_color_type(ctx.png, ctx.info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(ctx.png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8)
    png_set_expand_gray_1_2_4_to_8(ctx.png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(ctx.png);
  if (png_get_valid(ctx.png, ctx.info, PNG_INFO_tRNS))
    png_set_tRNS_to_alpha(ctx.png);
  png_set_strip_alpha(ctx.png);
  png_read_update_info(ctx.png, ctx.info);

  const png_uint_32 w = png_get_image_width(ctx.png, ctx.info);
  const png_uint_32 h = png_get_image_height(ctx.png, ctx.info);
  if (png_get_rowbytes(ctx.png, ctx.info) != size_t(w) * 3)
    throw IoError("failed to decode PNG '" + path + "': unexpected row layout");

  std::vector<unsigned char> rows(size_t(w) * h * 3);
  std::vector<png_bytep> row_ptrs(h);
  for (png_uint_32 y = 0; y < h; ++y) row_ptrs[y] = rows.data() + size_t(y) * w * 3;
  png_read_image(ctx.png, row_ptrs.data());
  png_read_end(ctx.png, nullptr);

  Tensor4f img(1, 3, Index(h), Index(w));
  const unsigned char* p = rows.data();
  for (Index y = 0; y < Index(h); ++y)
    for (Index x = 0; x < Index(w); ++x)
      for (Index c = 0; c < 3; ++c) img(0, c, y, x) = float(*p++) / 255.0f;
  return img;
}

unsigned char quantize(float v) {
  if (!(v > 0.0f)) return 0;
  if (v > 1.0f) v = 1.0f;
  return static_cast<unsigned char>(std::lround(double(v) * 255.0));
}

std::vector<unsigned char> interleave(const Tensor4f& img) {
  const Index ch = img.c();
  std::vector<unsigned char> rows(size_t(img.h()) * size_t(img.w()) * size_t(ch));
  unsigned char* p = rows.data();
  for (Index y = 0; y < img.h(); ++y)
    for (Index x = 0; x < img.w(); ++x)
      for (Index c = 0; c < ch; ++c) *p++ = quantize(img(0, c, y, x));
  return rows;
}

void save_ppm(const Tensor4f& img, const std::string& path) {
  FilePtr f = open_file(path, "wb");
  std::fprintf(f.get(), "P%c\n%lld %lld\n255\n", img.c() == 3 ? '6' : '5',
               (long long)img.w(), (long long)img.h());
  const std::vector<unsigned char> rows = interleave(img);
  if (std::fwrite(rows.data(), 1, rows.size(), f.get()) != rows.size())
    throw IoError("failed writing '" + path + "'");
}

void save_png(const Tensor4f& img, const std::string& path) {
  FilePtr f = open_file(path, "wb");
  PngWrite ctx;
  ctx.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!ctx.png) throw IoError("libpng initialization failed");
  ctx.info = png_create_info_struct(ctx.png);
  if (!ctx.info) throw IoError("libpng initialization failed");
  if (setjmp(png_jmpbuf(ctx.png)))
    throw IoError("failed to encode PNG '" + path + "'");

  png_init_io(ctx.png, f.get());
  png_set_IHDR(ctx.png, ctx.info, png_uint_32(img.w()), png_uint_32(img.h()), 8,
               img.c() == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(ctx.png, ctx.info);

  std::vector<unsigned char> rows = interleave(img);
  for (Index y = 0; y < img.h(); ++y)
    png_write_row(ctx.png,
                  rows.data() + size_t(y) * size_t(img.w()) * size_t(img.c()));
  png_write_end(ctx.png, nullptr);
}

}  // namespace

Tensor4f load_image(const std::string& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6')
    return load_ppm(bytes, path);
  if (bytes.size() >= 8 &&
      png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) == 0)
    return load_png(path);
  throw IoError("unsupported format in '" + path + "': expected P6 PPM or PNG");
}

void save_image(const Tensor4f& img, const std::string& path) {
  if (img.n() != 1 || (img.c() != 3 && img.c() != 1))
    throw ShapeError("save_image: expected (1,3,h,w) or (1,1,h,w), got " +
                     img.shape_str());
  if (path.size() >= 4 && path.substr(path.size() - 4) == ".ppm")
    return save_ppm(img, path);
  if (path.size() >= 4 && path.substr(path.size() - 4) == ".png")
    return save_png(img, path);
  throw IoError("unsupported format for '" + path + "': use .ppm or .png");
}

}  // namespace esc
