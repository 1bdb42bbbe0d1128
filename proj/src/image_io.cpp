#include "cvvnet/image_io.hpp"

#include <cstdio>
#include <fstream>
#include <memory>

#include <png.h>

namespace cvvnet {

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

using File = std::unique_ptr<FILE, int (*)(FILE*)>;

File open_file(const std::string& path, const char* mode) {
  File f(std::fopen(path.c_str(), mode), &std::fclose);
  if (!f) throw FormatError("cannot open '" + path + "'");
  return f;
}

// PGM header tokens may be separated by arbitrary whitespace and '#' comments.
std::string pgm_token(std::istream& in) {
  std::string tok;
  char ch;
  while (in.get(ch)) {
    if (ch == '#') {
      std::string skip;
      std::getline(in, skip);
    } else if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!tok.empty()) break;
    } else {
      tok.push_back(ch);
    }
  }
  return tok;
}

Gray8 read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  if (pgm_token(in) != "P5") throw FormatError("'" + path + "' is not a binary PGM");
  const Index w = std::stol(pgm_token(in)), h = std::stol(pgm_token(in)), maxval = std::stol(pgm_token(in));
  if (w < 1 || h < 1 || maxval != 255) throw FormatError("'" + path + "' must be a nonempty 8-bit PGM");
  Gray8 img(h, w);
  in.read(reinterpret_cast<char*>(img.data()), h * w);
  if (in.gcount() != h * w) throw FormatError("'" + path + "' is truncated");
  return img;
}

Gray8 read_png(const std::string& path) {
  File f = open_file(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("cannot decode '" + path + "'");
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_expand(png);
  png_set_strip_alpha(png);
  if (png_get_color_type(png, info) & PNG_COLOR_MASK_COLOR) png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  png_read_update_info(png, info);
  const Index w = png_get_image_width(png, info), h = png_get_image_height(png, info);
  Gray8 img(h, w);
  std::vector<png_bytep> rows(static_cast<std::size_t>(h));
  for (Index r = 0; r < h; ++r) rows[static_cast<std::size_t>(r)] = img.data() + r * w;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

void write_png_raw(const std::string& path, Index h, Index w, int color_type, const std::uint8_t* data) {
  File f = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw FormatError("cannot encode '" + path + "'");
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const Index stride = w * (color_type == PNG_COLOR_TYPE_RGB ? 3 : 1);
  for (Index r = 0; r < h; ++r) png_write_row(png, const_cast<png_bytep>(data + r * stride));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

Gray8 read_gray(const std::string& path) {
  if (ends_with(path, ".pgm")) return read_pgm(path);
  if (ends_with(path, ".png")) return read_png(path);
  throw FormatError("unsupported image extension in '" + path + "'");
}

void write_pgm(const std::string& path, const Gray8& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open '" + path + "'");
  out << "P5\n" << image.cols() << ' ' << image.rows() << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.data()), image.size());
}

void write_png(const std::string& path, const Gray8& image) {
  write_png_raw(path, image.rows(), image.cols(), PNG_COLOR_TYPE_GRAY, image.data());
}

void write_png(const std::string& path, const Rgb8& image) {
  if (static_cast<Index>(image.pixels.size()) != image.height * image.width * 3)
    throw ShapeMismatch("RGB buffer does not match its dimensions");
  write_png_raw(path, image.height, image.width, PNG_COLOR_TYPE_RGB, image.pixels.data());
}

Mask read_mask(const std::string& path) { return (read_gray(path).array() >= 128).cast<std::uint8_t>(); }

void write_mask(const std::string& path, const Mask& mask) {
  const Gray8 img = (mask.array() * 255).matrix();
  if (ends_with(path, ".png"))
    write_png(path, img);
  else
    write_pgm(path, img);
}

}  // namespace cvvnet
