#include "emotoken/pipeline.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>

namespace emotoken::pipeline {

void write_png(const std::string& path, const Frame& frame) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(frame.width);
  img.height = static_cast<png_uint_32>(frame.height);
  img.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buf(static_cast<std::size_t>(frame.width) * frame.height * 3);
  for (std::size_t i = 0; i < buf.size(); ++i) {
    const float v = std::clamp(frame.pixels.data()[i], 0.0f, 1.0f);
    buf[i] = static_cast<unsigned char>(std::lround(v * 255.0f));
  }
  if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr))
    throw DataError("cannot write " + path + ": " + img.message);
}

Frame read_png(const std::string& path) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) throw DataError("cannot read " + path + ": " + img.message);
  img.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw DataError("cannot decode " + path + ": " + img.message);
  }
  Frame f(static_cast<int>(img.height), static_cast<int>(img.width));
  for (std::size_t i = 0; i < buf.size(); ++i) f.pixels.data()[i] = static_cast<float>(buf[i]) / 255.0f;
  return f;
}

}  // namespace emotoken::pipeline
