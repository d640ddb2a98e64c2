#include "mtl/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <vector>

namespace mtl {

Tensor read_png(const std::filesystem::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw std::runtime_error("png: cannot read " + path.string() + ": " + image.message);
  }
  const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  const Index channels = color ? 3 : 1;
  const Index h = image.height, w = image.width;
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw std::runtime_error("png: cannot decode " + path.string() + ": " + msg);
  }
  Tensor out({channels, h, w});
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x)
      for (Index c = 0; c < channels; ++c)
        out[(c * h + y) * w + x] = buffer[static_cast<std::size_t>((y * w + x) * channels + c)] / 255.0;
  return out;
}

void write_png(const std::filesystem::path& path, const Tensor& chw) {
  if (chw.rank() != 3 || (chw.dim(0) != 1 && chw.dim(0) != 3)) {
    throw std::invalid_argument("png: expected CHW with 1 or 3 channels, got " + to_string(chw.shape()));
  }
  const Index channels = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<png_byte> buffer(static_cast<std::size_t>(channels * h * w));
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x)
      for (Index c = 0; c < channels; ++c) {
        const double v = std::clamp(chw[(c * h + y) * w + x], 0.0, 1.0);
        buffer[static_cast<std::size_t>((y * w + x) * channels + c)] = static_cast<png_byte>(std::lround(v * 255.0));
      }
  if (!png_image_write_to_file(&image, path.c_str(), 0, buffer.data(), 0, nullptr)) {
    throw std::runtime_error("png: cannot write " + path.string() + ": " + image.message);
  }
}

}  // namespace mtl
