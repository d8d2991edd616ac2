#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace nvs {

/// H x W x C float image, row-major interleaved, intensities nominally in [0, 1].
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<float> data;

  Image() = default;
  Image(int w, int h, int c, float fill = 0.0f)
      : width(w), height(h), channels(c), data(std::size_t(w) * h * c, fill) {}

  float& at(int x, int y, int c) { return data[(std::size_t(y) * width + x) * channels + c]; }
  float at(int x, int y, int c) const { return data[(std::size_t(y) * width + x) * channels + c]; }

  std::size_t pixel_count() const { return std::size_t(width) * height; }

  bool same_shape(const Image& o) const {
    return width == o.width && height == o.height && channels == o.channels;
  }

  bool operator==(const Image&) const = default;
};

inline void require_same_shape(const Image& a, const Image& b, const char* op) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + std::to_string(a.width) + "x" +
                                std::to_string(a.height) + "x" + std::to_string(a.channels) + " vs " +
                                std::to_string(b.width) + "x" + std::to_string(b.height) + "x" +
                                std::to_string(b.channels));
  }
}

}  // namespace nvs
