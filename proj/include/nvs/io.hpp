#pragma once

// File formats: PNG images (libpng simplified API), PFM depth maps
// (little-endian, scale -1, rows stored bottom-to-top), pose files with one
// row-major [R|t] per line, and a one-line intrinsics file.

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "nvs/geometry.hpp"
#include "nvs/image.hpp"

namespace nvs::io {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::uint8_t to_u8(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

inline std::vector<std::uint8_t> encode_png(const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw IoError("png: only 1 or 3 channel images are supported");
  std::vector<std::uint8_t> pixels(img.data.size());
  std::transform(img.data.begin(), img.data.end(), pixels.begin(), to_u8);

  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;

  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, pixels.data(), 0, nullptr)) {
    throw IoError(std::string("png: ") + image.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, pixels.data(), 0, nullptr)) {
    throw IoError(std::string("png: ") + image.message);
  }
  out.resize(size);
  return out;
}

/// Decodes to RGB unless `gray` is set.
inline Image decode_png(const std::uint8_t* bytes, std::size_t size, bool gray = false) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes, size)) {
    throw IoError(std::string("png: ") + image.message);
  }
  image.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  std::vector<std::uint8_t> pixels(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, pixels.data(), 0, nullptr)) {
    png_image_free(&image);
    throw IoError(std::string("png: ") + image.message);
  }
  Image out(int(image.width), int(image.height), gray ? 1 : 3);
  for (std::size_t i = 0; i < pixels.size(); ++i) out.data[i] = pixels[i] / 255.0f;
  return out;
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void write_png(const std::filesystem::path& path, const Image& img) { write_bytes(path, encode_png(img)); }

inline Image read_png(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  return decode_png(bytes.data(), bytes.size());
}

// ---------------------------------------------------------------------------
// PFM

inline void write_pfm(const std::filesystem::path& path, int width, int height, int channels,
                      const std::vector<float>& row_major) {
  if (channels != 1 && channels != 3) throw IoError("pfm: channels must be 1 or 3");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f << (channels == 3 ? "PF" : "Pf") << "\n" << width << " " << height << "\n-1.0\n";
  for (int y = height - 1; y >= 0; --y) {
    const float* row = row_major.data() + std::size_t(y) * width * channels;
    for (int i = 0; i < width * channels; ++i) {
      std::uint32_t bits;
      std::memcpy(&bits, &row[i], 4);
      const char le[4] = {char(bits & 0xff), char((bits >> 8) & 0xff), char((bits >> 16) & 0xff),
                          char((bits >> 24) & 0xff)};
      f.write(le, 4);
    }
  }
  if (!f) throw IoError("write failed: " + path.string());
}

inline void write_pfm(const std::filesystem::path& path, const DepthMap& d) {
  std::vector<float> v(d.values.begin(), d.values.end());
  write_pfm(path, d.width, d.height, 1, v);
}

struct PfmData {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<float> values;  // row-major, top row first
};

inline PfmData read_pfm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path.string());
  std::string magic;
  PfmData out;
  double scale = 0;
  f >> magic >> out.width >> out.height >> scale;
  f.get();
  if (magic != "PF" && magic != "Pf") throw IoError("pfm: bad magic in " + path.string());
  if (out.width <= 0 || out.height <= 0) throw IoError("pfm: bad dimensions in " + path.string());
  out.channels = magic == "PF" ? 3 : 1;
  const bool little = scale < 0;
  const std::size_t row = std::size_t(out.width) * out.channels;
  out.values.resize(row * out.height);
  std::vector<unsigned char> buf(row * 4);
  for (int y = out.height - 1; y >= 0; --y) {
    f.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size()));
    if (!f) throw IoError("pfm: truncated payload in " + path.string());
    for (std::size_t i = 0; i < row; ++i) {
      const unsigned char* b = &buf[i * 4];
      const std::uint32_t bits = little ? (std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 |
                                           std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24)
                                        : (std::uint32_t(b[3]) | std::uint32_t(b[2]) << 8 |
                                           std::uint32_t(b[1]) << 16 | std::uint32_t(b[0]) << 24);
      float v;
      std::memcpy(&v, &bits, 4);
      out.values[std::size_t(y) * row + i] = v;
    }
  }
  return out;
}

inline DepthMap read_depth_pfm(const std::filesystem::path& path) {
  const PfmData p = read_pfm(path);
  if (p.channels != 1) throw IoError("pfm: expected a single-channel depth map in " + path.string());
  DepthMap d(p.width, p.height);
  std::copy(p.values.begin(), p.values.end(), d.values.begin());
  return d;
}

// ---------------------------------------------------------------------------
// Pose files: 12 whitespace-separated decimals per line, row-major [R|t].

inline std::string format_pose_line(const RigidTransform& t) {
  std::ostringstream os;
  os << std::setprecision(17);
  const auto v = t.to_row_major();
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? " " : "") << v[i];
  return os.str();
}

inline RigidTransform parse_pose_line(const std::string& line) {
  std::istringstream is(line);
  std::array<double, 12> v{};
  for (auto& x : v) {
    if (!(is >> x)) throw IoError("pose line: expected 12 numbers: '" + line + "'");
  }
  std::string extra;
  if (is >> extra) throw IoError("pose line: trailing token '" + extra + "'");
  const auto t = RigidTransform::from_row_major(v);
  if (!t.is_valid(1e-6)) throw IoError("pose line: rotation part is not a rotation matrix: '" + line + "'");
  return t;
}

inline void write_poses(const std::filesystem::path& path, const std::vector<RigidTransform>& poses) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  for (const auto& p : poses) f << format_pose_line(p) << "\n";
  if (!f) throw IoError("write failed: " + path.string());
}

inline std::vector<RigidTransform> read_poses(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open: " + path.string());
  std::vector<RigidTransform> out;
  std::string line;
  while (std::getline(f, line)) {
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    out.push_back(parse_pose_line(line));
  }
  return out;
}

/// intrinsics.txt: "fx fy cx cy width height"
inline void write_intrinsics(const std::filesystem::path& path, const CameraIntrinsics& k) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f << std::setprecision(17) << k.fx << " " << k.fy << " " << k.cx << " " << k.cy << " " << k.width << " "
    << k.height << "\n";
}

inline CameraIntrinsics read_intrinsics(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open: " + path.string());
  CameraIntrinsics k;
  if (!(f >> k.fx >> k.fy >> k.cx >> k.cy >> k.width >> k.height)) {
    throw IoError("intrinsics: expected 'fx fy cx cy width height' in " + path.string());
  }
  k.validate();
  return k;
}

}  // namespace nvs::io
