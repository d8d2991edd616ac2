#pragma once

// Pinhole cameras, rigid transforms and the depth -> backward-correspondence
// projection. Conventions: camera x right, y down, z forward; pixel (x, y) is
// column x, row y, with pixel centers at integer coordinates.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace nvs {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

inline constexpr double kPi = 3.14159265358979323846;

inline double deg2rad(double deg) { return deg * kPi / 180.0; }
inline double rad2deg(double rad) { return rad * 180.0 / kPi; }

struct CameraIntrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 1;
  int height = 1;

  void validate() const {
    if (!(fx > 0.0) || !(fy > 0.0)) {
      throw std::invalid_argument("intrinsics: focal lengths must be positive");
    }
    if (width <= 0 || height <= 0) {
      throw std::invalid_argument("intrinsics: image dimensions must be positive");
    }
    if (!(cx >= 0.0 && cx < width) || !(cy >= 0.0 && cy < height)) {
      throw std::invalid_argument("intrinsics: principal point outside the image");
    }
  }

  /// Square image, principal point at the geometric center, fx = fy = size.
  static CameraIntrinsics centered(int size) {
    const double c = 0.5 * (size - 1);
    return CameraIntrinsics{double(size), double(size), c, c, size, size};
  }

  bool operator==(const CameraIntrinsics&) const = default;
};

/// Maps points x -> r * x + t.
struct RigidTransform {
  Mat3 r = Mat3::Identity();
  Vec3 t = Vec3::Zero();

  static RigidTransform identity() { return {}; }

  static RigidTransform translation(const Vec3& t) { return {Mat3::Identity(), t}; }

  Vec3 apply(const Vec3& p) const { return r * p + t; }

  bool is_valid(double tol = 1e-6) const {
    if (!r.allFinite() || !t.allFinite()) return false;
    const Mat3 gram = r.transpose() * r;
    if ((gram - Mat3::Identity()).cwiseAbs().maxCoeff() > tol) return false;
    return std::abs(r.determinant() - 1.0) <= tol;
  }

  void validate(double tol = 1e-6) const {
    if (!is_valid(tol)) throw std::invalid_argument("rigid transform: rotation is not orthonormal");
  }

  /// Row-major [R|t]: r00 r01 r02 t0 r10 r11 r12 t1 r20 r21 r22 t2.
  std::array<double, 12> to_row_major() const {
    std::array<double, 12> out{};
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) out[i * 4 + j] = r(i, j);
      out[i * 4 + 3] = t(i);
    }
    return out;
  }

  static RigidTransform from_row_major(std::span<const double, 12> v) {
    RigidTransform out;
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) out.r(i, j) = v[i * 4 + j];
      out.t(i) = v[i * 4 + 3];
    }
    return out;
  }

  bool approx_equal(const RigidTransform& o, double tol) const {
    return (r - o.r).cwiseAbs().maxCoeff() <= tol && (t - o.t).cwiseAbs().maxCoeff() <= tol;
  }
};

/// compose(a, b) applies b first, then a.
inline RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
  return {a.r * b.r, a.r * b.t + a.t};
}

inline RigidTransform invert(const RigidTransform& x) {
  const Mat3 rt = x.r.transpose();
  return {rt, -(rt * x.t)};
}

inline Mat3 rot_x(double rad) {
  const double c = std::cos(rad), s = std::sin(rad);
  Mat3 m;
  m << 1, 0, 0, 0, c, -s, 0, s, c;
  return m;
}

inline Mat3 rot_y(double rad) {
  const double c = std::cos(rad), s = std::sin(rad);
  Mat3 m;
  m << c, 0, s, 0, 1, 0, -s, 0, c;
  return m;
}

inline Mat3 rot_z(double rad) {
  const double c = std::cos(rad), s = std::sin(rad);
  Mat3 m;
  m << c, -s, 0, s, c, 0, 0, 0, 1;
  return m;
}

/// Camera-to-world pose of a camera at `eye` looking at `target`. `up` is the
/// world up direction; the camera y axis points opposite to it.
inline RigidTransform look_at(const Vec3& eye, const Vec3& target, const Vec3& up = Vec3(0, 1, 0)) {
  const Vec3 forward = (target - eye).normalized();
  Vec3 right = forward.cross(up);
  if (right.norm() < 1e-12) throw std::invalid_argument("look_at: view direction parallel to up");
  right.normalize();
  const Vec3 down = forward.cross(right);
  RigidTransform pose;
  pose.r.col(0) = right;
  pose.r.col(1) = down;
  pose.r.col(2) = forward;
  pose.t = eye;
  return pose;
}

/// Relative transform mapping target-camera coordinates into source-camera
/// coordinates, given camera-to-world poses.
inline RigidTransform relative_target_to_source(const RigidTransform& source_pose,
                                                const RigidTransform& target_pose) {
  return compose(invert(source_pose), target_pose);
}

struct Pixel {
  double x = 0.0;
  double y = 0.0;
};

inline Vec3 unproject(const CameraIntrinsics& k, Pixel p, double depth) {
  if (!(depth > 0.0)) throw std::invalid_argument("unproject: depth must be positive");
  return {depth * (p.x - k.cx) / k.fx, depth * (p.y - k.cy) / k.fy, depth};
}

struct Projection {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;  // camera-frame depth; only meaningful for x, y when positive

  bool in_front() const { return z > 0.0; }
};

inline Projection project(const CameraIntrinsics& k, const Vec3& point) {
  Projection out{0.0, 0.0, point.z()};
  if (point.z() > 0.0) {
    out.x = k.fx * point.x() / point.z() + k.cx;
    out.y = k.fy * point.y() / point.z() + k.cy;
  }
  return out;
}

struct DepthMap {
  int width = 0;
  int height = 0;
  std::vector<double> values;

  DepthMap() = default;
  DepthMap(int w, int h, double fill = 1.0) : width(w), height(h), values(std::size_t(w) * h, fill) {}

  double& at(int x, int y) { return values[std::size_t(y) * width + x]; }
  double at(int x, int y) const { return values[std::size_t(y) * width + x]; }

  void validate(double d_min, double d_max) const {
    if (values.size() != std::size_t(width) * height) throw std::invalid_argument("depth map: size mismatch");
    for (double v : values) {
      if (!(v >= d_min && v <= d_max)) {
        std::ostringstream msg;
        msg << "depth map: value " << v << " outside [" << d_min << ", " << d_max << "]";
        throw std::invalid_argument(msg.str());
      }
    }
  }
};

/// Coordinates written for pixels whose reprojection lies behind the source
/// camera. Far enough outside the frame that bilinear sampling returns zero.
inline constexpr double kBehindCameraCoord = -2.0;

struct FlowField {
  int width = 0;
  int height = 0;
  std::vector<double> coords;  // (x_s, y_s) per target pixel, row-major
  std::vector<std::uint8_t> valid;

  FlowField() = default;
  FlowField(int w, int h) : width(w), height(h), coords(std::size_t(w) * h * 2, 0.0), valid(std::size_t(w) * h, 0) {}

  double x(int px, int py) const { return coords[(std::size_t(py) * width + px) * 2]; }
  double y(int px, int py) const { return coords[(std::size_t(py) * width + px) * 2 + 1]; }
  bool is_valid(int px, int py) const { return valid[std::size_t(py) * width + px] != 0; }
};

inline bool in_frame(const CameraIntrinsics& k, double x, double y) {
  return x >= 0.0 && x <= k.width - 1 && y >= 0.0 && y <= k.height - 1;
}

/// Round-off slack for border pixels that reproject onto themselves.
inline constexpr double kFrameSlack = 1e-9;

/// Moves coordinates lying within kFrameSlack outside the frame onto its border.
inline void snap_to_frame(const CameraIntrinsics& k, double& x, double& y) {
  if (x < 0.0 && x > -kFrameSlack) x = 0.0;
  if (y < 0.0 && y > -kFrameSlack) y = 0.0;
  if (x > k.width - 1 && x < k.width - 1 + kFrameSlack) x = k.width - 1;
  if (y > k.height - 1 && y < k.height - 1 + kFrameSlack) y = k.height - 1;
}

inline FlowField depth_to_flow(const DepthMap& d, const CameraIntrinsics& k, const RigidTransform& t_ts) {
  if (d.width != k.width || d.height != k.height) {
    throw std::invalid_argument("depth_to_flow: depth map " + std::to_string(d.width) + "x" +
                                std::to_string(d.height) + " does not match intrinsics " +
                                std::to_string(k.width) + "x" + std::to_string(k.height));
  }
  FlowField flow(d.width, d.height);
  for (int y = 0; y < d.height; ++y) {
    for (int x = 0; x < d.width; ++x) {
      const Vec3 p = t_ts.apply(unproject(k, {double(x), double(y)}, d.at(x, y)));
      const Projection s = project(k, p);
      const std::size_t i = std::size_t(y) * d.width + x;
      if (s.in_front()) {
        double sx = s.x, sy = s.y;
        snap_to_frame(k, sx, sy);
        flow.coords[2 * i] = sx;
        flow.coords[2 * i + 1] = sy;
        flow.valid[i] = in_frame(k, sx, sy) ? 1 : 0;
      } else {
        flow.coords[2 * i] = kBehindCameraCoord;
        flow.coords[2 * i + 1] = kBehindCameraCoord;
        flow.valid[i] = 0;
      }
    }
  }
  return flow;
}

/// Yaw (about camera y) and pitch (about camera x) of a rotation, used to
/// build viewpoint feature vectors. Roll is ignored.
struct YawPitch {
  double yaw = 0.0;
  double pitch = 0.0;
};

inline YawPitch yaw_pitch(const Mat3& r) {
  const double pitch = std::asin(std::clamp(-r(1, 2), -1.0, 1.0));
  const double yaw = std::atan2(r(0, 2), r(2, 2));
  return {yaw, pitch};
}

}  // namespace nvs
