#pragma once

#include <Eigen/Geometry>
#include <Eigen/SVD>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "nvs/geometry.hpp"
#include "nvs/image.hpp"

namespace nvs::metrics {

/// Mean absolute difference over all pixels and channels.
inline double l1_image(const Image& a, const Image& b) {
  require_same_shape(a, b, "l1_image");
  if (a.data.empty()) throw std::invalid_argument("l1_image: empty image");
  double s = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) s += std::abs(double(a.data[i]) - double(b.data[i]));
  return s / double(a.data.size());
}

/// Mean absolute difference restricted to pixels where `mask` is non-zero.
/// Returns nothing when the mask is empty.
inline std::optional<double> l1_masked(const Image& a, const Image& b, std::span<const std::uint8_t> mask) {
  require_same_shape(a, b, "l1_masked");
  if (mask.size() != a.pixel_count()) throw std::invalid_argument("l1_masked: mask size mismatch");
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t p = 0; p < mask.size(); ++p) {
    if (!mask[p]) continue;
    for (int c = 0; c < a.channels; ++c) {
      const std::size_t i = p * a.channels + c;
      s += std::abs(double(a.data[i]) - double(b.data[i]));
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return s / double(n);
}

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double c1 = 1e-4;  // (0.01 L)^2, L = 1
  double c2 = 9e-4;  // (0.03 L)^2
};

/// Mean local SSIM over all fully-contained Gaussian windows, averaged over
/// channels.
inline double ssim(const Image& a, const Image& b, const SsimOptions& opt = {}) {
  require_same_shape(a, b, "ssim");
  if (a.width < opt.window || a.height < opt.window) {
    throw std::invalid_argument("ssim: image " + std::to_string(a.width) + "x" + std::to_string(a.height) +
                                " smaller than the " + std::to_string(opt.window) + "x" + std::to_string(opt.window) + " window");
  }
  const int r = opt.window / 2;
  std::vector<double> g(std::size_t(opt.window));
  double gsum = 0.0;
  for (int i = 0; i < opt.window; ++i) {
    g[i] = std::exp(-double((i - r) * (i - r)) / (2 * opt.sigma * opt.sigma));
    gsum += g[i];
  }
  for (auto& v : g) v /= gsum;

  double total = 0.0;
  const int ow = a.width - opt.window + 1, oh = a.height - opt.window + 1;
  for (int c = 0; c < a.channels; ++c) {
    double channel_sum = 0.0;
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (int j = 0; j < opt.window; ++j)
          for (int i = 0; i < opt.window; ++i) {
            const double w = g[j] * g[i];
            const double va = a.at(ox + i, oy + j, c), vb = b.at(ox + i, oy + j, c);
            ma += w * va;
            mb += w * vb;
            saa += w * va * va;
            sbb += w * vb * vb;
            sab += w * va * vb;
          }
        const double var_a = saa - ma * ma, var_b = sbb - mb * mb, cov = sab - ma * mb;
        channel_sum += ((2 * ma * mb + opt.c1) * (2 * cov + opt.c2)) /
                       ((ma * ma + mb * mb + opt.c1) * (var_a + var_b + opt.c2));
      }
    total += channel_sum / double(ow * oh);
  }
  return total / double(a.channels);
}

/// Fraction of entries with max(p/t, t/p) < delta. All values must be positive.
inline double acc_threshold(std::span<const double> pred, std::span<const double> truth, double delta) {
  if (pred.size() != truth.size()) throw std::invalid_argument("acc_threshold: size mismatch");
  if (pred.empty()) throw std::invalid_argument("acc_threshold: no values");
  std::size_t ok = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!(pred[i] > 0.0) || !(truth[i] > 0.0)) {
      throw std::invalid_argument("acc_threshold: non-positive value at index " + std::to_string(i));
    }
    if (std::max(pred[i] / truth[i], truth[i] / pred[i]) < delta) ++ok;
  }
  return double(ok) / double(pred.size());
}

inline constexpr double kAccDelta = 1.05;

struct FlowScores {
  double l1 = 0.0;   // mean |coord difference| per component, in image-size units
  double acc = 0.0;  // ratio test on 1-based coordinates
  std::size_t pixels = 0;
};

/// Flow comparison on pixels where `mask` is set. Coordinates are compared
/// per component; the L1 is divided by the image size so it is resolution
/// independent, and the ratio test uses 1-based coordinates (x + 1, y + 1)
/// so every in-frame value is strictly positive.
inline FlowScores flow_scores(const FlowField& pred, const FlowField& truth, std::span<const std::uint8_t> mask,
                              double delta = kAccDelta) {
  if (pred.width != truth.width || pred.height != truth.height) throw std::invalid_argument("flow_scores: size mismatch");
  if (mask.size() != std::size_t(truth.width) * truth.height) throw std::invalid_argument("flow_scores: mask size mismatch");
  std::vector<double> p, t;
  double l1 = 0.0;
  const double scale = std::max(truth.width, truth.height);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    for (int c = 0; c < 2; ++c) {
      const double pv = pred.coords[2 * i + c], tv = truth.coords[2 * i + c];
      l1 += std::abs(pv - tv) / scale;
      // Predictions outside the frame fall back to a tiny positive value so
      // they count as wrong rather than aborting the ratio test.
      p.push_back(std::max(pv + 1.0, 1e-6));
      t.push_back(tv + 1.0);
    }
  }
  if (p.empty()) throw std::invalid_argument("flow_scores: empty mask");
  return {l1 / double(p.size()), acc_threshold(p, t, delta), p.size() / 2};
}

struct DepthScores {
  double l1 = 0.0;
  double acc = 0.0;
  std::size_t pixels = 0;
};

inline DepthScores depth_scores(const DepthMap& pred, const DepthMap& truth, std::span<const std::uint8_t> mask,
                                double delta = kAccDelta) {
  if (pred.width != truth.width || pred.height != truth.height) throw std::invalid_argument("depth_scores: size mismatch");
  if (mask.size() != truth.values.size()) throw std::invalid_argument("depth_scores: mask size mismatch");
  std::vector<double> p, t;
  double l1 = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    p.push_back(pred.values[i]);
    t.push_back(truth.values[i]);
    l1 += std::abs(pred.values[i] - truth.values[i]);
  }
  if (p.empty()) throw std::invalid_argument("depth_scores: empty mask");
  return {l1 / double(p.size()), acc_threshold(p, t, delta), p.size()};
}

// ---------------------------------------------------------------------------
// Pose errors

inline void require_rotation(const Mat3& r, const char* op) {
  if (!RigidTransform{r, Vec3::Zero()}.is_valid()) throw std::invalid_argument(std::string(op) + ": input is not a rotation matrix");
}

/// Geodesic angle between two rotations, radians in [0, pi].
inline double rotation_error(const Mat3& r_est, const Mat3& r_true) {
  require_rotation(r_est, "rotation_error");
  require_rotation(r_true, "rotation_error");
  const double c = ((r_est * r_true.transpose()).trace() - 1.0) / 2.0;
  return std::acos(std::clamp(c, -1.0, 1.0));
}

/// Angle between translation directions, radians in [0, pi].
inline double translation_error(const Vec3& t_est, const Vec3& t_true) {
  const double ne = t_est.norm(), nt = t_true.norm();
  if (ne == 0.0 || nt == 0.0) throw std::invalid_argument("translation_error: zero-length translation has no direction");
  return std::acos(std::clamp(t_est.dot(t_true) / (ne * nt), -1.0, 1.0));
}

/// Least-squares rigid transform mapping `from` onto `to` (Kabsch).
inline RigidTransform rigid_fit(const std::vector<Vec3>& from, const std::vector<Vec3>& to) {
  if (from.size() != to.size()) throw std::invalid_argument("rigid_fit: point count mismatch");
  if (from.size() < 3) throw std::invalid_argument("rigid_fit: need at least 3 correspondences, got " + std::to_string(from.size()));
  Vec3 ca = Vec3::Zero(), cb = Vec3::Zero();
  for (std::size_t i = 0; i < from.size(); ++i) {
    ca += from[i];
    cb += to[i];
  }
  ca /= double(from.size());
  cb /= double(from.size());
  Mat3 h = Mat3::Zero();
  for (std::size_t i = 0; i < from.size(); ++i) h += (from[i] - ca) * (to[i] - cb).transpose();
  Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  if ((svd.matrixV() * svd.matrixU().transpose()).determinant() < 0) d(2, 2) = -1.0;
  const Mat3 r = svd.matrixV() * d * svd.matrixU().transpose();
  return {r, cb - r * ca};
}

struct PoseError {
  double te = 0.0;
  double re = 0.0;
};

/// Refines `init` so that transformed `points` project onto `observed` pixel
/// coordinates (Levenberg-Marquardt on reprojection error, left-multiplied
/// twist updates).
inline RigidTransform refine_reprojection(const std::vector<Vec3>& points, const std::vector<std::array<double, 2>>& observed,
                                          const CameraIntrinsics& k, RigidTransform init, int max_iterations = 50) {
  using Mat6 = Eigen::Matrix<double, 6, 6>;
  using Vec6 = Eigen::Matrix<double, 6, 1>;
  auto cost = [&](const RigidTransform& t) {
    double c = 0.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
      const Vec3 p = t.apply(points[i]);
      if (!(p.z() > 1e-9)) {
        c += 1e6;
        continue;
      }
      const double du = k.fx * p.x() / p.z() + k.cx - observed[i][0], dv = k.fy * p.y() / p.z() + k.cy - observed[i][1];
      c += du * du + dv * dv;
    }
    return c;
  };
  RigidTransform cur = init;
  double c = cost(cur), lambda = 1e-3;
  for (int it = 0; it < max_iterations && c > 0.0; ++it) {
    Mat6 h = Mat6::Zero();
    Vec6 g = Vec6::Zero();
    for (std::size_t i = 0; i < points.size(); ++i) {
      const Vec3 p = cur.apply(points[i]);
      if (!(p.z() > 1e-9)) continue;
      const double iz = 1.0 / p.z();
      Eigen::Matrix<double, 2, 3> jp;
      jp << k.fx * iz, 0, -k.fx * p.x() * iz * iz, 0, k.fy * iz, -k.fy * p.y() * iz * iz;
      Eigen::Matrix<double, 3, 6> dp;
      dp.leftCols<3>() << 0, p.z(), -p.y(), -p.z(), 0, p.x(), p.y(), -p.x(), 0;  // -[p]x
      dp.rightCols<3>() = Mat3::Identity();
      const Eigen::Matrix<double, 2, 6> j = jp * dp;
      const Eigen::Vector2d r(k.fx * p.x() * iz + k.cx - observed[i][0], k.fy * p.y() * iz + k.cy - observed[i][1]);
      h += j.transpose() * j;
      g += j.transpose() * r;
    }
    bool improved = false;
    for (int attempt = 0; attempt < 10 && !improved; ++attempt) {
      Mat6 a = h;
      a.diagonal() += lambda * h.diagonal().cwiseMax(1e-12);
      const Vec6 step = -a.ldlt().solve(g);
      const Vec3 w = step.head<3>();
      const double angle = w.norm();
      const Mat3 dr = angle > 0 ? Mat3(Eigen::AngleAxisd(angle, w / angle)) : Mat3::Identity();
      const RigidTransform next{dr * cur.r, dr * cur.t + step.tail<3>()};
      const double nc = cost(next);
      if (nc < c) {
        const double gain = c - nc;
        cur = next;
        c = nc;
        lambda = std::max(lambda * 0.3, 1e-12);
        improved = true;
        if (gain <= 1e-15 * (1.0 + c)) return cur;
      } else {
        lambda *= 10.0;
      }
    }
    if (!improved) break;
  }
  return cur;
}

/// Pose realized by a correspondence field. Target pixels are unprojected
/// with the target depth; an initial rigid transform is fitted to their
/// flow-matched source points (unprojected with bilinearly interpolated
/// source depth) and then refined on reprojection error against the flow
/// coordinates themselves, so the estimate is exact for exact flow even on
/// curved surfaces. Angular errors against the requested target-to-source
/// transform are reported. Only pixels with `mask` set and in-frame flow are
/// used.
inline PoseError pose_error_direct(const FlowField& flow, const DepthMap& target_depth, const DepthMap& source_depth,
                                   const CameraIntrinsics& k, const RigidTransform& requested_t_ts,
                                   std::span<const std::uint8_t> mask) {
  if (flow.width != k.width || flow.height != k.height || target_depth.width != k.width || source_depth.width != k.width) {
    throw std::invalid_argument("pose_error_direct: size mismatch");
  }
  if (mask.size() != std::size_t(k.width) * k.height) throw std::invalid_argument("pose_error_direct: mask size mismatch");
  std::vector<Vec3> from, to;
  std::vector<std::array<double, 2>> observed;
  for (int y = 0; y < k.height; ++y)
    for (int x = 0; x < k.width; ++x) {
      const std::size_t i = std::size_t(y) * k.width + x;
      if (!mask[i]) continue;
      const double sx = flow.x(x, y), sy = flow.y(x, y);
      if (!in_frame(k, sx, sy)) continue;
      const int x0 = std::min(int(std::floor(sx)), k.width - 2), y0 = std::min(int(std::floor(sy)), k.height - 2);
      const double fx = sx - x0, fy = sy - y0;
      const double sd = (1 - fx) * (1 - fy) * source_depth.at(x0, y0) + fx * (1 - fy) * source_depth.at(x0 + 1, y0) +
                        (1 - fx) * fy * source_depth.at(x0, y0 + 1) + fx * fy * source_depth.at(x0 + 1, y0 + 1);
      from.push_back(unproject(k, {double(x), double(y)}, target_depth.at(x, y)));
      to.push_back(unproject(k, {sx, sy}, sd));
      observed.push_back({sx, sy});
    }
  if (from.size() < 3) throw std::invalid_argument("pose_error_direct: fewer than 3 valid correspondences");
  const RigidTransform fit = refine_reprojection(from, observed, k, rigid_fit(from, to));
  return {translation_error(fit.t, requested_t_ts.t), rotation_error(fit.r, requested_t_ts.r)};
}

}  // namespace nvs::metrics
