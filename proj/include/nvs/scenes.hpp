#pragma once

// Procedural scenes with analytic ground truth: a small raycaster over
// spheres, boxes and rectangular planes with solid (object-space) textures and
// Lambertian shading under a light fixed in the world frame, so a surface
// point has the same color from every viewpoint.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "nvs/geometry.hpp"
#include "nvs/image.hpp"
#include "nvs/io.hpp"

namespace nvs::scenes {

using Color = std::array<float, 3>;

enum class PrimitiveKind { sphere, box, plane };
enum class TextureKind { checker, stripes, gradient };

struct Texture {
  TextureKind kind = TextureKind::checker;
  Color color_a{0.2f, 0.2f, 0.2f};
  Color color_b{0.8f, 0.8f, 0.8f};
  double frequency = 6.0;        // radians per scene unit
  Vec3 direction = Vec3(0, 1, 0);  // stripes / gradient axis, object frame
};

struct Primitive {
  PrimitiveKind kind = PrimitiveKind::sphere;
  RigidTransform pose;  // object-to-world
  /// sphere: radius in x; box: half extents; plane: half extents in local x, y
  /// (the plane's normal is local +z).
  Vec3 size = Vec3(1, 1, 1);
  Texture texture;
};

struct SceneSpec {
  std::uint64_t seed = 0;
  std::vector<Primitive> primitives;
  Color background{0.1f, 0.1f, 0.1f};
  Vec3 light_direction = Vec3(0.4, 0.8, 0.45).normalized();  // toward the light, world frame
  double ambient = 0.35;
  double d_min = 0.5;
  double d_max = 6.0;

  void validate() const {
    if (primitives.empty()) throw std::invalid_argument("scene: needs at least one primitive");
    for (const auto& p : primitives) {
      if (!(p.size.x() > 0 && p.size.y() > 0 && (p.kind == PrimitiveKind::plane || p.size.z() > 0))) {
        throw std::invalid_argument("scene: primitive sizes must be positive");
      }
      p.pose.validate();
    }
    if (!(d_min > 0 && d_min < d_max)) throw std::invalid_argument("scene: need 0 < d_min < d_max");
  }
};

struct ViewSample {
  Image image;
  DepthMap depth;
  RigidTransform pose;  // camera-to-world
  CameraIntrinsics intrinsics;
  std::uint64_t scene_seed = 0;
};

// ---------------------------------------------------------------------------
// Shading

inline float texture_mix(const Texture& tex, const Vec3& p, const Vec3& extent) {
  switch (tex.kind) {
    case TextureKind::checker: {
      const double s = std::sin(tex.frequency * p.x()) * std::sin(tex.frequency * p.y()) *
                       std::sin(tex.frequency * p.z() + 0.7);
      return float(0.5 + 0.5 * std::tanh(2.5 * s));
    }
    case TextureKind::stripes: {
      const double s = std::sin(tex.frequency * p.dot(tex.direction));
      return float(0.5 + 0.5 * std::tanh(2.0 * s));
    }
    case TextureKind::gradient: {
      const double half = std::max(1e-9, std::abs(extent.dot(tex.direction.cwiseAbs())));
      return float(std::clamp(0.5 + 0.5 * p.dot(tex.direction) / half, 0.0, 1.0));
    }
  }
  return 0.0f;
}

inline Color texture_color(const Texture& tex, const Vec3& p, const Vec3& extent) {
  const float m = texture_mix(tex, p, extent);
  return {(1 - m) * tex.color_a[0] + m * tex.color_b[0], (1 - m) * tex.color_a[1] + m * tex.color_b[1],
          (1 - m) * tex.color_a[2] + m * tex.color_b[2]};
}

struct Hit {
  double t = std::numeric_limits<double>::infinity();
  Vec3 local_point;
  Vec3 world_normal;
  const Primitive* primitive = nullptr;
};

/// Ray-primitive intersection in the primitive's frame. Returns the smallest
/// t in [t_min, t_max] or nothing.
inline std::optional<Hit> intersect(const Primitive& prim, const Vec3& origin, const Vec3& dir, double t_min,
                                    double t_max) {
  const Mat3 rt = prim.pose.r.transpose();
  const Vec3 o = rt * (origin - prim.pose.t);
  const Vec3 d = rt * dir;
  Hit hit;
  Vec3 local_normal;
  switch (prim.kind) {
    case PrimitiveKind::sphere: {
      const double r = prim.size.x();
      const double a = d.squaredNorm(), b = o.dot(d), c = o.squaredNorm() - r * r;
      const double disc = b * b - a * c;
      if (disc < 0) return std::nullopt;
      const double sq = std::sqrt(disc);
      double t = (-b - sq) / a;
      if (t < t_min) t = (-b + sq) / a;
      if (t < t_min || t > t_max) return std::nullopt;
      hit.t = t;
      hit.local_point = o + t * d;
      local_normal = hit.local_point / r;
      break;
    }
    case PrimitiveKind::box: {
      double t0 = -std::numeric_limits<double>::infinity(), t1 = std::numeric_limits<double>::infinity();
      int axis0 = 0, axis1 = 0;
      for (int i = 0; i < 3; ++i) {
        const double h = prim.size(i);
        if (std::abs(d(i)) < 1e-15) {
          if (o(i) < -h || o(i) > h) return std::nullopt;
          continue;
        }
        double ta = (-h - o(i)) / d(i), tb = (h - o(i)) / d(i);
        if (ta > tb) std::swap(ta, tb);
        if (ta > t0) {
          t0 = ta;
          axis0 = i;
        }
        if (tb < t1) {
          t1 = tb;
          axis1 = i;
        }
      }
      if (t0 > t1) return std::nullopt;
      double t = t0;
      int axis = axis0;
      if (t < t_min) {
        t = t1;
        axis = axis1;
      }
      if (t < t_min || t > t_max) return std::nullopt;
      hit.t = t;
      hit.local_point = o + t * d;
      local_normal = Vec3::Zero();
      local_normal(axis) = hit.local_point(axis) > 0 ? 1.0 : -1.0;
      break;
    }
    case PrimitiveKind::plane: {
      if (std::abs(d.z()) < 1e-15) return std::nullopt;
      const double t = -o.z() / d.z();
      if (t < t_min || t > t_max) return std::nullopt;
      const Vec3 p = o + t * d;
      if (std::abs(p.x()) > prim.size.x() || std::abs(p.y()) > prim.size.y()) return std::nullopt;
      hit.t = t;
      hit.local_point = p;
      local_normal = Vec3(0, 0, 1);
      break;
    }
  }
  hit.world_normal = prim.pose.r * local_normal;
  hit.primitive = &prim;
  return hit;
}

/// Unshaded surface color at a hit.
inline Color albedo(const Hit& hit) {
  return texture_color(hit.primitive->texture, hit.local_point, hit.primitive->size);
}

inline Color shade(const SceneSpec& spec, const Hit& hit, const Vec3& ray_dir) {
  Vec3 n = hit.world_normal;
  if (hit.primitive->kind == PrimitiveKind::plane && n.dot(ray_dir) > 0) n = -n;
  const double lambert = std::max(0.0, n.dot(spec.light_direction));
  const float s = float(spec.ambient + (1.0 - spec.ambient) * lambert);
  const Color a = albedo(hit);
  return {a[0] * s, a[1] * s, a[2] * s};
}

/// Nearest hit along a camera ray; `t` equals camera-frame depth because the
/// ray direction has unit z component in camera coordinates.
inline std::optional<Hit> trace(const SceneSpec& spec, const Vec3& origin, const Vec3& dir) {
  std::optional<Hit> best;
  for (const auto& prim : spec.primitives) {
    const auto h = intersect(prim, origin, dir, spec.d_min, spec.d_max);
    if (h && (!best || h->t < best->t)) best = h;
  }
  return best;
}

inline ViewSample raycast(const SceneSpec& spec, const RigidTransform& pose, const CameraIntrinsics& k) {
  k.validate();
  ViewSample out;
  out.image = Image(k.width, k.height, 3);
  out.depth = DepthMap(k.width, k.height, spec.d_max);
  out.pose = pose;
  out.intrinsics = k;
  out.scene_seed = spec.seed;
  for (int y = 0; y < k.height; ++y) {
    for (int x = 0; x < k.width; ++x) {
      const Vec3 dir = pose.r * Vec3((x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0);
      const auto hit = trace(spec, pose.t, dir);
      Color c = spec.background;
      if (hit) {
        c = shade(spec, *hit, dir);
        out.depth.at(x, y) = hit->t;
      }
      for (int ch = 0; ch < 3; ++ch) out.image.at(x, y, ch) = c[ch];
    }
  }
  return out;
}

/// True where the pixel saw background (no primitive within range).
inline std::vector<std::uint8_t> background_mask(const SceneSpec& spec, const ViewSample& v) {
  std::vector<std::uint8_t> m(v.depth.values.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = v.depth.values[i] >= spec.d_max ? 1 : 0;
  return m;
}

// ---------------------------------------------------------------------------
// Scene generators

namespace detail {
inline Color random_color(std::mt19937_64& rng, float lo = 0.1f, float hi = 0.95f) {
  std::uniform_real_distribution<float> u(lo, hi);
  return {u(rng), u(rng), u(rng)};
}

inline Texture random_texture(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> kind(0, 2);
  std::uniform_real_distribution<double> freq(3.0, 7.0), u(-1.0, 1.0);
  Texture t;
  t.kind = static_cast<TextureKind>(kind(rng));
  t.color_a = random_color(rng);
  t.color_b = random_color(rng);
  t.frequency = freq(rng);
  Vec3 dir(u(rng), u(rng), u(rng));
  if (dir.norm() < 1e-3) dir = Vec3(0, 1, 0);
  t.direction = dir.normalized();
  return t;
}

inline Mat3 random_rotation(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> a(-kPi, kPi);
  return rot_y(a(rng)) * rot_x(a(rng)) * rot_z(a(rng));
}
}  // namespace detail

/// Object-centric scene around the world origin: one main primitive, up to
/// two satellites, optionally a ground quad. Deterministic in `seed`.
inline SceneSpec random_object_scene(std::uint64_t seed) {
  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ull + 17);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  SceneSpec spec;
  spec.seed = seed;
  spec.background = detail::random_color(rng, 0.0f, 0.25f);

  Primitive main;
  if (u(rng) < 0.5) {
    main.kind = PrimitiveKind::sphere;
    main.size = Vec3::Constant(0.6 + 0.35 * u(rng));
  } else {
    main.kind = PrimitiveKind::box;
    main.size = Vec3(0.4 + 0.35 * u(rng), 0.4 + 0.35 * u(rng), 0.4 + 0.35 * u(rng));
    main.pose.r = rot_y(kPi * u(rng)) * rot_x(0.3 * (u(rng) - 0.5));
  }
  main.texture = detail::random_texture(rng);
  spec.primitives.push_back(main);

  const int satellites = int(u(rng) * 3.0);
  for (int i = 0; i < satellites; ++i) {
    Primitive s;
    s.kind = u(rng) < 0.5 ? PrimitiveKind::sphere : PrimitiveKind::box;
    const double r = 0.2 + 0.2 * u(rng);
    s.size = s.kind == PrimitiveKind::sphere ? Vec3::Constant(r) : Vec3(r, r * (0.6 + 0.8 * u(rng)), r);
    const double ang = 2 * kPi * u(rng);
    s.pose.t = Vec3(0.8 * std::cos(ang), 0.6 * (u(rng) - 0.5), 0.8 * std::sin(ang));
    if (s.kind == PrimitiveKind::box) s.pose.r = detail::random_rotation(rng);
    s.texture = detail::random_texture(rng);
    spec.primitives.push_back(s);
  }

  if (u(rng) < 0.4) {
    Primitive ground;
    ground.kind = PrimitiveKind::plane;
    ground.pose.r = rot_x(-kPi / 2);  // local +z -> world +y
    ground.pose.t = Vec3(0, -1.0, 0);
    ground.size = Vec3(1.4, 1.4, 0);
    ground.texture = detail::random_texture(rng);
    spec.primitives.push_back(ground);
  }
  return spec;
}

/// Corridor along world +z: floor, ceiling, side walls and an end wall.
/// Cameras start at the origin looking down +z.
inline SceneSpec corridor_scene(std::uint64_t seed) {
  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ull + 29);
  SceneSpec spec;
  spec.seed = seed;
  spec.d_min = 0.2;
  spec.d_max = 20.0;
  spec.background = {0.05f, 0.05f, 0.05f};
  auto quad = [&](const Mat3& r, const Vec3& t, double hx, double hy) {
    Primitive p;
    p.kind = PrimitiveKind::plane;
    p.pose = {r, t};
    p.size = Vec3(hx, hy, 0);
    p.texture = detail::random_texture(rng);
    spec.primitives.push_back(p);
  };
  quad(rot_x(-kPi / 2), Vec3(0, -1.0, 7.0), 1.6, 8.0);   // floor
  quad(rot_x(kPi / 2), Vec3(0, 1.2, 7.0), 1.6, 8.0);     // ceiling
  quad(rot_y(kPi / 2), Vec3(-1.6, 0.1, 7.0), 8.0, 1.2);  // left wall
  quad(rot_y(-kPi / 2), Vec3(1.6, 0.1, 7.0), 8.0, 1.2);  // right wall
  quad(Mat3::Identity(), Vec3(0, 0.1, 15.0), 1.6, 1.2);  // end wall
  return spec;
}

// ---------------------------------------------------------------------------
// View protocols

/// Camera-to-world pose on a sphere around the origin, looking at it.
inline RigidTransform orbit_pose(double azimuth_deg, double elevation_deg, double radius) {
  const double a = deg2rad(azimuth_deg), e = deg2rad(elevation_deg);
  const Vec3 eye = radius * Vec3(std::cos(e) * std::sin(a), std::sin(e), std::cos(e) * std::cos(a));
  return look_at(eye, Vec3::Zero());
}

struct OrbitProtocol {
  std::vector<double> azimuths_deg;
  std::vector<double> elevations_deg;
  double max_azimuth_separation_deg = 40.0;
  double radius = 3.0;
  int image_size = 32;

  /// Azimuth 0..340 step 20, elevation 0..30 step 10, pairs within +-40 deg.
  static OrbitProtocol standard(int image_size = 32) {
    OrbitProtocol p;
    for (int a = 0; a < 360; a += 20) p.azimuths_deg.push_back(a);
    for (int e = 0; e <= 30; e += 10) p.elevations_deg.push_back(e);
    p.image_size = image_size;
    return p;
  }

  std::size_t view_count() const { return azimuths_deg.size() * elevations_deg.size(); }

  /// View index = elevation_index * azimuth_count + azimuth_index.
  RigidTransform view_pose(std::size_t index) const {
    const std::size_t na = azimuths_deg.size();
    return orbit_pose(azimuths_deg[index % na], elevations_deg[index / na], radius);
  }
};

/// Signed azimuth difference wrapped to (-180, 180].
inline double wrap_degrees(double d) {
  d = std::fmod(d, 360.0);
  if (d > 180.0) d -= 360.0;
  if (d <= -180.0) d += 360.0;
  return d;
}

struct ViewPair {
  ViewSample source;
  ViewSample target;
  RigidTransform target_to_source;  // T_{t->s}
};

struct OrbitPairIndex {
  std::size_t source_view = 0;
  std::size_t target_view = 0;
  double azimuth_delta_deg = 0.0;
};

/// All (source, target) view index pairs at equal elevation with azimuth
/// separation within the protocol bound, including the zero-separation pair.
inline std::vector<OrbitPairIndex> orbit_pair_indices(const OrbitProtocol& p) {
  std::vector<OrbitPairIndex> out;
  const std::size_t na = p.azimuths_deg.size();
  for (std::size_t e = 0; e < p.elevations_deg.size(); ++e)
    for (std::size_t s = 0; s < na; ++s)
      for (std::size_t t = 0; t < na; ++t) {
        const double delta = wrap_degrees(p.azimuths_deg[t] - p.azimuths_deg[s]);
        if (std::abs(delta) <= p.max_azimuth_separation_deg + 1e-9) out.push_back({e * na + s, e * na + t, delta});
      }
  return out;
}

inline std::vector<ViewSample> render_orbit_views(const SceneSpec& spec, const OrbitProtocol& p) {
  const auto k = CameraIntrinsics::centered(p.image_size);
  std::vector<ViewSample> views;
  views.reserve(p.view_count());
  for (std::size_t i = 0; i < p.view_count(); ++i) views.push_back(raycast(spec, p.view_pose(i), k));
  return views;
}

/// Streams every orbit pair of the protocol to `sink`.
inline void orbit_pairs(const SceneSpec& spec, const OrbitProtocol& p, const std::function<void(const ViewPair&)>& sink) {
  const auto views = render_orbit_views(spec, p);
  for (const auto& idx : orbit_pair_indices(p)) {
    const auto& s = views[idx.source_view];
    const auto& t = views[idx.target_view];
    sink(ViewPair{s, t, relative_target_to_source(s.pose, t.pose)});
  }
}

/// Pairs (view_0, view_k), k = 1..count, for a camera translating along its
/// own +z axis by `step` per frame from `start` (camera-to-world).
inline void forward_track_pairs(const SceneSpec& spec, double step, int count, const CameraIntrinsics& k,
                                const RigidTransform& start, const std::function<void(const ViewPair&)>& sink) {
  if (step < 0) throw std::invalid_argument("forward_track_pairs: step must be non-negative");
  const ViewSample first = raycast(spec, start, k);
  for (int i = 1; i <= count; ++i) {
    const RigidTransform pose = compose(start, RigidTransform::translation(Vec3(0, 0, step * i)));
    ViewSample target = raycast(spec, pose, k);
    sink(ViewPair{first, std::move(target), relative_target_to_source(first.pose, pose)});
  }
}

// ---------------------------------------------------------------------------
// Visibility

/// Mutual visibility of target pixels in the source view. A foreground pixel
/// is visible when its 3D point reprojects into the source frame in front of
/// the camera and the source depth there agrees with the point's source depth
/// within `rel_tol`. A background pixel is visible when it lands on source
/// background.
inline std::vector<std::uint8_t> visibility_mask(const ViewSample& source, const ViewSample& target, double d_max,
                                                 double rel_tol = 0.01) {
  if (source.scene_seed != target.scene_seed) throw std::invalid_argument("visibility_mask: views come from different scenes");
  if (source.intrinsics.width != target.intrinsics.width || source.intrinsics.height != target.intrinsics.height) {
    throw std::invalid_argument("visibility_mask: view sizes differ");
  }
  const auto& kt = target.intrinsics;
  const auto& ks = source.intrinsics;
  const RigidTransform t_ts = relative_target_to_source(source.pose, target.pose);
  std::vector<std::uint8_t> mask(std::size_t(kt.width) * kt.height, 0);
  auto sample_depth = [&](double x, double y) {
    const int x0 = std::min(int(std::floor(x)), ks.width - 2), y0 = std::min(int(std::floor(y)), ks.height - 2);
    const double fx = x - x0, fy = y - y0;
    const auto& d = source.depth;
    return (1 - fx) * (1 - fy) * d.at(x0, y0) + fx * (1 - fy) * d.at(x0 + 1, y0) + (1 - fx) * fy * d.at(x0, y0 + 1) +
           fx * fy * d.at(x0 + 1, y0 + 1);
  };
  for (int y = 0; y < kt.height; ++y)
    for (int x = 0; x < kt.width; ++x) {
      const double d = target.depth.at(x, y);
      const Vec3 p = t_ts.apply(unproject(kt, {double(x), double(y)}, d));
      Projection s = project(ks, p);
      if (!s.in_front()) continue;
      snap_to_frame(ks, s.x, s.y);
      if (!in_frame(ks, s.x, s.y)) continue;
      const double sd = sample_depth(s.x, s.y);
      const bool background = d >= d_max;
      const bool ok = background ? sd >= d_max * (1.0 - rel_tol) : std::abs(sd - s.z) <= rel_tol * s.z;
      mask[std::size_t(y) * kt.width + x] = ok ? 1 : 0;
    }
  return mask;
}

// ---------------------------------------------------------------------------
// Dataset export / import: NNNNNN.png, NNNNNN.pfm, poses.txt (camera-to-world),
// intrinsics.txt.

inline std::string frame_stem(std::size_t i) {
  std::ostringstream os;
  os << std::setw(6) << std::setfill('0') << i;
  return os.str();
}

inline void export_dataset(const std::filesystem::path& dir, const std::vector<ViewSample>& views) {
  if (views.empty()) throw std::invalid_argument("export_dataset: no views");
  std::filesystem::create_directories(dir);
  std::vector<RigidTransform> poses;
  for (std::size_t i = 0; i < views.size(); ++i) {
    io::write_png(dir / (frame_stem(i) + ".png"), views[i].image);
    io::write_pfm(dir / (frame_stem(i) + ".pfm"), views[i].depth);
    poses.push_back(views[i].pose);
  }
  io::write_poses(dir / "poses.txt", poses);
  io::write_intrinsics(dir / "intrinsics.txt", views.front().intrinsics);
}

/// Depth files are optional on import (real data rarely has them).
inline std::vector<ViewSample> import_dataset(const std::filesystem::path& dir) {
  const auto k = io::read_intrinsics(dir / "intrinsics.txt");
  const auto poses = io::read_poses(dir / "poses.txt");
  std::vector<ViewSample> out;
  for (std::size_t i = 0; i < poses.size(); ++i) {
    ViewSample v;
    v.image = io::read_png(dir / (frame_stem(i) + ".png"));
    if (v.image.width != k.width || v.image.height != k.height) {
      throw io::IoError("import_dataset: " + frame_stem(i) + ".png does not match intrinsics size");
    }
    const auto depth_path = dir / (frame_stem(i) + ".pfm");
    if (std::filesystem::exists(depth_path)) v.depth = io::read_depth_pfm(depth_path);
    v.pose = poses[i];
    v.intrinsics = k;
    out.push_back(std::move(v));
  }
  return out;
}

}  // namespace nvs::scenes
