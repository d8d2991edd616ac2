#pragma once

// Transforming auto-encoder: image -> latent point set (n x 3) -> rigid
// transform of the points -> decoder -> target-view depth (or, for the
// no_depth ablation, a correspondence field).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "nvs/autodiff.hpp"
#include "nvs/config.hpp"
#include "nvs/geometry.hpp"
#include "nvs/image.hpp"
#include "nvs/optim.hpp"

namespace nvs {

enum class Variant { full, no_tae, no_depth };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::no_tae: return "no_tae";
    case Variant::no_depth: return "no_depth";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "full") return Variant::full;
  if (s == "no_tae") return Variant::no_tae;
  if (s == "no_depth") return Variant::no_depth;
  throw ConfigError(s, "unknown variant '" + s + "' (expected full, no_tae or no_depth)");
}

/// Number of viewpoint features appended to the flat latent by no_tae.
inline constexpr std::size_t kViewFeatureCount = 7;

struct TaeConfig {
  std::size_t n = 128;
  int image_size = 32;
  int image_channels = 3;
  std::vector<std::size_t> encoder_channels{16, 32, 64, 64};
  std::vector<std::size_t> decoder_channels{64, 32, 16};
  double d_min = 0.5;
  double d_max = 6.0;
  double leaky_slope = 0.2;
  Variant variant = Variant::full;

  void validate() const {
    const bool pow2 = image_size >= 16 && (image_size & (image_size - 1)) == 0;
    if (!pow2) throw ConfigError(std::to_string(image_size), "image_size must be a power of two >= 16");
    if (n < 4) throw ConfigError(std::to_string(n), "latent point count n must be at least 4");
    if (!(d_min > 0 && d_min < d_max)) throw ConfigError(std::to_string(d_min), "need 0 < d_min < d_max");
    if (image_channels != 1 && image_channels != 3) throw ConfigError(std::to_string(image_channels), "image_channels must be 1 or 3");
    if (encoder_channels.empty() || decoder_channels.empty()) throw ConfigError("channels", "channel lists must be non-empty");
    if ((image_size >> encoder_channels.size()) < 1) throw ConfigError("encoder_channels", "too many encoder blocks for image_size");
    if ((image_size >> decoder_channels.size()) < 1) throw ConfigError("decoder_channels", "too many decoder blocks for image_size");
  }

  std::size_t output_channels() const { return variant == Variant::no_depth ? 2 : 1; }
  std::size_t code_size() const { return 3 * n + (variant == Variant::no_tae ? kViewFeatureCount : 0); }
  std::size_t encoder_spatial() const { return std::size_t(image_size) >> encoder_channels.size(); }
  std::size_t decoder_spatial() const { return std::size_t(image_size) >> decoder_channels.size(); }

  std::string to_text() const {
    auto list = [](const std::vector<std::size_t>& v) {
      std::string s;
      for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
      return s;
    };
    std::ostringstream os;
    os.precision(17);
    os << "variant = " << to_string(variant) << "\n"
       << "n = " << n << "\n"
       << "image_size = " << image_size << "\n"
       << "image_channels = " << image_channels << "\n"
       << "encoder_channels = " << list(encoder_channels) << "\n"
       << "decoder_channels = " << list(decoder_channels) << "\n"
       << "d_min = " << d_min << "\n"
       << "d_max = " << d_max << "\n"
       << "leaky_slope = " << leaky_slope << "\n";
    return os.str();
  }

  /// Consumes model keys from `kv`; other keys are left for the caller.
  void read(KeyValues& kv) {
    std::string v = to_string(variant), enc, dec;
    kv.read("variant", v);
    variant = parse_variant(v);
    kv.read("n", n);
    kv.read("image_size", image_size);
    kv.read("image_channels", image_channels);
    kv.read("encoder_channels", enc);
    kv.read("decoder_channels", dec);
    if (!enc.empty()) encoder_channels = parse_list(enc);
    if (!dec.empty()) decoder_channels = parse_list(dec);
    kv.read("d_min", d_min);
    kv.read("d_max", d_max);
    kv.read("leaky_slope", leaky_slope);
  }

  static TaeConfig from_text(const std::string& text) {
    KeyValues kv = KeyValues::parse(text, "model config");
    TaeConfig c;
    c.read(kv);
    kv.require_all_used();
    c.validate();
    return c;
  }

  bool operator==(const TaeConfig&) const = default;

 private:
  static std::vector<std::size_t> parse_list(const std::string& s) {
    std::vector<std::size_t> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
      try {
        std::size_t pos = 0;
        const unsigned long v = std::stoul(item, &pos);
        if (pos != item.size() || v == 0) throw std::invalid_argument(item);
        out.push_back(v);
      } catch (const std::exception&) {
        throw ConfigError(item, "bad channel count '" + item + "'");
      }
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Image <-> tensor ([B, C, H, W]) conversion

template <typename T>
ad::Tensor<T> images_to_tensor(const std::vector<const Image*>& images) {
  if (images.empty()) throw std::invalid_argument("images_to_tensor: empty batch");
  const Image& first = *images.front();
  const std::size_t C = first.channels, H = first.height, W = first.width;
  std::vector<T> v(images.size() * C * H * W);
  for (std::size_t b = 0; b < images.size(); ++b) {
    const Image& im = *images[b];
    require_same_shape(first, im, "images_to_tensor");
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) v[((b * C + c) * H + y) * W + x] = T(im.at(int(x), int(y), int(c)));
  }
  return ad::Tensor<T>({images.size(), C, H, W}, std::move(v));
}

template <typename T>
ad::Tensor<T> image_to_tensor(const Image& image) {
  return images_to_tensor<T>({&image});
}

template <typename T>
Image tensor_to_image(const ad::Tensor<T>& t, std::size_t b = 0) {
  if (t.rank() != 4) throw ad::ShapeError("tensor_to_image", t.shape(), {}, "expected [B, C, H, W]");
  const std::size_t C = t.dim(1), H = t.dim(2), W = t.dim(3);
  Image im(static_cast<int>(W), static_cast<int>(H), static_cast<int>(C));
  auto d = t.data();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) im.at(int(x), int(y), int(c)) = float(d[((b * C + c) * H + y) * W + x]);
  return im;
}

// ---------------------------------------------------------------------------
// Latent algebra

/// Applies p -> R p + t to every point of every batch entry. `z` is [B, n, 3]
/// with one transform per entry, or [n, 3] with exactly one transform.
template <typename T>
ad::Tensor<T> transform_latent(const ad::Tensor<T>& z, const std::vector<RigidTransform>& ts) {
  const bool batched = z.rank() == 3;
  if (!(batched || z.rank() == 2) || z.shape().back() != 3) throw ad::ShapeError("transform_latent", z.shape(), {}, "expected [B, n, 3] or [n, 3]");
  const std::size_t B = batched ? z.dim(0) : 1;
  const std::size_t n = batched ? z.dim(1) : z.dim(0);
  if (ts.size() != B) {
    throw std::invalid_argument("transform_latent: " + std::to_string(ts.size()) + " transforms for batch of " + std::to_string(B));
  }
  std::vector<T> v(z.size());
  auto zv = z.data();
  for (std::size_t b = 0; b < B; ++b) {
    const Mat3& r = ts[b].r;
    const Vec3& t = ts[b].t;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t o = (b * n + i) * 3;
      for (int row = 0; row < 3; ++row) {
        v[o + row] = T(r(row, 0) * zv[o] + r(row, 1) * zv[o + 1] + r(row, 2) * zv[o + 2] + t(row));
      }
    }
  }
  ad::Tensor<T> out(z.shape(), std::move(v));
  if (ad::needs_grad<T>({&z})) {
    ad::record(out, [zn = z.node(), ts, B, n](const std::vector<T>& g) {
      auto& gz = zn->grad_buffer();
      for (std::size_t b = 0; b < B; ++b) {
        const Mat3& r = ts[b].r;
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t o = (b * n + i) * 3;
          for (int col = 0; col < 3; ++col) {
            gz[o + col] += T(r(0, col) * g[o] + r(1, col) * g[o + 1] + r(2, col) * g[o + 2]);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
ad::Tensor<T> transform_latent(const ad::Tensor<T>& z, const RigidTransform& t) {
  return transform_latent(z, std::vector<RigidTransform>{t});
}

/// (1 - alpha) zA + alpha zB.
template <typename T>
ad::Tensor<T> interpolate_latents(const ad::Tensor<T>& a, const ad::Tensor<T>& b, double alpha) {
  if (a.shape() != b.shape()) throw ad::ShapeError("interpolate_latents", a.shape(), b.shape());
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("interpolate_latents: alpha must lie in [0, 1]");
  std::vector<T> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    // Endpoints are returned exactly.
    v[i] = alpha == 0.0 ? a[i] : alpha == 1.0 ? b[i] : T((1.0 - alpha) * a[i] + alpha * b[i]);
  }
  ad::Tensor<T> out(a.shape(), std::move(v));
  if (ad::needs_grad<T>({&a, &b})) {
    ad::record(out, [an = a.node(), bn = b.node(), alpha](const std::vector<T>& g) {
      if (an->requires_grad) {
        auto& ga = an->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += T((1.0 - alpha) * g[i]);
      }
      if (bn->requires_grad) {
        auto& gb = bn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += T(alpha * g[i]);
      }
    });
  }
  return out;
}

/// lo + (hi - lo) * sigmoid(raw), kept strictly inside (lo, hi) even where
/// the sigmoid saturates in the working precision.
template <typename T>
ad::Tensor<T> bounded_depth(const ad::Tensor<T>& raw, double lo, double hi) {
  std::vector<T> v(raw.size());
  std::vector<T> slope(raw.size());
  const T tlo = T(lo), thi = T(hi);
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double s = 1.0 / (1.0 + std::exp(-double(raw[i])));
    T d = T(lo + (hi - lo) * s);
    if (d <= tlo) d = std::nextafter(tlo, thi);  // NaN passes through
    if (d >= thi) d = std::nextafter(thi, tlo);
    v[i] = d;
    slope[i] = T((hi - lo) * s * (1.0 - s));
  }
  ad::Tensor<T> out(raw.shape(), std::move(v));
  if (ad::needs_grad<T>({&raw})) {
    ad::record(out, [rn = raw.node(), slope = std::move(slope)](const std::vector<T>& g) {
      auto& gr = rn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gr[i] += g[i] * slope[i];
    });
  }
  return out;
}

struct ViewAngles {
  double azimuth = 0.0;    // radians
  double elevation = 0.0;  // radians
};

/// Azimuth step and elevation of a relative camera rotation, read from its
/// axis-angle form: an orbit step of `a` at elevation `e` around a look-at
/// target is a rotation by `a` about the tilted vertical axis (0, cos e, sin e).
/// The axis is oriented to the y >= 0 hemisphere and the angle signed
/// accordingly. Rotations outside that family are mapped lossily.
inline ViewAngles relative_view_angles(const Mat3& r) {
  const Eigen::AngleAxisd aa(r);
  Vec3 axis = aa.axis();
  double angle = aa.angle();
  if (axis.y() < 0.0) {
    axis = -axis;
    angle = -angle;
  }
  if (angle == 0.0) return {};
  return {angle, std::asin(std::clamp(axis.z(), -1.0, 1.0))};
}

/// Viewpoint features for the no_tae ablation, from the source-to-target
/// transform: (cos az, sin az, cos el, sin el, tx, ty, tz).
inline std::array<double, kViewFeatureCount> view_features(const RigidTransform& t_st) {
  const ViewAngles va = relative_view_angles(t_st.r);
  return {std::cos(va.azimuth), std::sin(va.azimuth), std::cos(va.elevation), std::sin(va.elevation), t_st.t.x(), t_st.t.y(), t_st.t.z()};
}

// ---------------------------------------------------------------------------
// Model

template <typename T>
class TaeModel {
 public:
  /// Fresh model: Kaiming-uniform weights, zero biases, deterministic in `seed`.
  TaeModel(TaeConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    for (const auto& spec : layout()) {
      const std::size_t count = ad::numel(spec.shape);
      if (spec.fan_in == 0) {
        params_.add(spec.name, spec.shape, std::vector<T>(count, T{}));
      } else {
        params_.add(spec.name, spec.shape, ad::kaiming_uniform<T>(count, spec.fan_in, spec.slope, rng));
      }
    }
  }

  /// Model over existing parameters (e.g. a loaded checkpoint). Names and
  /// shapes must match the configuration's layout exactly.
  TaeModel(TaeConfig cfg, ad::ParameterStore<T> params) : cfg_(std::move(cfg)), params_(std::move(params)) {
    cfg_.validate();
    const auto specs = layout();
    if (specs.size() != params_.size()) {
      throw ad::CheckpointError("model: checkpoint holds " + std::to_string(params_.size()) + " parameters, configuration expects " +
                                std::to_string(specs.size()));
    }
    for (const auto& spec : specs) {
      if (!params_.contains(spec.name)) throw ad::CheckpointError("model: checkpoint lacks parameter '" + spec.name + "'");
      if (params_.get(spec.name).shape() != spec.shape) {
        throw ad::ShapeError("checkpoint parameter '" + spec.name + "'", params_.get(spec.name).shape(), spec.shape);
      }
    }
  }

  const TaeConfig& config() const { return cfg_; }
  ad::ParameterStore<T>& params() { return params_; }
  const ad::ParameterStore<T>& params() const { return params_; }

  /// [B, C, S, S] images -> [B, n, 3] latent points.
  ad::Tensor<T> encode(const ad::Tensor<T>& images) const {
    const std::size_t S = std::size_t(cfg_.image_size);
    if (images.rank() != 4 || images.dim(1) != std::size_t(cfg_.image_channels) || images.dim(2) != S || images.dim(3) != S) {
      throw ad::ShapeError("encode", images.shape(), {0, std::size_t(cfg_.image_channels), S, S}, "image does not match model size");
    }
    const std::size_t B = images.dim(0);
    ad::Tensor<T> x = images;
    for (std::size_t i = 0; i < cfg_.encoder_channels.size(); ++i) {
      const std::string p = "enc.conv" + std::to_string(i);
      x = ad::conv2d(x, param(p + ".w"), param(p + ".b"), {2, 1});
      x = ad::leaky_relu(x, T(cfg_.leaky_slope));
    }
    x = ad::reshape(x, {B, x.size() / B});
    x = ad::add(ad::matmul(x, param("enc.fc.w")), param("enc.fc.b"));
    return ad::reshape(x, {B, cfg_.n, 3});
  }

  /// Single image -> [n, 3].
  ad::Tensor<T> encode(const Image& image) const {
    return ad::reshape(encode(image_to_tensor<T>(image)), {cfg_.n, 3});
  }

  /// Flat code [B, code_size] -> raw decoder output [B, out_channels, S, S].
  ad::Tensor<T> decode_raw(const ad::Tensor<T>& code) const {
    if (code.rank() != 2 || code.dim(1) != cfg_.code_size()) {
      throw ad::ShapeError("decode", code.shape(), {0, cfg_.code_size()});
    }
    const std::size_t B = code.dim(0), s0 = cfg_.decoder_spatial();
    ad::Tensor<T> x = ad::add(ad::matmul(code, param("dec.fc.w")), param("dec.fc.b"));
    x = ad::leaky_relu(x, T(cfg_.leaky_slope));
    x = ad::reshape(x, {B, cfg_.decoder_channels[0], s0, s0});
    for (std::size_t i = 0; i < cfg_.decoder_channels.size(); ++i) {
      const std::string p = "dec.tconv" + std::to_string(i);
      x = ad::transposed_conv2d(x, param(p + ".w"), param(p + ".b"), {2, 1});
      if (i + 1 < cfg_.decoder_channels.size()) x = ad::leaky_relu(x, T(cfg_.leaky_slope));
    }
    return x;
  }

  /// Latent points [B, n, 3] -> depth [B, 1, S, S] in (d_min, d_max).
  ad::Tensor<T> decode_depth(const ad::Tensor<T>& z) const {
    if (cfg_.variant != Variant::full) throw std::logic_error("decode_depth: only the full variant decodes from points alone");
    return depth_from_raw(decode_raw(flatten_points(z)));
  }

  ad::Tensor<T> depth_from_raw(const ad::Tensor<T>& raw) const { return bounded_depth(raw, cfg_.d_min, cfg_.d_max); }

  /// Variant-dependent forward pass for a batch of source images and their
  /// source-to-target transforms. full / no_tae: depth [B, 1, S, S];
  /// no_depth: source-pixel coordinates [B, 2, S, S].
  ad::Tensor<T> forward(const ad::Tensor<T>& images, const std::vector<RigidTransform>& t_st) const {
    const ad::Tensor<T> z = encode(images);
    const std::size_t B = z.dim(0);
    if (t_st.size() != B) throw std::invalid_argument("forward: transform count does not match batch size");
    switch (cfg_.variant) {
      case Variant::full:
        return depth_from_raw(decode_raw(flatten_points(transform_latent(z, t_st))));
      case Variant::no_tae: {
        std::vector<T> feats;
        for (const auto& t : t_st)
          for (double f : view_features(t)) feats.push_back(T(f));
        ad::Tensor<T> view({B, kViewFeatureCount}, std::move(feats));
        return depth_from_raw(decode_raw(ad::concat<T>({flatten_points(z), view}, 1)));
      }
      case Variant::no_depth: {
        // The decoder sees the transformed points, like the full variant,
        // but emits correspondences directly instead of depth.
        const ad::Tensor<T> raw = decode_raw(flatten_points(transform_latent(z, t_st)));
        return ad::add(ad::affine(raw, T(cfg_.image_size / 2.0), T{0}), base_grid());
      }
    }
    throw std::logic_error("forward: unknown variant");
  }

 private:
  struct ParamSpec {
    std::string name;
    ad::Shape shape;
    std::size_t fan_in;  // 0 => zero init
    double slope;
  };

  std::vector<ParamSpec> layout() const {
    std::vector<ParamSpec> out;
    const double slope = cfg_.leaky_slope;
    std::size_t c_in = std::size_t(cfg_.image_channels);
    for (std::size_t i = 0; i < cfg_.encoder_channels.size(); ++i) {
      const std::size_t c = cfg_.encoder_channels[i];
      const std::string p = "enc.conv" + std::to_string(i);
      out.push_back({p + ".w", {c, c_in, 4, 4}, c_in * 16, slope});
      out.push_back({p + ".b", {c}, 0, 0});
      c_in = c;
    }
    const std::size_t flat = c_in * cfg_.encoder_spatial() * cfg_.encoder_spatial();
    out.push_back({"enc.fc.w", {flat, 3 * cfg_.n}, flat, 1.0});
    out.push_back({"enc.fc.b", {3 * cfg_.n}, 0, 0});
    const std::size_t s0 = cfg_.decoder_spatial();
    const std::size_t d0 = cfg_.decoder_channels[0] * s0 * s0;
    out.push_back({"dec.fc.w", {cfg_.code_size(), d0}, cfg_.code_size(), slope});
    out.push_back({"dec.fc.b", {d0}, 0, 0});
    for (std::size_t i = 0; i < cfg_.decoder_channels.size(); ++i) {
      const std::size_t ci = cfg_.decoder_channels[i];
      const bool last = i + 1 == cfg_.decoder_channels.size();
      const std::size_t co = last ? cfg_.output_channels() : cfg_.decoder_channels[i + 1];
      const std::string p = "dec.tconv" + std::to_string(i);
      // Each output of a stride-2, kernel-4 transposed conv sees 4 taps per input channel.
      out.push_back({p + ".w", {ci, co, 4, 4}, ci * 4, last ? 1.0 : slope});
      out.push_back({p + ".b", {co}, 0, 0});
    }
    return out;
  }

  const ad::Tensor<T>& param(const std::string& name) const { return params_.get(name); }

  ad::Tensor<T> flatten_points(const ad::Tensor<T>& z) const {
    if (z.rank() == 2) return ad::reshape(z, {1, z.size()});
    return ad::reshape(z, {z.dim(0), z.size() / z.dim(0)});
  }

  ad::Tensor<T> base_grid() const {
    const std::size_t S = std::size_t(cfg_.image_size);
    std::vector<T> g(2 * S * S);
    for (std::size_t y = 0; y < S; ++y)
      for (std::size_t x = 0; x < S; ++x) {
        g[y * S + x] = T(x);
        g[S * S + y * S + x] = T(y);
      }
    return ad::Tensor<T>({2, S, S}, std::move(g));
  }

  TaeConfig cfg_;
  ad::ParameterStore<T> params_;
};

// ---------------------------------------------------------------------------
// Persistence: checkpoint file plus "<checkpoint>.cfg" sidecar.

inline std::filesystem::path config_sidecar(const std::filesystem::path& checkpoint) {
  return std::filesystem::path(checkpoint.string() + ".cfg");
}

template <typename T>
void save_model(const std::filesystem::path& checkpoint, const TaeModel<T>& model) {
  ad::save_checkpoint(checkpoint, model.params());
  std::ofstream f(config_sidecar(checkpoint));
  if (!f) throw ad::CheckpointError("model: cannot write config sidecar for " + checkpoint.string());
  f << model.config().to_text();
  if (!f) throw ad::CheckpointError("model: config sidecar write failed for " + checkpoint.string());
}

template <typename T = float>
TaeModel<T> load_model(const std::filesystem::path& checkpoint) {
  if (!std::filesystem::exists(checkpoint)) throw ad::CheckpointError("model: checkpoint not found: " + checkpoint.string());
  const auto sidecar = config_sidecar(checkpoint);
  std::ifstream f(sidecar);
  if (!f) throw ad::CheckpointError("model: missing config sidecar " + sidecar.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return TaeModel<T>(TaeConfig::from_text(ss.str()), ad::load_checkpoint<T>(checkpoint));
}

}  // namespace nvs
