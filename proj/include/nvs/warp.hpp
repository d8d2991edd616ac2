#pragma once

// Depth-guided warping: predicted target depth -> backward correspondences
// -> bilinear sampling of the source image.

#include <cmath>
#include <stdexcept>
#include <vector>

#include "nvs/autodiff.hpp"
#include "nvs/geometry.hpp"
#include "nvs/image.hpp"
#include "nvs/tae.hpp"

namespace nvs {

/// Differentiable twin of depth_to_flow over a batch: depth [B, 1, H, W],
/// one target-to-source transform per batch entry -> coordinates
/// [B, 2, H, W] (x plane, then y plane). Points landing behind the source
/// camera get the behind-camera sentinel and zero gradient.
template <typename T>
ad::Tensor<T> depth_to_flow_diff(const ad::Tensor<T>& depth, const CameraIntrinsics& k,
                                 const std::vector<RigidTransform>& t_ts) {
  if (depth.rank() != 4 || depth.dim(1) != 1 || depth.dim(2) != std::size_t(k.height) || depth.dim(3) != std::size_t(k.width)) {
    throw ad::ShapeError("depth_to_flow_diff", depth.shape(), {0, 1, std::size_t(k.height), std::size_t(k.width)},
                         "depth does not match intrinsics");
  }
  const std::size_t B = depth.dim(0), H = depth.dim(2), W = depth.dim(3), HW = H * W;
  if (t_ts.size() != B) throw std::invalid_argument("depth_to_flow_diff: transform count does not match batch size");
  std::vector<T> v(B * 2 * HW);
  // d(coords)/d(depth) per pixel, kept for the backward pass.
  std::vector<double> jac(B * 2 * HW, 0.0);
  auto dv = depth.data();
  for (std::size_t b = 0; b < B; ++b) {
    const Mat3& r = t_ts[b].r;
    const Vec3& t = t_ts[b].t;
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const std::size_t i = y * W + x;
        const double d = dv[b * HW + i];
        const Vec3 ray((double(x) - k.cx) / k.fx, (double(y) - k.cy) / k.fy, 1.0);
        const Vec3 ra = r * ray;
        const Vec3 p = d * ra + t;
        T* ox = &v[(b * 2) * HW + i];
        T* oy = &v[(b * 2 + 1) * HW + i];
        if (!(p.z() > 0.0)) {
          *ox = T(kBehindCameraCoord);
          *oy = T(kBehindCameraCoord);
          continue;
        }
        double sx = k.fx * p.x() / p.z() + k.cx;
        double sy = k.fy * p.y() / p.z() + k.cy;
        snap_to_frame(k, sx, sy);
        *ox = T(sx);
        *oy = T(sy);
        const double z2 = p.z() * p.z();
        jac[(b * 2) * HW + i] = k.fx * (ra.x() * p.z() - p.x() * ra.z()) / z2;
        jac[(b * 2 + 1) * HW + i] = k.fy * (ra.y() * p.z() - p.y() * ra.z()) / z2;
      }
  }
  ad::Tensor<T> out({B, 2, H, W}, std::move(v));
  if (ad::needs_grad<T>({&depth})) {
    ad::record(out, [dn = depth.node(), jac = std::move(jac), B, HW](const std::vector<T>& g) {
      auto& gd = dn->grad_buffer();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < HW; ++i) {
          gd[b * HW + i] += T(jac[(b * 2) * HW + i] * g[(b * 2) * HW + i] + jac[(b * 2 + 1) * HW + i] * g[(b * 2 + 1) * HW + i]);
        }
    });
  }
  return out;
}

/// Copies a FlowField into a [1, 2, H, W] tensor.
template <typename T>
ad::Tensor<T> flow_to_tensor(const FlowField& f) {
  const std::size_t HW = std::size_t(f.width) * f.height;
  std::vector<T> v(2 * HW);
  for (std::size_t i = 0; i < HW; ++i) {
    v[i] = T(f.coords[2 * i]);
    v[HW + i] = T(f.coords[2 * i + 1]);
  }
  return ad::Tensor<T>({1, 2, std::size_t(f.height), std::size_t(f.width)}, std::move(v));
}

/// FlowField from entry `b` of a [B, 2, H, W] tensor; validity recomputed
/// from the frame bounds (behind-camera sentinels fall outside the frame).
template <typename T>
FlowField tensor_to_flow(const ad::Tensor<T>& t, std::size_t b = 0) {
  const int H = int(t.dim(2)), W = int(t.dim(3));
  const std::size_t HW = std::size_t(W) * H;
  FlowField f(W, H);
  auto d = t.data();
  for (std::size_t i = 0; i < HW; ++i) {
    const double x = d[(b * 2) * HW + i], y = d[(b * 2 + 1) * HW + i];
    f.coords[2 * i] = x;
    f.coords[2 * i + 1] = y;
    f.valid[i] = (x >= 0.0 && x <= W - 1 && y >= 0.0 && y <= H - 1) ? 1 : 0;
  }
  return f;
}

namespace detail {
/// Bilinear taps of one coordinate: cell origin and fractional offsets.
/// The containing cell is chosen by floor, which fixes the sub-gradient at
/// integer crossings.
struct Taps {
  long x0, y0;
  double fx, fy;
};
inline Taps taps(double x, double y) {
  const double fx0 = std::floor(x), fy0 = std::floor(y);
  return {long(fx0), long(fy0), x - fx0, y - fy0};
}
}  // namespace detail

/// Samples source [B, C, Hs, Ws] at coordinates flow [B, 2, H, W] with
/// tent-kernel (bilinear) weights; taps outside the source contribute zero.
/// Gradients flow to both the source intensities and the coordinates.
template <typename T>
ad::Tensor<T> bilinear_sample(const ad::Tensor<T>& source, const ad::Tensor<T>& flow) {
  if (source.rank() != 4 || flow.rank() != 4 || flow.dim(1) != 2 || flow.dim(0) != source.dim(0)) {
    throw ad::ShapeError("bilinear_sample", source.shape(), flow.shape());
  }
  const std::size_t B = source.dim(0), C = source.dim(1), Hs = source.dim(2), Ws = source.dim(3);
  const std::size_t H = flow.dim(2), W = flow.dim(3), HW = H * W;
  auto sv = source.data();
  auto fv = flow.data();
  std::vector<T> v(B * C * HW, T{});
  auto src_at = [&](std::size_t b, std::size_t c, long x, long y) -> T {
    if (x < 0 || y < 0 || x >= long(Ws) || y >= long(Hs)) return T{};
    return sv[((b * C + c) * Hs + std::size_t(y)) * Ws + std::size_t(x)];
  };
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < HW; ++i) {
      const double x = fv[(b * 2) * HW + i], y = fv[(b * 2 + 1) * HW + i];
      if (!std::isfinite(x) || !std::isfinite(y)) throw std::invalid_argument("bilinear_sample: non-finite coordinate");
      const auto tp = detail::taps(x, y);
      const T w00 = T((1 - tp.fx) * (1 - tp.fy)), w10 = T(tp.fx * (1 - tp.fy));
      const T w01 = T((1 - tp.fx) * tp.fy), w11 = T(tp.fx * tp.fy);
      for (std::size_t c = 0; c < C; ++c) {
        v[(b * C + c) * HW + i] = w00 * src_at(b, c, tp.x0, tp.y0) + w10 * src_at(b, c, tp.x0 + 1, tp.y0) +
                                  w01 * src_at(b, c, tp.x0, tp.y0 + 1) + w11 * src_at(b, c, tp.x0 + 1, tp.y0 + 1);
      }
    }
  ad::Tensor<T> out({B, C, H, W}, std::move(v));
  if (ad::needs_grad<T>({&source, &flow})) {
    ad::record(out, [sn = source.node(), fn = flow.node(), B, C, Hs, Ws, HW](const std::vector<T>& g) {
      const auto& sval = sn->value;
      const auto& fval = fn->value;
      T* gs = sn->requires_grad ? sn->grad_buffer().data() : nullptr;
      T* gf = fn->requires_grad ? fn->grad_buffer().data() : nullptr;
      auto inside = [&](long x, long y) { return x >= 0 && y >= 0 && x < long(Ws) && y < long(Hs); };
      auto idx = [&](std::size_t b, std::size_t c, long x, long y) {
        return ((b * C + c) * Hs + std::size_t(y)) * Ws + std::size_t(x);
      };
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < HW; ++i) {
          const auto tp = detail::taps(fval[(b * 2) * HW + i], fval[(b * 2 + 1) * HW + i]);
          const long xs[2] = {tp.x0, tp.x0 + 1}, ys[2] = {tp.y0, tp.y0 + 1};
          const double wx[2] = {1 - tp.fx, tp.fx}, wy[2] = {1 - tp.fy, tp.fy};
          double gx = 0.0, gy = 0.0;
          for (std::size_t c = 0; c < C; ++c) {
            const double go = g[(b * C + c) * HW + i];
            if (go == 0.0) continue;
            for (int jy = 0; jy < 2; ++jy)
              for (int jx = 0; jx < 2; ++jx) {
                if (!inside(xs[jx], ys[jy])) continue;
                const std::size_t k = idx(b, c, xs[jx], ys[jy]);
                if (gs) gs[k] += T(go * wx[jx] * wy[jy]);
                const double s = sval[k];
                // d w / d x is -wy for the left column, +wy for the right.
                gx += go * s * (jx ? 1.0 : -1.0) * wy[jy];
                gy += go * s * (jy ? 1.0 : -1.0) * wx[jx];
              }
          }
          if (gf) {
            gf[(b * 2) * HW + i] += T(gx);
            gf[(b * 2 + 1) * HW + i] += T(gy);
          }
        }
    });
  }
  return out;
}

/// Non-differentiable bilinear warp of an Image (inference, oracle mode).
/// Same arithmetic as bilinear_sample.
inline Image warp_image(const Image& source, const FlowField& flow) {
  Image out(flow.width, flow.height, source.channels);
  auto src_at = [&](long x, long y, int c) -> float {
    if (x < 0 || y < 0 || x >= source.width || y >= source.height) return 0.0f;
    return source.at(int(x), int(y), c);
  };
  for (int y = 0; y < flow.height; ++y)
    for (int x = 0; x < flow.width; ++x) {
      const auto tp = detail::taps(flow.x(x, y), flow.y(x, y));
      const float w00 = float((1 - tp.fx) * (1 - tp.fy)), w10 = float(tp.fx * (1 - tp.fy));
      const float w01 = float((1 - tp.fx) * tp.fy), w11 = float(tp.fx * tp.fy);
      for (int c = 0; c < source.channels; ++c) {
        out.at(x, y, c) = w00 * src_at(tp.x0, tp.y0, c) + w10 * src_at(tp.x0 + 1, tp.y0, c) +
                          w01 * src_at(tp.x0, tp.y0 + 1, c) + w11 * src_at(tp.x0 + 1, tp.y0 + 1, c);
      }
    }
  return out;
}

/// Geometry-only synthesis from a known target-view depth map.
inline Image synthesize_oracle(const Image& source, const DepthMap& target_depth, const RigidTransform& t_st,
                               const CameraIntrinsics& k) {
  if (source.width != k.width || source.height != k.height) {
    throw std::invalid_argument("synthesize_oracle: source image does not match intrinsics");
  }
  return warp_image(source, depth_to_flow(target_depth, k, invert(t_st)));
}

/// Output of the batched pipeline. `depth` is undefined for the no_depth variant.
template <typename T>
struct RenderBatch {
  ad::Tensor<T> image;  // [B, C, H, W]
  ad::Tensor<T> depth;  // [B, 1, H, W]
  ad::Tensor<T> flow;   // [B, 2, H, W]
};

/// Turns a model prediction (depth, or flow for no_depth) into the warped batch.
template <typename T>
RenderBatch<T> render_prediction(const TaeConfig& cfg, const ad::Tensor<T>& sources, const ad::Tensor<T>& pred,
                                 const std::vector<RigidTransform>& t_st, const CameraIntrinsics& k) {
  RenderBatch<T> out;
  if (cfg.variant == Variant::no_depth) {
    out.flow = pred;
  } else {
    out.depth = pred;
    std::vector<RigidTransform> t_ts;
    for (const auto& t : t_st) t_ts.push_back(invert(t));
    out.flow = depth_to_flow_diff(pred, k, t_ts);
  }
  out.image = bilinear_sample(sources, out.flow);
  return out;
}

/// Full mapping on a batch: encode, transform, decode, project, sample.
template <typename T>
RenderBatch<T> render_batch(const TaeModel<T>& model, const ad::Tensor<T>& sources, const std::vector<RigidTransform>& t_st,
                            const CameraIntrinsics& k) {
  if (k.width != model.config().image_size || k.height != model.config().image_size) {
    throw std::invalid_argument("render: intrinsics size does not match model image_size");
  }
  return render_prediction(model.config(), sources, model.forward(sources, t_st), t_st, k);
}

struct Synthesis {
  Image image;
  DepthMap depth;  // empty for the no_depth variant
  FlowField flow;
};

/// Single-image synthesis for a source-to-target transform.
template <typename T>
Synthesis synthesize(const TaeModel<T>& model, const Image& source, const RigidTransform& t_st, const CameraIntrinsics& k) {
  const auto batch = render_batch(model, image_to_tensor<T>(source), {t_st}, k);
  Synthesis s;
  s.image = tensor_to_image(batch.image);
  if (batch.depth.defined()) {
    s.depth = DepthMap(k.width, k.height);
    auto d = batch.depth.data();
    for (std::size_t i = 0; i < s.depth.values.size(); ++i) s.depth.values[i] = double(d[i]);
  }
  s.flow = tensor_to_flow(batch.flow);
  return s;
}

}  // namespace nvs
