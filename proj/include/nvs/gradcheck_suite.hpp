#pragma once

// Finite-difference verification of every differentiable operation, the
// geometric warp stages and the end-to-end synthesis loss. Shared by the
// `gradcheck` subcommand and the acceptance run.

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "nvs/autodiff.hpp"
#include "nvs/tae.hpp"
#include "nvs/warp.hpp"

namespace nvs {

struct OpCheck {
  std::string op;
  double max_rel_error = 0.0;
};

inline constexpr double kGradcheckTolerance = 1e-3;

/// Runs each check `trials` times at random points away from kinks and
/// reports the worst relative error per op.
inline std::vector<OpCheck> run_gradcheck_suite(std::uint64_t seed = 2024, int trials = 3, double eps = 1e-4) {
  using TD = ad::Tensor<double>;
  using namespace ad;
  std::mt19937_64 rng(seed);
  auto rand = [&](Shape shape, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = u(rng);
    return TD(shape, std::move(v));
  };
  std::vector<OpCheck> out;
  auto check = [&](const std::string& op, const std::function<TD(const TD&)>& f, const std::function<TD()>& point) {
    double worst = 0.0;
    for (int t = 0; t < trials; ++t) worst = std::max(worst, gradcheck(f, point(), eps));
    out.push_back({op, worst});
  };

  {
    const auto other = rand({3, 4}), bias = rand({4});
    check("add", [&](const TD& x) { return mean(sigmoid(add(add(x, other), bias))); }, [&] { return rand({3, 4}); });
    check("sub", [&](const TD& x) { return mean(sigmoid(sub(other, x))); }, [&] { return rand({3, 4}); });
    check("mul", [&](const TD& x) { return mean(sigmoid(mul(x, other))); }, [&] { return rand({3, 4}); });
  }
  check("affine", [&](const TD& x) { return mean(sigmoid(affine(x, 2.5, -0.3))); }, [&] { return rand({6}); });
  {
    const auto b = rand({4, 3});
    check("matmul", [&](const TD& x) { return mean(sigmoid(matmul(x, b))); }, [&] { return rand({2, 4}); });
  }
  {
    const auto w = rand({3, 2, 4, 4}), x0 = rand({2, 2, 6, 6}), b = rand({3});
    check("conv2d.input", [&](const TD& x) { return mean(sigmoid(conv2d(x, w, b, {2, 1}))); }, [&] { return rand({2, 2, 6, 6}); });
    check("conv2d.weight", [&](const TD& x) { return mean(sigmoid(conv2d(x0, x, b, {2, 1}))); }, [&] { return rand({3, 2, 4, 4}); });
    check("conv2d.bias", [&](const TD& x) { return mean(sigmoid(conv2d(x0, w, x, {2, 1}))); }, [&] { return rand({3}); });
  }
  {
    const auto w = rand({2, 3, 4, 4}), x0 = rand({2, 2, 3, 3}), b = rand({3});
    check("transposed_conv2d.input", [&](const TD& x) { return mean(sigmoid(transposed_conv2d(x, w, b, {2, 1}))); },
          [&] { return rand({2, 2, 3, 3}); });
    check("transposed_conv2d.weight", [&](const TD& x) { return mean(sigmoid(transposed_conv2d(x0, x, b, {2, 1}))); },
          [&] { return rand({2, 3, 4, 4}); });
    check("transposed_conv2d.bias", [&](const TD& x) { return mean(sigmoid(transposed_conv2d(x0, w, x, {2, 1}))); },
          [&] { return rand({3}); });
  }
  {
    const auto w = rand({7});
    // Points stay at least 0.05 from the kink at zero.
    check("leaky_relu", [&](const TD& x) { return mean(mul(leaky_relu(x, 0.2), w)); }, [&] {
      auto x = rand({7}, 0.05, 1.0);
      auto d = x.data_mut();
      for (std::size_t i = 0; i < d.size(); i += 2) d[i] = -d[i];
      return x;
    });
  }
  check("sigmoid", [&](const TD& x) { return mean(sigmoid(x)); }, [&] { return rand({9}); });
  {
    const auto other = rand({2, 3}), w = rand({2, 7});
    const auto w24 = rand({2, 4});
    check("reshape", [&](const TD& x) { return mean(mul(sigmoid(reshape(x, {2, 4})), w24)); }, [&] { return rand({8}); });
    check("concat", [&](const TD& x) { return mean(mul(concat<double>({reshape(x, {2, 4}), other}, 1), sigmoid(w))); },
          [&] { return rand({8}); });
  }
  check("mean", [&](const TD& x) { return mean(x); }, [&] { return rand({10}); });
  {
    const auto far = rand({10}, 3.0, 4.0);  // |x - target| stays away from zero
    check("l1_loss", [&](const TD& x) { return l1_loss(x, far); }, [&] { return rand({10}); });
  }
  {
    std::uniform_real_distribution<double> a(-3.0, 3.0), t(-1.0, 1.0);
    const RigidTransform motion{rot_z(a(rng)) * rot_y(a(rng)) * rot_x(a(rng)), Vec3(t(rng), t(rng), t(rng))};
    const auto w = rand({12, 3});
    check("transform_latent", [&](const TD& z) { return mean(mul(transform_latent(z, motion), w)); },
          [&] { return rand({12, 3}); });
  }
  {
    const auto k = CameraIntrinsics::centered(5);
    std::uniform_real_distribution<double> a(-0.2, 0.2), t(-0.3, 0.3);
    const RigidTransform motion{rot_z(a(rng)) * rot_y(a(rng)) * rot_x(a(rng)), Vec3(t(rng), t(rng), t(rng))};
    const auto w = rand({1, 2, 5, 5});
    check("depth_to_flow_diff", [&](const TD& d) { return mean(mul(depth_to_flow_diff(d, k, {motion}), w)); },
          [&] { return rand({1, 1, 5, 5}, 1.0, 5.0); });
  }
  {
    // Sampling coordinates stay away from integer positions (kinks).
    auto coords = [&] {
      std::uniform_int_distribution<int> cell(-1, 3);
      std::uniform_real_distribution<double> frac(0.1, 0.9);
      std::vector<double> f(2 * 3 * 3);
      for (auto& v : f) v = double(cell(rng)) + frac(rng);
      return TD({1, 2, 3, 3}, std::move(f));
    };
    const auto source = rand({1, 2, 4, 4}, 0.0, 1.0);
    const auto flow = coords();
    const auto w = rand({1, 2, 3, 3});
    check("bilinear_sample.image", [&](const TD& x) { return mean(mul(bilinear_sample(x, flow), w)); },
          [&] { return rand({1, 2, 4, 4}, 0.0, 1.0); });
    check("bilinear_sample.flow", [&](const TD& x) { return mean(mul(bilinear_sample(source, x), w)); }, coords);
  }
  {
    // End-to-end L1 synthesis loss with respect to encoder and decoder
    // parameters of a small model.
    TaeConfig cfg;
    cfg.n = 16;
    cfg.image_size = 16;
    cfg.encoder_channels = {8, 8};
    cfg.decoder_channels = {8, 8};
    const auto k = CameraIntrinsics::centered(16);
    double worst = 0.0;
    for (int t = 0; t < trials; ++t) {
      TaeModel<double> model(cfg, seed + std::uint64_t(t));
      const auto src = rand({1, 3, 16, 16}, 0.0, 1.0), tgt = rand({1, 3, 16, 16}, 0.0, 1.0);
      const RigidTransform t_st{rot_y(0.2) * rot_x(-0.05), Vec3(0.1, 0, 0.05)};
      std::vector<ad::ParamCoordinate> coords;
      const auto names = model.params().names();
      std::uniform_int_distribution<std::size_t> pick(0, names.size() - 1);
      for (int i = 0; i < 40; ++i) {
        auto& p = model.params().get(names[pick(rng)]);
        coords.push_back({p, std::uniform_int_distribution<std::size_t>(0, p.size() - 1)(rng)});
      }
      worst = std::max(worst, gradcheck_coordinates(
                                  [&] { return l1_loss(render_batch(model, src, {t_st}, k).image, tgt); }, coords, eps));
    }
    out.push_back({"end_to_end_loss", worst});
  }
  return out;
}

}  // namespace nvs
