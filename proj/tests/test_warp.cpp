#include <gtest/gtest.h>

#include <random>

#include "nvs/metrics.hpp"
#include "nvs/scenes.hpp"
#include "nvs/warp.hpp"

using namespace nvs;
using ad::Tensor;

namespace {

RigidTransform small_motion(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> a(-0.2, 0.2), t(-0.3, 0.3);
  return {rot_z(a(rng)) * rot_y(a(rng)) * rot_x(a(rng)), Vec3(t(rng), t(rng), t(rng))};
}

DepthMap random_depth(int w, int h, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(1.0, 5.0);
  DepthMap d(w, h);
  for (auto& v : d.values) v = u(rng);
  return d;
}

template <typename T>
Tensor<T> depth_tensor(const DepthMap& d) {
  std::vector<T> v(d.values.begin(), d.values.end());
  return Tensor<T>({1, 1, std::size_t(d.height), std::size_t(d.width)}, v);
}

Image random_image(int w, int h, int c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Image im(w, h, c);
  for (auto& v : im.data) v = u(rng);
  return im;
}

TaeConfig small_config() {
  TaeConfig c;
  c.n = 16;
  c.image_size = 16;
  c.encoder_channels = {8, 8};
  c.decoder_channels = {8, 8};
  return c;
}

scenes::SceneSpec textured_plane_scene(double depth) {
  scenes::SceneSpec s;
  s.seed = 77;
  scenes::Primitive p;
  p.kind = scenes::PrimitiveKind::plane;
  p.pose = RigidTransform::translation(Vec3(0, 0, depth));
  p.size = Vec3(10, 10, 0);
  p.texture.kind = scenes::TextureKind::checker;
  p.texture.color_a = {0.1f, 0.4f, 0.8f};
  p.texture.color_b = {0.9f, 0.6f, 0.2f};
  p.texture.frequency = 3.0;
  s.primitives.push_back(p);
  return s;
}

}  // namespace

TEST(DepthToFlowDiff, IdentityGivesPixelGridAndZeroGradient) {
  const auto k = CameraIntrinsics::centered(8);
  std::mt19937_64 rng(1);
  const auto d = random_depth(8, 8, rng);
  ad::Tape tape;
  auto depth = Tensor<double>::parameter({1, 1, 8, 8}, d.values);
  const auto flow = depth_to_flow_diff(depth, k, {RigidTransform::identity()});
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      EXPECT_NEAR(flow[std::size_t(y * 8 + x)], x, 1e-12);
      EXPECT_NEAR(flow[std::size_t(64 + y * 8 + x)], y, 1e-12);
    }
  tape.backward(ad::mean(flow));
  for (double g : depth.grad()) EXPECT_NEAR(g, 0.0, 1e-12);
}

TEST(DepthToFlowDiff, MatchesGeometryOracleInDouble) {
  const auto k = CameraIntrinsics::centered(24);
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const auto d = random_depth(24, 24, rng);
    const auto t = small_motion(rng);
    const auto oracle = depth_to_flow(d, k, t);
    const auto flow = tensor_to_flow(depth_to_flow_diff(depth_tensor<double>(d), k, {t}));
    for (std::size_t i = 0; i < oracle.coords.size(); ++i) ASSERT_NEAR(flow.coords[i], oracle.coords[i], 1e-6);
  }
}

TEST(DepthToFlowDiff, FloatInstantiationTracksOracle) {
  const auto k = CameraIntrinsics::centered(64);
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const auto d = random_depth(64, 64, rng);
    const auto t = small_motion(rng);
    const auto oracle = depth_to_flow(d, k, t);
    const auto flow = tensor_to_flow(depth_to_flow_diff(depth_tensor<float>(d), k, {t}));
    for (std::size_t i = 0; i < oracle.coords.size(); ++i) ASSERT_NEAR(flow.coords[i], oracle.coords[i], 1e-4);
  }
}

TEST(DepthToFlowDiff, BehindCameraGetsSentinelAndNoGradient) {
  const auto k = CameraIntrinsics::centered(4);
  ad::Tape tape;
  auto depth = Tensor<double>::parameter({1, 1, 4, 4}, std::vector<double>(16, 2.0));
  const auto flow = depth_to_flow_diff(depth, k, {RigidTransform::translation(Vec3(0, 0, -10))});
  for (double v : flow.data()) EXPECT_EQ(v, kBehindCameraCoord);
  tape.backward(ad::mean(flow));
  for (double g : depth.grad()) EXPECT_EQ(g, 0.0);
}

TEST(DepthToFlowDiff, GradientMatchesFiniteDifferences) {
  const auto k = CameraIntrinsics::centered(5);
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    const auto t = small_motion(rng);
    std::vector<double> w(50);
    std::uniform_real_distribution<double> u(-1, 1);
    for (auto& x : w) x = u(rng);
    const Tensor<double> weights({1, 2, 5, 5}, w);
    const double err = ad::gradcheck(
        [&](const Tensor<double>& d) { return ad::mean(ad::mul(depth_to_flow_diff(d, k, {t}), weights)); },
        depth_tensor<double>(random_depth(5, 5, rng)), 1e-4);
    EXPECT_LT(err, 1e-4);
  }
}

TEST(DepthToFlowDiff, RejectsMismatchedInputs) {
  const auto k = CameraIntrinsics::centered(4);
  EXPECT_THROW(depth_to_flow_diff(Tensor<double>({1, 1, 4, 5}), k, {RigidTransform::identity()}), ad::ShapeError);
  EXPECT_THROW(depth_to_flow_diff(Tensor<double>({2, 1, 4, 4}), k, {RigidTransform::identity()}), std::invalid_argument);
}

TEST(BilinearSample, IdentityFlowReproducesSource) {
  const Image src = random_image(6, 5, 3, 1);
  FlowField f(6, 5);
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 6; ++x) {
      f.coords[2 * std::size_t(y * 6 + x)] = x;
      f.coords[2 * std::size_t(y * 6 + x) + 1] = y;
    }
  const auto out = bilinear_sample(image_to_tensor<float>(src), flow_to_tensor<float>(f));
  EXPECT_EQ(tensor_to_image(out).data, src.data);
  EXPECT_EQ(warp_image(src, f).data, src.data);
}

TEST(BilinearSample, HandExamples) {
  const Tensor<double> src({1, 1, 2, 2}, {0, 1, 2, 3});
  const auto centre = bilinear_sample(src, Tensor<double>({1, 2, 1, 1}, {0.5, 0.5}));
  EXPECT_DOUBLE_EQ(centre[0], 1.5);
  const auto outside = bilinear_sample(src, Tensor<double>({1, 2, 1, 1}, {-5, -5}));
  EXPECT_EQ(outside[0], 0.0);
  // Half a pixel beyond the right border blends with zero padding.
  const auto edge = bilinear_sample(src, Tensor<double>({1, 2, 1, 1}, {1.5, 0.0}));
  EXPECT_DOUBLE_EQ(edge[0], 0.5);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(bilinear_sample(src, Tensor<double>({1, 2, 1, 1}, {nan, 0.0})), std::invalid_argument);
}

TEST(BilinearSample, GradientsForImageAndFlow) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 1), frac(0.1, 0.9);
  std::vector<double> s(2 * 4 * 4), f(2 * 3 * 3);
  for (auto& v : s) v = u(rng);
  // Coordinates stay away from integer positions, where bilinear sampling has kinks.
  for (auto& v : f) v = double(std::uniform_int_distribution<int>(-1, 3)(rng)) + frac(rng);
  const Tensor<double> source({1, 2, 4, 4}, s), flow({1, 2, 3, 3}, f);
  std::vector<double> w(2 * 3 * 3);
  for (auto& v : w) v = u(rng) - 0.5;
  const Tensor<double> weights({1, 2, 3, 3}, w);
  EXPECT_LT(ad::gradcheck([&](const Tensor<double>& x) { return ad::mean(ad::mul(bilinear_sample(x, flow), weights)); }, source, 1e-4),
            1e-4);
  EXPECT_LT(ad::gradcheck([&](const Tensor<double>& x) { return ad::mean(ad::mul(bilinear_sample(source, x), weights)); }, flow, 1e-4),
            1e-4);
}

TEST(SynthesizeOracle, IdentityTransformReturnsSource) {
  const auto k = CameraIntrinsics::centered(16);
  const Image src = random_image(16, 16, 3, 2);
  std::mt19937_64 rng(6);
  const Image out = synthesize_oracle(src, random_depth(16, 16, rng), RigidTransform::identity(), k);
  EXPECT_EQ(out.data, src.data);
}

TEST(SynthesizeOracle, LinearInSourceAppearance) {
  const auto k = CameraIntrinsics::centered(16);
  const Image src = random_image(16, 16, 3, 3);
  std::mt19937_64 rng(7);
  const auto d = random_depth(16, 16, rng);
  const auto t = small_motion(rng);
  const Image base = synthesize_oracle(src, d, t, k);
  for (float s : {2.0f, 0.3f, 1.7f}) {
    Image scaled = src;
    for (auto& v : scaled.data) v *= s;
    const Image out = synthesize_oracle(scaled, d, t, k);
    for (std::size_t i = 0; i < out.data.size(); ++i) {
      if (s == 2.0f) {
        ASSERT_EQ(out.data[i], 2.0f * base.data[i]);
      } else {
        ASSERT_NEAR(out.data[i], s * base.data[i], 1e-6);
      }
    }
  }
}

TEST(SynthesizeOracle, FrontoParallelPlaneWithIntegerDisparity) {
  // Plane at depth 2, fx 50, baseline 0.08 -> disparity exactly 2 px.
  const CameraIntrinsics k{50, 50, 31.5, 31.5, 64, 64};
  const auto spec = textured_plane_scene(2.0);
  const auto source = scenes::raycast(spec, RigidTransform::identity(), k);
  const auto target = scenes::raycast(spec, RigidTransform::translation(Vec3(0.08, 0, 0)), k);
  const auto t_st = invert(relative_target_to_source(source.pose, target.pose));
  const Image out = synthesize_oracle(source.image, target.depth, t_st, k);
  double sum = 0.0;
  int count = 0;
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 62; ++x)
      for (int c = 0; c < 3; ++c) {
        sum += std::abs(out.at(x, y, c) - target.image.at(x, y, c));
        ++count;
      }
  EXPECT_LT(sum / count, 1e-3);
}

TEST(SynthesizeOracle, SmallOrbitOfTexturedSphere) {
  scenes::SceneSpec spec;
  spec.seed = 5;
  scenes::Primitive p;
  p.kind = scenes::PrimitiveKind::sphere;
  p.size = Vec3(1, 1, 1);
  p.texture.kind = scenes::TextureKind::checker;
  p.texture.color_a = {0.2f, 0.3f, 0.8f};
  p.texture.color_b = {0.9f, 0.7f, 0.1f};
  p.texture.frequency = 4.0;
  spec.primitives.push_back(p);
  const auto k = CameraIntrinsics::centered(64);
  const auto source = scenes::raycast(spec, scenes::orbit_pose(0, 0, 3), k);
  const auto target = scenes::raycast(spec, scenes::orbit_pose(5, 0, 3), k);
  const auto t_st = invert(relative_target_to_source(source.pose, target.pose));
  const Image out = synthesize_oracle(source.image, target.depth, t_st, k);
  const auto mask = scenes::visibility_mask(source, target, spec.d_max);
  const auto l1 = metrics::l1_masked(out, target.image, mask);
  ASSERT_TRUE(l1.has_value());
  EXPECT_LT(*l1, 0.02);
}

TEST(Synthesize, UntrainedModelOutputsAreFinite) {
  const TaeModel<float> model(small_config(), 1);
  const auto k = CameraIntrinsics::centered(16);
  const auto s = synthesize(model, random_image(16, 16, 3, 4), RigidTransform{rot_y(0.3), Vec3(0.2, 0, 0)}, k);
  ASSERT_EQ(s.image.width, 16);
  for (float v : s.image.data) EXPECT_TRUE(std::isfinite(v));
  for (double v : s.depth.values) EXPECT_TRUE(v > 0.5 && v < 6.0);
  for (double v : s.flow.coords) EXPECT_TRUE(std::isfinite(v));
}

TEST(Synthesize, EqualsCompositionOfStages) {
  const TaeModel<float> model(small_config(), 2);
  const auto k = CameraIntrinsics::centered(16);
  const Image src = random_image(16, 16, 3, 5);
  const RigidTransform t_st{rot_y(-0.25) * rot_x(0.1), Vec3(0.1, -0.05, 0.2)};
  const auto s = synthesize(model, src, t_st, k);

  const auto z = transform_latent(model.encode(image_to_tensor<float>(src)), {t_st});
  const auto depth_t = model.decode_depth(z);
  DepthMap depth(16, 16);
  for (std::size_t i = 0; i < depth.values.size(); ++i) depth.values[i] = depth_t[i];
  const Image staged = warp_image(src, depth_to_flow(depth, k, invert(t_st)));
  for (std::size_t i = 0; i < depth.values.size(); ++i) EXPECT_EQ(s.depth.values[i], depth.values[i]);
  for (std::size_t i = 0; i < staged.data.size(); ++i) EXPECT_NEAR(s.image.data[i], staged.data[i], 1e-4);
}

TEST(Synthesize, EndToEndGradientOnDecoderParameters) {
  TaeModel<double> model(small_config(), 3);
  const auto k = CameraIntrinsics::centered(16);
  const Image src = random_image(16, 16, 3, 6), tgt = random_image(16, 16, 3, 7);
  const auto src_t = image_to_tensor<double>(src), tgt_t = image_to_tensor<double>(tgt);
  const RigidTransform t_st{rot_y(0.2), Vec3(0.1, 0, 0)};

  std::mt19937_64 rng(8);
  std::vector<ad::ParamCoordinate> coords;
  std::vector<std::string> names;
  for (const auto& name : model.params().names())
    if (name.rfind("dec.", 0) == 0) names.push_back(name);
  std::uniform_int_distribution<std::size_t> pick(0, names.size() - 1);
  for (int i = 0; i < 50; ++i) {
    auto& t = model.params().get(names[pick(rng)]);
    coords.push_back({t, std::uniform_int_distribution<std::size_t>(0, t.size() - 1)(rng)});
  }
  const double err = ad::gradcheck_coordinates(
      [&] { return ad::l1_loss(render_batch(model, src_t, {t_st}, k).image, tgt_t); }, coords, 1e-4);
  EXPECT_LT(err, 1e-3);
}
