#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "nvs/geometry.hpp"
#include "nvs/io.hpp"

using namespace nvs;

namespace {

CameraIntrinsics test_camera() { return {100.0, 100.0, 64.0, 64.0, 128, 128}; }

RigidTransform random_transform(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> angle(-kPi, kPi);
  std::uniform_real_distribution<double> trans(-2.0, 2.0);
  RigidTransform t;
  t.r = rot_z(angle(rng)) * rot_y(angle(rng)) * rot_x(angle(rng));
  t.t = Vec3(trans(rng), trans(rng), trans(rng));
  return t;
}

}  // namespace

TEST(Compose, IdentityWithIdentity) {
  EXPECT_TRUE(compose(RigidTransform::identity(), RigidTransform::identity()).approx_equal(RigidTransform::identity(), 0.0));
}

TEST(Compose, WithInverseIsIdentity) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 100; ++i) {
    const auto t = random_transform(rng);
    EXPECT_TRUE(compose(t, invert(t)).approx_equal(RigidTransform::identity(), 1e-6));
  }
}

TEST(Compose, PlanarRotationsAdd) {
  const RigidTransform a{rot_z(deg2rad(30)), Vec3::Zero()};
  const RigidTransform b{rot_z(deg2rad(60)), Vec3::Zero()};
  const RigidTransform c{rot_z(deg2rad(90)), Vec3::Zero()};
  EXPECT_TRUE(compose(a, b).approx_equal(c, 1e-12));
}

TEST(Compose, AppliesRightOperandFirst) {
  const RigidTransform a = RigidTransform::translation(Vec3(1, 0, 0));
  const RigidTransform b{rot_z(deg2rad(90)), Vec3::Zero()};
  const Vec3 p = compose(a, b).apply(Vec3(1, 0, 0));
  EXPECT_NEAR((p - Vec3(1, 1, 0)).norm(), 0.0, 1e-12);
}

TEST(Compose, IsAssociative) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 200; ++i) {
    const auto a = random_transform(rng), b = random_transform(rng), c = random_transform(rng);
    EXPECT_TRUE(compose(compose(a, b), c).approx_equal(compose(a, compose(b, c)), 1e-6));
    EXPECT_TRUE(compose(a, b).is_valid());
  }
}

TEST(Invert, Cases) {
  EXPECT_TRUE(invert(RigidTransform::identity()).approx_equal(RigidTransform::identity(), 0.0));
  const auto inv = invert(RigidTransform::translation(Vec3(1, 2, 3)));
  EXPECT_TRUE(inv.approx_equal(RigidTransform::translation(Vec3(-1, -2, -3)), 0.0));
  std::mt19937_64 rng(3);
  for (int i = 0; i < 100; ++i) {
    const auto t = random_transform(rng);
    EXPECT_TRUE(invert(invert(t)).approx_equal(t, 1e-6));
  }
}

TEST(RigidTransformValidity, RejectsNonRotations) {
  RigidTransform t;
  t.r(0, 0) = 2.0;
  EXPECT_FALSE(t.is_valid());
  RigidTransform reflect;
  reflect.r(2, 2) = -1.0;
  EXPECT_FALSE(reflect.is_valid());
  EXPECT_THROW(reflect.validate(), std::invalid_argument);
}

TEST(Unproject, HandEvaluatedValues) {
  const auto k = test_camera();
  const Vec3 a = unproject(k, {64, 64}, 2.0);
  EXPECT_DOUBLE_EQ(a.x(), 0.0);
  EXPECT_DOUBLE_EQ(a.y(), 0.0);
  EXPECT_DOUBLE_EQ(a.z(), 2.0);
  const Vec3 b = unproject(k, {84, 64}, 2.0);
  EXPECT_NEAR(b.x(), 0.4, 1e-12);
  EXPECT_DOUBLE_EQ(b.y(), 0.0);
  EXPECT_DOUBLE_EQ(b.z(), 2.0);
  const Vec3 c = unproject(k, {64, 84}, 1.0);
  EXPECT_DOUBLE_EQ(c.x(), 0.0);
  EXPECT_NEAR(c.y(), 0.2, 1e-12);
  EXPECT_DOUBLE_EQ(c.z(), 1.0);
}

TEST(Unproject, RejectsNonPositiveDepth) {
  EXPECT_THROW(unproject(test_camera(), {1, 1}, 0.0), std::invalid_argument);
  EXPECT_THROW(unproject(test_camera(), {1, 1}, -1.0), std::invalid_argument);
}

TEST(Project, HandEvaluatedValues) {
  const auto k = test_camera();
  const auto a = project(k, Vec3(0, 0, 2));
  EXPECT_DOUBLE_EQ(a.x, 64.0);
  EXPECT_DOUBLE_EQ(a.y, 64.0);
  EXPECT_DOUBLE_EQ(a.z, 2.0);
  const auto b = project(k, Vec3(0.5, 0, 2));
  EXPECT_DOUBLE_EQ(b.x, 89.0);
  EXPECT_DOUBLE_EQ(b.y, 64.0);
  const auto c = project(k, Vec3(0, 0, -1));
  EXPECT_DOUBLE_EQ(c.z, -1.0);
  EXPECT_FALSE(c.in_front());
}

TEST(Project, RoundTripsUnproject) {
  const auto k = test_camera();
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> px(0.0, 127.0), depth(0.1, 50.0);
  for (int i = 0; i < 1000; ++i) {
    const Pixel p{px(rng), px(rng)};
    const double d = depth(rng);
    const auto q = project(k, unproject(k, p, d));
    EXPECT_NEAR(q.x, p.x, 1e-6);
    EXPECT_NEAR(q.y, p.y, 1e-6);
    EXPECT_EQ(q.z, d);
  }
}

TEST(DepthToFlow, IdentityTransformIsIdentityCorrespondence) {
  const auto k = test_camera();
  DepthMap d(128, 128);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> depth(0.5, 6.0);
  for (auto& v : d.values) v = depth(rng);
  const auto flow = depth_to_flow(d, k, RigidTransform::identity());
  for (int y = 0; y < 128; ++y)
    for (int x = 0; x < 128; ++x) {
      ASSERT_NEAR(flow.x(x, y), x, 1e-6);
      ASSERT_NEAR(flow.y(x, y), y, 1e-6);
      ASSERT_TRUE(flow.is_valid(x, y));
    }
}

TEST(DepthToFlow, UniformDisparityForLateralTranslation) {
  const auto k = test_camera();
  const DepthMap d(128, 128, 2.0);
  const auto flow = depth_to_flow(d, k, RigidTransform::translation(Vec3(0.5, 0, 0)));
  for (int y = 0; y < 128; ++y)
    for (int x = 0; x < 128; ++x) {
      ASSERT_NEAR(flow.x(x, y), x + 25.0, 1e-9);
      ASSERT_NEAR(flow.y(x, y), y, 1e-9);
      ASSERT_EQ(flow.is_valid(x, y), x + 25 <= 127);
    }
}

TEST(DepthToFlow, ForwardTranslationHandValue) {
  const auto k = test_camera();
  const DepthMap d(128, 128, 2.0);
  const auto flow = depth_to_flow(d, k, RigidTransform::translation(Vec3(0, 0, -0.5)));
  EXPECT_NEAR(flow.x(84, 64), 90.667, 5e-4);
  EXPECT_NEAR(flow.x(84, 64), 64.0 + 100.0 * 0.4 / 1.5, 1e-9);
  EXPECT_NEAR(flow.y(84, 64), 64.0, 1e-9);
}

TEST(DepthToFlow, BehindCameraIsMaskedInvalid) {
  const auto k = test_camera();
  const DepthMap d(128, 128, 2.0);
  const auto flow = depth_to_flow(d, k, RigidTransform::translation(Vec3(0, 0, -3.0)));
  for (int y = 0; y < 128; y += 7)
    for (int x = 0; x < 128; x += 7) {
      EXPECT_FALSE(flow.is_valid(x, y));
      EXPECT_EQ(flow.x(x, y), kBehindCameraCoord);
    }
}

TEST(DepthToFlow, RejectsDimensionMismatch) {
  EXPECT_THROW(depth_to_flow(DepthMap(64, 64, 1.0), test_camera(), RigidTransform::identity()), std::invalid_argument);
}

TEST(DepthToFlow, ValidCoordinatesAreInFrame) {
  const auto k = test_camera();
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> depth(0.5, 6.0);
  DepthMap d(128, 128);
  for (auto& v : d.values) v = depth(rng);
  for (int trial = 0; trial < 5; ++trial) {
    const auto flow = depth_to_flow(d, k, random_transform(rng));
    for (int y = 0; y < 128; ++y)
      for (int x = 0; x < 128; ++x) {
        if (!flow.is_valid(x, y)) continue;
        ASSERT_GE(flow.x(x, y), 0.0);
        ASSERT_LE(flow.x(x, y), 127.0);
        ASSERT_GE(flow.y(x, y), 0.0);
        ASSERT_LE(flow.y(x, y), 127.0);
      }
  }
}

TEST(DepthToFlow, PureRotationFlowIsDepthIndependent) {
  const auto k = test_camera();
  const RigidTransform rot{rot_y(deg2rad(4)) * rot_x(deg2rad(-3)), Vec3::Zero()};
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> depth(0.5, 6.0);
  DepthMap d(128, 128);
  for (auto& v : d.values) v = depth(rng);
  DepthMap scaled = d;
  for (auto& v : scaled.values) v *= 3.7;
  const auto a = depth_to_flow(d, k, rot);
  const auto b = depth_to_flow(scaled, k, rot);
  for (std::size_t i = 0; i < a.coords.size(); ++i) ASSERT_NEAR(a.coords[i], b.coords[i], 1e-6);
}

TEST(DepthToFlow, FocalScaleInvarianceForOpticalAxisRotation) {
  // Scaling fx, fy and depths leaves the flow of a rotation about the optical
  // axis unchanged: K Rz K^-1 is a rotation about the principal point.
  const auto k = test_camera();
  auto k2 = k;
  k2.fx *= 2.5;
  k2.fy *= 2.5;
  const RigidTransform rot{rot_z(deg2rad(7)), Vec3::Zero()};
  DepthMap d(128, 128, 2.0), d2(128, 128, 0.8);
  const auto a = depth_to_flow(d, k, rot);
  const auto b = depth_to_flow(d2, k2, rot);
  for (std::size_t i = 0; i < a.coords.size(); ++i) ASSERT_NEAR(a.coords[i], b.coords[i], 1e-6);
}

TEST(DepthToFlow, FocalAndDepthScaleInvarianceForLateralTranslation) {
  // Disparity fx * tx / Z is unchanged when fx and Z scale together.
  const auto k = test_camera();
  auto k2 = k;
  k2.fx *= 3.0;
  k2.fy *= 3.0;
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> depth(0.5, 6.0);
  DepthMap d(128, 128);
  for (auto& v : d.values) v = depth(rng);
  DepthMap d2 = d;
  for (auto& v : d2.values) v *= 3.0;
  const auto t = RigidTransform::translation(Vec3(0.2, -0.1, 0.0));
  const auto a = depth_to_flow(d, k, t);
  const auto b = depth_to_flow(d2, k2, t);
  for (std::size_t i = 0; i < a.coords.size(); ++i) ASSERT_NEAR(a.coords[i], b.coords[i], 1e-6);
}

TEST(LookAt, ProducesRotationAndFacesTarget) {
  const auto pose = look_at(Vec3(1, 2, 3), Vec3::Zero());
  EXPECT_TRUE(pose.is_valid(1e-12));
  const Vec3 in_cam = invert(pose).apply(Vec3::Zero());
  EXPECT_NEAR(in_cam.x(), 0.0, 1e-12);
  EXPECT_NEAR(in_cam.y(), 0.0, 1e-12);
  EXPECT_NEAR(in_cam.z(), std::sqrt(14.0), 1e-12);
  // world up projects to negative camera y
  EXPECT_LT((pose.r.transpose() * Vec3(0, 1, 0)).y(), 0.0);
}

TEST(Intrinsics, Validation) {
  EXPECT_NO_THROW(CameraIntrinsics::centered(32).validate());
  EXPECT_THROW((CameraIntrinsics{0, 1, 1, 1, 4, 4}.validate()), std::invalid_argument);
  EXPECT_THROW((CameraIntrinsics{1, 1, 4, 1, 4, 4}.validate()), std::invalid_argument);
}

TEST(PoseFile, RoundTripsExactly) {
  std::mt19937_64 rng(9);
  std::vector<RigidTransform> poses;
  for (int i = 0; i < 10; ++i) poses.push_back(random_transform(rng));
  const auto path = std::filesystem::temp_directory_path() / "nvs_test_poses.txt";
  io::write_poses(path, poses);
  const auto back = io::read_poses(path);
  ASSERT_EQ(back.size(), poses.size());
  for (std::size_t i = 0; i < poses.size(); ++i) EXPECT_TRUE(back[i].approx_equal(poses[i], 0.0));
  EXPECT_THROW(io::parse_pose_line("1 2 3"), io::IoError);
  std::filesystem::remove(path);
}

TEST(Pfm, RoundTripsDepth) {
  DepthMap d(7, 5);
  for (std::size_t i = 0; i < d.values.size(); ++i) d.values[i] = 0.5 + 0.25 * double(i);
  const auto path = std::filesystem::temp_directory_path() / "nvs_test_depth.pfm";
  io::write_pfm(path, d);
  const auto back = io::read_depth_pfm(path);
  EXPECT_EQ(back.width, 7);
  EXPECT_EQ(back.height, 5);
  EXPECT_EQ(back.values, d.values);
  const auto bytes = io::read_bytes(path);
  const std::string header(bytes.begin(), bytes.begin() + 12);
  EXPECT_EQ(header, "Pf\n7 5\n-1.0\n");
  std::filesystem::remove(path);
}
