#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "nvs/autodiff.hpp"
#include "nvs/optim.hpp"

using namespace nvs::ad;

namespace {

using TD = Tensor<double>;

/// Uniform values in [-1, 1] with |v| >= margin, keeping clear of kinks at 0.
std::vector<double> away_from_zero(std::size_t n, std::mt19937_64& rng, double margin = 1e-2) {
  std::uniform_real_distribution<double> mag(margin, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(n);
  for (auto& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
  return v;
}

TD random_tensor(Shape shape, std::mt19937_64& rng) {
  return TD(shape, away_from_zero(numel(shape), rng));
}

constexpr double kEps = 1e-4;
constexpr double kTol = 1e-3;

}  // namespace

TEST(L1Loss, Definition) {
  const TD a(Shape{2}, {1.0, 2.0});
  const TD b(Shape{2}, {0.0, 4.0});
  EXPECT_DOUBLE_EQ(l1_loss(a, b).item(), 1.5);
}

TEST(L1Loss, SelfLossIsZeroWithZeroGradient) {
  Tape tape;
  auto x = TD::parameter(Shape{3}, {0.3, -1.0, 2.0});
  const TD target(Shape{3}, {0.3, -1.0, 2.0});
  auto loss = l1_loss(x, target);
  EXPECT_EQ(loss.item(), 0.0);
  tape.backward(loss);
  for (double g : x.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Conv2d, OnesKernelSumsWindow) {
  const Tensor<float> x = Tensor<float>::full(Shape{1, 1, 3, 3}, 1.0f);
  const Tensor<float> w = Tensor<float>::full(Shape{1, 1, 3, 3}, 1.0f);
  const auto y = conv2d(x, w, Tensor<float>(), {1, 0});
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y.item(), 9.0f);
}

TEST(Conv2d, StrideAndPaddingShapes) {
  const Tensor<float> x(Shape{2, 3, 32, 32});
  const Tensor<float> w(Shape{16, 3, 4, 4});
  EXPECT_EQ(conv2d(x, w, Tensor<float>(), {2, 1}).shape(), (Shape{2, 16, 16, 16}));
  const Tensor<float> wt(Shape{16, 8, 4, 4});
  const Tensor<float> h(Shape{2, 16, 4, 4});
  EXPECT_EQ(transposed_conv2d(h, wt, Tensor<float>(), {2, 1}).shape(), (Shape{2, 8, 8, 8}));
}

TEST(Conv2d, MatchesDirectSumOracle) {
  std::mt19937_64 rng(11);
  const auto x = random_tensor({1, 2, 5, 6}, rng);
  const auto w = random_tensor({3, 2, 3, 3}, rng);
  const auto b = random_tensor({3}, rng);
  const auto y = conv2d(x, w, b, {2, 1});
  const std::size_t OH = y.dim(2), OW = y.dim(3);
  for (std::size_t o = 0; o < 3; ++o)
    for (std::size_t oy = 0; oy < OH; ++oy)
      for (std::size_t ox = 0; ox < OW; ++ox) {
        double acc = b[o];
        for (std::size_t c = 0; c < 2; ++c)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const long iy = long(oy) * 2 - 1 + ky, ix = long(ox) * 2 - 1 + kx;
              if (iy < 0 || iy >= 5 || ix < 0 || ix >= 6) continue;
              acc += x[(c * 5 + iy) * 6 + ix] * w[((o * 2 + c) * 3 + ky) * 3 + kx];
            }
        EXPECT_NEAR(y[(o * OH + oy) * OW + ox], acc, 1e-12);
      }
}

TEST(TransposedConv2d, IsAdjointOfConv2d) {
  // <conv(x), y> == <x, convT(y)> for the same weights.
  std::mt19937_64 rng(12);
  const auto x = random_tensor({1, 3, 8, 8}, rng);
  const auto w = random_tensor({4, 3, 4, 4}, rng);
  const auto cx = conv2d(x, w, TD(), {2, 1});
  const auto y = random_tensor(cx.shape(), rng);
  const auto ty = transposed_conv2d(y, w, TD(), {2, 1});
  ASSERT_EQ(ty.shape(), x.shape());
  double lhs = 0, rhs = 0;
  for (std::size_t i = 0; i < cx.size(); ++i) lhs += cx[i] * y[i];
  for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * ty[i];
  EXPECT_NEAR(lhs, rhs, 1e-10);
}

TEST(Backward, MeanOfProductGivesScaledInput) {
  Tape tape;
  auto w = TD::parameter(Shape{4}, {0.1, 0.2, 0.3, 0.4});
  const TD x(Shape{4}, {1.0, -2.0, 3.0, 5.0});
  tape.backward(mean(mul(w, x)));
  const auto g = w.grad();
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(g[i], x[i] / 4.0);
}

TEST(Backward, SigmoidDerivative) {
  Tape tape;
  auto w = TD::parameter(Shape{}, {0.7});
  auto y = sigmoid(w);
  tape.backward(y);
  const double s = y.item();
  EXPECT_NEAR(w.grad()[0], s * (1 - s), 1e-15);
}

TEST(Backward, SecondCallIsAnError) {
  Tape tape;
  auto w = TD::parameter(Shape{2}, {1.0, 2.0});
  auto loss = mean(w);
  tape.backward(loss);
  EXPECT_THROW(tape.backward(loss), std::logic_error);
}

TEST(Backward, RejectsNonScalarLoss) {
  Tape tape;
  auto w = TD::parameter(Shape{2}, {1.0, 2.0});
  auto y = affine(w, 2.0, 0.0);
  EXPECT_THROW(tape.backward(y), std::invalid_argument);
}

TEST(Backward, UnreachableParameterHasZeroGradient) {
  ParameterStore<double> store;
  auto& a = store.add("a", Shape{2}, {1.0, 2.0});
  store.add("b", Shape{3}, {1.0, 2.0, 3.0});
  Tape tape;
  tape.backward(mean(a));
  EXPECT_EQ(store.get("b").grad(), std::vector<double>(3, 0.0));
  EXPECT_TRUE(store.get("a").has_grad());
}

TEST(Backward, NothingRecordedWithoutTape) {
  auto w = TD::parameter(Shape{2}, {1.0, 2.0});
  auto y = mean(w);
  EXPECT_FALSE(y.requires_grad());
  Tape tape;
  EXPECT_THROW(tape.backward(y), std::invalid_argument);
}

TEST(Backward, GradientOfSumIsSumOfGradients) {
  std::mt19937_64 rng(13);
  const auto xv = random_tensor({2, 3, 6, 6}, rng);
  const auto wv = random_tensor({4, 3, 3, 3}, rng);
  const auto t1 = random_tensor({2, 4, 6, 6}, rng);
  auto run = [&](int which) {
    Tape tape;
    auto w = TD::parameter(wv.shape(), std::vector<double>(wv.data().begin(), wv.data().end()));
    auto y = sigmoid(conv2d(xv, w, TD(), {1, 1}));
    TD loss;
    if (which == 1) loss = l1_loss(y, t1);
    if (which == 2) loss = mean(y);
    if (which == 3) loss = add(l1_loss(y, t1), mean(y));
    tape.backward(loss);
    return w.grad();
  };
  const auto g1 = run(1), g2 = run(2), g3 = run(3);
  for (std::size_t i = 0; i < g1.size(); ++i) EXPECT_NEAR(g3[i], g1[i] + g2[i], 1e-6);
}

TEST(Forward, IsBitDeterministic) {
  std::mt19937_64 rng(14);
  const auto x = Tensor<float>(Shape{2, 3, 8, 8}, std::vector<float>(384, 0.25f));
  std::vector<float> wv(16 * 3 * 16);
  for (auto& v : wv) v = float(std::uniform_real_distribution<double>(-1, 1)(rng));
  const Tensor<float> w(Shape{16, 3, 4, 4}, wv);
  const auto a = leaky_relu(conv2d(x, w, Tensor<float>(), {2, 1}), 0.2f);
  const auto b = leaky_relu(conv2d(x, w, Tensor<float>(), {2, 1}), 0.2f);
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST(ShapeErrors, NameOpAndShapes) {
  const TD a(Shape{2, 3}), b(Shape{4, 5});
  try {
    matmul(a, b);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("matmul"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[4,5]"), std::string::npos);
  }
  EXPECT_THROW(l1_loss(a, b), ShapeError);
  EXPECT_THROW(add(a, b), ShapeError);
  EXPECT_THROW(reshape(a, {7}), ShapeError);
  EXPECT_THROW(concat<double>({a, b}, 1), ShapeError);
}

// ---------------------------------------------------------------------------
// Finite-difference checks, one per differentiable op, 10 random points each.

class GradcheckOps : public ::testing::Test {
 protected:
  std::mt19937_64 rng{2024};

  template <typename F>
  void check(F&& f, Shape shape, double tol = kTol) {
    for (int trial = 0; trial < 10; ++trial) {
      const auto x = random_tensor(shape, rng);
      const double err = gradcheck(f, x, kEps);
      EXPECT_LT(err, tol) << "trial " << trial;
    }
  }
};

TEST_F(GradcheckOps, Add) {
  const auto other = random_tensor({3, 4}, rng);
  const auto bias = random_tensor({4}, rng);
  check([&](const TD& x) { return mean(sigmoid(add(add(x, other), bias))); }, {3, 4});
  check([&](const TD& x) { return mean(sigmoid(add(other, x))); }, {4});
}

TEST_F(GradcheckOps, Sub) {
  const auto other = random_tensor({5}, rng);
  check([&](const TD& x) { return mean(sigmoid(sub(other, x))); }, {5});
}

TEST_F(GradcheckOps, Mul) {
  const auto other = random_tensor({3, 4}, rng);
  check([&](const TD& x) { return mean(sigmoid(mul(x, other))); }, {3, 4});
  check([&](const TD& x) { return mean(sigmoid(mul(other, x))); }, {4});
}

TEST_F(GradcheckOps, Affine) {
  check([&](const TD& x) { return mean(sigmoid(affine(x, 2.5, -0.3))); }, {6});
}

TEST_F(GradcheckOps, Matmul) {
  const auto b = random_tensor({4, 3}, rng);
  const auto a = random_tensor({2, 5}, rng);
  check([&](const TD& x) { return mean(sigmoid(matmul(x, b))); }, {2, 4});
  check([&](const TD& x) { return mean(sigmoid(matmul(a, x))); }, {5, 3});
}

TEST_F(GradcheckOps, Conv2dInputWeightBias) {
  const auto w = random_tensor({3, 2, 4, 4}, rng);
  const auto x0 = random_tensor({2, 2, 6, 6}, rng);
  const auto b = random_tensor({3}, rng);
  check([&](const TD& x) { return mean(sigmoid(conv2d(x, w, b, {2, 1}))); }, {2, 2, 6, 6}, 1e-4);
  check([&](const TD& x) { return mean(sigmoid(conv2d(x0, x, b, {2, 1}))); }, {3, 2, 4, 4}, 1e-4);
  check([&](const TD& x) { return mean(sigmoid(conv2d(x0, w, x, {2, 1}))); }, {3}, 1e-4);
  const auto k = random_tensor({1, 1, 3, 3}, rng);
  check([&](const TD& x) { return mean(conv2d(x, k, TD(), {1, 0})); }, {1, 1, 5, 5}, 1e-4);
}

TEST_F(GradcheckOps, TransposedConv2dInputWeightBias) {
  const auto w = random_tensor({2, 3, 4, 4}, rng);
  const auto x0 = random_tensor({2, 2, 3, 3}, rng);
  const auto b = random_tensor({3}, rng);
  check([&](const TD& x) { return mean(sigmoid(transposed_conv2d(x, w, b, {2, 1}))); }, {2, 2, 3, 3});
  check([&](const TD& x) { return mean(sigmoid(transposed_conv2d(x0, x, b, {2, 1}))); }, {2, 3, 4, 4});
  check([&](const TD& x) { return mean(sigmoid(transposed_conv2d(x0, w, x, {2, 1}))); }, {3});
}

TEST_F(GradcheckOps, LeakyRelu) {
  const auto w = random_tensor({7}, rng);
  check([&](const TD& x) { return mean(mul(leaky_relu(x, 0.2), w)); }, {7});
}

TEST_F(GradcheckOps, Sigmoid) {
  check([&](const TD& x) { return mean(sigmoid(x)); }, {9}, 1e-4);
}

TEST_F(GradcheckOps, ReshapeAndConcat) {
  const auto other = random_tensor({2, 3}, rng);
  const auto w = random_tensor({2, 7}, rng);
  check([&](const TD& x) { return mean(mul(concat<double>({reshape(x, {2, 4}), other}, 1), sigmoid(w))); }, {8});
  const auto w0 = random_tensor({5, 3}, rng);
  check([&](const TD& x) { return mean(sigmoid(concat<double>({other, x}, 0))); }, {3, 3});
  (void)w0;
}

TEST_F(GradcheckOps, MeanAndL1Loss) {
  const auto target = random_tensor({10}, rng);
  // Keep |x - target| away from zero: shift the target far from the samples.
  const auto far = TD(target.shape(), [&] {
    std::vector<double> v(target.data().begin(), target.data().end());
    for (auto& t : v) t += 3.0;
    return v;
  }());
  check([&](const TD& x) { return l1_loss(x, far); }, {10});
  check([&](const TD& x) { return l1_loss(far, x); }, {10});
  check([&](const TD& x) { return mean(x); }, {10});
}

TEST(Gradcheck, RejectsEpsOutsideRange) {
  const TD x(Shape{1}, {0.5});
  EXPECT_THROW(gradcheck([](const TD& v) { return mean(v); }, x, 1e-6), std::invalid_argument);
  EXPECT_THROW(gradcheck([](const TD& v) { return mean(v); }, x, 0.1), std::invalid_argument);
}

TEST(Gradcheck, DetectsWrongGradient) {
  // A forward that is not what the recorded backward differentiates.
  const TD x(Shape{3}, {0.1, 0.2, 0.3});
  auto broken = [](const TD& v) {
    auto y = mean(v);
    if (!y.requires_grad()) return mean(affine(v, 3.0, 0.0));
    return y;
  };
  EXPECT_GT(gradcheck(broken, x, 1e-3), 0.5);
}

// ---------------------------------------------------------------------------
// Adam

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  ParameterStore<float> store;
  auto& p = store.add("p", Shape{3}, {1.0f, -2.0f, 3.0f});
  p.node()->grad_buffer();  // materialized zero gradient
  adam_step(store, {});
  EXPECT_EQ(std::vector<float>(p.data().begin(), p.data().end()), (std::vector<float>{1.0f, -2.0f, 3.0f}));
}

TEST(Adam, FirstStepMovesByLearningRateAgainstGradientSign) {
  ParameterStore<double> store;
  auto& p = store.add("p", Shape{3}, {1.0, 1.0, 1.0});
  auto& g = p.node()->grad_buffer();
  g = {0.5, -3.0, 1e-3};
  AdamConfig cfg;
  cfg.lr = 0.01;
  adam_step(store, cfg);
  EXPECT_NEAR(p[0], 1.0 - 0.01, 1e-8);
  EXPECT_NEAR(p[1], 1.0 + 0.01, 1e-8);
  EXPECT_NEAR(p[2], 1.0 - 0.01, 1e-6);
  EXPECT_FALSE(p.has_grad());
}

TEST(Adam, StateAdvancesBetweenIdenticalSteps) {
  ParameterStore<double> store;
  auto& p = store.add("p", Shape{1}, {0.0});
  AdamConfig cfg;
  cfg.lr = 0.1;
  p.node()->grad_buffer() = {1.0};
  adam_step(store, cfg);
  const double after1 = p[0];
  p.node()->grad_buffer() = {-1.0};
  adam_step(store, cfg);
  const double delta2 = p[0] - after1;
  // Momentum from the first step damps the reversal: |delta2| != lr.
  EXPECT_GT(std::abs(std::abs(delta2) - 0.1), 1e-3);
  EXPECT_EQ(store.step_count(), 2);
}

TEST(Adam, MissingGradientsIsAnError) {
  ParameterStore<float> store;
  store.add("p", Shape{1}, {0.0f});
  EXPECT_THROW(adam_step(store, {}), std::logic_error);
}

TEST(ParameterStoreTest, DuplicateNamesRejected) {
  ParameterStore<float> store;
  store.add("w", Shape{1}, {0.0f});
  EXPECT_THROW(store.add("w", Shape{1}, {0.0f}), std::invalid_argument);
  EXPECT_THROW(store.get("missing"), std::out_of_range);
  EXPECT_THROW(store.assign("w", Shape{2}, std::vector<float>{1, 2}), ShapeError);
}

// ---------------------------------------------------------------------------
// Checkpoints

TEST(Checkpoint, ByteLayout) {
  ParameterStore<float> store;
  store.add("ab", Shape{2}, {1.0f, -0.5f});
  const auto bytes = serialize_checkpoint(store);
  const std::vector<std::uint8_t> expected = {
      'N', 'V', 'S', 'C', 1, 0, 0, 0,  // magic, version
      1, 0, 0, 0,                      // count
      2, 0, 'a', 'b',                  // name
      1, 2, 0, 0, 0,                   // rank, dims
      0x00, 0x00, 0x80, 0x3f,          // 1.0f
      0x00, 0x00, 0x00, 0xbf,          // -0.5f
  };
  EXPECT_EQ(bytes, expected);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  std::mt19937_64 rng(15);
  ParameterStore<float> store;
  store.add("enc.conv0.weight", Shape{4, 3, 2, 2}, kaiming_uniform<float>(48, 12, 0.2, rng));
  store.add("enc.conv0.bias", Shape{4}, std::vector<float>(4, 0.0f));
  store.add("scalar", Shape{}, {3.25f});
  const auto bytes = serialize_checkpoint(store);
  const auto back = deserialize_checkpoint<float>(bytes);
  EXPECT_EQ(serialize_checkpoint(back), bytes);
  ASSERT_EQ(back.names(), store.names());
  for (const auto& n : store.names()) {
    EXPECT_EQ(back.get(n).shape(), store.get(n).shape());
    EXPECT_TRUE(std::equal(back.get(n).data().begin(), back.get(n).data().end(), store.get(n).data().begin()));
  }
}

TEST(Checkpoint, RejectsCorruptInput) {
  ParameterStore<float> store;
  store.add("w", Shape{2}, {1.0f, 2.0f});
  auto bytes = serialize_checkpoint(store);
  auto truncated = bytes;
  truncated.pop_back();
  EXPECT_THROW(deserialize_checkpoint<float>(truncated), CheckpointError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint<float>(bad_magic), CheckpointError);
  auto bad_version = bytes;
  bad_version[4] = 9;
  EXPECT_THROW(deserialize_checkpoint<float>(bad_version), CheckpointError);
}
