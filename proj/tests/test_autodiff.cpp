#include <gtest/gtest.h>

#include <random>

#include "ssta/autodiff.hpp"
#include "fd_cases.hpp"

using namespace ssta;
using ssta::test::random_tensor;

namespace {

// Direct convolution with explicit bounds checks.
Tensor<double> naive_conv(const Tensor<double>& in, const Tensor<double>& k, const Tensor<double>& b) {
  const long ci_n = long(in.dim(0)), h = long(in.dim(1)), w = long(in.dim(2));
  const long co_n = long(k.dim(0)), ks = long(k.dim(2)), p = ks / 2;
  Tensor<double> out(Shape{std::size_t(co_n), std::size_t(h), std::size_t(w)});
  for (long co = 0; co < co_n; ++co)
    for (long y = 0; y < h; ++y)
      for (long x = 0; x < w; ++x) {
        double s = b[std::size_t(co)];
        for (long ci = 0; ci < ci_n; ++ci)
          for (long dy = 0; dy < ks; ++dy)
            for (long dx = 0; dx < ks; ++dx) {
              const long yy = y + dy - p, xx = x + dx - p;
              if (yy < 0 || xx < 0 || yy >= h || xx >= w) continue;
              s += k[std::size_t(((co * ci_n + ci) * ks + dy) * ks + dx)] *
                   in[std::size_t((ci * h + yy) * w + xx)];
            }
        out[std::size_t((co * h + y) * w + x)] = s;
      }
  return out;
}

}  // namespace

TEST(Conv2d, IdentityKernel) {
  std::mt19937_64 rng(1);
  ad::Tape<double> tape;
  auto x = tape.constant(random_tensor({1, 5, 7}, rng));
  auto k = tape.constant(Tensor<double>(Shape{1, 1, 1, 1}, 1.0));
  auto b = tape.constant(Tensor<double>(Shape{1}));
  EXPECT_EQ(ad::conv2d(x, k, b).value(), x.value());
}

TEST(Conv2d, ImpulseResponseIsCenteredBlock) {
  ad::Tape<double> tape;
  Tensor<double> in(Shape{1, 5, 5});
  in.at(0, 2, 1) = 1.0;
  auto out = ad::conv2d(tape.constant(in), tape.constant(Tensor<double>(Shape{1, 1, 3, 3}, 1.0)),
                        tape.constant(Tensor<double>(Shape{1})))
                 .value();
  for (std::size_t y = 0; y < 5; ++y)
    for (std::size_t x = 0; x < 5; ++x) {
      const bool inside = y >= 1 && y <= 3 && x <= 2;
      EXPECT_EQ(out.at(0, y, x), inside ? 1.0 : 0.0) << y << "," << x;
    }
}

TEST(Conv2d, MatchesNestedLoopOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    const auto in = random_tensor({2, 6, 5}, rng);
    const auto k = random_tensor({3, 2, 3, 3}, rng);
    const auto b = random_tensor({3}, rng);
    ad::Tape<double> tape;
    const auto got = ad::conv2d(tape.constant(in), tape.constant(k), tape.constant(b)).value();
    const auto want = naive_conv(in, k, b);
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
  }
}

TEST(Conv2d, RejectsShapeMismatchNamingBothShapes) {
  ad::Tape<double> tape;
  auto x = tape.constant(Tensor<double>(Shape{2, 4, 4}));
  auto k = tape.constant(Tensor<double>(Shape{1, 3, 3, 3}));
  auto b = tape.constant(Tensor<double>(Shape{1}));
  try {
    ad::conv2d(x, k, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,4,4]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[1,3,3,3]"), std::string::npos) << msg;
  }
}

TEST(Conv2d, RejectsEvenKernel) {
  ad::Tape<double> tape;
  EXPECT_THROW(ad::conv2d(tape.constant(Tensor<double>(Shape{1, 4, 4})),
                          tape.constant(Tensor<double>(Shape{1, 1, 2, 2})), tape.constant(Tensor<double>(Shape{1}))),
               ShapeError);
}

TEST(Backward, SumGivesOnes) {
  std::mt19937_64 rng(3);
  ad::Tape<double> tape;
  auto th = tape.input("theta", random_tensor({2, 3}, rng));
  auto g = tape.backward(ad::sum(th));
  EXPECT_EQ(g.at("theta"), Tensor<double>(Shape{2, 3}, 1.0));
}

TEST(Backward, ZeroScaleGivesZeroGradient) {
  std::mt19937_64 rng(4);
  ad::Tape<double> tape;
  auto th = tape.input("theta", random_tensor({4}, rng));
  auto g = tape.backward(ad::sum(ad::scale(th, 0.0)));
  EXPECT_EQ(g.at("theta"), Tensor<double>(Shape{4}));
}

TEST(Backward, UnusedInputHasZeroAdjoint) {
  ad::Tape<double> tape;
  auto a = tape.input("a", Tensor<double>(Shape{3}, 2.0));
  tape.input("unused", Tensor<double>(Shape{2, 2}, 5.0));
  auto g = tape.backward(ad::sum(a));
  EXPECT_EQ(g.at("unused"), Tensor<double>(Shape{2, 2}));
}

TEST(Backward, SecondCallRejected) {
  ad::Tape<double> tape;
  auto a = tape.input("a", Tensor<double>(Shape{3}, 2.0));
  auto l = ad::sum(a);
  tape.backward(l);
  EXPECT_THROW(tape.backward(l), std::logic_error);
}

TEST(Backward, NonScalarLossRejected) {
  ad::Tape<double> tape;
  auto a = tape.input("a", Tensor<double>(Shape{3}, 2.0));
  EXPECT_THROW(tape.backward(ad::tanh(a)), ShapeError);
}

TEST(Backward, FanOutAccumulatesAdditively) {
  // loss = sum(tanh(a)) + sum(scale(a, 3)): d/da = (1 - tanh^2) + 3
  std::mt19937_64 rng(5);
  const auto av = random_tensor({6}, rng);
  ad::Tape<double> tape;
  auto a = tape.input("a", av);
  auto g = tape.backward(ad::add(ad::sum(ad::tanh(a)), ad::sum(ad::scale(a, 3.0))));
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double t = std::tanh(av[i]);
    EXPECT_NEAR(g.at("a")[i], (1 - t * t) + 3.0, 1e-14);
  }
}

TEST(Backward, NonFiniteForwardIsRejected) {
  ad::Tape<double> tape;
  auto a = tape.input("a", Tensor<double>(Shape{1}, 1e308));
  EXPECT_THROW(ad::scale(a, 10.0), NumericError);
}

TEST(Forward, DeterministicBitIdentical) {
  std::mt19937_64 rng(6);
  const auto x = random_tensor({3, 8, 8}, rng);
  const auto k = random_tensor({4, 3, 3, 3}, rng);
  const auto b = random_tensor({4}, rng);
  auto run = [&] {
    ad::Tape<double> tape;
    return ad::sigmoid(ad::conv2d(tape.constant(x), tape.constant(k), tape.constant(b))).value();
  };
  EXPECT_EQ(run(), run());
}

TEST(Ops, DenseAndPoolingValues) {
  ad::Tape<double> tape;
  auto x = tape.constant(Tensor<double>(Shape{2}, std::vector<double>{1.0, 2.0}));
  auto w = tape.constant(Tensor<double>(Shape{2, 2}, std::vector<double>{1, 2, 3, 4}));
  auto b = tape.constant(Tensor<double>(Shape{2}, std::vector<double>{0.5, -0.5}));
  EXPECT_EQ(ad::dense(x, w, b).value().vec(), (std::vector<double>{5.5, 10.5}));

  auto grid = tape.constant(Tensor<double>(Shape{2, 1, 2}, std::vector<double>{1, 3, -2, 4}));
  EXPECT_EQ(ad::global_avg_pool(grid).value().vec(), (std::vector<double>{2.0, 1.0}));
  EXPECT_EQ(ad::broadcast_spatial(ad::global_avg_pool(grid), 1, 2).value().vec(),
            (std::vector<double>{2, 2, 1, 1}));
}

TEST(Ops, ConcatAndLosses) {
  ad::Tape<double> tape;
  auto a = tape.constant(Tensor<double>(Shape{1, 1, 2}, std::vector<double>{1, 2}));
  auto b = tape.constant(Tensor<double>(Shape{2, 1, 2}, std::vector<double>{3, 4, 5, 6}));
  auto c = ad::concat_channels(a, b);
  EXPECT_EQ(c.shape(), (Shape{3, 1, 2}));
  EXPECT_EQ(c.value().vec(), (std::vector<double>{1, 2, 3, 4, 5, 6}));

  auto p = tape.constant(Tensor<double>(Shape{2, 2}, std::vector<double>{0.5, 0, 0, 0}));
  auto z = tape.constant(Tensor<double>(Shape{2, 2}));
  EXPECT_DOUBLE_EQ(ad::mse_loss(p, z).value().item(), 0.0625);
  EXPECT_DOUBLE_EQ(ad::sse_loss(p, z).value().item(), 0.25);
  EXPECT_THROW(ad::add(a, b), ShapeError);
}

TEST(FiniteDifference, CompositeGraph) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed + 100);
    std::map<std::string, Tensor<double>> in{{"x", random_tensor({1, 5, 5}, rng)},
                                             {"k1", random_tensor({3, 1, 3, 3}, rng)},
                                             {"b1", random_tensor({3}, rng)},
                                             {"w", random_tensor({2, 3}, rng)},
                                             {"b2", random_tensor({2}, rng)}};
    auto fn = [](ad::Tape<double>&, std::map<std::string, ad::Var<double>>& v) {
      auto h = ad::tanh(ad::conv2d(v.at("x"), v.at("k1"), v.at("b1")));
      auto m = ad::dense(ad::global_avg_pool(h), v.at("w"), v.at("b2"));
      return ad::sum(ad::sigmoid(m));
    };
    EXPECT_LT(test::max_fd_error(fn, in, Tensor<double>::scalar(1.0)), 1e-4);
  }
}

TEST(FiniteDifference, EveryPrimitiveOnSeededCases) {
  for (const auto& c : test::primitive_cases())
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      const double e = test::fd_case_error(c, seed);
      ASSERT_LT(e, 1e-4) << c.name << " seed " << seed;
    }
}
