#include <gtest/gtest.h>

#include <cmath>

#include "pgd/coord.hpp"
#include "pgd/gradcheck.hpp"
#include "pgd/ops.hpp"
#include "test_util.hpp"

using namespace pgd;
using pgd::testing::random_tensor;

namespace {

// Reference 2×2/stride-2 max pool with its gradient: returns pooled values
// and the per-input gradient of sum(pooled * probe).
std::pair<std::vector<double>, std::vector<double>> reference_max_pool(const Tensor& x, const Tensor& probe) {
  const auto B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  std::vector<double> pooled, grad(static_cast<std::size_t>(x.numel()), 0.0);
  for (std::int64_t q = 0; q < B * C; ++q)
    for (std::int64_t i = 0; i < H / 2; ++i)
      for (std::int64_t j = 0; j < W / 2; ++j) {
        std::int64_t best = -1;
        for (std::int64_t r = 0; r < 2; ++r)
          for (std::int64_t s = 0; s < 2; ++s) {
            const auto idx = (q * H + 2 * i + r) * W + 2 * j + s;
            if (best < 0 || x.at(idx) > x.at(best)) best = idx;
          }
        grad[static_cast<std::size_t>(best)] += probe.at(static_cast<std::int64_t>(pooled.size()));
        pooled.push_back(x.at(best));
      }
  return {pooled, grad};
}

}  // namespace

TEST(AddCoord, CornersAndCenter) {
  Tensor x = random_tensor({1, 2, 5, 7}, 1);
  Tensor y = add_coord(x);
  ASSERT_EQ(y.shape(), (Shape{1, 4, 5, 7}));
  auto X = [&](std::int64_t i, std::int64_t j) { return y.at((2 * 5 + i) * 7 + j); };
  auto Y = [&](std::int64_t i, std::int64_t j) { return y.at((3 * 5 + i) * 7 + j); };
  EXPECT_EQ(X(0, 0), -1.0);
  EXPECT_EQ(Y(0, 0), -1.0);
  EXPECT_EQ(X(4, 6), 1.0);
  EXPECT_EQ(Y(4, 6), 1.0);
  EXPECT_EQ(X(0, 6), 1.0);
  EXPECT_EQ(Y(4, 0), 1.0);
  EXPECT_EQ(X(2, 3), 0.0);
  EXPECT_EQ(Y(2, 3), 0.0);
}

TEST(AddCoord, PrefixUnchangedAndCoordsIndependentOfValues) {
  Tensor a = random_tensor({2, 3, 4, 4}, 2);
  Tensor b = random_tensor({2, 3, 4, 4}, 3);
  Tensor ya = add_coord(a);
  Tensor yb = add_coord(b);
  const std::int64_t plane = 16;
  for (std::int64_t bi = 0; bi < 2; ++bi) {
    for (std::int64_t i = 0; i < 3 * plane; ++i) EXPECT_EQ(ya.at(bi * 5 * plane + i), a.at(bi * 3 * plane + i));
    for (std::int64_t i = 3 * plane; i < 5 * plane; ++i) EXPECT_EQ(ya.at(bi * 5 * plane + i), yb.at(bi * 5 * plane + i));
  }
}

TEST(AddCoord, UnitExtentGivesZeros) {
  Tensor y = add_coord(Tensor::ones({1, 1, 1, 3}));
  EXPECT_EQ(y.at(3 + 0), -1.0);
  EXPECT_EQ(y.at(3 + 2), 1.0);
  for (int j = 0; j < 3; ++j) EXPECT_EQ(y.at(6 + j), 0.0);
}

TEST(AddCoord, GradientFlowsToInputOnly) {
  auto r = gradcheck("add_coord", [](const Tensor& x) { return ops::sum(ops::pow(add_coord(x), 2.0)); },
                     random_tensor({1, 2, 3, 3}, 4));
  EXPECT_TRUE(r.passed) << r.max_rel_error;
}

TEST(CoordPool, UniqueMaxBottomRight) {
  auto out = coord_pool(Tensor::from_values({1, 1, 2, 2}, {1, 2, 3, 4}));
  EXPECT_EQ(out.pooled.item(), 4.0);
  EXPECT_EQ(out.coords.at(0), 1.0);
  EXPECT_EQ(out.coords.at(1), 1.0);
}

TEST(CoordPool, TieBreaksToFirstInRowMajorOrder) {
  auto out = coord_pool(Tensor::full({1, 1, 2, 2}, 0.7));
  EXPECT_DOUBLE_EQ(out.pooled.item(), 0.7);
  EXPECT_EQ(out.coords.at(0), -1.0);
  EXPECT_EQ(out.coords.at(1), -1.0);
}

TEST(CoordPool, ChannelLayoutIsAllXThenAllY) {
  // Channel 0 max at (0,1), channel 1 max at (1,0).
  Tensor x = Tensor::from_values({1, 2, 2, 2}, {0, 5, 0, 0, 0, 0, 5, 0});
  auto out = coord_pool(x);
  ASSERT_EQ(out.coords.shape(), (Shape{1, 4, 1, 1}));
  EXPECT_EQ(out.coords.to_vector(), (std::vector<double>{1, -1, -1, 1}));
}

TEST(CoordPool, NonDivisibleExtentIsError) {
  try {
    coord_pool(Tensor::ones({1, 1, 5, 4}));
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("extent 5"), std::string::npos);
    EXPECT_NE(msg.find("stride 2"), std::string::npos);
  }
}

TEST(CoordPool, MatchesMaxPoolOracleAndRoundTrips) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const std::int64_t B = 1 + static_cast<std::int64_t>(seed % 2), C = 1 + static_cast<std::int64_t>(seed % 3);
    const std::int64_t H = 2 * (1 + static_cast<std::int64_t>(seed % 4)), W = 2 * (2 + static_cast<std::int64_t>(seed % 3));
    Tensor x = random_tensor({B, C, H, W}, seed);
    x.set_requires_grad(true);
    auto out = coord_pool(x);
    Tensor probe = random_tensor(out.pooled.shape(), seed + 100);
    const auto [ref_pooled, ref_grad] = reference_max_pool(x, probe);
    EXPECT_EQ(out.pooled.to_vector(), ref_pooled);
    EXPECT_FALSE(out.coords.requires_grad());

    // Denormalize coords to input indices and gather.
    const std::int64_t Ho = H / 2, Wo = W / 2;
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t i = 0; i < Ho; ++i)
          for (std::int64_t j = 0; j < Wo; ++j) {
            const double cx = out.coords.at(((b * 2 * C + c) * Ho + i) * Wo + j);
            const double cy = out.coords.at(((b * 2 * C + C + c) * Ho + i) * Wo + j);
            EXPECT_LE(std::abs(cx), 1.0);
            EXPECT_LE(std::abs(cy), 1.0);
            const auto r = static_cast<std::int64_t>(std::lround((cy + 1.0) / 2.0));
            const auto s = static_cast<std::int64_t>(std::lround((cx + 1.0) / 2.0));
            EXPECT_EQ(x.at(((b * C + c) * H + 2 * i + r) * W + 2 * j + s),
                      out.pooled.at(((b * C + c) * Ho + i) * Wo + j));
          }

    backward(ops::sum(ops::mul(out.pooled, probe)));
    EXPECT_EQ(x.grad().to_vector(), ref_grad);
  }
}

TEST(CoordPool, OneUnitOfGradientPerRegion) {
  Tensor x = random_tensor({1, 2, 4, 6}, 7);
  x.set_requires_grad(true);
  backward(ops::sum(coord_pool(x).pooled));
  double total = 0.0;
  int nonzero = 0;
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    total += x.grad().at(i);
    if (x.grad().at(i) != 0.0) ++nonzero;
  }
  EXPECT_EQ(total, 12.0);
  EXPECT_EQ(nonzero, 12);
}
