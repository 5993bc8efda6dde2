// Copyright 2026 The s6mod Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "s6mod/s6mod.hpp"
#include "support/oracles.hpp"

namespace s6mod {
namespace {

using testing::max_abs_diff;
using testing::random_tensor;

const double kLn2 = std::numbers::ln2;

TEST(Zoh, ExactScalarCase) {
  auto [ab, bb] = zoh_discretize(Tensor::from({1, 1}, {-1.0}), Tensor::from({1, 1}, {kLn2}),
                                 Tensor::from({1, 1}, {1.0}), ZohMode::exact);
  EXPECT_NEAR(ab.item(), 0.5, 1e-15);
  EXPECT_NEAR(bb.item(), 0.5, 1e-15);
}

TEST(Zoh, SimplifiedScalarCase) {
  auto [ab, bb] = zoh_discretize(Tensor::from({1, 1}, {-1.0}), Tensor::from({1, 1}, {kLn2}),
                                 Tensor::from({1, 1}, {1.0}), ZohMode::simplified);
  EXPECT_NEAR(ab.item(), 0.5, 1e-15);
  EXPECT_NEAR(bb.item(), 0.69315, 1e-5);
  EXPECT_NEAR(bb.item(), kLn2, 1e-15);
}

TEST(Zoh, VanishingStepLimit) {
  auto [ab, bb] = zoh_discretize(Tensor::from({1, 1}, {-1.0}), Tensor::from({1, 1}, {1e-12}),
                                 Tensor::from({1, 1}, {1.0}), ZohMode::exact);
  EXPECT_NEAR(ab.item(), 1.0, 1e-9);
  EXPECT_NEAR(bb.item(), 0.0, 1e-9);
}

TEST(Zoh, DomainErrors) {
  const auto b = Tensor::from({1, 1}, {1.0});
  EXPECT_THROW(zoh_discretize(Tensor::from({1, 1}, {0.0}), Tensor::from({1, 1}, {0.1}), b, ZohMode::exact),
               DomainError);
  EXPECT_THROW(zoh_discretize(Tensor::from({1, 1}, {0.5}), Tensor::from({1, 1}, {0.1}), b, ZohMode::exact),
               DomainError);
  EXPECT_THROW(zoh_discretize(Tensor::from({1, 1}, {-1.0}), Tensor::from({1, 1}, {0.0}), b, ZohMode::exact),
               DomainError);
  EXPECT_THROW(zoh_discretize(Tensor::from({1, 1}, {-1.0}), Tensor::from({1, 1}, {-0.1}), b, ZohMode::exact),
               DomainError);
}

TEST(Zoh, RandomDrawsMatchClosedForm) {
  Rng rng(10);
  for (int i = 0; i < 200; ++i) {
    const double a = -rng.uniform(1e-3, 10.0);
    const double d = rng.uniform(1e-4, 3.0);
    const double b = rng.uniform(-2, 2);
    auto [ab, bb] = zoh_discretize(Tensor::from({1, 1}, {a}), Tensor::from({1, 1}, {d}), Tensor::from({1, 1}, {b}),
                                   ZohMode::exact);
    EXPECT_NEAR(ab.item(), std::exp(a * d), 1e-12);
    EXPECT_NEAR(bb.item(), std::expm1(a * d) / a * b, 1e-12);
  }
}

TEST(Zoh, ModeNames) {
  EXPECT_EQ(zoh_mode_from_string("exact"), ZohMode::exact);
  EXPECT_EQ(zoh_mode_from_string("simplified"), ZohMode::simplified);
  EXPECT_THROW(zoh_mode_from_string("bilinear"), ConfigError);
}

TEST(SelectiveScan, HandUnrolledTwoSteps) {
  ScanParams p{Tensor::from({1, 1}, {-1.0}), Tensor::from({2, 1}, {kLn2, kLn2}), Tensor::from({2, 1}, {1.0, 1.0}),
               Tensor::from({2, 1}, {1.0, 1.0})};
  const auto y = selective_scan(Tensor::from({2, 1}, {1.0, 1.0}), p, ZohMode::exact);
  EXPECT_NEAR(y[0], 0.5, 1e-15);
  EXPECT_NEAR(y[1], 0.75, 1e-15);
}

TEST(SelectiveScan, ZeroInputGivesZeroOutput) {
  Rng rng(11);
  ScanParams p{neg(exp(random_tensor({3, 4}, rng))), random_tensor({6, 3}, rng, 0.1, 1.0),
               random_tensor({6, 4}, rng), random_tensor({6, 4}, rng)};
  const auto y = selective_scan(Tensor::zeros({6, 3}), p);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(SelectiveScan, MatchesNaiveRecurrence) {
  Rng rng(12);
  for (bool exact : {true, false}) {
    const std::size_t L = 7, D = 3, N = 4;
    const auto a = neg(exp(random_tensor({D, N}, rng)));
    const auto delta = random_tensor({L, D}, rng, 0.05, 1.5);
    const auto b = random_tensor({L, N}, rng), c = random_tensor({L, N}, rng), x = random_tensor({L, D}, rng);
    const auto y = selective_scan(x, ScanParams{a, delta, b, c}, exact ? ZohMode::exact : ZohMode::simplified);
    const auto ref = testing::naive_scan(x.to_vector(), a.to_vector(), delta.to_vector(), b.to_vector(),
                                         c.to_vector(), L, D, N, exact);
    EXPECT_LT(max_abs_diff(y.data(), ref), 1e-12);
  }
}

TEST(SelectiveScan, BatchedEqualsPerSample) {
  Rng rng(13);
  const std::size_t B = 3, L = 5, D = 2, N = 3;
  const auto a = neg(exp(random_tensor({D, N}, rng)));
  const auto delta = random_tensor({B, L, D}, rng, 0.05, 1.0);
  const auto bs = random_tensor({B, L, N}, rng), cs = random_tensor({B, L, N}, rng), x = random_tensor({B, L, D}, rng);
  const auto y = selective_scan(x, ScanParams{a, delta, bs, cs});
  for (std::size_t s = 0; s < B; ++s) {
    auto slice = [&](const Tensor& t) {
      const std::size_t n = t.numel() / B;
      return std::vector<double>(t.data().begin() + s * n, t.data().begin() + (s + 1) * n);
    };
    const auto ref = testing::naive_scan(slice(x), a.to_vector(), slice(delta), slice(bs), slice(cs), L, D, N, true);
    EXPECT_LT(max_abs_diff(std::span(y.data()).subspan(s * L * D, L * D), ref), 1e-12);
  }
}

TEST(SelectiveScan, LengthMismatchIsDimensionError) {
  ScanParams p{Tensor::from({1, 1}, {-1.0}), Tensor::full({3, 1}, 0.5), Tensor::zeros({3, 1}), Tensor::zeros({3, 1})};
  EXPECT_THROW(selective_scan(Tensor::zeros({2, 1}), p), DimensionError);
  ScanParams q{Tensor::from({1, 1}, {-1.0}), Tensor::full({2, 1}, 0.5), Tensor::zeros({2, 1}), Tensor::zeros({3, 1})};
  EXPECT_THROW(selective_scan(Tensor::zeros({2, 1}), q), DimensionError);
}

TEST(Serialize, FourDirectionsOnTwoByTwo) {
  // [a b; c d] with a..d = 1..4, one channel.
  const auto grid = Tensor::from({2, 2, 1}, {1, 2, 3, 4});
  auto seq = [&](int d) { return scan_serialize(grid, direction_from_index(d)).values.to_vector(); };
  EXPECT_EQ(seq(1), (std::vector<double>{1, 2, 3, 4}));
  EXPECT_EQ(seq(2), (std::vector<double>{4, 3, 2, 1}));
  EXPECT_EQ(seq(3), (std::vector<double>{1, 3, 2, 4}));
  EXPECT_EQ(seq(4), (std::vector<double>{4, 2, 3, 1}));
}

TEST(Serialize, RoundTripIsIdentity) {
  Rng rng(14);
  const auto grid = random_tensor({2, 3, 4, 2}, rng);
  for (int d = 1; d <= 4; ++d) {
    const auto seq = scan_serialize(grid, direction_from_index(d));
    EXPECT_EQ(scan_deserialize(seq).to_vector(), grid.to_vector());
  }
}

TEST(Serialize, DirectionOutOfRange) {
  EXPECT_THROW(direction_from_index(0), ConfigError);
  EXPECT_THROW(direction_from_index(5), ConfigError);
}

TEST(Ss2d, SingleTokenIsFourTimesOneScan) {
  Rng rng(15);
  std::vector<DirectionParams> dirs;
  const auto shared = DirectionParams::init(3, 2, rng);
  for (int i = 0; i < 4; ++i) dirs.push_back(shared);
  const auto fmap = random_tensor({1, 1, 3}, rng);
  const auto delta = random_tensor({1, 3}, rng, 0.1, 1.0);
  const auto y = ss2d(fmap, std::span<const DirectionParams>(dirs), delta);
  const auto tok = reshape(fmap, {1, 3});
  const auto single = selective_scan(tok, ScanParams{shared.state_matrix(), delta, matmul(tok, shared.w_b),
                                                     matmul(tok, shared.w_c)});
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(y[i], 4.0 * single[i], 1e-14);
}

TEST(Ss2d, ZeroInputZeroOutput) {
  Rng rng(16);
  std::vector<DirectionParams> dirs;
  for (int i = 0; i < 4; ++i) dirs.push_back(DirectionParams::init(2, 3, rng));
  const auto y = ss2d(Tensor::zeros({3, 2, 2}), std::span<const DirectionParams>(dirs), Tensor::full({6, 2}, 0.3));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Ss2d, ComposesPrimitiveOps) {
  Rng rng(17);
  std::vector<DirectionParams> dirs;
  for (int i = 0; i < 4; ++i) dirs.push_back(DirectionParams::init(2, 3, rng));
  const auto fmap = random_tensor({2, 2, 2}, rng);
  const auto delta = random_tensor({4, 2}, rng, 0.1, 1.0);
  const auto y = ss2d(fmap, std::span<const DirectionParams>(dirs), delta);

  // Explicit composition with the naive recurrence and hand-made orders.
  const std::vector<std::vector<std::size_t>> orders{{0, 1, 2, 3}, {3, 2, 1, 0}, {0, 2, 1, 3}, {3, 1, 2, 0}};
  const auto fv = fmap.to_vector(), dv = delta.to_vector();
  std::vector<double> expect(8, 0.0);
  for (std::size_t d = 0; d < 4; ++d) {
    const auto& ord = orders[d];
    std::vector<double> xs, ds, bs, cs;
    const auto wb = dirs[d].w_b.to_vector(), wc = dirs[d].w_c.to_vector();
    for (auto tok : ord) {
      for (std::size_t ch = 0; ch < 2; ++ch) {
        xs.push_back(fv[tok * 2 + ch]);
        ds.push_back(dv[tok * 2 + ch]);
      }
      for (std::size_t n = 0; n < 3; ++n) {
        bs.push_back(fv[tok * 2] * wb[n] + fv[tok * 2 + 1] * wb[3 + n]);
        cs.push_back(fv[tok * 2] * wc[n] + fv[tok * 2 + 1] * wc[3 + n]);
      }
    }
    const auto ys = testing::naive_scan(xs, dirs[d].state_matrix().to_vector(), ds, bs, cs, 4, 2, 3, true);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t ch = 0; ch < 2; ++ch) expect[ord[i] * 2 + ch] += ys[i * 2 + ch];
  }
  EXPECT_LT(max_abs_diff(y.data(), expect), 1e-12);
}

TEST(Ss2d, BadDirectionCountOrDeltaShape) {
  Rng rng(18);
  std::vector<DirectionParams> dirs;
  for (int i = 0; i < 5; ++i) dirs.push_back(DirectionParams::init(2, 2, rng));
  const auto fmap = Tensor::zeros({2, 2, 2});
  EXPECT_THROW(ss2d(fmap, std::span<const DirectionParams>(dirs), Tensor::full({4, 2}, 0.2)), ConfigError);
  EXPECT_THROW(ss2d(fmap, std::span<const DirectionParams>(dirs).first(4), Tensor::full({3, 2}, 0.2)),
               DimensionError);
}

}  // namespace
}  // namespace s6mod
