#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "mrff/losses.hpp"
#include "mrff/metrics.hpp"
#include "mrff/rng.hpp"

using namespace mrff;
using T = Tensor<double>;

namespace {

double pairwise_auc(const std::vector<EvalRecord>& r) {
  double hits = 0, pairs = 0;
  for (const auto& p : r) {
    if (p.label != 1) continue;
    for (const auto& n : r) {
      if (n.label != 0) continue;
      pairs += 1;
      hits += p.score > n.score ? 1.0 : p.score == n.score ? 0.5 : 0.0;
    }
  }
  return hits / pairs;
}

}  // namespace

TEST(Bce, MatchesNaiveFormulaAndStaysFinite) {
  for (double z : {-4.0, -0.3, 0.0, 0.8, 6.0}) {
    const double p = 1.0 / (1.0 + std::exp(-z));
    EXPECT_NEAR(bce_with_logits(T::scalar(z), 1).item(), -std::log(p), 1e-12);
    EXPECT_NEAR(bce_with_logits(T::scalar(z), 0).item(), -std::log(1.0 - p), 1e-12);
  }
  EXPECT_NEAR(bce_with_logits(T::scalar(800.0), 0).item(), 800.0, 1e-9);
  EXPECT_NEAR(bce_with_logits(T::scalar(-800.0), 1).item(), 800.0, 1e-9);
}

TEST(Bce, RejectsBadLabel) { EXPECT_THROW(bce_with_logits(T::scalar(0.0), 2), ContractError); }

TEST(Balance, UniformIdentityForAllSmallShapes) {
  for (std::size_t n = 1; n <= 8; ++n) {
    for (std::size_t l = 1; l <= 4; ++l) {
      std::vector<T> probs(l, T::filled({1, n}, 1.0 / static_cast<double>(n)));
      EXPECT_NEAR(balance_loss(probs, GroupProportions::uniform(l, n)).item(), static_cast<double>(l), 1e-10);
    }
  }
}

TEST(Balance, MatchesDefinitionOnRandomInputs) {
  Rng rng(2);
  const std::size_t L = 3, N = 4;
  GroupProportions f{L, N, {}};
  std::vector<T> probs;
  double expected = 0;
  for (std::size_t l = 0; l < L; ++l) {
    std::vector<double> p(N), q(N);
    double sp = 0, sq = 0;
    for (std::size_t i = 0; i < N; ++i) {
      p[i] = rng.uniform(0.1, 1.0);
      q[i] = rng.uniform(0.1, 1.0);
      sp += p[i];
      sq += q[i];
    }
    for (std::size_t i = 0; i < N; ++i) {
      p[i] /= sp;
      q[i] /= sq;
      f.values.push_back(q[i]);
      expected += static_cast<double>(N) * p[i] * q[i];
    }
    probs.push_back(T::from({1, N}, p));
  }
  EXPECT_NEAR(balance_loss(probs, f).item(), expected, 1e-14);
}

TEST(Balance, GradientPushesAwayFromCrowdedGroup) {
  auto p = T::from({1, 3}, {0.2, 0.5, 0.3}, true);
  const GroupProportions f{1, 3, {0.7, 0.2, 0.1}};
  p.zero_grad();
  backward(balance_loss<double>({p}, f));
  // d/dp_i = N * f_i
  EXPECT_DOUBLE_EQ(p.grad()[0], 3 * 0.7);
  EXPECT_DOUBLE_EQ(p.grad()[2], 3 * 0.1);
}

TEST(Balance, ShapeMismatch) {
  EXPECT_THROW(balance_loss<double>({T::filled({1, 3}, 1.0 / 3)}, GroupProportions::uniform(2, 3)), DimensionError);
  EXPECT_THROW(balance_loss<double>({T::filled({1, 2}, 0.5)}, GroupProportions::uniform(1, 3)), DimensionError);
}

TEST(LocalLoss, CombinesMeans) {
  const auto v = local_loss<double>({T::scalar(1.0), T::scalar(3.0)}, {T::scalar(4.0), T::scalar(8.0)}, 0.25).item();
  EXPECT_DOUBLE_EQ(v, 2.0 + 0.25 * 6.0);
  EXPECT_DOUBLE_EQ(local_loss<double>({T::scalar(1.0)}, {T::scalar(9.0)}, 0.0).item(), 1.0);
  EXPECT_THROW(local_loss<double>({}, {}, 0.1), DegenerateInputError);
}

TEST(Auc, MatchesPairCountingWithTies) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<EvalRecord> r;
    for (int i = 0; i < 60; ++i) r.push_back({std::round(rng.uniform() * 8) / 8, rng.bernoulli(0.4) ? 1 : 0});
    r.push_back({0.5, 1});
    r.push_back({0.5, 0});
    EXPECT_NEAR(auc(r), pairwise_auc(r), 1e-12);
  }
}

TEST(Auc, KnownValues) {
  const std::vector<EvalRecord> perfect{{0.9, 1}, {0.8, 1}, {0.1, 0}};
  EXPECT_DOUBLE_EQ(auc(perfect), 1.0);
  const std::vector<EvalRecord> tied{{0.5, 1}, {0.5, 0}};
  EXPECT_DOUBLE_EQ(auc(tied), 0.5);
  const std::vector<EvalRecord> one_class{{0.5, 1}, {0.2, 1}};
  EXPECT_THROW(auc(one_class), UndefinedMetricError);
}

TEST(LogLoss, MatchesMeanNegativeLogLikelihoodWithClip) {
  const std::vector<EvalRecord> r{{0.9, 1}, {0.2, 0}, {0.0, 1}};
  const double expected = -(std::log(0.9) + std::log(0.8) + std::log(1e-7)) / 3.0;
  EXPECT_NEAR(logloss(r), expected, 1e-12);
  EXPECT_THROW(logloss({}), DegenerateInputError);
}

TEST(Proportions, MaxShareAndStochasticity) {
  const GroupProportions f{2, 2, {0.25, 0.75, 0.5, 0.5}};
  EXPECT_DOUBLE_EQ(f.max_share(), 0.75);
  EXPECT_TRUE(f.row_stochastic());
  EXPECT_FALSE((GroupProportions{1, 2, {0.5, 0.6}}).row_stochastic());
}
