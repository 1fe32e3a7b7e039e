#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "adept/rng.hpp"
#include "adept/tensor.hpp"

using namespace adept;

namespace {

Tensor randn(Shape s, Rng& rng, bool grad = false) {
  std::vector<double> v(shape_numel(s));
  for (auto& x : v) x = rng.normal();
  return Tensor::from(std::move(s), std::move(v), grad);
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(Tensor, FromRejectsWrongCountAndZeroExtent) {
  EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), DimensionError);
  EXPECT_THROW(Tensor::from({0, 2}, {}), DimensionError);
}

TEST(Tensor, ElementwiseShapeMismatchThrows) {
  const Tensor a = Tensor::zeros({2, 3}), b = Tensor::zeros({3, 2});
  EXPECT_THROW(add(a, b), DimensionError);
  EXPECT_THROW(mul(a, b), DimensionError);
  EXPECT_THROW(matmul(a, a), DimensionError);
}

TEST(Tensor, MatmulMatchesHandProduct) {
  const Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor b = Tensor::from({3, 2}, {7, 8, 9, 10, 11, 12});
  EXPECT_EQ(values(matmul(a, b)), (std::vector<double>{58, 64, 139, 154}));
  EXPECT_EQ(values(transpose(a)), (std::vector<double>{1, 4, 2, 5, 3, 6}));
}

TEST(Tensor, MatmulIndependentOfThreadCount) {
  Rng rng(3);
  const Tensor a = randn({96, 80}, rng), b = randn({80, 72}, rng);
  set_kernel_threads(1);
  const auto one = values(matmul(a, b));
  set_kernel_threads(4);
  const auto four = values(matmul(a, b));
  set_kernel_threads(0);
  EXPECT_EQ(one, four);
}

TEST(Tensor, SoftmaxFrozenValues) {
  const Tensor p = softmax(Tensor::from({3}, {1, 2, 3}), 0);
  EXPECT_NEAR(p[0], 0.09003057, 1e-8);
  EXPECT_NEAR(p[1], 0.24472847, 1e-8);
  EXPECT_NEAR(p[2], 0.66524096, 1e-8);
}

TEST(Tensor, SoftmaxRowsSumToOneAndIgnoreShift) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = randn({4, 7}, rng);
    const Tensor p = softmax(x, 1);
    const Tensor q = softmax(add(x, Tensor::full({4, 7}, 123.0)), 1);
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 7; ++c) {
        s += p.at(r, c);
        EXPECT_NEAR(p.at(r, c), q.at(r, c), 1e-12);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Tensor, SoftmaxRejectsNonFinite) {
  EXPECT_THROW(softmax(Tensor::from({2}, {1.0, NAN}), 0), DomainError);
}

TEST(Tensor, LogsumexpMatchesNaiveSum) {
  const Tensor x = Tensor::from({4}, {0.5, -1.0, 2.0, 0.0});
  double s = 0.0;
  for (double v : x.data()) s += std::exp(v);
  EXPECT_NEAR(logsumexp(x).item(), std::log(s), 1e-12);
  EXPECT_TRUE(std::isfinite(logsumexp(Tensor::from({2}, {1000.0, 1000.0})).item()));
}

TEST(Tensor, KlOnehotFrozenValue) {
  EXPECT_NEAR(kl_div_onehot(Tensor::from({3}, {1, 2, 3}), 0).item(), 2.40760596, 1e-8);
}

TEST(Tensor, KlOnehotUniformIsLogN) {
  for (std::size_t n : {2u, 7u, 128u}) {
    EXPECT_NEAR(kl_div_onehot(Tensor::full({n}, 0.37), 1).item(), std::log(static_cast<double>(n)), 1e-9);
  }
  EXPECT_THROW(kl_div_onehot(Tensor::full({3}, 0.0), 3), IndexError);
}

TEST(Tensor, LayerNormRowsAreStandardized) {
  Rng rng(5);
  const Tensor x = randn({5, 16}, rng);
  const Tensor y = layer_norm(x, Tensor::full({16}, 1.0), Tensor::zeros({16}));
  for (std::size_t r = 0; r < 5; ++r) {
    double m = 0.0, v = 0.0;
    for (std::size_t c = 0; c < 16; ++c) m += y.at(r, c) / 16.0;
    for (std::size_t c = 0; c < 16; ++c) v += (y.at(r, c) - m) * (y.at(r, c) - m) / 16.0;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v, 1.0, 1e-4);  // eps in the denominator
  }
}

TEST(Tensor, L2NormalizeGivesUnitRowsAndIsScaleInvariant) {
  Rng rng(6);
  const Tensor x = randn({3, 9}, rng);
  const Tensor a = l2_normalize(x), b = l2_normalize(scale(x, 17.5));
  for (std::size_t r = 0; r < 3; ++r) {
    double n = 0.0;
    for (std::size_t c = 0; c < 9; ++c) {
      n += a.at(r, c) * a.at(r, c);
      EXPECT_NEAR(a.at(r, c), b.at(r, c), 1e-14);
    }
    EXPECT_NEAR(n, 1.0, 1e-12);
  }
}

TEST(Tensor, AttentionWithEqualKeysAveragesValues) {
  // Identical keys give uniform weights, so every output row is the mean value row.
  const Tensor q = Tensor::from({2, 4}, {1, -2, 0.5, 3, 0, 1, 1, 0});
  const Tensor k = Tensor::full({3, 4}, 0.25);
  const Tensor v = Tensor::from({3, 4}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
  const Tensor o = attention(q, k, v, 2);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(o.at(r, c), 5.0 + static_cast<double>(c), 1e-12);
}

TEST(Tensor, AttentionMatchesNaivePerHeadLoop) {
  Rng rng(8);
  const std::size_t nq = 3, nk = 5, d = 6, heads = 3, dh = d / heads;
  const Tensor q = randn({nq, d}, rng), k = randn({nk, d}, rng), v = randn({nk, d}, rng);
  const Tensor o = attention(q, k, v, heads);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < nq; ++i) {
      std::vector<double> w(nk);
      double z = 0.0;
      for (std::size_t j = 0; j < nk; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += q.at(i, h * dh + c) * k.at(j, h * dh + c);
        w[j] = std::exp(s / std::sqrt(static_cast<double>(dh)));
        z += w[j];
      }
      for (std::size_t c = 0; c < dh; ++c) {
        double expect = 0.0;
        for (std::size_t j = 0; j < nk; ++j) expect += w[j] / z * v.at(j, h * dh + c);
        EXPECT_NEAR(o.at(i, h * dh + c), expect, 1e-12);
      }
    }
}

TEST(Tensor, ConcatReshapeEmbedding) {
  const Tensor a = Tensor::from({1, 2}, {1, 2}), b = Tensor::from({1, 3}, {3, 4, 5});
  EXPECT_EQ(values(concat({a, b}, 1)), (std::vector<double>{1, 2, 3, 4, 5}));
  EXPECT_THROW(concat({a, b}, 0), DimensionError);
  EXPECT_EQ(reshape(b, {3, 1}).shape(), (Shape{3, 1}));
  EXPECT_THROW(reshape(b, {2, 2}), DimensionError);
  const Tensor table = Tensor::from({3, 2}, {0, 1, 10, 11, 20, 21});
  const std::vector<int> idx{2, 0, 2};
  EXPECT_EQ(values(embedding(table, idx)), (std::vector<double>{20, 21, 0, 1, 20, 21}));
  const std::vector<int> bad{3};
  EXPECT_THROW(embedding(table, bad), IndexError);
}

TEST(Tensor, LeafGradientsAccumulateUntilZeroGrad) {
  const Tensor x = Tensor::from({2}, {1.0, -2.0}, true);
  const Tensor loss = sum(mul(x, x));
  backward(loss);
  backward(loss);
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], -8.0);
  Tensor y = x;
  y.zero_grad();
  EXPECT_FALSE(x.has_grad());
}

TEST(Tensor, NoGradGuardRecordsNothing) {
  const Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
  Tensor y;
  {
    NoGradGuard ng;
    y = mul(x, x);
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(mul(x, x).requires_grad());
}

TEST(Tensor, BackwardNeedsScalar) {
  const Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
  EXPECT_THROW(backward(mul(x, x)), ContractError);
}

TEST(Tensor, SharedSubexpressionGradientSumsBothPaths) {
  // f = sum((x*x) + (x*x)) reuses one node; df/dx = 4x.
  const Tensor x = Tensor::from({3}, {0.5, -1.0, 2.0}, true);
  const Tensor sq = mul(x, x);
  backward(sum(add(sq, sq)));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 4.0 * x[i]);
}

TEST(Tensor, L1LossValueAndTieSubgradient) {
  const Tensor p = Tensor::from({3}, {1.0, 2.0, 3.0}, true);
  const Tensor t = Tensor::from({3}, {0.0, 2.0, 5.0});
  const Tensor l = l1_loss(p, t);
  EXPECT_DOUBLE_EQ(l.item(), 1.0);
  backward(l);
  EXPECT_DOUBLE_EQ(p.grad()[0], 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(p.grad()[1], 0.0);
  EXPECT_DOUBLE_EQ(p.grad()[2], -1.0 / 3.0);
}

TEST(Rng, DeriveSeedSeparatesStreams) {
  EXPECT_NE(derive_seed(1, 0), derive_seed(1, 1));
  EXPECT_NE(derive_seed(1, 0), derive_seed(0, 1));
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, UniformIntCoversRangeWithoutBias) {
  Rng rng(9);
  std::vector<int> counts(6, 0);
  const int n = 60000;
  for (int i = 0; i < n; ++i) ++counts[rng.uniform_int(6)];
  for (int c : counts) EXPECT_NEAR(c, n / 6, 5 * std::sqrt(n / 6.0));
}
