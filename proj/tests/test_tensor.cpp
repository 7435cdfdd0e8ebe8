#include <random>

#include <gtest/gtest.h>

#include "cpmr/tensor.hpp"

using namespace cpmr;

namespace {

Tensor random_tensor(std::mt19937_64& rng, std::size_t r, std::size_t c) {
  std::uniform_real_distribution<double> d(-1, 1);
  Tensor t(r, c);
  for (double& v : t.values()) v = d(rng);
  return t;
}

// i-k-j loop in the same accumulation order as the CSR kernel.
Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  Tensor c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t k = 0; k < a.cols(); ++k) {
      if (a(i, k) == 0.0) continue;
      for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) += a(i, k) * b(k, j);
    }
  return c;
}

}  // namespace

TEST(Tensor, ShapeAndAccess) {
  Tensor t(2, 3, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  EXPECT_EQ(t(1, 2), 6.0);
  EXPECT_EQ(t.row(1)[0], 4.0);
  EXPECT_EQ(t.shape_str(), "2x3");
  EXPECT_THROW(Tensor(2, 2, {1, 2, 3}), ShapeError);
  Tensor u = t;
  EXPECT_THROW(u += Tensor(3, 2), ShapeError);
}

TEST(Tensor, IdentityAndArithmetic) {
  Tensor i = Tensor::identity(3);
  EXPECT_EQ(i(0, 0), 1.0);
  EXPECT_EQ(i(0, 1), 0.0);
  Tensor a(1, 2, {1, 2});
  a *= 3.0;
  a -= Tensor(1, 2, {1, 1});
  EXPECT_EQ(a, Tensor(1, 2, {2, 5}));
  EXPECT_DOUBLE_EQ(a.max_abs(), 5.0);
  a[0] = std::numeric_limits<double>::infinity();
  EXPECT_FALSE(a.all_finite());
}

TEST(Tensor, GemmMatchesNaiveProduct) {
  std::mt19937_64 rng(1);
  const Tensor a = random_tensor(rng, 5, 7), b = random_tensor(rng, 7, 3);
  const Tensor c = matmul(a, b), ref = naive_matmul(a, b);
  for (std::size_t k = 0; k < c.size(); ++k) EXPECT_NEAR(c[k], ref[k], 1e-12);

  Tensor ct;
  gemm(transpose(a), true, transpose(b), true, ct);
  for (std::size_t k = 0; k < c.size(); ++k) EXPECT_NEAR(ct[k], ref[k], 1e-12);
  gemm(a, false, b, false, ct, /*accumulate=*/true);
  for (std::size_t k = 0; k < c.size(); ++k) EXPECT_NEAR(ct[k], 2 * ref[k], 1e-12);
  EXPECT_THROW(matmul(a, a), ShapeError);
}

TEST(SparseMatrix, TripletsSortAndSumDuplicates) {
  auto s = SparseMatrix::from_triplets(2, 3, {{1, 2, 1.0}, {0, 1, 2.0}, {1, 2, 0.5}, {1, 0, -1.0}});
  EXPECT_EQ(s.nnz(), 3u);
  EXPECT_EQ(s.at(1, 2), 1.5);
  EXPECT_EQ(s.at(0, 0), 0.0);
  const auto idx = s.indices();
  EXPECT_EQ(idx[1], 0u);  // row 1 sorted: col 0 then col 2
  EXPECT_EQ(idx[2], 2u);
  EXPECT_EQ(s.to_triplet_text(), "0 1 2\n1 0 -1\n1 2 1.5\n");
  EXPECT_THROW(SparseMatrix::from_triplets(1, 1, {{0, 1, 1.0}}), ShapeError);
}

TEST(SparseMatrix, SpmmEqualsDenseProductExactly) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::size_t> dim(1, 100);
  std::bernoulli_distribution keep(0.1);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t r = dim(rng), c = dim(rng), k = 1 + dim(rng) % 8;
    std::vector<SparseMatrix::Triplet> t;
    std::uniform_real_distribution<double> val(-2, 2);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j)
        if (keep(rng)) t.push_back({i, j, val(rng)});
    const auto s = SparseMatrix::from_triplets(r, c, t);
    const Tensor x = random_tensor(rng, c, k);
    EXPECT_EQ(s.multiply(x), naive_matmul(s.to_dense(), x));
  }
}

TEST(SparseMatrix, TransposeRoundTrip) {
  auto s = SparseMatrix::from_triplets(3, 2, {{0, 1, 1.0}, {2, 0, 3.0}});
  EXPECT_EQ(s.transposed().to_dense(), transpose(s.to_dense()));
  EXPECT_EQ(s.transposed().transposed().to_dense(), s.to_dense());
  EXPECT_THROW(s.multiply(Tensor(3, 1)), ShapeError);
}
