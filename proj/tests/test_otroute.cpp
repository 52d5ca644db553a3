#include "roam/otroute.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

using namespace roam;
using namespace roam::otroute;
using roam::testing::simplex;
using roam::testing::uniform_matrix;

namespace {

Marginals uniform_marginals(int m, int e) {
  return {Vector::Constant(m, 1.0 / m), Vector::Constant(e, 1.0 / e)};
}

SinkhornOptions opts(double eps, int t) {
  SinkhornOptions o;
  o.epsilon = eps;
  o.iterations = t;
  return o;
}

// Linear-domain scaling iterations in extended precision.
Matrix fixed_point_sinkhorn(const Matrix& c, const Vector& r, const Vector& q, double eps, int iters) {
  using LD = long double;
  const auto m = c.rows(), e = c.cols();
  std::vector<LD> u(m, 1.0L), v(e, 1.0L);
  auto k = [&](Eigen::Index i, Eigen::Index j) { return std::exp(-static_cast<LD>(c(i, j)) / eps); };
  for (int it = 0; it < iters; ++it) {
    for (Eigen::Index i = 0; i < m; ++i) {
      LD s = 0;
      for (Eigen::Index j = 0; j < e; ++j) s += k(i, j) * v[j];
      u[i] = r(i) / s;
    }
    for (Eigen::Index j = 0; j < e; ++j) {
      LD s = 0;
      for (Eigen::Index i = 0; i < m; ++i) s += k(i, j) * u[i];
      v[j] = q(j) / s;
    }
  }
  Matrix p(m, e);
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < e; ++j) p(i, j) = static_cast<double>(u[i] * k(i, j) * v[j]);
  return p;
}

double min_over_permutations(const Matrix& c) {
  std::vector<int> perm(c.rows());
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (int i = 0; i < c.rows(); ++i) s += c(i, perm[i]);
    best = std::min(best, s);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best / c.rows();
}

// Enumerates every candidate basis of size M+E-1 and keeps the cheapest
// feasible vertex of the transportation polytope.
double vertex_enumeration_ot(const Matrix& c, const Vector& r, const Vector& q) {
  const int m = static_cast<int>(c.rows()), e = static_cast<int>(c.cols());
  const int cells = m * e, basis = m + e - 1;
  Matrix a = Matrix::Zero(m + e - 1, cells);
  Vector b(m + e - 1);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < e; ++j) a(i, i * e + j) = 1.0;
    b(i) = r(i);
  }
  for (int j = 0; j + 1 < e; ++j) {
    for (int i = 0; i < m; ++i) a(m + j, i * e + j) = 1.0;
    b(m + j) = q(j);
  }
  double best = std::numeric_limits<double>::infinity();
  std::vector<bool> pick(cells, false);
  std::fill(pick.begin(), pick.begin() + basis, true);
  do {
    std::vector<int> idx;
    for (int k = 0; k < cells; ++k)
      if (pick[k]) idx.push_back(k);
    Matrix sub(basis, basis);
    for (int k = 0; k < basis; ++k) sub.col(k) = a.col(idx[k]);
    Eigen::FullPivLU<Matrix> lu(sub);
    if (lu.rank() < basis) continue;
    const Vector x = lu.solve(b);
    if (x.minCoeff() < -1e-12) continue;
    double cost = 0.0;
    for (int k = 0; k < basis; ++k) cost += x(k) * c(idx[k] / e, idx[k] % e);
    best = std::min(best, cost);
  } while (std::prev_permutation(pick.begin(), pick.end()));
  return best;
}

double transport_cost(const Matrix& plan, const Matrix& c) { return plan.cwiseProduct(c).sum(); }

tokenizer::RegionGraph weighted_graph(const Matrix& centroids, int k) {
  return tokenizer::heat_kernel_weights(tokenizer::build_region_graph(centroids, k), centroids);
}

}  // namespace

TEST(Cost, CosineCases) {
  Matrix z(3, 2), mu(1, 2);
  mu << 0.6, 0.8;
  z << 1.2, 1.6, -0.8, 0.6, -3, -4;
  const CostMatrix c = cost_matrix(z, mu);
  EXPECT_NEAR(c.values(0, 0), 0.0, 1e-15);
  EXPECT_NEAR(c.values(1, 0), 1.0, 1e-15);
  EXPECT_NEAR(c.values(2, 0), 2.0, 1e-15);
  EXPECT_EQ(c.zero_norm_rows, 0);
}

TEST(Cost, ZeroNormWarns) {
  Matrix z = Matrix::Zero(2, 3), mu = Matrix::Identity(2, 3);
  z(1, 0) = 1.0;
  mu.row(1).setZero();
  const CostMatrix c = cost_matrix(z, mu);
  EXPECT_EQ(c.zero_norm_rows, 1);
  EXPECT_EQ(c.zero_norm_protos, 1);
  EXPECT_EQ(c.values(0, 0), 1.0);
  EXPECT_EQ(c.values(1, 1), 1.0);
  EXPECT_NEAR(c.values(1, 0), 0.0, 1e-15);
}

TEST(Cost, RangeProperty) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 20; ++t) {
    const CostMatrix c = cost_matrix(roam::testing::gaussian_matrix(rng, 30, 7),
                                     roam::testing::gaussian_matrix(rng, 5, 7));
    EXPECT_GE(c.values.minCoeff(), 0.0);
    EXPECT_LE(c.values.maxCoeff(), 2.0);
  }
}

TEST(Marginals, FromMasses) {
  Vector a(3);
  a << 1, 3, 4;
  const Marginals mg = make_marginals(a, 4);
  EXPECT_DOUBLE_EQ(mg.r(0), 1.0 / 8.0);
  EXPECT_DOUBLE_EQ(mg.r(2), 0.5);
  EXPECT_TRUE(mg.q.isApproxToConstant(0.25));
  EXPECT_THROW(make_marginals(Vector::Zero(2), 2), InvalidArgument);
  EXPECT_THROW(validate(Marginals{Vector::Constant(2, 0.6), Vector::Constant(1, 1.0)}), InvalidArgument);
}

TEST(Sinkhorn, ConstantCostIsIndependentCoupling) {
  std::mt19937_64 rng(2);
  const Vector r = simplex(rng, 6), q = simplex(rng, 3);
  const TransportPlan p = sinkhorn(Matrix::Constant(6, 3, 0.7), {r, q}, opts(0.1, 20));
  EXPECT_LT((p.plan - r * q.transpose()).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Sinkhorn, SingleRowEqualsCapacity) {
  std::mt19937_64 rng(3);
  const Vector q = simplex(rng, 5);
  const TransportPlan p = sinkhorn(uniform_matrix(rng, 1, 5, 0.0, 2.0), {Vector::Ones(1), q}, opts(0.1, 3));
  EXPECT_LT((p.plan.row(0).transpose() - q).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Sinkhorn, TwoByTwoMatchesFixedPoint) {
  Matrix c(2, 2);
  c << 0, 1, 1, 0;
  const Vector h = Vector::Constant(2, 0.5);
  const Matrix oracle = fixed_point_sinkhorn(c, h, h, 0.1, 10000);
  const TransportPlan p = sinkhorn(c, {h, h}, opts(0.1, 20));
  EXPECT_LT((p.plan - oracle).cwiseAbs().maxCoeff(), 1e-8);
  const double d = 1.0 / (2.0 * (1.0 + std::exp(-10.0)));
  EXPECT_NEAR(oracle(0, 0), d, 1e-15);
}

TEST(Sinkhorn, RandomMatchesFixedPointOracle) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 5; ++t) {
    const Matrix c = uniform_matrix(rng, 7, 4, 0.0, 2.0);
    const Vector r = simplex(rng, 7), q = simplex(rng, 4);
    const Matrix oracle = fixed_point_sinkhorn(c, r, q, 0.5, 2000);
    const TransportPlan p = sinkhorn(c, {r, q}, opts(0.5, 500));
    EXPECT_LT((p.plan - oracle).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Sinkhorn, FeasibilityAndPositivity) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 20; ++t) {
    const int m = 1 + static_cast<int>(rng() % 256), e = 1 + static_cast<int>(rng() % 8);
    const Vector r = simplex(rng, m), q = simplex(rng, e);
    const TransportPlan p = sinkhorn(uniform_matrix(rng, m, e, 0.0, 2.0), {r, q}, opts(0.1, 20));
    EXPECT_LE(p.column_residual(), 1e-12);
    EXPECT_GT(p.plan.minCoeff(), 0.0);
    EXPECT_EQ(static_cast<int>(p.log.size()), 20);
    EXPECT_EQ(p.log.back().row_residual_inf, p.row_residual());
  }
}

TEST(Sinkhorn, RowResidualAtDefaultBudget) {
  std::mt19937_64 rng(55);
  for (int t = 0; t < 20; ++t) {
    const TransportPlan p = sinkhorn(uniform_matrix(rng, 256, 8, 0.0, 2.0), uniform_marginals(256, 8), opts(0.1, 20));
    EXPECT_LE(p.row_residual(), 1e-6) << "instance " << t;
  }
}

TEST(Sinkhorn, ShiftInvariance) {
  std::mt19937_64 rng(6);
  const Matrix c = uniform_matrix(rng, 30, 5, 0.0, 1.0);
  const Marginals mg{simplex(rng, 30), simplex(rng, 5)};
  const TransportPlan a = sinkhorn(c, mg, opts(0.1, 20));
  const TransportPlan b = sinkhorn(c.array() + 0.75, mg, opts(0.1, 20));
  EXPECT_LT((a.plan - b.plan).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Sinkhorn, RowResidualMonotone) {
  std::mt19937_64 rng(7);
  for (int t = 0; t < 30; ++t) {
    const int m = 2 + static_cast<int>(rng() % 60), e = 2 + static_cast<int>(rng() % 7);
    const TransportPlan p =
        sinkhorn(uniform_matrix(rng, m, e, 0.0, 2.0), {simplex(rng, m), simplex(rng, e)}, opts(0.05, 60));
    for (std::size_t i = 1; i < p.log.size(); ++i) {
      EXPECT_LE(p.log[i].row_residual_l1, p.log[i - 1].row_residual_l1 + 1e-15);
    }
  }
}

TEST(Sinkhorn, SmallEpsilonNoOverflow) {
  std::mt19937_64 rng(8);
  const TransportPlan p = sinkhorn(uniform_matrix(rng, 20, 4, 0.0, 2.0), uniform_marginals(20, 4), opts(1e-4, 50));
  EXPECT_TRUE(p.plan.allFinite());
  EXPECT_LE(p.column_residual(), 1e-12);
}

TEST(Sinkhorn, ConvergeMode) {
  std::mt19937_64 rng(9);
  SinkhornOptions o = opts(0.05, 20);
  o.tolerance = 1e-9;
  const TransportPlan p = sinkhorn(uniform_matrix(rng, 40, 6, 0.0, 2.0), uniform_marginals(40, 6), o);
  EXPECT_LE(static_cast<int>(p.log.size()), 200);
  EXPECT_TRUE(p.log.back().row_residual_l1 <= 1e-9 || p.log.size() == 200u);
}

TEST(Sinkhorn, Errors) {
  Matrix c = Matrix::Zero(2, 2);
  const Marginals mg = uniform_marginals(2, 2);
  EXPECT_THROW(sinkhorn(c, mg, opts(0.0, 5)), InvalidArgument);
  EXPECT_THROW(sinkhorn(c, mg, opts(0.1, 0)), InvalidArgument);
  c(0, 0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(sinkhorn(c, mg, opts(0.1, 5)), InvalidArgument);
  EXPECT_THROW(sinkhorn(Matrix::Zero(3, 2), mg, opts(0.1, 5)), InvalidArgument);
}

TEST(Sinkhorn, FiveByFiveNearExactOptimum) {
  std::mt19937_64 rng(10);
  const Matrix c = uniform_matrix(rng, 5, 5, 0.0, 1.0);
  const TransportPlan p = sinkhorn(c, uniform_marginals(5, 5), opts(0.01, 2000));
  const double opt = min_over_permutations(c);
  EXPECT_NEAR(transport_cost(p.plan, c), opt, 1e-2);
  EXPECT_GE(transport_cost(p.plan, c), opt - 1e-12);
}

TEST(Schedule, EvenlySpaced) {
  EXPECT_EQ(smoothing_schedule(20, 3), (std::vector<int>{5, 10, 15}));
  EXPECT_EQ(smoothing_schedule(8, 3), (std::vector<int>{2, 4, 6}));
  EXPECT_TRUE(smoothing_schedule(20, 0).empty());
  EXPECT_THROW(smoothing_schedule(3, 4), InvalidArgument);
}

TEST(GraphSinkhorn, LambdaZeroIsSinkhorn) {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 10; ++t) {
    const int m = 5 + static_cast<int>(rng() % 50);
    const Matrix cen = uniform_matrix(rng, m, 2, 0.0, 1.0);
    const auto g = weighted_graph(cen, 8);
    const Matrix c = uniform_matrix(rng, m, 4, 0.0, 2.0);
    const Marginals mg{simplex(rng, m), simplex(rng, 4)};
    const TransportPlan a = sinkhorn(c, mg, opts(0.1, 20));
    const TransportPlan b = graph_sinkhorn(c, mg, opts(0.1, 20), {&g, 0.0, 3, {}});
    EXPECT_LE((a.plan - b.plan).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(GraphSinkhorn, SingleRegionIgnoresLambda) {
  std::mt19937_64 rng(12);
  const Matrix cen = Matrix::Zero(1, 2);
  const auto g = weighted_graph(cen, 8);
  const Matrix c = uniform_matrix(rng, 1, 3, 0.0, 2.0);
  const Marginals mg{Vector::Ones(1), simplex(rng, 3)};
  const TransportPlan a = sinkhorn(c, mg, opts(0.1, 20));
  const TransportPlan b = graph_sinkhorn(c, mg, opts(0.1, 20), {&g, 0.9, 3, {}});
  EXPECT_LE((a.plan - b.plan).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(GraphSinkhorn, IdenticalNeighborRowsStayIdentical) {
  // Nodes 0 and 1 mirror each other across the axis through nodes 2 and 3.
  Matrix cen(4, 2);
  cen << -1, 0, 1, 0, 0, 3, 0, -5;
  const auto g = weighted_graph(cen, 3);
  ASSERT_EQ(g.weights[0], g.weights[1]);
  Matrix c(4, 3);
  c << 0.1, 0.9, 1.5, 0.1, 0.9, 1.5, 1.2, 0.3, 0.2, 0.7, 0.7, 1.9;
  const TransportPlan p = graph_sinkhorn(c, uniform_marginals(4, 3), opts(0.1, 20), {&g, 0.3, 3, {}});
  EXPECT_EQ((p.plan.row(0) - p.plan.row(1)).cwiseAbs().maxCoeff(), 0.0);
}

TEST(GraphSinkhorn, FeasibleAfterDiffusion) {
  std::mt19937_64 rng(13);
  for (int t = 0; t < 10; ++t) {
    const int m = 20 + static_cast<int>(rng() % 200);
    const Matrix cen = uniform_matrix(rng, m, 2, 0.0, 1.0);
    const auto g = weighted_graph(cen, 8);
    const TransportPlan p = graph_sinkhorn(uniform_matrix(rng, m, 8, 0.0, 2.0), {simplex(rng, m), simplex(rng, 8)},
                                           opts(0.1, 20), {&g, 0.3, 3, {}});
    EXPECT_LE(p.column_residual(), 1e-12);
    EXPECT_GT(p.plan.minCoeff(), 0.0);
    int diffused = 0;
    for (const auto& rec : p.log) diffused += rec.diffused;
    EXPECT_EQ(diffused, 3);
    EXPECT_TRUE(p.log[4].diffused && p.log[9].diffused && p.log[14].diffused);
  }
}

TEST(GraphSinkhorn, ResidualMonotoneBetweenDiffusions) {
  std::mt19937_64 rng(14);
  const int m = 60;
  const Matrix cen = uniform_matrix(rng, m, 2, 0.0, 1.0);
  const auto g = weighted_graph(cen, 8);
  const TransportPlan p = graph_sinkhorn(uniform_matrix(rng, m, 6, 0.0, 2.0), uniform_marginals(m, 6),
                                         opts(0.1, 40), {&g, 0.3, 3, {}});
  for (std::size_t i = 1; i < p.log.size(); ++i) {
    if (p.log[i - 1].diffused) continue;
    EXPECT_LE(p.log[i].row_residual_l1, p.log[i - 1].row_residual_l1 + 1e-15);
  }
}

TEST(GraphSinkhorn, GraphSizeMismatch) {
  const auto g = weighted_graph(Matrix::Zero(3, 2), 2);
  EXPECT_THROW(graph_sinkhorn(Matrix::Zero(4, 2), uniform_marginals(4, 2), opts(0.1, 20), {&g, 0.3, 3, {}}),
               InvalidArgument);
  EXPECT_THROW(graph_sinkhorn(Matrix::Zero(3, 2), uniform_marginals(3, 2), opts(0.1, 20), {&g, 1.5, 3, {}}),
               InvalidArgument);
}

TEST(Diffuse, ConvexHullOfNeighborhood) {
  std::mt19937_64 rng(15);
  const int m = 30;
  const Matrix cen = uniform_matrix(rng, m, 2, 0.0, 1.0);
  const auto g = weighted_graph(cen, 5);
  const Matrix l = uniform_matrix(rng, m, 4, -8.0, 0.0);
  const Matrix out = diffuse_log_plan(l, g, 0.3);
  for (int i = 0; i < m; ++i) {
    for (int e = 0; e < 4; ++e) {
      double lo = l(i, e), hi = l(i, e);
      for (int n : g.neighbors[i]) {
        lo = std::min(lo, l(n, e));
        hi = std::max(hi, l(n, e));
      }
      EXPECT_GE(out(i, e), lo - 1e-12);
      EXPECT_LE(out(i, e), hi + 1e-12);
    }
  }
  Matrix expect = 0.7 * l;
  for (int i = 0; i < m; ++i)
    for (std::size_t k = 0; k < g.neighbors[i].size(); ++k)
      expect.row(i) += 0.3 * g.weights[i][k] * l.row(g.neighbors[i][k]);
  EXPECT_LT((out - expect).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Topk, KEqualsERescalesRows) {
  std::mt19937_64 rng(16);
  const Matrix c = uniform_matrix(rng, 10, 4, 0.0, 2.0);
  const Marginals mg{simplex(rng, 10), simplex(rng, 4)};
  const TransportPlan p = sinkhorn(c, mg, opts(0.1, 5));
  const DispatchMatrix d = topk_dispatch(p.plan, mg.r, 4);
  for (int i = 0; i < 10; ++i) {
    EXPECT_NEAR(d.gamma.row(i).sum(), mg.r(i), 1e-15);
    const RowVector ratio = d.gamma.row(i).cwiseQuotient(p.plan.row(i));
    EXPECT_LT(ratio.maxCoeff() - ratio.minCoeff(), 1e-12 * ratio.maxCoeff());
  }
}

TEST(Topk, ArithmeticExample) {
  Matrix p(1, 3);
  const double rm = 0.4;
  p << 0.5 * rm, 0.3 * rm, 0.2 * rm;
  const DispatchMatrix d = topk_dispatch(p, Vector::Constant(1, rm), 2);
  EXPECT_NEAR(d.gamma(0, 0), 0.625 * rm, 1e-15);
  EXPECT_NEAR(d.gamma(0, 1), 0.375 * rm, 1e-15);
  EXPECT_EQ(d.gamma(0, 2), 0.0);
  EXPECT_EQ(d.support[0], std::vector<int>{0});
  EXPECT_TRUE(d.support[2].empty());
}

TEST(Topk, TiesGoToLowerIndex) {
  Matrix p(2, 3);
  p << 0.4, 0.4, 0.2, 0.1, 0.3, 0.3;
  const DispatchMatrix d = topk_dispatch(p, Vector::Constant(2, 0.5), 1);
  EXPECT_EQ(d.gamma(0, 0), 0.5);
  EXPECT_EQ(d.gamma(0, 1), 0.0);
  EXPECT_EQ(d.gamma(1, 1), 0.5);
  EXPECT_EQ(d.dominant_experts(), (std::vector<int>{0, 1}));
}

TEST(Topk, RowSumsProperty) {
  std::mt19937_64 rng(17);
  for (int t = 0; t < 50; ++t) {
    const int m = 1 + static_cast<int>(rng() % 100), e = 1 + static_cast<int>(rng() % 8);
    const int k = 1 + static_cast<int>(rng() % e);
    const Vector r = simplex(rng, m);
    const Matrix p = uniform_matrix(rng, m, e, 1e-6, 1.0);
    const DispatchMatrix d = topk_dispatch(p, r, k);
    EXPECT_LE((d.gamma.rowwise().sum() - r).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_NEAR(d.gamma.sum(), 1.0, 1e-12);
    for (int i = 0; i < m; ++i) EXPECT_LE((d.gamma.row(i).array() > 0).count(), k);
    EXPECT_TRUE(d.mask == topk_mask(p, k));
  }
  EXPECT_THROW(topk_mask(Matrix::Ones(2, 3), 4), InvalidArgument);
  EXPECT_THROW(topk_mask(Matrix::Ones(2, 3), 0), InvalidArgument);
}

TEST(ExactOt, IdentityFavoring) {
  Matrix c = Matrix::Ones(3, 3) - Matrix::Identity(3, 3);
  const ExactOtResult res = exact_ot_oracle(c, uniform_marginals(3, 3));
  EXPECT_NEAR(res.cost, 0.0, 1e-15);
  EXPECT_LT((res.plan - Matrix::Identity(3, 3) / 3.0).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(ExactOt, ConstantCost) {
  std::mt19937_64 rng(18);
  const ExactOtResult res = exact_ot_oracle(Matrix::Constant(5, 3, 0.8), {simplex(rng, 5), simplex(rng, 3)});
  EXPECT_NEAR(res.cost, 0.8, 1e-14);
}

TEST(ExactOt, MatchesVertexEnumeration) {
  std::mt19937_64 rng(19);
  for (int t = 0; t < 15; ++t) {
    const int m = 2 + static_cast<int>(rng() % 4), e = 2 + static_cast<int>(rng() % 3);
    const Matrix c = uniform_matrix(rng, m, e, 0.0, 2.0);
    const Marginals mg{simplex(rng, m), simplex(rng, e)};
    const ExactOtResult res = exact_ot_oracle(c, mg);
    EXPECT_NEAR(res.cost, vertex_enumeration_ot(c, mg.r, mg.q), 1e-12);
    EXPECT_LE((res.plan.rowwise().sum() - mg.r).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LE((res.plan.colwise().sum().transpose() - mg.q).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_GE(res.plan.minCoeff(), -1e-15);
  }
}

TEST(ExactOt, PermutationPath) {
  std::mt19937_64 rng(20);
  for (int n = 3; n <= 7; ++n) {
    const Matrix c = uniform_matrix(rng, n, n, 0.0, 1.0);
    EXPECT_NEAR(exact_ot_oracle(c, uniform_marginals(n, n)).cost, min_over_permutations(c), 1e-14);
  }
}

TEST(ExactOt, LowerBoundsEntropicCost) {
  std::mt19937_64 rng(21);
  const Matrix c = uniform_matrix(rng, 4, 3, 0.0, 2.0);
  const Marginals mg{simplex(rng, 4), simplex(rng, 3)};
  const double opt = exact_ot_oracle(c, mg).cost;
  double prev_gap = std::numeric_limits<double>::infinity();
  for (double eps : {0.5, 0.1, 0.02}) {
    SinkhornOptions o = opts(eps, 20);
    o.tolerance = 1e-14;
    o.max_iterations = 100000;
    const TransportPlan p = sinkhorn(c, mg, o);
    const double gap = transport_cost(p.plan, c) - opt;
    EXPECT_GE(gap, -1e-12);
    EXPECT_LE(gap, prev_gap);
    prev_gap = gap;
  }
}

TEST(ExactOt, TooLarge) {
  EXPECT_THROW(exact_ot_oracle(Matrix::Zero(9, 4), uniform_marginals(9, 4)), InvalidArgument);
  EXPECT_THROW(exact_ot_oracle(Matrix::Zero(8, 5), uniform_marginals(8, 5)), InvalidArgument);
  EXPECT_NO_THROW(exact_ot_oracle(Matrix::Zero(8, 8), uniform_marginals(8, 8)));
}

TEST(Export, PlanFormats) {
  Matrix p(2, 2);
  p << 0.25, 0.0, 0.1, 0.65;
  std::ostringstream a, b;
  write_plan_csv(a, p, true);
  EXPECT_EQ(a.str().substr(0, 23), "region_id,expert,mass\n0");
  const std::string text = a.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 4);
  Vector r = Vector::Constant(2, 0.5), q = Vector::Constant(2, 0.5);
  const TransportPlan plan = sinkhorn(Matrix::Zero(2, 2), {r, q}, opts(0.1, 3));
  write_residuals_jsonl(b, plan);
  const std::string lines = b.str();
  EXPECT_EQ(std::count(lines.begin(), lines.end(), '\n'), 3);
  EXPECT_EQ(lines.front(), '{');
}
