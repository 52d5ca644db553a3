#include "roam/otroute.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>

namespace roam::otroute {
namespace {

constexpr double kSimplexTol = 1e-12;

double logsumexp(const double* values, Eigen::Index count, Eigen::Index stride) {
  double peak = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < count; ++i) peak = std::max(peak, values[i * stride]);
  if (!std::isfinite(peak)) return peak;
  double sum = 0.0;
  for (Eigen::Index i = 0; i < count; ++i) sum += std::exp(values[i * stride] - peak);
  return peak + std::log(sum);
}

void check_cost(const Matrix& cost) {
  if (cost.rows() < 1 || cost.cols() < 1) throw InvalidArgument("cost matrix must be non-empty");
  if (!cost.allFinite()) throw InvalidArgument("cost matrix has non-finite entries");
}

void check_options(const SinkhornOptions& options) {
  if (!(options.epsilon > 0.0) || !std::isfinite(options.epsilon)) {
    throw InvalidArgument("epsilon must be positive");
  }
  if (options.iterations < 1) throw InvalidArgument("Sinkhorn needs at least one iteration");
  if (options.tolerance < 0.0) throw InvalidArgument("tolerance must be non-negative");
}

void record(TransportPlan& out, int iteration, const Matrix& log_plan, const Vector& r) {
  IterationRecord rec;
  rec.iteration = iteration;
  const Vector rows = log_plan.array().exp().rowwise().sum();
  const Vector diff = (rows - r).cwiseAbs();
  rec.row_residual_l1 = diff.sum();
  rec.row_residual_inf = diff.maxCoeff();
  out.log.push_back(rec);
}

TransportPlan run(const Matrix& cost, const Marginals& marginals, const SinkhornOptions& options,
                  const GraphRegularisation* smoothing) {
  check_cost(cost);
  check_options(options);
  validate(marginals);
  if (marginals.r.size() != cost.rows() || marginals.q.size() != cost.cols()) {
    throw InvalidArgument("marginal sizes do not match the cost matrix");
  }

  std::vector<int> schedule;
  double lambda = 0.0;
  if (smoothing != nullptr) {
    if (smoothing->graph == nullptr) throw InvalidArgument("graph_sinkhorn needs a region graph");
    if (smoothing->graph->num_nodes() != cost.rows()) {
      throw InvalidArgument("region graph node count does not match cost rows");
    }
    if (!smoothing->graph->has_weights()) throw InvalidArgument("region graph has no edge weights");
    if (smoothing->lambda < 0.0 || smoothing->lambda > 1.0) {
      throw InvalidArgument("lambda_s must lie in [0, 1]");
    }
    if (smoothing->n_smooth < 0 || smoothing->n_smooth > options.iterations) {
      throw InvalidArgument("n_smooth must lie in [0, T]");
    }
    lambda = smoothing->lambda;
    schedule = smoothing->placement.empty()
                   ? smoothing_schedule(options.iterations, smoothing->n_smooth)
                   : smoothing->placement;
  }

  const Vector log_r = marginals.r.array().log();
  const Vector log_q = marginals.q.array().log();
  TransportPlan out;
  out.r = marginals.r;
  out.q = marginals.q;
  Matrix log_plan = cost * (-1.0 / options.epsilon);

  const bool converge = options.tolerance > 0.0;
  const int cap = converge ? (options.max_iterations > 0 ? options.max_iterations : 10 * options.iterations)
                           : options.iterations;
  for (int it = 1; it <= cap; ++it) {
    project_rows(log_plan, log_r);
    project_cols(log_plan, log_q);
    const bool diffuse = lambda > 0.0 && std::find(schedule.begin(), schedule.end(), it) != schedule.end();
    record(out, it, log_plan, marginals.r);
    if (diffuse) {
      out.log.back().diffused = true;
      log_plan = diffuse_log_plan(log_plan, *smoothing->graph, lambda);
      // A diffusion step must be followed by at least one projection pair.
      if (it == cap) {
        project_rows(log_plan, log_r);
        project_cols(log_plan, log_q);
        record(out, it + 1, log_plan, marginals.r);
      }
    }
    if (converge && it >= options.iterations && !diffuse &&
        out.log.back().row_residual_l1 <= options.tolerance) {
      break;
    }
  }
  out.log_plan = std::move(log_plan);
  out.plan = out.log_plan.array().exp();
  return out;
}

}  // namespace

CostMatrix cost_matrix(const Matrix& z, const Matrix& prototypes) {
  if (z.cols() != prototypes.cols()) throw InvalidArgument("embedding and prototype widths differ");
  CostMatrix out;
  Matrix zn = z;
  Matrix pn = prototypes;
  for (Eigen::Index m = 0; m < zn.rows(); ++m) {
    const double norm = zn.row(m).norm();
    if (norm > 0.0) {
      zn.row(m) /= norm;
    } else {
      zn.row(m).setZero();
      ++out.zero_norm_rows;
    }
  }
  for (Eigen::Index e = 0; e < pn.rows(); ++e) {
    const double norm = pn.row(e).norm();
    if (norm > 0.0) {
      pn.row(e) /= norm;
    } else {
      pn.row(e).setZero();
      ++out.zero_norm_protos;
    }
  }
  out.values = (1.0 - (zn * pn.transpose()).array()).matrix();
  return out;
}

Marginals make_marginals(const Vector& masses, int n_experts) {
  if (masses.size() < 1 || (masses.array() <= 0.0).any()) {
    throw InvalidArgument("region masses must be positive");
  }
  if (n_experts < 1) throw InvalidArgument("need at least one expert");
  Marginals out;
  out.r = masses / masses.sum();
  out.q = Vector::Constant(n_experts, 1.0 / n_experts);
  return out;
}

void validate(const Marginals& marginals) {
  auto check = [](const Vector& v, const char* name) {
    if (v.size() < 1) throw InvalidArgument(std::string(name) + " is empty");
    if (!v.allFinite() || (v.array() <= 0.0).any()) {
      throw InvalidArgument(std::string(name) + " must be strictly positive");
    }
    if (std::abs(v.sum() - 1.0) > 1e-12) throw InvalidArgument(std::string(name) + " must sum to 1");
  };
  check(marginals.r, "r");
  check(marginals.q, "q");
}

double TransportPlan::row_residual() const { return (row_sums() - r).cwiseAbs().maxCoeff(); }

double TransportPlan::column_residual() const { return (column_sums() - q).cwiseAbs().maxCoeff(); }

void project_rows(Matrix& log_plan, const Vector& log_r) {
  // Column-major storage: a row is strided by the row count.
  const Eigen::Index stride = log_plan.rows();
  for (Eigen::Index m = 0; m < log_plan.rows(); ++m) {
    const double lse = logsumexp(log_plan.data() + m, log_plan.cols(), stride);
    log_plan.row(m).array() += log_r(m) - lse;
  }
}

void project_cols(Matrix& log_plan, const Vector& log_q) {
  for (Eigen::Index e = 0; e < log_plan.cols(); ++e) {
    const double lse = logsumexp(log_plan.col(e).data(), log_plan.rows(), 1);
    log_plan.col(e).array() += log_q(e) - lse;
  }
}

Matrix diffuse_log_plan(const Matrix& log_plan, const tokenizer::RegionGraph& graph, double lambda) {
  if (graph.num_nodes() != log_plan.rows()) {
    throw InvalidArgument("region graph node count does not match plan rows");
  }
  Matrix out(log_plan.rows(), log_plan.cols());
  for (Eigen::Index m = 0; m < log_plan.rows(); ++m) {
    const auto& nbrs = graph.neighbors[static_cast<std::size_t>(m)];
    if (nbrs.empty()) {
      out.row(m) = log_plan.row(m);
      continue;
    }
    const auto& w = graph.weights[static_cast<std::size_t>(m)];
    RowVector mix = RowVector::Zero(log_plan.cols());
    for (std::size_t j = 0; j < nbrs.size(); ++j) mix += w[j] * log_plan.row(nbrs[j]);
    out.row(m) = (1.0 - lambda) * log_plan.row(m) + lambda * mix;
  }
  return out;
}

std::vector<int> smoothing_schedule(int iterations, int n_smooth) {
  if (iterations < 1 || n_smooth < 0 || n_smooth > iterations) {
    throw InvalidArgument("smoothing schedule needs 0 <= n_smooth <= T");
  }
  std::vector<int> out;
  for (int j = 1; j <= n_smooth; ++j) {
    const long at = static_cast<long>(iterations) * j / (n_smooth + 1);
    if (at >= 1) out.push_back(static_cast<int>(at));
  }
  return out;
}

TransportPlan sinkhorn(const Matrix& cost, const Marginals& marginals, const SinkhornOptions& options) {
  return run(cost, marginals, options, nullptr);
}

TransportPlan graph_sinkhorn(const Matrix& cost, const Marginals& marginals,
                             const SinkhornOptions& options, const GraphRegularisation& smoothing) {
  return run(cost, marginals, options, &smoothing);
}

std::vector<int> row_argmax(const Matrix& values) {
  std::vector<int> out(static_cast<std::size_t>(values.rows()));
  for (Eigen::Index m = 0; m < values.rows(); ++m) {
    Eigen::Index best = 0;
    for (Eigen::Index e = 1; e < values.cols(); ++e) {
      if (values(m, e) > values(m, best)) best = e;
    }
    out[static_cast<std::size_t>(m)] = static_cast<int>(best);
  }
  return out;
}

std::vector<int> DispatchMatrix::dominant_experts() const { return row_argmax(gamma); }

Matrix topk_mask(const Matrix& plan, int k) {
  if (k < 1 || k > plan.cols()) throw InvalidArgument("k must lie in [1, E]");
  Matrix mask = Matrix::Zero(plan.rows(), plan.cols());
  std::vector<int> order(static_cast<std::size_t>(plan.cols()));
  for (Eigen::Index m = 0; m < plan.rows(); ++m) {
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
      if (plan(m, a) != plan(m, b)) return plan(m, a) > plan(m, b);
      return a < b;
    });
    for (int j = 0; j < k; ++j) mask(m, order[static_cast<std::size_t>(j)]) = 1.0;
  }
  return mask;
}

DispatchMatrix topk_dispatch(const Matrix& plan, const Vector& r, int k) {
  if (r.size() != plan.rows()) throw InvalidArgument("r does not match plan rows");
  DispatchMatrix out;
  out.mask = topk_mask(plan, k);
  out.gamma = Matrix::Zero(plan.rows(), plan.cols());
  for (Eigen::Index m = 0; m < plan.rows(); ++m) {
    double kept = 0.0;
    for (Eigen::Index e = 0; e < plan.cols(); ++e) {
      if (out.mask(m, e) != 0.0) kept += plan(m, e);
    }
    for (Eigen::Index e = 0; e < plan.cols(); ++e) {
      if (out.mask(m, e) != 0.0) out.gamma(m, e) = r(m) * plan(m, e) / kept;
    }
  }
  out.support.resize(static_cast<std::size_t>(plan.cols()));
  for (Eigen::Index e = 0; e < plan.cols(); ++e) {
    for (Eigen::Index m = 0; m < plan.rows(); ++m) {
      if (out.gamma(m, e) > 0.0) out.support[static_cast<std::size_t>(e)].push_back(static_cast<int>(m));
    }
  }
  return out;
}

namespace {

ExactOtResult enumerate_permutations(const Matrix& cost) {
  const auto n = static_cast<int>(cost.rows());
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  std::vector<int> best_perm = perm;
  do {
    double total = 0.0;
    for (int i = 0; i < n; ++i) total += cost(i, perm[static_cast<std::size_t>(i)]);
    if (total < best) {
      best = total;
      best_perm = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  ExactOtResult out;
  out.plan = Matrix::Zero(n, n);
  for (int i = 0; i < n; ++i) out.plan(i, best_perm[static_cast<std::size_t>(i)]) = 1.0 / n;
  out.cost = best / n;
  return out;
}

// Two-phase dense tableau simplex with Bland's rule for
//   min <C, X>  s.t.  X 1 = r,  X^T 1 = q,  X >= 0.
// The last column constraint is implied by the others and is dropped.
ExactOtResult transportation_simplex(const Matrix& cost, const Marginals& marginals) {
  const auto m = static_cast<int>(cost.rows());
  const auto e = static_cast<int>(cost.cols());
  const int n_vars = m * e;
  const int n_rows = m + e - 1;
  const int n_art = n_rows;
  const int width = n_vars + n_art + 1;  // last column holds the rhs
  Matrix tab = Matrix::Zero(n_rows, width);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < e; ++j) tab(i, i * e + j) = 1.0;
    tab(i, width - 1) = marginals.r(i);
  }
  for (int j = 0; j < e - 1; ++j) {
    for (int i = 0; i < m; ++i) tab(m + j, i * e + j) = 1.0;
    tab(m + j, width - 1) = marginals.q(j);
  }
  for (int row = 0; row < n_rows; ++row) tab(row, n_vars + row) = 1.0;
  std::vector<int> basis(static_cast<std::size_t>(n_rows));
  std::iota(basis.begin(), basis.end(), n_vars);

  auto pivot = [&](int row, int col) {
    tab.row(row) /= tab(row, col);
    for (int other = 0; other < n_rows; ++other) {
      if (other != row && tab(other, col) != 0.0) tab.row(other) -= tab(other, col) * tab.row(row);
    }
    basis[static_cast<std::size_t>(row)] = col;
  };

  auto optimise = [&](const RowVector& objective, int allowed_cols) {
    for (int guard = 0; guard < 100000; ++guard) {
      // Reduced costs: c_j - c_B B^-1 A_j.
      int entering = -1;
      for (int col = 0; col < allowed_cols; ++col) {
        double reduced = objective(col);
        for (int row = 0; row < n_rows; ++row) {
          reduced -= objective(basis[static_cast<std::size_t>(row)]) * tab(row, col);
        }
        if (reduced < -kSimplexTol) {
          entering = col;
          break;
        }
      }
      if (entering < 0) return;
      int leaving = -1;
      double best_ratio = std::numeric_limits<double>::infinity();
      for (int row = 0; row < n_rows; ++row) {
        if (tab(row, entering) > kSimplexTol) {
          const double ratio = tab(row, width - 1) / tab(row, entering);
          if (ratio < best_ratio - kSimplexTol ||
              (std::abs(ratio - best_ratio) <= kSimplexTol &&
               basis[static_cast<std::size_t>(row)] < basis[static_cast<std::size_t>(leaving)])) {
            best_ratio = ratio;
            leaving = row;
          }
        }
      }
      if (leaving < 0) throw Error("transportation LP is unbounded");
      pivot(leaving, entering);
    }
    throw Error("simplex did not terminate");
  };

  RowVector phase1 = RowVector::Zero(width - 1);
  phase1.segment(n_vars, n_art).setOnes();
  optimise(phase1, width - 1);
  // Drive zero-level artificials out of the basis where possible.
  for (int row = 0; row < n_rows; ++row) {
    if (basis[static_cast<std::size_t>(row)] < n_vars) continue;
    if (tab(row, width - 1) > 1e-9) throw Error("transportation LP is infeasible");
    for (int col = 0; col < n_vars; ++col) {
      if (std::abs(tab(row, col)) > kSimplexTol) {
        pivot(row, col);
        break;
      }
    }
  }
  RowVector phase2 = RowVector::Zero(width - 1);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < e; ++j) phase2(i * e + j) = cost(i, j);
  }
  optimise(phase2, n_vars);

  ExactOtResult out;
  out.plan = Matrix::Zero(m, e);
  for (int row = 0; row < n_rows; ++row) {
    const int var = basis[static_cast<std::size_t>(row)];
    if (var < n_vars) out.plan(var / e, var % e) = std::max(0.0, tab(row, width - 1));
  }
  out.cost = (out.plan.array() * cost.array()).sum();
  return out;
}

}  // namespace

ExactOtResult exact_ot_oracle(const Matrix& cost, const Marginals& marginals) {
  check_cost(cost);
  validate(marginals);
  if (marginals.r.size() != cost.rows() || marginals.q.size() != cost.cols()) {
    throw InvalidArgument("marginal sizes do not match the cost matrix");
  }
  const auto m = cost.rows();
  const auto e = cost.cols();
  auto is_uniform = [](const Vector& v) {
    return (v.array() - 1.0 / static_cast<double>(v.size())).abs().maxCoeff() <= 1e-15;
  };
  if (m == e && m <= 8 && is_uniform(marginals.r) && is_uniform(marginals.q)) {
    return enumerate_permutations(cost);
  }
  if (m > 8 || e > 4) {
    throw InvalidArgument("exact OT oracle supports M <= 8 and E <= 4 (or square uniform up to 8)");
  }
  return transportation_simplex(cost, marginals);
}

void write_plan_csv(std::ostream& out, const Matrix& plan, bool nonzero_only) {
  out << "region_id,expert,mass\n";
  out.precision(17);
  for (Eigen::Index m = 0; m < plan.rows(); ++m) {
    for (Eigen::Index e = 0; e < plan.cols(); ++e) {
      if (nonzero_only && plan(m, e) == 0.0) continue;
      out << m << ',' << e << ',' << plan(m, e) << '\n';
    }
  }
}

void write_dense(std::ostream& out, const Matrix& values) {
  out << values.rows() << ' ' << values.cols() << '\n';
  out.precision(17);
  for (Eigen::Index m = 0; m < values.rows(); ++m) {
    for (Eigen::Index e = 0; e < values.cols(); ++e) {
      if (e > 0) out << ' ';
      out << values(m, e);
    }
    out << '\n';
  }
}

void write_residuals_jsonl(std::ostream& out, const TransportPlan& plan) {
  out.precision(17);
  for (const auto& rec : plan.log) {
    out << "{\"iteration\":" << rec.iteration << ",\"row_residual_l1\":" << rec.row_residual_l1
        << ",\"row_residual_inf\":" << rec.row_residual_inf
        << ",\"diffused\":" << (rec.diffused ? "true" : "false") << "}\n";
  }
}

}  // namespace roam::otroute
