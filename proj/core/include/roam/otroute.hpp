#pragma once

// Capacity-constrained entropic OT routing: log-domain Sinkhorn, the
// graph-regularised variant with log-plan diffusion, top-k dispatch and an
// exact small-instance OT solver used as a test oracle.

#include "roam/tokenizer.hpp"
#include "roam/types.hpp"

#include <iosfwd>
#include <vector>

namespace roam::otroute {

struct CostMatrix {
  Matrix values;            // M x E, entries in [0, 2]
  int zero_norm_rows = 0;   // routing embeddings with zero norm (cost forced to 1)
  int zero_norm_protos = 0; // prototypes with zero norm
};

// C(m,e) = 1 - cos(z_m, mu_e). A zero-norm vector contributes cosine 0.
CostMatrix cost_matrix(const Matrix& z, const Matrix& prototypes);

struct Marginals {
  Vector r;  // region supply, sums to 1
  Vector q;  // expert capacity, sums to 1
};

// r proportional to the region masses, q uniform over n_experts.
Marginals make_marginals(const Vector& masses, int n_experts);

// Throws InvalidArgument unless both vectors are strictly positive and sum to
// one within 1e-12.
void validate(const Marginals& marginals);

struct SinkhornOptions {
  double epsilon = 0.1;
  int iterations = 20;  // row-column pairs
  // Zero means a fixed unroll of `iterations` pairs. A positive value keeps
  // iterating until the L1 row residual drops below it, up to max_iterations
  // (10 * iterations when left at zero).
  double tolerance = 0.0;
  int max_iterations = 0;
};

struct IterationRecord {
  int iteration = 0;  // 1-based pair index
  double row_residual_l1 = 0.0;
  double row_residual_inf = 0.0;
  bool diffused = false;  // a smoothing step followed this pair
};

struct TransportPlan {
  Matrix plan;      // M x E, strictly positive
  Matrix log_plan;
  std::vector<IterationRecord> log;

  // Residuals of the returned plan.
  double row_residual() const;     // |Pi 1 - r|_inf
  double column_residual() const;  // |Pi^T 1 - q|_inf
  Vector row_sums() const { return plan.rowwise().sum(); }
  Vector column_sums() const { return plan.colwise().sum().transpose(); }

  Vector r;
  Vector q;
};

// Log-domain projections shared with the differentiable forward pass.
// project_rows: L(m,:) += log r_m - logsumexp(L(m,:)); likewise for columns.
void project_rows(Matrix& log_plan, const Vector& log_r);
void project_cols(Matrix& log_plan, const Vector& log_q);

// One smoothing step over the region graph:
// L(m,:) <- (1 - lambda) L(m,:) + lambda * sum_n w_mn L(n,:).
Matrix diffuse_log_plan(const Matrix& log_plan, const tokenizer::RegionGraph& graph, double lambda);

// Pair indices (1-based) after which a smoothing step runs:
// floor(T * j / (n_smooth + 1)) for j = 1..n_smooth.
std::vector<int> smoothing_schedule(int iterations, int n_smooth);

TransportPlan sinkhorn(const Matrix& cost, const Marginals& marginals, const SinkhornOptions& options);

struct GraphRegularisation {
  const tokenizer::RegionGraph* graph = nullptr;
  double lambda = 0.3;
  int n_smooth = 3;
  // Overrides the even spacing when non-empty.
  std::vector<int> placement;
};

TransportPlan graph_sinkhorn(const Matrix& cost, const Marginals& marginals,
                             const SinkhornOptions& options, const GraphRegularisation& smoothing);

struct DispatchMatrix {
  Matrix gamma;  // M x E, at most k nonzeros per row
  Matrix mask;   // 1 where kept, 0 elsewhere
  std::vector<std::vector<int>> support;  // expert -> regions with gamma > 0

  Vector loads() const { return gamma.colwise().sum().transpose(); }
  std::vector<int> dominant_experts() const;
};

// Keeps the k largest entries of each row (ties to the lower expert index) as
// a 0/1 mask.
Matrix topk_mask(const Matrix& plan, int k);

// gamma(m,e) = r_m Pi(m,e) / sum_{kept e'} Pi(m,e') on kept entries.
DispatchMatrix topk_dispatch(const Matrix& plan, const Vector& r, int k);

// Argmax per row, ties to the lower column.
std::vector<int> row_argmax(const Matrix& values);

struct ExactOtResult {
  double cost = 0.0;
  Matrix plan;
};

// Unregularised OT optimum for small instances: permutation enumeration when
// M == E <= 8 with uniform marginals, otherwise a dense simplex over the
// transportation LP (M <= 8, E <= 4).
ExactOtResult exact_ot_oracle(const Matrix& cost, const Marginals& marginals);

// Plan or dispatch entries as `region_id,expert,mass` rows; zeros skipped when
// `nonzero_only` is set.
void write_plan_csv(std::ostream& out, const Matrix& plan, bool nonzero_only = false);
void write_dense(std::ostream& out, const Matrix& values);
void write_residuals_jsonl(std::ostream& out, const TransportPlan& plan);

}  // namespace roam::otroute
