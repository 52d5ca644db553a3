#pragma once

// Matrix-valued reverse-mode differentiation over a recorded tape.
//
// Every op evaluates eagerly, stores its value on the tape and registers a
// closure that pushes the output gradient back to its parents. The tape is
// append-only, so node order is a valid topological order for the sweep.

#include "roam/tokenizer.hpp"
#include "roam/types.hpp"

#include <cstdint>
#include <functional>
#include <vector>

namespace roam::ad {

class Tape;

// Lightweight handle to a tape node.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool valid() const { return tape != nullptr && id >= 0; }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  Var variable(Matrix value);  // leaf that receives a gradient
  Var constant(Matrix value);  // leaf without gradient

  // Appends a node; it needs a gradient when any parent does.
  Var record(Matrix value, std::initializer_list<Var> parents, Backward backward);
  Var record(Matrix value, const std::vector<Var>& parents, Backward backward);

  const Matrix& value(const Var& v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
  bool requires_grad(const Var& v) const { return nodes_[static_cast<std::size_t>(v.id)].requires_grad; }

  // Gradient of the last backward() output with respect to v (zeros when v
  // was not reached).
  Matrix grad(const Var& v) const;

  // Adds `delta` to the gradient of v; no-op for nodes without gradient.
  void accumulate(const Var& v, const Matrix& delta);

  // Seeds d(output)/d(output) = seed (output must be 1 x 1) and sweeps the
  // tape in reverse.
  void backward(const Var& output, double seed = 1.0);

  // Non-differentiable branch decisions (relu signs, top-k masks) in the
  // order they were taken; equal logs mean the same piecewise branch.
  std::vector<std::uint8_t>& branch_log() { return branch_log_; }
  const std::vector<std::uint8_t>& branch_log() const { return branch_log_; }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Backward backward;
  };

  std::vector<Node> nodes_;
  std::vector<std::uint8_t> branch_log_;
};

// Dense algebra.
Var matmul(Var a, Var b);     // a b
Var matmul_nt(Var a, Var b);  // a b^T
Var matmul_tn(Var a, Var b);  // a^T b
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var hadamard(Var a, Var b);
Var add_row(Var a, Var row);  // broadcast a 1 x n row over every row of a
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var mul_const(Var a, const Matrix& factor);  // elementwise, factor constant
Var scale_rows(Var a, const Vector& factor);  // row m times factor(m)
Var concat_cols(const std::vector<Var>& parts);
Var detach(Var a);

// Pointwise.
Var relu(Var a);
Var tanh(Var a);
Var sigmoid(Var a);
Var exp(Var a);

// Reductions and normalisations.
Var softmax_rows(Var a);
Var row_normalize(Var a);  // rows scaled to unit L2 norm; zero rows stay zero
Var cross_entropy(Var logits, int label);  // logits 1 x C, result 1 x 1
Var sum(Var a);                             // 1 x 1

// Graph and region ops (structure is constant).
Var segment_mean(Var values, const tokenizer::RegionBinning& binning);
Var neighbor_mean(Var values, const tokenizer::RegionGraph& graph);

// Sinkhorn building blocks, sharing kernels with otroute.
Var project_rows(Var log_plan, const Vector& log_r);
Var project_cols(Var log_plan, const Vector& log_q);
Var diffuse(Var log_plan, const tokenizer::RegionGraph& graph, double lambda);

// gamma(m,e) = r_m P(m,e) / sum_{kept} P(m,e') on kept entries of `mask`;
// the selection itself is constant.
Var topk_rescale(Var plan, const Matrix& mask, const Vector& r);

// Per-column softmax over the support {gamma > 0} of scores(m,e), shifted by
// log gamma(m,e) when `modulate` is set. Columns with empty support are zero.
Var support_softmax(Var scores, Var gamma, bool modulate);

}  // namespace roam::ad
