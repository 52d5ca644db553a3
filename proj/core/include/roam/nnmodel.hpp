#pragma once

// Learnable components and the end-to-end forward pass: patch projection,
// routing GNN, prototype costs, OT routing with top-k dispatch, per-expert
// gated-attention pooling, expert fusion and the classifier head.

#include "roam/autodiff.hpp"
#include "roam/bagio.hpp"
#include "roam/otroute.hpp"
#include "roam/tokenizer.hpp"
#include "roam/types.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

namespace roam::nnmodel {

// Switches for the ablation study. All false is the full model.
struct Ablations {
  bool no_routing_gnn = false;   // route on H0 directly
  bool no_graph_reg = false;     // plain Sinkhorn, no log-plan diffusion
  bool softmax_routing = false;  // per-region softmax, no capacity constraint
  bool no_ot_modulation = false; // pooling ignores dispatch mass
  bool detach_routing = false;   // dispatch mass enters pooling as a constant
};

struct RoamConfig {
  int d_in = 0;  // 0: taken from the data
  int d = 512;
  int target_m = 256;
  int k_nn = 8;
  int n_experts = 8;
  int top_k = 2;
  double epsilon = 0.1;
  int sinkhorn_iters = 20;
  double lambda_s = 0.3;
  int n_smooth = 3;
  int d_attn = 64;
  double dropout = 0.25;
  int n_classes = 2;
  int head_hidden = 256;
  Ablations ablations;
};

void validate(const RoamConfig& config);

// "ot", "ot+graph" or "softmax".
std::string routing_mode(const RoamConfig& config);

// Parameter tensor with its checkpoint name. Rank-1 tensors are stored as a
// single row (biases) or a single column (attention vectors).
struct TensorRef {
  std::string name;
  Matrix* value;
  int rank;
};

struct ConstTensorRef {
  std::string name;
  const Matrix* value;
  int rank;
};

struct LinearParams {
  Matrix weight;  // out x in
  Matrix bias;    // 1 x out
};

struct GnnLayerParams {
  Matrix self;   // d x d
  Matrix neigh;  // d x d
  Matrix bias;   // 1 x d
};

struct ExpertParams {
  Matrix V;  // d_attn x d
  Matrix U;  // d_attn x d
  Matrix w;  // d_attn x 1
};

struct ModelParams {
  LinearParams phi;
  std::vector<GnnLayerParams> gnn;  // two layers
  Matrix proto;                     // E x d
  std::vector<ExpertParams> experts;
  LinearParams gate_hidden;  // d -> d_attn
  LinearParams gate_out;     // d_attn -> 1
  LinearParams head_hidden;  // d -> head_hidden
  LinearParams head_out;     // head_hidden -> C

  // Fixed order: phi, gnn.*, proto, expert.*, gate.*, head.*
  std::vector<TensorRef> tensors();
  std::vector<ConstTensorRef> tensors() const;
  std::size_t num_scalars() const;
};

// Glorot-uniform weights, zero biases, unit-norm Gaussian prototype rows.
ModelParams init_params(const RoamConfig& config, std::uint64_t seed);

// Throws InvalidArgument if any tensor shape disagrees with `config`.
void check_shapes(const ModelParams& params, const RoamConfig& config);

enum class Mode { kTrain, kEval };

struct ForwardDiagnostics {
  Vector loads;                  // E, sum_m gamma(m,e)
  Vector plan_loads;             // E, column sums of the dense plan
  std::vector<int> dominant;     // M, argmax_e gamma(m,e)
  Matrix beta;                   // M x E pooling weights
  Vector gates;                  // E fusion gates
  double row_residual = 0.0;     // |Pi 1 - r|_inf of the dense plan
  double column_residual = 0.0;  // |Pi^T 1 - q|_inf
  int zero_norm_warnings = 0;
};

// Everything a forward pass produced. The tape stays alive so backward() can
// be run afterwards.
struct ForwardTrace {
  std::unique_ptr<ad::Tape> tape;
  std::vector<ad::Var> param_vars;  // aligned with ModelParams::tensors()
  ad::Var logits;
  std::vector<Eigen::Index> patch_order;  // canonical position -> input row
  tokenizer::RegionBinning binning;       // over canonically ordered patches
  std::unique_ptr<tokenizer::RegionGraph> graph;  // stable address for tape closures
  otroute::Marginals marginals;
  Matrix region_features;  // H0, M x d
  Matrix routing;          // Z, M x d
  Matrix cost;
  Matrix plan;
  otroute::DispatchMatrix dispatch;
  ForwardDiagnostics diagnostics;

  RowVector logit_values() const { return logits.value().row(0); }
};

struct ForwardOptions {
  Mode mode = Mode::kEval;
  std::uint64_t seed = 0;     // dropout stream
  bool record_grad = false;   // parameters become differentiable leaves
  // With detach_routing, pooling reads this dispatch matrix instead of the
  // live one. Lets a finite-difference oracle evaluate the stop-gradient
  // surrogate that backward() differentiates.
  const Matrix* frozen_pool_gamma = nullptr;
};

// h_i = dropout(relu(W x_i + b)) on the tape; dropout only in training mode.
ad::Var project_patches(ad::Tape& tape, const Matrix& embeddings, ad::Var weight, ad::Var bias,
                        double dropout, Mode mode, std::uint64_t seed);

// Plain-matrix projection for callers outside a forward pass.
Matrix project_patches(const bagio::PatchBag& bag, const ModelParams& params, double dropout, Mode mode,
                       std::uint64_t seed);

// Two GraphSAGE-style mean-aggregation layers over the region graph.
Matrix gnn_forward(const Matrix& h0, const tokenizer::RegionGraph& graph, const ModelParams& params,
                   const RoamConfig& config);

struct PoolResult {
  Matrix embeddings;  // E x d
  Matrix beta;        // M x E
};

PoolResult expert_pool(const Matrix& h0, const otroute::DispatchMatrix& dispatch, const ModelParams& params,
                       const RoamConfig& config);

struct FusionResult {
  RowVector logits;
  Vector gates;
};

FusionResult fuse_and_classify(const Matrix& expert_embeddings, const ModelParams& params);

ForwardTrace roam_forward(const bagio::PatchBag& bag, const ModelParams& params, const RoamConfig& config,
                          const ForwardOptions& options);

// Checkpoint file: "ROAMCKPT", u32 version, u32 tensor count, then per tensor
// u16 name length, name, u8 rank, u32 dims, f32 payload (row-major).
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const ModelParams& params);
ModelParams decode_checkpoint(const std::vector<std::uint8_t>& bytes, const RoamConfig& config);
void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path, const RoamConfig& config);

}  // namespace roam::nnmodel
