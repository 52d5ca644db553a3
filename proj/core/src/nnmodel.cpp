#include "roam/nnmodel.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <random>

namespace roam::nnmodel {
namespace {

constexpr char kCheckpointMagic[8] = {'R', 'O', 'A', 'M', 'C', 'K', 'P', 'T'};

LinearParams shaped_linear(int in, int out) { return {Matrix::Zero(out, in), Matrix::Zero(1, out)}; }

ModelParams shaped_params(const RoamConfig& c) {
  ModelParams p;
  p.phi = shaped_linear(c.d_in, c.d);
  p.gnn.resize(2);
  for (auto& layer : p.gnn) {
    layer.self = Matrix::Zero(c.d, c.d);
    layer.neigh = Matrix::Zero(c.d, c.d);
    layer.bias = Matrix::Zero(1, c.d);
  }
  p.proto = Matrix::Zero(c.n_experts, c.d);
  p.experts.resize(static_cast<std::size_t>(c.n_experts));
  for (auto& ex : p.experts) {
    ex.V = Matrix::Zero(c.d_attn, c.d);
    ex.U = Matrix::Zero(c.d_attn, c.d);
    ex.w = Matrix::Zero(c.d_attn, 1);
  }
  p.gate_hidden = shaped_linear(c.d, c.d_attn);
  p.gate_out = shaped_linear(c.d_attn, 1);
  p.head_hidden = shaped_linear(c.d, c.head_hidden);
  p.head_out = shaped_linear(c.head_hidden, c.n_classes);
  return p;
}

// Tape handles for every parameter tensor, in ModelParams::tensors() order.
struct ParamVars {
  ad::Var phi_w, phi_b;
  struct Gnn {
    ad::Var self, neigh, bias;
  };
  std::vector<Gnn> gnn;
  ad::Var proto;
  struct Expert {
    ad::Var V, U, w;
  };
  std::vector<Expert> experts;
  ad::Var gate_w1, gate_b1, gate_w2, gate_b2;
  ad::Var head_w1, head_b1, head_w2, head_b2;
};

ParamVars bind_params(const std::vector<ad::Var>& vars, std::size_t n_experts) {
  ParamVars p;
  std::size_t i = 0;
  auto next = [&]() { return vars.at(i++); };
  p.phi_w = next();
  p.phi_b = next();
  for (int l = 0; l < 2; ++l) {
    ParamVars::Gnn layer;
    layer.self = next();
    layer.neigh = next();
    layer.bias = next();
    p.gnn.push_back(layer);
  }
  p.proto = next();
  for (std::size_t e = 0; e < n_experts; ++e) {
    ParamVars::Expert ex;
    ex.V = next();
    ex.U = next();
    ex.w = next();
    p.experts.push_back(ex);
  }
  p.gate_w1 = next();
  p.gate_b1 = next();
  p.gate_w2 = next();
  p.gate_b2 = next();
  p.head_w1 = next();
  p.head_b1 = next();
  p.head_w2 = next();
  p.head_b2 = next();
  return p;
}

std::vector<ad::Var> load_params(ad::Tape& tape, const ModelParams& params, bool differentiable) {
  std::vector<ad::Var> vars;
  for (const auto& ref : params.tensors()) {
    vars.push_back(differentiable ? tape.variable(*ref.value) : tape.constant(*ref.value));
  }
  return vars;
}

ad::Var linear(ad::Var x, ad::Var weight, ad::Var bias) { return ad::add_row(ad::matmul_nt(x, weight), bias); }

ad::Var gnn_vars(ad::Var h, const tokenizer::RegionGraph& graph, const ParamVars& p) {
  for (const auto& layer : p.gnn) {
    const ad::Var self_term = ad::matmul_nt(h, layer.self);
    const ad::Var neigh_term = ad::matmul_nt(ad::neighbor_mean(h, graph), layer.neigh);
    h = ad::relu(ad::add_row(ad::add(self_term, neigh_term), layer.bias));
  }
  return h;
}

ad::Var cost_vars(ad::Var z, ad::Var proto) {
  const ad::Var cosine = ad::matmul_nt(ad::row_normalize(z), ad::row_normalize(proto));
  return ad::add_scalar(ad::scale(cosine, -1.0), 1.0);
}

ad::Var expert_scores(ad::Var h0, const ParamVars& p) {
  std::vector<ad::Var> columns;
  for (const auto& ex : p.experts) {
    const ad::Var gated = ad::hadamard(ad::tanh(ad::matmul_nt(h0, ex.V)), ad::sigmoid(ad::matmul_nt(h0, ex.U)));
    columns.push_back(ad::matmul(gated, ex.w));
  }
  return ad::concat_cols(columns);
}

struct PoolVars {
  ad::Var embeddings;
  ad::Var beta;
};

PoolVars pool_vars(ad::Var h0, ad::Var gamma, const ParamVars& p, const RoamConfig& config,
                   const Matrix* frozen_gamma = nullptr) {
  ad::Var pooled_gamma = gamma;
  if (config.ablations.detach_routing) {
    pooled_gamma = frozen_gamma != nullptr ? gamma.tape->constant(*frozen_gamma) : ad::detach(gamma);
  }
  const ad::Var beta = ad::support_softmax(expert_scores(h0, p), pooled_gamma, !config.ablations.no_ot_modulation);
  return {ad::matmul_tn(beta, h0), beta};
}

struct FuseVars {
  ad::Var logits;
  ad::Var gates;
};

FuseVars fuse_vars(ad::Var expert_embeddings, const ParamVars& p) {
  const ad::Var hidden = ad::tanh(linear(expert_embeddings, p.gate_w1, p.gate_b1));
  const ad::Var psi = linear(hidden, p.gate_w2, p.gate_b2);  // E x 1
  const ad::Var gates = ad::softmax_rows(ad::transpose(psi));  // 1 x E
  const ad::Var slide = ad::matmul(gates, expert_embeddings);
  const ad::Var logits = linear(ad::relu(linear(slide, p.head_w1, p.head_b1)), p.head_w2, p.head_b2);
  return {logits, gates};
}

Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution keep(1.0 - rate);
  const double kept_value = 1.0 / (1.0 - rate);
  Matrix mask(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) mask(i, j) = keep(rng) ? kept_value : 0.0;
  }
  return mask;
}

template <typename T>
void put(std::vector<std::uint8_t>& out, T value) {
  std::uint8_t raw[sizeof(T)];
  std::memcpy(raw, &value, sizeof(T));
  out.insert(out.end(), raw, raw + sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    if (offset_ + sizeof(T) > bytes_.size()) throw Error("checkpoint truncated");
    T value;
    std::memcpy(&value, bytes_.data() + offset_, sizeof(T));
    offset_ += sizeof(T);
    return value;
  }

  std::string string(std::size_t n) {
    if (offset_ + n > bytes_.size()) throw Error("checkpoint truncated");
    std::string s(reinterpret_cast<const char*>(bytes_.data() + offset_), n);
    offset_ += n;
    return s;
  }

  bool done() const { return offset_ == bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t offset_ = 0;
};

}  // namespace

void validate(const RoamConfig& c) {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0)) throw InvalidArgument(std::string(name) + " must be positive");
  };
  if (c.d_in < 1) throw InvalidArgument("d_in must be resolved to a positive value");
  positive(c.d, "d");
  positive(c.target_m, "target_m");
  if (c.k_nn < 0) throw InvalidArgument("k_nn must be non-negative");
  positive(c.n_experts, "n_experts");
  positive(c.top_k, "top_k");
  if (c.top_k > c.n_experts) throw InvalidArgument("top_k must not exceed n_experts");
  positive(c.epsilon, "epsilon");
  positive(c.sinkhorn_iters, "sinkhorn_iters");
  if (c.lambda_s < 0.0 || c.lambda_s > 1.0) throw InvalidArgument("lambda_s must lie in [0, 1]");
  if (c.n_smooth < 0 || c.n_smooth > c.sinkhorn_iters) throw InvalidArgument("n_smooth must lie in [0, T]");
  positive(c.d_attn, "d_attn");
  if (c.dropout < 0.0 || c.dropout >= 1.0) throw InvalidArgument("dropout must lie in [0, 1)");
  if (c.n_classes < 2) throw InvalidArgument("n_classes must be >= 2");
  positive(c.head_hidden, "head_hidden");
}

std::string routing_mode(const RoamConfig& config) {
  if (config.ablations.softmax_routing) return "softmax";
  if (config.ablations.no_graph_reg || config.lambda_s == 0.0 || config.n_smooth == 0) return "ot";
  return "ot+graph";
}

std::vector<TensorRef> ModelParams::tensors() {
  std::vector<TensorRef> out;
  out.push_back({"phi.weight", &phi.weight, 2});
  out.push_back({"phi.bias", &phi.bias, 1});
  for (std::size_t l = 0; l < gnn.size(); ++l) {
    const std::string prefix = "gnn." + std::to_string(l) + ".";
    out.push_back({prefix + "self", &gnn[l].self, 2});
    out.push_back({prefix + "neigh", &gnn[l].neigh, 2});
    out.push_back({prefix + "bias", &gnn[l].bias, 1});
  }
  out.push_back({"proto", &proto, 2});
  for (std::size_t e = 0; e < experts.size(); ++e) {
    const std::string prefix = "expert." + std::to_string(e) + ".";
    out.push_back({prefix + "V", &experts[e].V, 2});
    out.push_back({prefix + "U", &experts[e].U, 2});
    out.push_back({prefix + "w", &experts[e].w, 1});
  }
  out.push_back({"gate.0.weight", &gate_hidden.weight, 2});
  out.push_back({"gate.0.bias", &gate_hidden.bias, 1});
  out.push_back({"gate.1.weight", &gate_out.weight, 2});
  out.push_back({"gate.1.bias", &gate_out.bias, 1});
  out.push_back({"head.0.weight", &head_hidden.weight, 2});
  out.push_back({"head.0.bias", &head_hidden.bias, 1});
  out.push_back({"head.1.weight", &head_out.weight, 2});
  out.push_back({"head.1.bias", &head_out.bias, 1});
  return out;
}

std::vector<ConstTensorRef> ModelParams::tensors() const {
  std::vector<ConstTensorRef> out;
  for (const auto& ref : const_cast<ModelParams*>(this)->tensors()) {
    out.push_back({ref.name, ref.value, ref.rank});
  }
  return out;
}

std::size_t ModelParams::num_scalars() const {
  std::size_t total = 0;
  for (const auto& ref : tensors()) total += static_cast<std::size_t>(ref.value->size());
  return total;
}

ModelParams init_params(const RoamConfig& config, std::uint64_t seed) {
  validate(config);
  ModelParams params = shaped_params(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& ref : params.tensors()) {
    Matrix& m = *ref.value;
    if (ref.name == "proto") {
      for (Eigen::Index e = 0; e < m.rows(); ++e) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) m(e, j) = normal(rng);
        m.row(e) /= m.row(e).norm();
      }
      continue;
    }
    const bool is_bias = ref.name.ends_with("bias");
    if (is_bias) continue;  // already zero
    // Weights are out x in; attention vectors w are d_attn x 1 (in = d_attn, out = 1).
    const bool column_vector = ref.name.ends_with(".w");
    const double fan_in = column_vector ? static_cast<double>(m.rows()) : static_cast<double>(m.cols());
    const double fan_out = column_vector ? 1.0 : static_cast<double>(m.rows());
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> uniform(-bound, bound);
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = uniform(rng);
    }
  }
  return params;
}

void check_shapes(const ModelParams& params, const RoamConfig& config) {
  const ModelParams expected = shaped_params(config);
  const auto have = params.tensors();
  const auto want = expected.tensors();
  if (have.size() != want.size()) {
    throw InvalidArgument("parameter tensor count " + std::to_string(have.size()) + " does not match config (" +
                          std::to_string(want.size()) + ")");
  }
  for (std::size_t i = 0; i < have.size(); ++i) {
    if (have[i].value->rows() != want[i].value->rows() || have[i].value->cols() != want[i].value->cols()) {
      throw InvalidArgument("shape mismatch for " + want[i].name + ": have " +
                            std::to_string(have[i].value->rows()) + "x" + std::to_string(have[i].value->cols()) +
                            ", config expects " + std::to_string(want[i].value->rows()) + "x" +
                            std::to_string(want[i].value->cols()));
    }
  }
}

ad::Var project_patches(ad::Tape& tape, const Matrix& embeddings, ad::Var weight, ad::Var bias, double dropout,
                        Mode mode, std::uint64_t seed) {
  if (embeddings.cols() != weight.cols()) throw InvalidArgument("bag d_in does not match the projection");
  const ad::Var x = tape.constant(embeddings);
  ad::Var h = ad::relu(linear(x, weight, bias));
  if (mode == Mode::kTrain && dropout > 0.0) {
    h = ad::mul_const(h, dropout_mask(h.rows(), h.cols(), dropout, seed));
  }
  return h;
}

Matrix project_patches(const bagio::PatchBag& bag, const ModelParams& params, double dropout, Mode mode,
                       std::uint64_t seed) {
  ad::Tape tape;
  const ad::Var w = tape.constant(params.phi.weight);
  const ad::Var b = tape.constant(params.phi.bias);
  return project_patches(tape, bag.embeddings, w, b, dropout, mode, seed).value();
}

Matrix gnn_forward(const Matrix& h0, const tokenizer::RegionGraph& graph, const ModelParams& params,
                   const RoamConfig& config) {
  if (graph.num_nodes() != h0.rows()) throw InvalidArgument("graph node count does not match H0");
  if (config.ablations.no_routing_gnn) return h0;
  ad::Tape tape;
  const auto p = bind_params(load_params(tape, params, false), params.experts.size());
  return gnn_vars(tape.constant(h0), graph, p).value();
}

PoolResult expert_pool(const Matrix& h0, const otroute::DispatchMatrix& dispatch, const ModelParams& params,
                       const RoamConfig& config) {
  if (dispatch.gamma.rows() != h0.rows()) throw InvalidArgument("dispatch rows do not match H0");
  ad::Tape tape;
  const auto p = bind_params(load_params(tape, params, false), params.experts.size());
  const auto pooled = pool_vars(tape.constant(h0), tape.constant(dispatch.gamma), p, config);
  return {pooled.embeddings.value(), pooled.beta.value()};
}

FusionResult fuse_and_classify(const Matrix& expert_embeddings, const ModelParams& params) {
  ad::Tape tape;
  const auto p = bind_params(load_params(tape, params, false), params.experts.size());
  const auto fused = fuse_vars(tape.constant(expert_embeddings), p);
  return {fused.logits.value().row(0), fused.gates.value().row(0).transpose()};
}

ForwardTrace roam_forward(const bagio::PatchBag& bag, const ModelParams& params, const RoamConfig& config,
                          const ForwardOptions& options) {
  validate(config);
  bagio::validate(bag);
  if (bag.dim() != config.d_in) {
    throw InvalidArgument("bag d_in " + std::to_string(bag.dim()) + " does not match config d_in " +
                          std::to_string(config.d_in));
  }
  ForwardTrace trace;
  trace.tape = std::make_unique<ad::Tape>();
  ad::Tape& tape = *trace.tape;
  trace.param_vars = load_params(tape, params, options.record_grad);
  const ParamVars p = bind_params(trace.param_vars, params.experts.size());

  // Patches are processed in canonical order so the result, dropout mask
  // included, does not depend on the order they were stored in.
  const auto order = tokenizer::canonical_order(bag.coords, bag.embeddings);
  Matrix embeddings(bag.size(), bag.dim());
  Matrix coords(bag.size(), 2);
  for (Eigen::Index i = 0; i < bag.size(); ++i) {
    embeddings.row(i) = bag.embeddings.row(order[static_cast<std::size_t>(i)]);
    coords.row(i) = bag.coords.row(order[static_cast<std::size_t>(i)]);
  }
  trace.patch_order = order;

  const ad::Var h = project_patches(tape, embeddings, p.phi_w, p.phi_b, config.dropout, options.mode, options.seed);
  trace.binning = tokenizer::bin_regions(coords, config.target_m, embeddings);
  const ad::Var h0 = ad::segment_mean(h, trace.binning);

  trace.graph = std::make_unique<tokenizer::RegionGraph>(tokenizer::heat_kernel_weights(
      tokenizer::build_region_graph(trace.binning.centroids, config.k_nn), trace.binning.centroids));
  const tokenizer::RegionGraph& graph = *trace.graph;

  // Routing costs.
  const ad::Var z = config.ablations.no_routing_gnn ? h0 : gnn_vars(h0, graph, p);
  const ad::Var cost = cost_vars(z, p.proto);
  trace.region_features = h0.value();
  trace.routing = z.value();
  trace.cost = cost.value();
  trace.marginals = otroute::make_marginals(trace.binning.masses, config.n_experts);
  const Vector& r = trace.marginals.r;

  ad::Var plan;
  ad::Var log_plan = ad::scale(cost, -1.0 / config.epsilon);
  if (config.ablations.softmax_routing) {
    plan = ad::scale_rows(ad::softmax_rows(log_plan), r);
  } else {
    const Vector log_r = r.array().log();
    const Vector log_q = trace.marginals.q.array().log();
    const bool smooth = !config.ablations.no_graph_reg && config.lambda_s > 0.0;
    const auto schedule = otroute::smoothing_schedule(config.sinkhorn_iters, config.n_smooth);
    for (int it = 1; it <= config.sinkhorn_iters; ++it) {
      log_plan = ad::project_rows(log_plan, log_r);
      log_plan = ad::project_cols(log_plan, log_q);
      if (smooth && std::find(schedule.begin(), schedule.end(), it) != schedule.end()) {
        log_plan = ad::diffuse(log_plan, graph, config.lambda_s);
      }
    }
    plan = ad::exp(log_plan);
  }
  trace.plan = plan.value();

  // Top-k dispatch; the selection pattern is constant for differentiation.
  const Matrix mask = otroute::topk_mask(trace.plan, config.top_k);
  const ad::Var gamma = ad::topk_rescale(plan, mask, r);
  trace.dispatch.gamma = gamma.value();
  trace.dispatch.mask = mask;
  trace.dispatch.support.assign(static_cast<std::size_t>(config.n_experts), {});
  for (Eigen::Index e = 0; e < trace.dispatch.gamma.cols(); ++e) {
    for (Eigen::Index m = 0; m < trace.dispatch.gamma.rows(); ++m) {
      if (trace.dispatch.gamma(m, e) > 0.0) trace.dispatch.support[static_cast<std::size_t>(e)].push_back(static_cast<int>(m));
    }
  }

  const PoolVars pooled = pool_vars(h0, gamma, p, config, options.frozen_pool_gamma);
  const FuseVars fused = fuse_vars(pooled.embeddings, p);
  trace.logits = fused.logits;

  auto& diag = trace.diagnostics;
  diag.loads = trace.dispatch.loads();
  diag.plan_loads = trace.plan.colwise().sum().transpose();
  diag.dominant = trace.dispatch.dominant_experts();
  diag.beta = pooled.beta.value();
  diag.gates = fused.gates.value().row(0).transpose();
  diag.row_residual = (trace.plan.rowwise().sum() - r).cwiseAbs().maxCoeff();
  diag.column_residual = (diag.plan_loads - trace.marginals.q).cwiseAbs().maxCoeff();
  for (Eigen::Index m = 0; m < z.rows(); ++m) diag.zero_norm_warnings += z.value().row(m).norm() > 0.0 ? 0 : 1;
  return trace;
}

std::vector<std::uint8_t> encode_checkpoint(const ModelParams& params) {
  static_assert(std::endian::native == std::endian::little, "checkpoint encoding assumes little-endian");
  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  const auto refs = params.tensors();
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(refs.size()));
  for (const auto& ref : refs) {
    put<std::uint16_t>(out, static_cast<std::uint16_t>(ref.name.size()));
    out.insert(out.end(), ref.name.begin(), ref.name.end());
    put<std::uint8_t>(out, static_cast<std::uint8_t>(ref.rank));
    const Matrix& m = *ref.value;
    if (ref.rank == 1) {
      put<std::uint32_t>(out, static_cast<std::uint32_t>(m.size()));
    } else {
      put<std::uint32_t>(out, static_cast<std::uint32_t>(m.rows()));
      put<std::uint32_t>(out, static_cast<std::uint32_t>(m.cols()));
    }
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) put<float>(out, static_cast<float>(m(i, j)));
    }
  }
  return out;
}

ModelParams decode_checkpoint(const std::vector<std::uint8_t>& bytes, const RoamConfig& config) {
  validate(config);
  Reader in(bytes);
  if (in.string(8) != std::string(kCheckpointMagic, 8)) throw Error("bad checkpoint magic");
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw Error("unsupported checkpoint version " + std::to_string(version));
  const auto count = in.get<std::uint32_t>();
  ModelParams params = shaped_params(config);
  std::map<std::string, TensorRef> by_name;
  for (const auto& ref : params.tensors()) by_name.emplace(ref.name, ref);
  if (count != by_name.size()) {
    throw InvalidArgument("checkpoint holds " + std::to_string(count) + " tensors, config expects " +
                          std::to_string(by_name.size()));
  }
  std::vector<std::string> seen;
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto name_len = in.get<std::uint16_t>();
    const std::string name = in.string(name_len);
    const auto rank = in.get<std::uint8_t>();
    auto it = by_name.find(name);
    if (it == by_name.end()) throw InvalidArgument("unknown tensor in checkpoint: " + name);
    if (std::find(seen.begin(), seen.end(), name) != seen.end()) throw InvalidArgument("duplicate tensor: " + name);
    seen.push_back(name);
    Matrix& m = *it->second.value;
    if (rank != it->second.rank) throw InvalidArgument("rank mismatch for " + name);
    bool ok = true;
    if (rank == 1) {
      ok = in.get<std::uint32_t>() == static_cast<std::uint32_t>(m.size());
    } else {
      const auto rows = in.get<std::uint32_t>();
      const auto cols = in.get<std::uint32_t>();
      ok = rows == static_cast<std::uint32_t>(m.rows()) && cols == static_cast<std::uint32_t>(m.cols());
    }
    if (!ok) throw InvalidArgument("shape mismatch between checkpoint and config for " + name);
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = in.get<float>();
    }
  }
  if (!in.done()) throw Error("trailing bytes after checkpoint payload");
  return params;
}

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(params);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed: " + path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path, const RoamConfig& config) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, config);
}

}  // namespace roam::nnmodel
