#pragma once

// Backpropagation through the unrolled pipeline, AdamW with warmup + cosine
// decay, the training loop with early stopping, evaluation metrics, routing
// diagnostics and the finite-difference gradient check.

#include "roam/bagio.hpp"
#include "roam/nnmodel.hpp"
#include "roam/tokenizer.hpp"
#include "roam/types.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace roam::traingrad {

// One gradient per parameter tensor, aligned with ModelParams::tensors().
using GradientSet = std::vector<Matrix>;

struct TrainConfig {
  double lr = 5e-4;
  double weight_decay = 1e-4;
  int warmup_epochs = 5;
  int max_epochs = 200;
  int patience = 20;
  double clip_norm = 1.0;
  int batch = 1;
  std::int64_t subsample_max = 4096;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
};

void validate(const TrainConfig& config);

struct BackwardResult {
  double loss = 0.0;
  GradientSet grads;
};

// Cross-entropy of the trace's logits against `label`, differentiated through
// the recorded tape. The forward pass must have been run with record_grad.
// `loss_scale` multiplies the loss before differentiation.
BackwardResult backward(nnmodel::ForwardTrace& trace, int label, double loss_scale = 1.0);

double global_norm(const GradientSet& grads);

// Scales every gradient by clip_norm / norm when the global norm exceeds
// clip_norm. Returns the pre-clip norm.
double clip_gradients(GradientSet& grads, double clip_norm);

// Linear warmup to the base rate over `warmup_steps`, then cosine decay to 0
// at `total_steps`. Steps are 1-based.
struct LrSchedule {
  double base_lr = 5e-4;
  std::int64_t warmup_steps = 0;
  std::int64_t total_steps = 1;

  double at(std::int64_t step) const;
};

struct AdamState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  std::int64_t step = 0;
};

AdamState init_adam(const nnmodel::ModelParams& params);

// Clips, then applies one decoupled-weight-decay Adam update at step
// state.step + 1. Returns the learning rate used.
double adamw_step(nnmodel::ModelParams& params, GradientSet grads, AdamState& state, const LrSchedule& schedule,
                  const TrainConfig& config);

// Rank-based AUC with half credit for ties. Throws unless both classes occur.
double auc(const std::vector<double>& scores, const std::vector<int>& labels);

// Quadratic-weighted Cohen's kappa. When both label vectors hold one and the
// same value the statistic is defined as 1.
double qwk(const std::vector<int>& pred, const std::vector<int>& truth, int n_classes);

double accuracy(const std::vector<int>& pred, const std::vector<int>& truth);

// Fraction of undirected graph edges whose endpoints have different dominant
// experts (argmax over dispatch rows). Zero for graphs without edges.
double neighbor_disagreement(const Matrix& dispatch, const tokenizer::RegionGraph& graph);

struct MetricsReport {
  std::string split;
  int n_slides = 0;
  double loss = 0.0;
  double accuracy = 0.0;
  std::optional<double> auc;
  std::optional<double> qwk;
  Vector mean_load;
  double neighbor_disagreement = 0.0;
  std::vector<std::string> notes;
  std::vector<double> scores;  // P(class 1) per slide, binary tasks
  std::vector<int> predictions;

  std::string to_json() const;
};

MetricsReport evaluate(const std::vector<bagio::PatchBag>& bags, const nnmodel::ModelParams& params,
                       const nnmodel::RoamConfig& config, const std::string& split_name = "");

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  std::optional<double> val_auc;
  double val_accuracy = 0.0;
  double val_neighbor_disagreement = 0.0;
  Vector val_mean_load;
  bool improved = false;
  std::string routing_mode;

  std::string to_json() const;
};

struct TrainResult {
  nnmodel::ModelParams best;
  nnmodel::RoamConfig config;  // with d_in resolved
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  bool early_stopped = false;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

TrainResult train(const std::vector<bagio::PatchBag>& train_bags, const std::vector<bagio::PatchBag>& val_bags,
                  nnmodel::RoamConfig config, const TrainConfig& train_config, const EpochCallback& on_epoch = {});

// Loads the train and val splits of a manifest and trains on them.
TrainResult train(const bagio::DatasetManifest& manifest, nnmodel::RoamConfig config, const TrainConfig& train_config,
                  const EpochCallback& on_epoch = {});

std::vector<bagio::PatchBag> load_split(const bagio::DatasetManifest& manifest, bagio::Split split,
                                        std::vector<std::string>* warnings = nullptr);

// Finite-difference check of the analytic gradients.
struct GradCheckOptions {
  double step = 1e-5;
  double grad_floor = 1e-6;  // coordinates with smaller gradients are not compared
  nnmodel::Mode mode = nnmodel::Mode::kTrain;
  std::uint64_t dropout_seed = 7;
};

struct TensorCheck {
  std::string name;
  std::size_t coordinates = 0;
  std::size_t compared = 0;
  std::size_t skipped_kinks = 0;  // perturbation crossed a relu or top-k branch
  double max_rel_error = 0.0;
  double max_abs_grad = 0.0;
};

struct GradCheckReport {
  std::vector<TensorCheck> tensors;
  double loss = 0.0;

  double max_rel_error() const;
  std::size_t skipped_kinks() const;
  std::size_t coordinates() const;
};

GradCheckReport check_gradients(const bagio::PatchBag& bag, const nnmodel::ModelParams& params,
                                const nnmodel::RoamConfig& config, const GradCheckOptions& options = {});

struct GradCheckInstance {
  bagio::PatchBag bag;
  nnmodel::RoamConfig config;
  nnmodel::ModelParams params;
};

// N=40, d_in=8, d=16, M<=9, E=3, k=2, T=8 on a synthetic slide.
GradCheckInstance tiny_gradcheck_instance(std::uint64_t seed, const nnmodel::Ablations& ablations = {});

// Per-slide seed derivation used by the training loop.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0);

}  // namespace roam::traingrad
