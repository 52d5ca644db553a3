#include "roam/traingrad.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

namespace roam::traingrad {
namespace {

using nlohmann::json;

double cross_entropy_value(const RowVector& logits, int label) {
  const double peak = logits.maxCoeff();
  const double lse = peak + std::log((logits.array() - peak).exp().sum());
  return lse - logits(label);
}

RowVector softmax(const RowVector& logits) {
  RowVector p = (logits.array() - logits.maxCoeff()).exp();
  return p / p.sum();
}

json vector_json(const Vector& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  // splitmix64 finaliser over a simple combination.
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(a) ^ b) ^ c);
}

void validate(const TrainConfig& c) {
  if (!(c.lr > 0.0)) throw InvalidArgument("lr must be positive");
  if (c.weight_decay < 0.0) throw InvalidArgument("weight_decay must be non-negative");
  if (c.warmup_epochs < 0) throw InvalidArgument("warmup_epochs must be non-negative");
  if (c.max_epochs < 1) throw InvalidArgument("max_epochs must be >= 1");
  if (c.patience < 0) throw InvalidArgument("patience must be non-negative");
  if (!(c.clip_norm > 0.0)) throw InvalidArgument("clip_norm must be positive");
  if (c.batch < 1) throw InvalidArgument("batch must be >= 1");
  if (c.subsample_max < 1) throw InvalidArgument("subsample_max must be >= 1");
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0) || !(c.beta2 >= 0.0 && c.beta2 < 1.0)) {
    throw InvalidArgument("moment coefficients must lie in [0, 1)");
  }
  if (!(c.adam_eps > 0.0)) throw InvalidArgument("adam_eps must be positive");
}

BackwardResult backward(nnmodel::ForwardTrace& trace, int label, double loss_scale) {
  if (!trace.tape || trace.param_vars.empty()) throw InvalidArgument("backward needs a recorded forward trace");
  if (!trace.tape->requires_grad(trace.param_vars.front())) {
    throw InvalidArgument("forward pass was run without record_grad");
  }
  const ad::Var loss = ad::cross_entropy(trace.logits, label);
  BackwardResult out;
  out.loss = loss.value()(0, 0);
  if (!std::isfinite(out.loss)) {
    std::ostringstream msg;
    msg.precision(17);
    msg << "non-finite loss " << out.loss << "; logits [" << trace.logit_values() << "]"
        << "; row residual " << trace.diagnostics.row_residual << "; column residual "
        << trace.diagnostics.column_residual << "; plan finite " << trace.plan.allFinite() << "; cost finite "
        << trace.cost.allFinite();
    throw Error(msg.str());
  }
  const ad::Var scaled = loss_scale == 1.0 ? loss : ad::scale(loss, loss_scale);
  trace.tape->backward(scaled);
  out.loss *= loss_scale;
  out.grads.reserve(trace.param_vars.size());
  for (const auto& v : trace.param_vars) out.grads.push_back(trace.tape->grad(v));
  return out;
}

double global_norm(const GradientSet& grads) {
  double total = 0.0;
  for (const auto& g : grads) total += g.squaredNorm();
  return std::sqrt(total);
}

double clip_gradients(GradientSet& grads, double clip_norm) {
  const double norm = global_norm(grads);
  if (norm > clip_norm) {
    const double factor = clip_norm / norm;
    for (auto& g : grads) g *= factor;
  }
  return norm;
}

double LrSchedule::at(std::int64_t step) const {
  if (warmup_steps > 0 && step <= warmup_steps) {
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  const std::int64_t decay_steps = total_steps - warmup_steps;
  if (decay_steps <= 0) return 0.0;
  const double progress =
      std::clamp(static_cast<double>(step - warmup_steps) / static_cast<double>(decay_steps), 0.0, 1.0);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

AdamState init_adam(const nnmodel::ModelParams& params) {
  AdamState state;
  for (const auto& ref : params.tensors()) {
    state.m.push_back(Matrix::Zero(ref.value->rows(), ref.value->cols()));
    state.v.push_back(Matrix::Zero(ref.value->rows(), ref.value->cols()));
  }
  return state;
}

double adamw_step(nnmodel::ModelParams& params, GradientSet grads, AdamState& state, const LrSchedule& schedule,
                  const TrainConfig& config) {
  auto refs = params.tensors();
  if (grads.size() != refs.size() || state.m.size() != refs.size()) {
    throw InvalidArgument("gradient/optimizer state does not match parameters");
  }
  clip_gradients(grads, config.clip_norm);
  state.step += 1;
  const double lr = schedule.at(state.step);
  const double t = static_cast<double>(state.step);
  const double bias1 = 1.0 - std::pow(config.beta1, t);
  const double bias2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t i = 0; i < refs.size(); ++i) {
    Matrix& p = *refs[i].value;
    const Matrix& g = grads[i];
    state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
    state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g.cwiseProduct(g);
    p *= 1.0 - lr * config.weight_decay;
    p.array() -= lr * (state.m[i].array() / bias1) / ((state.v[i].array() / bias2).sqrt() + config.adam_eps);
  }
  return lr;
}

double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw InvalidArgument("auc: scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Average ranks over tied groups.
  std::vector<double> rank(scores.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = mid;
    i = j + 1;
  }
  double pos = 0.0;
  double neg = 0.0;
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1) {
      pos += 1.0;
      rank_sum += rank[i];
    } else if (labels[i] == 0) {
      neg += 1.0;
    } else {
      throw InvalidArgument("auc: labels must be 0 or 1");
    }
  }
  if (pos == 0.0 || neg == 0.0) throw InvalidArgument("auc needs both classes present");
  return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

double qwk(const std::vector<int>& pred, const std::vector<int>& truth, int n_classes) {
  if (pred.size() != truth.size() || pred.empty()) throw InvalidArgument("qwk: inputs must be non-empty and aligned");
  if (n_classes < 2) throw InvalidArgument("qwk: need at least two classes");
  const auto k = static_cast<Eigen::Index>(n_classes);
  Matrix observed = Matrix::Zero(k, k);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] < 0 || pred[i] >= n_classes || truth[i] < 0 || truth[i] >= n_classes) {
      throw InvalidArgument("qwk: label out of range");
    }
    observed(truth[i], pred[i]) += 1.0;
  }
  const auto single = [](const std::vector<int>& v) {
    return std::all_of(v.begin(), v.end(), [&](int x) { return x == v.front(); });
  };
  if (single(pred) && single(truth)) {
    if (pred.front() == truth.front()) return 1.0;
    throw InvalidArgument("qwk: degenerate label distribution");
  }
  const double n = static_cast<double>(pred.size());
  const Vector truth_hist = observed.rowwise().sum();
  const Vector pred_hist = observed.colwise().sum().transpose();
  // Cells (i,j) and (j,i) share a weight and are summed as a pair, so the
  // value is exactly symmetric in its two arguments.
  double num = 0.0;
  double den = 0.0;
  const double scale = static_cast<double>((k - 1) * (k - 1));
  for (Eigen::Index i = 0; i < k; ++i) {
    for (Eigen::Index j = i + 1; j < k; ++j) {
      const double w = static_cast<double>((i - j) * (i - j)) / scale;
      num += w * (observed(i, j) + observed(j, i));
      den += w * (truth_hist(i) * pred_hist(j) + truth_hist(j) * pred_hist(i)) / n;
    }
  }
  if (den == 0.0) throw InvalidArgument("qwk: degenerate label distribution");
  return 1.0 - num / den;
}

double accuracy(const std::vector<int>& pred, const std::vector<int>& truth) {
  if (pred.size() != truth.size() || pred.empty()) throw InvalidArgument("accuracy: inputs must be non-empty and aligned");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == truth[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

double neighbor_disagreement(const Matrix& dispatch, const tokenizer::RegionGraph& graph) {
  if (graph.num_nodes() != dispatch.rows()) throw InvalidArgument("graph node count does not match dispatch rows");
  const auto edges = tokenizer::undirected_edges(graph);
  if (edges.empty()) return 0.0;
  const auto dominant = otroute::row_argmax(dispatch);
  std::size_t split = 0;
  for (const auto& [a, b] : edges) {
    split += dominant[static_cast<std::size_t>(a)] != dominant[static_cast<std::size_t>(b)] ? 1 : 0;
  }
  return static_cast<double>(split) / static_cast<double>(edges.size());
}

std::string MetricsReport::to_json() const {
  json doc;
  doc["split"] = split;
  doc["n_slides"] = n_slides;
  doc["loss"] = loss;
  doc["accuracy"] = accuracy;
  doc["auc"] = optional_json(auc);
  doc["qwk"] = optional_json(qwk);
  doc["mean_expert_load"] = vector_json(mean_load);
  doc["neighbor_disagreement"] = neighbor_disagreement;
  doc["notes"] = notes;
  return doc.dump(2);
}

MetricsReport evaluate(const std::vector<bagio::PatchBag>& bags, const nnmodel::ModelParams& params,
                       const nnmodel::RoamConfig& config, const std::string& split_name) {
  if (bags.empty()) throw InvalidArgument("cannot evaluate an empty split");
  MetricsReport report;
  report.split = split_name;
  report.n_slides = static_cast<int>(bags.size());
  report.mean_load = Vector::Zero(config.n_experts);
  std::vector<int> truth;
  double loss_sum = 0.0;
  double disagreement_sum = 0.0;
  for (const auto& bag : bags) {
    if (bag.label < 0 || bag.label >= config.n_classes) {
      throw InvalidArgument("label of " + bag.slide_id + " outside [0, n_classes)");
    }
    const auto trace = nnmodel::roam_forward(bag, params, config, {nnmodel::Mode::kEval, 0, false});
    const RowVector logits = trace.logit_values();
    loss_sum += cross_entropy_value(logits, bag.label);
    const RowVector probs = softmax(logits);
    Eigen::Index best = 0;
    probs.maxCoeff(&best);
    report.predictions.push_back(static_cast<int>(best));
    report.scores.push_back(probs(std::min<Eigen::Index>(1, probs.size() - 1)));
    truth.push_back(bag.label);
    report.mean_load += trace.diagnostics.loads;
    disagreement_sum += neighbor_disagreement(trace.dispatch.gamma, *trace.graph);
  }
  const double n = static_cast<double>(bags.size());
  report.loss = loss_sum / n;
  report.mean_load /= n;
  report.neighbor_disagreement = disagreement_sum / n;
  report.accuracy = accuracy(report.predictions, truth);
  if (config.n_classes == 2) {
    try {
      report.auc = auc(report.scores, truth);
    } catch (const InvalidArgument& e) {
      report.notes.push_back(std::string("auc unavailable: ") + e.what());
    }
  }
  try {
    report.qwk = qwk(report.predictions, truth, config.n_classes);
  } catch (const InvalidArgument& e) {
    report.notes.push_back(std::string("qwk unavailable: ") + e.what());
  }
  return report;
}

std::string EpochRecord::to_json() const {
  json doc;
  doc["epoch"] = epoch;
  doc["lr"] = lr;
  doc["train_loss"] = train_loss;
  doc["val_loss"] = val_loss;
  doc["val_auc"] = optional_json(val_auc);
  doc["val_accuracy"] = val_accuracy;
  doc["val_neighbor_disagreement"] = val_neighbor_disagreement;
  doc["val_mean_load"] = vector_json(val_mean_load);
  doc["improved"] = improved;
  doc["routing_mode"] = routing_mode;
  return doc.dump();
}

std::vector<bagio::PatchBag> load_split(const bagio::DatasetManifest& manifest, bagio::Split split,
                                        std::vector<std::string>* warnings) {
  std::vector<bagio::PatchBag> bags;
  for (const auto& entry : manifest.split(split)) bags.push_back(bagio::load_entry(entry, warnings));
  return bags;
}

TrainResult train(const bagio::DatasetManifest& manifest, nnmodel::RoamConfig config, const TrainConfig& train_config,
                  const EpochCallback& on_epoch) {
  const auto train_bags = load_split(manifest, bagio::Split::kTrain);
  const auto val_bags = load_split(manifest, bagio::Split::kVal);
  return train(train_bags, val_bags, config, train_config, on_epoch);
}

TrainResult train(const std::vector<bagio::PatchBag>& train_bags, const std::vector<bagio::PatchBag>& val_bags,
                  nnmodel::RoamConfig config, const TrainConfig& train_config, const EpochCallback& on_epoch) {
  if (train_bags.empty()) throw InvalidArgument("train split is empty");
  if (val_bags.empty()) throw InvalidArgument("val split is empty");
  validate(train_config);
  if (config.d_in == 0) config.d_in = static_cast<int>(train_bags.front().dim());
  nnmodel::validate(config);

  TrainResult result;
  result.config = config;
  nnmodel::ModelParams params = nnmodel::init_params(config, train_config.seed);
  result.best = params;
  AdamState state = init_adam(params);

  const auto n_train = static_cast<std::int64_t>(train_bags.size());
  const std::int64_t steps_per_epoch = (n_train + train_config.batch - 1) / train_config.batch;
  const LrSchedule schedule{train_config.lr, train_config.warmup_epochs * steps_per_epoch,
                            train_config.max_epochs * steps_per_epoch};
  const std::string mode = nnmodel::routing_mode(config);

  double best_loss = std::numeric_limits<double>::infinity();
  int since_improved = 0;
  std::vector<std::size_t> order(train_bags.size());
  for (int epoch = 1; epoch <= train_config.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 shuffle_rng(mix_seed(train_config.seed, static_cast<std::uint64_t>(epoch), 1));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0.0;
    double lr = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(train_config.batch)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(train_config.batch));
      GradientSet accumulated;
      for (std::size_t pos = start; pos < stop; ++pos) {
        const auto& source = train_bags[order[pos]];
        const std::uint64_t slide_seed = mix_seed(train_config.seed, static_cast<std::uint64_t>(epoch), 2 + pos);
        const bagio::PatchBag bag = bagio::subsample_bag(source, train_config.subsample_max, slide_seed);
        auto trace = nnmodel::roam_forward(bag, params, config,
                                           {nnmodel::Mode::kTrain, mix_seed(slide_seed, 3), true});
        auto grads = backward(trace, bag.label);
        loss_sum += grads.loss;
        if (accumulated.empty()) {
          accumulated = std::move(grads.grads);
        } else {
          for (std::size_t i = 0; i < accumulated.size(); ++i) accumulated[i] += grads.grads[i];
        }
      }
      const double count = static_cast<double>(stop - start);
      if (count > 1.0) {
        for (auto& g : accumulated) g /= count;
      }
      lr = adamw_step(params, std::move(accumulated), state, schedule, train_config);
    }

    const MetricsReport val = evaluate(val_bags, params, config, "val");
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(n_train);
    rec.val_loss = val.loss;
    rec.val_auc = val.auc;
    rec.val_accuracy = val.accuracy;
    rec.val_neighbor_disagreement = val.neighbor_disagreement;
    rec.val_mean_load = val.mean_load;
    rec.routing_mode = mode;
    rec.improved = val.loss < best_loss;
    if (rec.improved) {
      best_loss = val.loss;
      result.best = params;
      result.best_epoch = epoch;
      since_improved = 0;
    } else {
      ++since_improved;
    }
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (since_improved > train_config.patience) {
      result.early_stopped = true;
      break;
    }
  }
  return result;
}

double GradCheckReport::max_rel_error() const {
  double worst = 0.0;
  for (const auto& t : tensors) worst = std::max(worst, t.max_rel_error);
  return worst;
}

std::size_t GradCheckReport::skipped_kinks() const {
  std::size_t total = 0;
  for (const auto& t : tensors) total += t.skipped_kinks;
  return total;
}

std::size_t GradCheckReport::coordinates() const {
  std::size_t total = 0;
  for (const auto& t : tensors) total += t.coordinates;
  return total;
}

GradCheckReport check_gradients(const bagio::PatchBag& bag, const nnmodel::ModelParams& params,
                                const nnmodel::RoamConfig& config, const GradCheckOptions& options) {
  const nnmodel::ForwardOptions base_options{options.mode, options.dropout_seed, true};
  auto base = nnmodel::roam_forward(bag, params, config, base_options);
  const std::vector<std::uint8_t> base_branches = base.tape->branch_log();
  const Matrix frozen_gamma = base.dispatch.gamma;
  const auto analytic = backward(base, bag.label);

  GradCheckReport report;
  report.loss = analytic.loss;
  nnmodel::ModelParams probe = params;
  auto refs = probe.tensors();

  // Loss of a perturbed model, evaluated forward-only. Returns false when the
  // perturbation moved the pipeline onto a different piecewise branch.
  nnmodel::ForwardOptions probe_options{options.mode, options.dropout_seed, false};
  if (config.ablations.detach_routing) probe_options.frozen_pool_gamma = &frozen_gamma;
  auto probe_loss = [&](double& loss) {
    const auto trace = nnmodel::roam_forward(bag, probe, config, probe_options);
    loss = cross_entropy_value(trace.logit_values(), bag.label);
    return trace.tape->branch_log() == base_branches;
  };

  for (std::size_t t = 0; t < refs.size(); ++t) {
    TensorCheck check;
    check.name = refs[t].name;
    Matrix& value = *refs[t].value;
    const Matrix& grad = analytic.grads[t];
    check.coordinates = static_cast<std::size_t>(value.size());
    for (Eigen::Index i = 0; i < value.size(); ++i) {
      const double original = value.data()[i];
      double plus = 0.0;
      double minus = 0.0;
      value.data()[i] = original + options.step;
      const bool same_plus = probe_loss(plus);
      value.data()[i] = original - options.step;
      const bool same_minus = probe_loss(minus);
      value.data()[i] = original;
      if (!same_plus || !same_minus) {
        ++check.skipped_kinks;
        continue;
      }
      const double fd = (plus - minus) / (2.0 * options.step);
      const double a = grad.data()[i];
      const double scale = std::max(std::abs(a), std::abs(fd));
      check.max_abs_grad = std::max(check.max_abs_grad, std::abs(a));
      if (scale <= options.grad_floor) continue;
      ++check.compared;
      check.max_rel_error = std::max(check.max_rel_error, std::abs(a - fd) / scale);
    }
    report.tensors.push_back(check);
  }
  return report;
}

GradCheckInstance tiny_gradcheck_instance(std::uint64_t seed, const nnmodel::Ablations& ablations) {
  bagio::SynthSpec spec = bagio::default_synth_spec();
  spec.d_in = 8;
  spec.min_patches = 40;
  spec.max_patches = 40;
  spec.min_cells = 3;
  spec.max_cells = 4;
  spec.seed = seed;
  GradCheckInstance out;
  out.bag = bagio::gen_synthetic_slide(spec, static_cast<int>(seed % 2), seed);
  out.config.d_in = 8;
  out.config.d = 16;
  out.config.target_m = 9;
  out.config.n_experts = 3;
  out.config.top_k = 2;
  out.config.sinkhorn_iters = 8;
  out.config.d_attn = 8;
  out.config.ablations = ablations;
  out.params = nnmodel::init_params(out.config, mix_seed(seed, 11));
  return out;
}

}  // namespace roam::traingrad
