#include "commands.hpp"

#include "roam/otroute.hpp"
#include "roam/tokenizer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <sstream>

namespace roam::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw Error("cannot create output directory " + dir.string());
}

std::ofstream open_out(const fs::path& path, std::ios::openmode mode = std::ios::out) {
  std::ofstream f(path, mode | std::ios::trunc);
  if (!f) throw Error("cannot write " + path.string());
  return f;
}

void write_text(const fs::path& path, const std::string& text) {
  auto f = open_out(path, std::ios::binary);
  f << text;
  if (!f) throw Error("failed writing " + path.string());
}

// Paths are made absolute so the file can be reused as --config from anywhere.
void write_resolved(RunConfig config) {
  for (auto* p : {&config.paths.manifest, &config.paths.out, &config.paths.checkpoint, &config.paths.bag}) {
    if (!p->empty()) *p = fs::absolute(*p).lexically_normal();
  }
  write_text(config.paths.out / "resolved_config.json", to_json(config));
}

// Tees log lines to the caller's stream and, once the output directory
// exists, to run.log with a timestamp.
class RunLog {
 public:
  explicit RunLog(std::ostream& echo) : echo_(echo) {}
  void attach(const fs::path& path) { file_ = open_out(path); }
  void line(const std::string& text) {
    echo_ << text << "\n";
    if (file_.is_open()) file_ << timestamp() << " " << text << "\n" << std::flush;
  }

 private:
  std::ostream& echo_;
  std::ofstream file_;
};

void require_file(const fs::path& path, const char* what) {
  if (path.empty()) throw UsageError(std::string("no ") + what + " given");
  if (!fs::is_regular_file(path)) throw UsageError(std::string(what) + " not found: " + path.string());
}

bagio::DatasetManifest load_manifest_checked(const fs::path& path) {
  require_file(path, "manifest");
  return bagio::read_manifest(path);
}

nnmodel::RoamConfig resolve_d_in(nnmodel::RoamConfig model, const bagio::PatchBag& sample) {
  if (model.d_in == 0) model.d_in = static_cast<int>(sample.dim());
  return model;
}

std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

}  // namespace

std::vector<bagio::Split> stratified_split(const std::vector<int>& labels, std::uint64_t seed) {
  const int n = static_cast<int>(labels.size());
  const int n_val = static_cast<int>(std::floor(0.15 * n + 1e-9));
  const int n_test = static_cast<int>(std::floor(0.15 * n + 1e-9));

  // Shuffle each class, then interleave classes round-robin so every prefix
  // of the order is as class-balanced as possible.
  std::map<int, std::vector<int>> by_class;
  for (int i = 0; i < n; ++i) by_class[labels[static_cast<std::size_t>(i)]].push_back(i);
  std::mt19937_64 rng(traingrad::mix_seed(seed, 0x5eed5u));
  for (auto& [cls, members] : by_class) std::shuffle(members.begin(), members.end(), rng);
  std::vector<int> order;
  for (std::size_t round = 0; static_cast<int>(order.size()) < n; ++round) {
    for (auto& [cls, members] : by_class) {
      if (round < members.size()) order.push_back(members[round]);
    }
  }

  std::vector<bagio::Split> splits(static_cast<std::size_t>(n), bagio::Split::kTrain);
  for (int j = 0; j < n; ++j) {
    const auto idx = static_cast<std::size_t>(order[static_cast<std::size_t>(j)]);
    if (j < n_val) splits[idx] = bagio::Split::kVal;
    else if (j < n_val + n_test) splits[idx] = bagio::Split::kTest;
  }
  return splits;
}

GenSynthOutput cmd_gen_synth(const RunConfig& config, std::ostream& echo) {
  try {
    bagio::validate(config.synth);
  } catch (const InvalidArgument& e) {
    throw UsageError(std::string("invalid synthetic spec: ") + e.what());
  }
  const auto& spec = config.synth;
  ensure_dir(config.paths.out / "bags");
  RunLog log(echo);
  log.attach(config.paths.out / "run.log");
  write_resolved(config);

  std::vector<int> labels;
  std::vector<std::string> ids;
  for (int cls = 0; cls < spec.n_classes(); ++cls) {
    for (int i = 0; i < spec.n_slides_per_class; ++i) {
      std::ostringstream id;
      id << "c" << cls << "_" << std::setw(4) << std::setfill('0') << i;
      ids.push_back(id.str());
      labels.push_back(cls);
    }
  }
  const auto splits = stratified_split(labels, spec.seed);

  bagio::DatasetManifest manifest;
  GenSynthOutput result;
  for (std::size_t s = 0; s < ids.size(); ++s) {
    const auto slide_seed = traingrad::mix_seed(spec.seed, static_cast<std::uint64_t>(labels[s]) + 1, s);
    auto bag = bagio::gen_synthetic_slide(spec, labels[s], slide_seed);
    bag.slide_id = ids[s];
    const fs::path rel = fs::path("bags") / (ids[s] + ".bag");
    bagio::write_bag(bag, config.paths.out / rel);
    manifest.entries.push_back({ids[s], rel, labels[s], splits[s]});
    if (splits[s] == bagio::Split::kTrain) ++result.n_train;
    else if (splits[s] == bagio::Split::kVal) ++result.n_val;
    else ++result.n_test;
  }
  result.manifest = config.paths.out / "manifest.csv";
  bagio::write_manifest(manifest, result.manifest);
  log.line("gen-synth: " + std::to_string(ids.size()) + " slides, splits " + std::to_string(result.n_train) + "/" +
           std::to_string(result.n_val) + "/" + std::to_string(result.n_test) + " -> " + result.manifest.string());
  return result;
}

namespace {

void train_once(RunConfig config, const bagio::DatasetManifest& manifest, RunLog& log) {
  ensure_dir(config.paths.out);
  std::vector<std::string> warnings;
  const auto train_bags = traingrad::load_split(manifest, bagio::Split::kTrain, &warnings);
  const auto val_bags = traingrad::load_split(manifest, bagio::Split::kVal, &warnings);
  const auto test_bags = traingrad::load_split(manifest, bagio::Split::kTest, &warnings);
  for (const auto& w : warnings) log.line("warning: " + w);
  if (train_bags.empty() || val_bags.empty()) throw UsageError("manifest needs non-empty train and val splits");
  config.model = resolve_d_in(config.model, train_bags.front());
  config.paths.checkpoint = config.paths.out / "checkpoint.bin";
  write_resolved(config);

  auto history = open_out(config.paths.out / "history.jsonl", std::ios::binary);
  const auto result = traingrad::train(train_bags, val_bags, config.model, config.train, [&](const auto& rec) {
    history << rec.to_json() << "\n" << std::flush;
    std::ostringstream s;
    s << "epoch " << rec.epoch << " train_loss " << fmt(rec.train_loss) << " val_loss " << fmt(rec.val_loss)
      << (rec.improved ? " *" : "");
    log.line(s.str());
  });
  nnmodel::save_checkpoint(result.best, config.paths.checkpoint);

  json report;
  report["best_epoch"] = result.best_epoch;
  report["epochs_run"] = static_cast<int>(result.history.size());
  report["early_stopped"] = result.early_stopped;
  report["routing_mode"] = nnmodel::routing_mode(result.config);
  report["seed"] = config.train.seed;
  report["val"] = json::parse(traingrad::evaluate(val_bags, result.best, result.config, "val").to_json());
  if (!test_bags.empty()) {
    report["test"] = json::parse(traingrad::evaluate(test_bags, result.best, result.config, "test").to_json());
  } else {
    report["test"] = nullptr;
  }
  write_text(config.paths.out / "report.json", report.dump(2) + "\n");
  log.line("train: best epoch " + std::to_string(result.best_epoch) + ", checkpoint " +
           config.paths.checkpoint.string());
}

}  // namespace

void cmd_train(const RunConfig& config, std::ostream& echo) {
  const auto manifest = load_manifest_checked(config.paths.manifest);
  ensure_dir(config.paths.out);
  RunLog log(echo);
  log.attach(config.paths.out / "run.log");
  if (config.repeats == 1) {
    train_once(config, manifest, log);
    return;
  }
  for (int k = 0; k < config.repeats; ++k) {
    RunConfig run = config;
    run.repeats = 1;
    run.train.seed = config.train.seed + static_cast<std::uint64_t>(k);
    run.paths.out = config.paths.out / ("run_" + std::to_string(k));
    log.line("train: run " + std::to_string(k) + " seed " + std::to_string(run.train.seed));
    train_once(run, manifest, log);
  }
}

namespace {

nnmodel::ModelParams load_model(const RunConfig& config, nnmodel::RoamConfig& model, const bagio::PatchBag& sample) {
  require_file(config.paths.checkpoint, "checkpoint");
  model = resolve_d_in(config.model, sample);
  try {
    return nnmodel::load_checkpoint(config.paths.checkpoint, model);
  } catch (const InvalidArgument& e) {
    throw UsageError(std::string("checkpoint does not match config: ") + e.what());
  }
}

}  // namespace

traingrad::MetricsReport cmd_eval(const RunConfig& config, std::ostream& echo) {
  const auto manifest = load_manifest_checked(config.paths.manifest);
  bagio::Split split;
  try {
    split = bagio::parse_split(config.eval.split);
  } catch (const InvalidArgument& e) {
    throw UsageError(e.what());
  }
  ensure_dir(config.paths.out);
  RunLog log(echo);
  log.attach(config.paths.out / "run.log");
  std::vector<std::string> warnings;
  const auto bags = traingrad::load_split(manifest, split, &warnings);
  for (const auto& w : warnings) log.line("warning: " + w);
  if (bags.empty()) throw UsageError("split '" + config.eval.split + "' of the manifest is empty");
  nnmodel::RoamConfig model;
  const auto params = load_model(config, model, bags.front());
  RunConfig resolved = config;
  resolved.model = model;
  write_resolved(resolved);
  auto report = traingrad::evaluate(bags, params, model, config.eval.split);
  const fs::path path = config.paths.out / ("metrics_" + config.eval.split + ".json");
  write_text(path, report.to_json() + "\n");
  log.line("eval: " + std::to_string(report.n_slides) + " slides -> " + path.string());
  return report;
}

void cmd_route(const RunConfig& config, std::ostream& echo) {
  require_file(config.paths.bag, "bag file");
  const auto bag = bagio::read_bag(config.paths.bag);
  nnmodel::RoamConfig model;
  const auto params = load_model(config, model, bag);
  ensure_dir(config.paths.out);
  RunLog log(echo);
  log.attach(config.paths.out / "run.log");
  RunConfig resolved = config;
  resolved.model = model;
  write_resolved(resolved);

  const auto trace = nnmodel::roam_forward(bag, params, model, {nnmodel::Mode::kEval, 0, false});
  const auto& binning = trace.binning;
  const Matrix& gamma = trace.dispatch.gamma;
  const auto dominant = otroute::row_argmax(gamma);

  std::ostringstream csv;
  csv << std::setprecision(17) << "region_id,x,y,mass,dominant_expert";
  for (Eigen::Index e = 0; e < gamma.cols(); ++e) csv << ",gamma_" << e;
  csv << "\n";
  for (Eigen::Index m = 0; m < gamma.rows(); ++m) {
    csv << m << "," << binning.centroids(m, 0) << "," << binning.centroids(m, 1) << "," << binning.masses(m) << ","
        << dominant[static_cast<std::size_t>(m)];
    for (Eigen::Index e = 0; e < gamma.cols(); ++e) csv << "," << gamma(m, e);
    csv << "\n";
  }
  write_text(config.paths.out / "routing.csv", csv.str());

  std::ostringstream edges;
  edges << std::setprecision(17);
  tokenizer::write_edges_csv(edges, *trace.graph);
  write_text(config.paths.out / "edges.csv", edges.str());

  const auto& d = trace.diagnostics;
  std::vector<int> distinct = dominant;
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  json diag;
  diag["slide_id"] = bag.slide_id;
  diag["n_patches"] = bag.size();
  diag["n_regions"] = gamma.rows();
  diag["grid_side"] = binning.grid_side;
  diag["routing_mode"] = nnmodel::routing_mode(model);
  diag["tau"] = trace.graph->tau;
  diag["loads"] = std::vector<double>(d.loads.data(), d.loads.data() + d.loads.size());
  diag["plan_loads"] = std::vector<double>(d.plan_loads.data(), d.plan_loads.data() + d.plan_loads.size());
  diag["gates"] = std::vector<double>(d.gates.data(), d.gates.data() + d.gates.size());
  diag["row_residual"] = d.row_residual;
  diag["column_residual"] = d.column_residual;
  diag["neighbor_disagreement"] = traingrad::neighbor_disagreement(gamma, *trace.graph);
  diag["distinct_dominant_experts"] = static_cast<int>(distinct.size());
  diag["zero_norm_warnings"] = d.zero_norm_warnings;
  const RowVector logits = trace.logit_values();
  diag["logits"] = std::vector<double>(logits.data(), logits.data() + logits.size());
  write_text(config.paths.out / "routing_diagnostics.json", diag.dump(2) + "\n");
  log.line("route: " + std::to_string(gamma.rows()) + " regions -> " + (config.paths.out / "routing.csv").string());
}

namespace {

// Random costs in [0, 2] and a k-NN heat-kernel graph over jittered grid
// centroids, one instance per (M, E).
struct BenchInstance {
  Matrix cost;
  otroute::Marginals marginals;
  tokenizer::RegionGraph graph;
};

BenchInstance bench_instance(int m, int e, int k_nn, std::uint64_t seed) {
  std::mt19937_64 rng(traingrad::mix_seed(seed, static_cast<std::uint64_t>(m), static_cast<std::uint64_t>(e)));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  BenchInstance inst;
  inst.cost.resize(m, e);
  for (Eigen::Index i = 0; i < inst.cost.size(); ++i) inst.cost.data()[i] = 2.0 * u(rng);
  Vector masses(m);
  Matrix centroids(m, 2);
  const int side = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(m))));
  for (int i = 0; i < m; ++i) {
    masses(i) = 1.0 + std::floor(8.0 * u(rng));
    centroids(i, 0) = (i % side) + 0.3 * u(rng);
    centroids(i, 1) = (i / side) + 0.3 * u(rng);
  }
  inst.marginals = otroute::make_marginals(masses, e);
  inst.graph = tokenizer::heat_kernel_weights(tokenizer::build_region_graph(centroids, k_nn), centroids);
  return inst;
}

}  // namespace

std::vector<BenchRow> cmd_bench(const RunConfig& config, std::ostream& table, std::ostream& echo) {
  const auto& b = config.bench;
  for (const auto* grid : {&b.m, &b.e, &b.t}) {
    if (grid->empty() || *std::min_element(grid->begin(), grid->end()) < 1) {
      throw UsageError("bench grids must be non-empty and positive");
    }
  }
  if (!config.paths.out.empty()) ensure_dir(config.paths.out);
  RunLog log(echo);
  if (!config.paths.out.empty()) {
    log.attach(config.paths.out / "run.log");
    write_resolved(config);
  }

  std::vector<BenchRow> rows;
  volatile double sink = 0.0;
  for (int m : b.m) {
    for (int e : b.e) {
      const auto inst = bench_instance(m, e, b.k_nn, config.train.seed);
      for (int t : b.t) {
        otroute::SinkhornOptions opts;
        opts.epsilon = b.epsilon;
        opts.iterations = t;
        otroute::GraphRegularisation reg{&inst.graph, b.lambda_s, std::min(b.n_smooth, t), {}};
        for (const std::string solver : {"sinkhorn", "graph_sinkhorn"}) {
          auto solve = [&] {
            const auto plan = solver == "sinkhorn" ? otroute::sinkhorn(inst.cost, inst.marginals, opts)
                                                   : otroute::graph_sinkhorn(inst.cost, inst.marginals, opts, reg);
            sink = sink + plan.plan(0, 0);
          };
          solve();  // warm-up
          double best = 1e300;
          for (int r = 0; r < b.repeats; ++r) {
            const auto t0 = std::chrono::steady_clock::now();
            solve();
            const auto t1 = std::chrono::steady_clock::now();
            best = std::min(best, std::chrono::duration<double, std::milli>(t1 - t0).count());
          }
          rows.push_back({solver, m, e, t, best});
        }
      }
    }
  }

  std::ostringstream csv;
  csv << "solver,M,E,T,ms_per_solve,ns_per_MET\n";
  for (const auto& r : rows) {
    csv << r.solver << "," << r.m << "," << r.e << "," << r.t << "," << fmt(r.ms_per_solve) << ","
        << fmt(1e6 * r.ms_per_solve / (static_cast<double>(r.m) * r.e * r.t)) << "\n";
  }
  table << csv.str();
  if (!config.paths.out.empty()) write_text(config.paths.out / "bench.csv", csv.str());

  // Time ratio for each doubling of T at fixed (solver, M, E).
  json checks = json::array();
  bool linear = true;
  for (const auto& a : rows) {
    for (const auto& c : rows) {
      if (c.solver == a.solver && c.m == a.m && c.e == a.e && c.t == 2 * a.t) {
        const double ratio = c.ms_per_solve / a.ms_per_solve;
        const bool ok = ratio >= 1.4 && ratio <= 2.6;
        linear = linear && ok;
        checks.push_back({{"solver", a.solver}, {"M", a.m}, {"E", a.e}, {"T", a.t}, {"ratio", ratio}, {"ok", ok}});
      }
    }
  }
  log.line(std::string("bench: T-doubling linearity ") + (linear ? "ok" : "outside +-30%") + " over " +
           std::to_string(checks.size()) + " pairs");
  if (!config.paths.out.empty()) {
    write_text(config.paths.out / "bench_linearity.json", json{{"pairs", checks}, {"all_ok", linear}}.dump(2) + "\n");
  }
  return rows;
}

bool cmd_check_grad(const RunConfig& config, std::ostream& table, std::ostream& echo) {
  RunLog log(echo);
  if (!config.paths.out.empty()) {
    ensure_dir(config.paths.out);
    log.attach(config.paths.out / "run.log");
    write_resolved(config);
  }
  std::vector<std::pair<std::string, nnmodel::Ablations>> variants(6);
  variants[0].first = "default";
  variants[1] = {"no_routing_gnn", {}};
  variants[1].second.no_routing_gnn = true;
  variants[2] = {"no_graph_reg", {}};
  variants[2].second.no_graph_reg = true;
  variants[3] = {"softmax_routing", {}};
  variants[3].second.softmax_routing = true;
  variants[4] = {"no_ot_modulation", {}};
  variants[4].second.no_ot_modulation = true;
  variants[5] = {"detach_routing", {}};
  variants[5].second.detach_routing = true;

  std::ostringstream csv;
  csv << "variant,tensor,coordinates,compared,skipped_kinks,max_rel_error\n";
  bool pass = true;
  for (const auto& [name, ablations] : variants) {
    const auto inst = traingrad::tiny_gradcheck_instance(config.gradcheck.seed, ablations);
    const auto report = traingrad::check_gradients(inst.bag, inst.params, inst.config);
    for (const auto& t : report.tensors) {
      csv << name << "," << t.name << "," << t.coordinates << "," << t.compared << "," << t.skipped_kinks << ","
          << fmt(t.max_rel_error) << "\n";
    }
    const bool ok = report.max_rel_error() <= config.gradcheck.threshold;
    pass = pass && ok;
    std::ostringstream s;
    s << "check-grad " << name << ": max rel error " << report.max_rel_error() << (ok ? " PASS" : " FAIL");
    log.line(s.str());
  }
  table << csv.str();
  if (!config.paths.out.empty()) write_text(config.paths.out / "gradcheck.csv", csv.str());
  return pass;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv;
  argv.push_back("roam");
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"roam: optimal-transport routed mixture-of-experts aggregation for patch bags"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  bool dry_run = false;
  app.add_option("--config", config_path, "JSON run configuration");
  app.add_option("--seed", seed, "seed for training, data generation and benchmarks");
  app.add_option("--out", out_dir, "output directory");
  app.add_flag("--dry-run", dry_run, "validate and print the resolved configuration only");

  std::string manifest, checkpoint, bag, split;
  int repeats = 0;
  auto* gen = app.add_subcommand("gen-synth", "generate a synthetic dataset");
  auto* train = app.add_subcommand("train", "train a model on a manifest");
  train->add_option("--manifest", manifest, "dataset manifest CSV");
  train->add_option("--repeats", repeats, "number of seeds to train (seed, seed+1, ...)");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a manifest split");
  eval->add_option("--manifest", manifest, "dataset manifest CSV");
  eval->add_option("--checkpoint", checkpoint, "model checkpoint");
  eval->add_option("--split", split, "train, val or test");
  auto* route = app.add_subcommand("route", "export the routing map of one slide");
  route->add_option("--checkpoint", checkpoint, "model checkpoint");
  route->add_option("--bag", bag, "bag file");
  auto* bench = app.add_subcommand("bench", "time the Sinkhorn solvers");
  auto* grad = app.add_subcommand("check-grad", "finite-difference gradient suite");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    RunConfig config;
    if (!config_path.empty()) config = load_run_config(config_path, config);
    if (seed) {
      config.train.seed = *seed;
      config.synth.seed = *seed;
      config.gradcheck.seed = *seed;
    }
    if (!out_dir.empty()) config.paths.out = out_dir;
    if (!manifest.empty()) config.paths.manifest = manifest;
    if (!checkpoint.empty()) config.paths.checkpoint = checkpoint;
    if (!bag.empty()) config.paths.bag = bag;
    if (!split.empty()) config.eval.split = split;
    if (repeats != 0) config.repeats = repeats;
    validate(config);

    if (dry_run) {
      out << to_json(config);
      return 0;
    }
    if (*gen) {
      cmd_gen_synth(config, out);
    } else if (*train) {
      cmd_train(config, out);
    } else if (*eval) {
      out << cmd_eval(config, err).to_json() << "\n";
    } else if (*route) {
      cmd_route(config, out);
    } else if (*bench) {
      cmd_bench(config, out, err);
    } else if (*grad) {
      return cmd_check_grad(config, out, err) ? 0 : 1;
    }
    return 0;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace roam::cli
