#include "run_config.hpp"

#include <json.hpp>

#include <fstream>
#include <set>
#include <sstream>

namespace roam::cli {

using nlohmann::json;

namespace {

// Reads the keys of one section, failing on anything it does not know.
class Section {
 public:
  Section(const json& node, std::string name) : node_(node), name_(std::move(name)) {
    if (!node_.is_object()) throw UsageError("config section '" + name_ + "' must be an object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!node_.contains(key)) return;
    try {
      out = node_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw UsageError("config key '" + name_ + "." + key + "': " + e.what());
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    return node_.contains(key) ? &node_.at(key) : nullptr;
  }

  void finish() const {
    for (auto it = node_.begin(); it != node_.end(); ++it) {
      if (!seen_.count(it.key())) throw UsageError("unknown config key '" + name_ + "." + it.key() + "'");
    }
  }

 private:
  const json& node_;
  std::string name_;
  std::set<std::string> seen_;
};

void read_path(Section& s, const char* key, std::filesystem::path& out, const std::filesystem::path& base) {
  std::string text;
  s.read(key, text);
  if (text.empty()) return;
  const std::filesystem::path p(text);
  out = p.is_relative() && !base.empty() ? base / p : p;
}

void read_model(const json& node, nnmodel::RoamConfig& m) {
  Section s(node, "model");
  s.read("d_in", m.d_in);
  s.read("d", m.d);
  s.read("target_m", m.target_m);
  s.read("k_nn", m.k_nn);
  s.read("n_experts", m.n_experts);
  s.read("top_k", m.top_k);
  s.read("epsilon", m.epsilon);
  s.read("sinkhorn_iters", m.sinkhorn_iters);
  s.read("lambda_s", m.lambda_s);
  s.read("n_smooth", m.n_smooth);
  s.read("d_attn", m.d_attn);
  s.read("dropout", m.dropout);
  s.read("n_classes", m.n_classes);
  s.read("head_hidden", m.head_hidden);
  if (const json* ab = s.child("ablations")) {
    Section a(*ab, "model.ablations");
    a.read("no_routing_gnn", m.ablations.no_routing_gnn);
    a.read("no_graph_reg", m.ablations.no_graph_reg);
    a.read("softmax_routing", m.ablations.softmax_routing);
    a.read("no_ot_modulation", m.ablations.no_ot_modulation);
    a.read("detach_routing", m.ablations.detach_routing);
    a.finish();
  }
  s.finish();
}

void read_train(const json& node, RunConfig& rc) {
  auto& t = rc.train;
  Section s(node, "train");
  s.read("lr", t.lr);
  s.read("weight_decay", t.weight_decay);
  s.read("warmup_epochs", t.warmup_epochs);
  s.read("max_epochs", t.max_epochs);
  s.read("patience", t.patience);
  s.read("clip_norm", t.clip_norm);
  s.read("batch", t.batch);
  s.read("subsample_max", t.subsample_max);
  s.read("seed", t.seed);
  s.read("beta1", t.beta1);
  s.read("beta2", t.beta2);
  s.read("adam_eps", t.adam_eps);
  s.read("repeats", rc.repeats);
  s.finish();
}

void read_synth(const json& node, bagio::SynthSpec& spec) {
  Section s(node, "synth");
  s.read("n_slides_per_class", spec.n_slides_per_class);
  s.read("min_patches", spec.min_patches);
  s.read("max_patches", spec.max_patches);
  s.read("d_in", spec.d_in);
  s.read("n_archetypes", spec.n_archetypes);
  s.read("archetype_separation", spec.archetype_separation);
  s.read("noise_scale", spec.noise_scale);
  s.read("min_cells", spec.min_cells);
  s.read("max_cells", spec.max_cells);
  s.read("seed", spec.seed);
  if (const json* rules = s.child("class_rules")) {
    if (!rules->is_array()) throw UsageError("synth.class_rules must be an array");
    spec.class_rules.clear();
    for (const auto& r : *rules) {
      Section rs(r, "synth.class_rules[]");
      bagio::ClassRule rule;
      rs.read("allowed", rule.allowed);
      rs.read("required", rule.required);
      rs.finish();
      spec.class_rules.push_back(rule);
    }
  }
  s.finish();
}

void read_bench(const json& node, BenchOptions& b) {
  Section s(node, "bench");
  s.read("m", b.m);
  s.read("e", b.e);
  s.read("t", b.t);
  s.read("repeats", b.repeats);
  s.read("epsilon", b.epsilon);
  s.read("lambda_s", b.lambda_s);
  s.read("n_smooth", b.n_smooth);
  s.read("k_nn", b.k_nn);
  s.finish();
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text, RunConfig base, const std::filesystem::path& base_dir) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::exception& e) {
    throw UsageError(std::string("config is not valid JSON: ") + e.what());
  }
  Section root(doc, "<root>");
  if (const json* m = root.child("model")) read_model(*m, base.model);
  if (const json* t = root.child("train")) read_train(*t, base);
  if (const json* s = root.child("synth")) read_synth(*s, base.synth);
  if (const json* p = root.child("paths")) {
    Section s(*p, "paths");
    read_path(s, "manifest", base.paths.manifest, base_dir);
    read_path(s, "out", base.paths.out, base_dir);
    read_path(s, "checkpoint", base.paths.checkpoint, base_dir);
    read_path(s, "bag", base.paths.bag, base_dir);
    s.finish();
  }
  if (const json* e = root.child("eval")) {
    Section s(*e, "eval");
    s.read("split", base.eval.split);
    s.finish();
  }
  if (const json* b = root.child("bench")) read_bench(*b, base.bench);
  if (const json* g = root.child("gradcheck")) {
    Section s(*g, "gradcheck");
    s.read("seed", base.gradcheck.seed);
    s.read("threshold", base.gradcheck.threshold);
    s.finish();
  }
  root.finish();
  return base;
}

RunConfig load_run_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), std::move(base), path.parent_path());
}

std::string to_json(const RunConfig& c) {
  const auto& m = c.model;
  const auto& t = c.train;
  json rules = json::array();
  for (const auto& r : c.synth.class_rules) rules.push_back({{"allowed", r.allowed}, {"required", r.required}});
  json doc = {
      {"model",
       {{"d_in", m.d_in},
        {"d", m.d},
        {"target_m", m.target_m},
        {"k_nn", m.k_nn},
        {"n_experts", m.n_experts},
        {"top_k", m.top_k},
        {"epsilon", m.epsilon},
        {"sinkhorn_iters", m.sinkhorn_iters},
        {"lambda_s", m.lambda_s},
        {"n_smooth", m.n_smooth},
        {"d_attn", m.d_attn},
        {"dropout", m.dropout},
        {"n_classes", m.n_classes},
        {"head_hidden", m.head_hidden},
        {"ablations",
         {{"no_routing_gnn", m.ablations.no_routing_gnn},
          {"no_graph_reg", m.ablations.no_graph_reg},
          {"softmax_routing", m.ablations.softmax_routing},
          {"no_ot_modulation", m.ablations.no_ot_modulation},
          {"detach_routing", m.ablations.detach_routing}}}}},
      {"train",
       {{"lr", t.lr},
        {"weight_decay", t.weight_decay},
        {"warmup_epochs", t.warmup_epochs},
        {"max_epochs", t.max_epochs},
        {"patience", t.patience},
        {"clip_norm", t.clip_norm},
        {"batch", t.batch},
        {"subsample_max", t.subsample_max},
        {"seed", t.seed},
        {"beta1", t.beta1},
        {"beta2", t.beta2},
        {"adam_eps", t.adam_eps},
        {"repeats", c.repeats}}},
      {"synth",
       {{"n_slides_per_class", c.synth.n_slides_per_class},
        {"min_patches", c.synth.min_patches},
        {"max_patches", c.synth.max_patches},
        {"d_in", c.synth.d_in},
        {"n_archetypes", c.synth.n_archetypes},
        {"archetype_separation", c.synth.archetype_separation},
        {"noise_scale", c.synth.noise_scale},
        {"min_cells", c.synth.min_cells},
        {"max_cells", c.synth.max_cells},
        {"seed", c.synth.seed},
        {"class_rules", rules}}},
      {"paths",
       {{"manifest", c.paths.manifest.generic_string()},
        {"out", c.paths.out.generic_string()},
        {"checkpoint", c.paths.checkpoint.generic_string()},
        {"bag", c.paths.bag.generic_string()}}},
      {"eval", {{"split", c.eval.split}}},
      {"bench",
       {{"m", c.bench.m},
        {"e", c.bench.e},
        {"t", c.bench.t},
        {"repeats", c.bench.repeats},
        {"epsilon", c.bench.epsilon},
        {"lambda_s", c.bench.lambda_s},
        {"n_smooth", c.bench.n_smooth},
        {"k_nn", c.bench.k_nn}}},
      {"gradcheck", {{"seed", c.gradcheck.seed}, {"threshold", c.gradcheck.threshold}}},
  };
  return doc.dump(2) + "\n";
}

void validate(const RunConfig& c) {
  try {
    nnmodel::RoamConfig m = c.model;
    if (m.d_in == 0) m.d_in = 1;  // resolved from data later
    nnmodel::validate(m);
    traingrad::validate(c.train);
  } catch (const InvalidArgument& e) {
    throw UsageError(e.what());
  }
  if (c.repeats < 1) throw UsageError("train.repeats must be >= 1");
  if (c.bench.repeats < 1) throw UsageError("bench.repeats must be >= 1");
  if (!(c.gradcheck.threshold > 0.0)) throw UsageError("gradcheck.threshold must be positive");
}

}  // namespace roam::cli
