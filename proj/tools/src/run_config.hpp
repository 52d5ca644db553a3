#pragma once

// Resolved run configuration: model, training, synthetic data and per-command
// settings. Read from a JSON document; unknown keys are rejected.

#include "roam/bagio.hpp"
#include "roam/nnmodel.hpp"
#include "roam/traingrad.hpp"
#include "roam/types.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace roam::cli {

// Bad flags, bad config values or missing inputs. Maps to exit code 2.
class UsageError : public Error {
 public:
  using Error::Error;
};

struct Paths {
  std::filesystem::path manifest;
  std::filesystem::path out = "roam_out";
  std::filesystem::path checkpoint;
  std::filesystem::path bag;
};

struct EvalOptions {
  std::string split = "test";
};

struct BenchOptions {
  std::vector<int> m{64, 128, 256};
  std::vector<int> e{4, 8};
  std::vector<int> t{10, 20, 40};
  int repeats = 5;
  double epsilon = 0.1;
  double lambda_s = 0.3;
  int n_smooth = 3;
  int k_nn = 8;
};

struct GradCheckSettings {
  std::uint64_t seed = 3;
  double threshold = 1e-4;
};

struct RunConfig {
  nnmodel::RoamConfig model;
  traingrad::TrainConfig train;
  int repeats = 1;  // training runs with seeds seed, seed+1, ...
  bagio::SynthSpec synth = bagio::default_synth_spec();
  Paths paths;
  EvalOptions eval;
  BenchOptions bench;
  GradCheckSettings gradcheck;
};

// Overlays the keys of a JSON document onto `base`. Relative paths are
// resolved against `base_dir`.
RunConfig parse_run_config(const std::string& json_text, RunConfig base = {},
                           const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {});

std::string to_json(const RunConfig& config);

void validate(const RunConfig& config);

}  // namespace roam::cli
