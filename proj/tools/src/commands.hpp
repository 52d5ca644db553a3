#pragma once

#include "run_config.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace roam::cli {

struct GenSynthOutput {
  std::filesystem::path manifest;
  int n_train = 0;
  int n_val = 0;
  int n_test = 0;
};

// 70/15/15 stratified by class: val and test sizes are floored, train takes
// the remainder. Returns the split for each of `labels`.
std::vector<bagio::Split> stratified_split(const std::vector<int>& labels, std::uint64_t seed);

GenSynthOutput cmd_gen_synth(const RunConfig& config, std::ostream& log);
void cmd_train(const RunConfig& config, std::ostream& log);
traingrad::MetricsReport cmd_eval(const RunConfig& config, std::ostream& log);
void cmd_route(const RunConfig& config, std::ostream& log);

struct BenchRow {
  std::string solver;
  int m = 0;
  int e = 0;
  int t = 0;
  double ms_per_solve = 0.0;
};

std::vector<BenchRow> cmd_bench(const RunConfig& config, std::ostream& table, std::ostream& log);

// Returns true when every variant passes the threshold.
bool cmd_check_grad(const RunConfig& config, std::ostream& table, std::ostream& log);

// Parses argv, runs the subcommand and maps failures to exit codes:
// 0 success, 1 runtime failure, 2 usage or config error.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace roam::cli
