#include "roam/otroute.hpp"
#include "roam/tokenizer.hpp"

#include <benchmark/benchmark.h>

#include <cmath>
#include <random>

namespace {

using namespace roam;

struct Instance {
  Matrix cost;
  otroute::Marginals marginals;
  tokenizer::RegionGraph graph;
};

Instance make_instance(int m, int e) {
  std::mt19937_64 rng(static_cast<std::uint64_t>(m) * 131 + static_cast<std::uint64_t>(e));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Instance inst;
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
  inst.graph = tokenizer::heat_kernel_weights(tokenizer::build_region_graph(centroids, 8), centroids);
  return inst;
}

void set_counters(benchmark::State& state, int m, int e, int t) {
  state.counters["MET"] = static_cast<double>(m) * e * t;
  state.counters["ns_per_MET"] = benchmark::Counter(static_cast<double>(m) * e * t,
                                                    benchmark::Counter::kIsIterationInvariantRate |
                                                        benchmark::Counter::kInvert);
}

void BM_Sinkhorn(benchmark::State& state) {
  const int m = static_cast<int>(state.range(0));
  const int e = static_cast<int>(state.range(1));
  const int t = static_cast<int>(state.range(2));
  const auto inst = make_instance(m, e);
  otroute::SinkhornOptions opts;
  opts.iterations = t;
  for (auto _ : state) {
    auto plan = otroute::sinkhorn(inst.cost, inst.marginals, opts);
    benchmark::DoNotOptimize(plan.plan.data());
  }
  set_counters(state, m, e, t);
}

void BM_GraphSinkhorn(benchmark::State& state) {
  const int m = static_cast<int>(state.range(0));
  const int e = static_cast<int>(state.range(1));
  const int t = static_cast<int>(state.range(2));
  const auto inst = make_instance(m, e);
  otroute::SinkhornOptions opts;
  opts.iterations = t;
  otroute::GraphRegularisation reg{&inst.graph, 0.3, std::min(3, t), {}};
  for (auto _ : state) {
    auto plan = otroute::graph_sinkhorn(inst.cost, inst.marginals, opts, reg);
    benchmark::DoNotOptimize(plan.plan.data());
  }
  set_counters(state, m, e, t);
}

void grid(benchmark::internal::Benchmark* b) {
  b->ArgNames({"M", "E", "T"});
  b->ArgsProduct({{64, 128, 256, 512}, {4, 8}, {10, 20, 40}});
  b->Unit(benchmark::kMicrosecond);
}

}  // namespace

BENCHMARK(BM_Sinkhorn)->Apply(grid);
BENCHMARK(BM_GraphSinkhorn)->Apply(grid);

BENCHMARK_MAIN();
