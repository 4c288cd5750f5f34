// Parallel kernels against their serial references. Both produce identical
// bits; only wall time differs.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "xrag/kernels.hpp"

namespace k = xrag::kernels;

namespace {

std::vector<double> random_values(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

template <bool Parallel>
void BM_gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const k::GemmShape s{1, n, n, n};
  const auto a = random_values(n * n, 1), b = random_values(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    if constexpr (Parallel) k::gemm(a, b, c, s);
    else k::serial::gemm(a, b, c, s);
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["threads"] = Parallel ? k::max_threads() : 1;
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * n * n));
}

template <bool Parallel>
void BM_gemm_bt(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const k::GemmShape s{8, n, 64, n};
  const auto a = random_values(8 * n * 64, 3), b = random_values(8 * n * 64, 4);
  std::vector<double> c(8 * n * n);
  for (auto _ : state) {
    if constexpr (Parallel) k::gemm_bt(a, b, c, s);
    else k::serial::gemm_bt(a, b, c, s);
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["threads"] = Parallel ? k::max_threads() : 1;
}

// Knowledge-base scans: `range(0)` entries of 64 values each.
template <bool Parallel, int Metric>
void BM_scan(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  constexpr std::size_t dim = 64;
  const auto kb = random_values(rows * dim, 5), q = random_values(dim, 6);
  std::vector<double> out(rows);
  for (auto _ : state) {
    if constexpr (Metric == 0) Parallel ? k::cosine_scan(q, kb, dim, out) : k::serial::cosine_scan(q, kb, dim, out);
    if constexpr (Metric == 1) Parallel ? k::neg_l2_scan(q, kb, dim, out) : k::serial::neg_l2_scan(q, kb, dim, out);
    if constexpr (Metric == 2) Parallel ? k::pearson_scan(q, kb, dim, out) : k::serial::pearson_scan(q, kb, dim, out);
    benchmark::DoNotOptimize(out.data());
  }
  state.counters["threads"] = Parallel ? k::max_threads() : 1;
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * rows));
}

}  // namespace

BENCHMARK(BM_gemm<false>)->Name("gemm/serial")->Arg(64)->Arg(256)->Arg(512);
BENCHMARK(BM_gemm<true>)->Name("gemm/parallel")->Arg(64)->Arg(256)->Arg(512);
BENCHMARK(BM_gemm_bt<false>)->Name("gemm_bt/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_gemm_bt<true>)->Name("gemm_bt/parallel")->Arg(64)->Arg(256);
BENCHMARK(BM_scan<false, 0>)->Name("cosine_scan/serial")->Arg(10000)->Arg(100000);
BENCHMARK(BM_scan<true, 0>)->Name("cosine_scan/parallel")->Arg(10000)->Arg(100000);
BENCHMARK(BM_scan<false, 1>)->Name("neg_l2_scan/serial")->Arg(10000)->Arg(100000);
BENCHMARK(BM_scan<true, 1>)->Name("neg_l2_scan/parallel")->Arg(10000)->Arg(100000);
BENCHMARK(BM_scan<false, 2>)->Name("pearson_scan/serial")->Arg(10000)->Arg(100000);
BENCHMARK(BM_scan<true, 2>)->Name("pearson_scan/parallel")->Arg(10000)->Arg(100000);

BENCHMARK_MAIN();
