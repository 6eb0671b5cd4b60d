// Microbenchmarks comparing the OpenMP kernels against the serial reference
// implementations they must agree with bit-for-bit. Run with
//   bench_kernels [--benchmark_filter=...]
// Threads for the parallel variants follow OMP_NUM_THREADS.
#include <benchmark/benchmark.h>

#include "icsteer/kernels.hpp"
#include "icsteer/matrix.hpp"
#include "icsteer/rng.hpp"

using icsteer::Matrix;
using icsteer::Rng;
namespace num = icsteer::num;

namespace {

Matrix randm(int r, int c, unsigned long long seed) {
    Rng rng(seed);
    Matrix m(r, c);
    for (auto& x : m.data) x = rng.normal();
    return m;
}

void bm_matmul_parallel(benchmark::State& state) {
    const int n = int(state.range(0));
    Matrix A = randm(n, n, 1), B = randm(n, n, 2), C(n, n);
    for (auto _ : state) {
        num::matmul(A, B, C);
        benchmark::DoNotOptimize(C.data.data());
    }
    state.SetItemsProcessed(state.iterations() * 2LL * n * n * n);
}

void bm_matmul_serial(benchmark::State& state) {
    const int n = int(state.range(0));
    Matrix A = randm(n, n, 1), B = randm(n, n, 2), C(n, n);
    for (auto _ : state) {
        num::serial::matmul(A, B, C);
        benchmark::DoNotOptimize(C.data.data());
    }
    state.SetItemsProcessed(state.iterations() * 2LL * n * n * n);
}

void bm_layernorm_parallel(benchmark::State& state) {
    const int n = int(state.range(0));
    Matrix X = randm(n, 64, 3), Y(n, 64);
    Matrix G = randm(1, 64, 4), B = randm(1, 64, 5);
    std::vector<double> mean(static_cast<size_t>(n)), rstd(static_cast<size_t>(n));
    for (auto _ : state) {
        num::layernorm(X, G, B, 1e-5, Y, mean, rstd);
        benchmark::DoNotOptimize(Y.data.data());
    }
    state.SetItemsProcessed(state.iterations() * int64_t(n) * 64);
}

void bm_layernorm_serial(benchmark::State& state) {
    const int n = int(state.range(0));
    Matrix X = randm(n, 64, 3), Y(n, 64);
    Matrix G = randm(1, 64, 4), B = randm(1, 64, 5);
    std::vector<double> mean(static_cast<size_t>(n)), rstd(static_cast<size_t>(n));
    for (auto _ : state) {
        num::serial::layernorm(X, G, B, 1e-5, Y, mean, rstd);
        benchmark::DoNotOptimize(Y.data.data());
    }
    state.SetItemsProcessed(state.iterations() * int64_t(n) * 64);
}

void bm_causal_softmax_parallel(benchmark::State& state) {
    const int n = int(state.range(0));
    const Matrix S = randm(n, n, 6);
    Matrix P(n, n);
    for (auto _ : state) {
        P = S; // the kernel normalizes in place
        num::causal_softmax(P);
        benchmark::DoNotOptimize(P.data.data());
    }
    state.SetItemsProcessed(state.iterations() * int64_t(n) * n / 2);
}

void bm_causal_softmax_serial(benchmark::State& state) {
    const int n = int(state.range(0));
    const Matrix S = randm(n, n, 6);
    Matrix P(n, n);
    for (auto _ : state) {
        P = S;
        num::serial::causal_softmax(P);
        benchmark::DoNotOptimize(P.data.data());
    }
    state.SetItemsProcessed(state.iterations() * int64_t(n) * n / 2);
}

void bm_gelu_parallel(benchmark::State& state) {
    const int n = int(state.range(0));
    Matrix X = randm(n, 256, 7), Y(n, 256);
    for (auto _ : state) {
        num::gelu(X, Y);
        benchmark::DoNotOptimize(Y.data.data());
    }
    state.SetItemsProcessed(state.iterations() * int64_t(n) * 256);
}

void bm_gelu_serial(benchmark::State& state) {
    const int n = int(state.range(0));
    Matrix X = randm(n, 256, 7), Y(n, 256);
    for (auto _ : state) {
        num::serial::gelu(X, Y);
        benchmark::DoNotOptimize(Y.data.data());
    }
    state.SetItemsProcessed(state.iterations() * int64_t(n) * 256);
}

BENCHMARK(bm_matmul_parallel)->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(bm_matmul_serial)->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(bm_layernorm_parallel)->Arg(64)->Arg(512);
BENCHMARK(bm_layernorm_serial)->Arg(64)->Arg(512);
BENCHMARK(bm_causal_softmax_parallel)->Arg(64)->Arg(256);
BENCHMARK(bm_causal_softmax_serial)->Arg(64)->Arg(256);
BENCHMARK(bm_gelu_parallel)->Arg(64)->Arg(512);
BENCHMARK(bm_gelu_serial)->Arg(64)->Arg(512);

} // namespace

BENCHMARK_MAIN();
