// Copyright (c) 2026, The OPLoRA C++ Authors
// SPDX-License-Identifier: Apache-2.0
//

#include <benchmark/benchmark.h>

#include <random>

#include "oplora/instrument.hpp"
#include "oplora/lorsum.hpp"
#include "oplora/lowrank.hpp"
#include "oplora/matcore.hpp"

namespace {

using oplora::FactorPair;
using oplora::Mat;

// Three rank-r terms on a d x d/2 layer, like one momentum OPLoRA step.
struct Problem {
    oplora::WeightedFactorSum terms;
    FactorPair anchor;
};

Problem make_problem(std::size_t d, std::size_t r) {
    std::mt19937_64 rng(d * 31 + r);
    Problem p;
    p.anchor = FactorPair(oplora::random_gaussian(d, r, rng), oplora::random_gaussian(d / 2, r, rng));
    p.terms.add(1.0, p.anchor);
    p.terms.add(-0.1, oplora::random_gaussian(d, r, rng), oplora::random_gaussian(d / 2, r, rng));
    p.terms.add(-0.05, oplora::random_gaussian(d, r, rng), oplora::random_gaussian(d / 2, r, rng));
    return p;
}

void BM_LorsumIterations(benchmark::State& state) {
    const Problem p = make_problem(512, 16);
    oplora::LorsumConfig cfg;
    cfg.num_iters = static_cast<int>(state.range(0));
    std::uint64_t flops = 0;
    for (auto _ : state) {
        oplora::instrument::Scope scope;
        benchmark::DoNotOptimize(oplora::lorsum(p.anchor, p.terms, cfg));
        flops = scope.delta().flops;
    }
    state.counters["flops"] = double(flops);
}
BENCHMARK(BM_LorsumIterations)->RangeMultiplier(2)->Range(1, 32);

void BM_LorsumDimension(benchmark::State& state) {
    const Problem p = make_problem(static_cast<std::size_t>(state.range(0)), 16);
    oplora::LorsumConfig cfg;
    cfg.num_iters = 2;
    for (auto _ : state) {
        benchmark::DoNotOptimize(oplora::lorsum(p.anchor, p.terms, cfg));
    }
    state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_LorsumDimension)->RangeMultiplier(2)->Range(128, 2048)->Complexity(benchmark::oN);

// The dense alternative: materialize the sum and take its truncated SVD.
void BM_MaterializeAndSvd(benchmark::State& state) {
    const Problem p = make_problem(static_cast<std::size_t>(state.range(0)), 16);
    for (auto _ : state) {
        benchmark::DoNotOptimize(oplora::truncated_svd(oplora::materialize(p.terms), 16));
    }
    state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_MaterializeAndSvd)->RangeMultiplier(2)->Range(128, 512)->Unit(benchmark::kMillisecond);

} // namespace
