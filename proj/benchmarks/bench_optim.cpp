// Copyright (c) 2026, The OPLoRA C++ Authors
// SPDX-License-Identifier: Apache-2.0
//

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "oplora/nets.hpp"
#include "oplora/optim.hpp"

namespace {

using oplora::FactorPair;
using oplora::LinearTask;
using oplora::LoraLinear;
using oplora::Mat;

constexpr std::size_t kRank = 8;

LinearTask make_task(std::size_t d_out, std::size_t d_in, std::mt19937_64& rng) {
    return LinearTask(oplora::make_target(d_out, d_in, oplora::TargetSpec{}, rng), 32);
}

void run_oplora(benchmark::State& state, double alpha, double beta) {
    std::mt19937_64 rng(1);
    const std::size_t d_out = static_cast<std::size_t>(state.range(0));
    const LinearTask task = make_task(d_out, d_out / 3, rng);
    LoraLinear layer(Mat(task.d_out(), task.d_in()),
                     oplora::init_linear_adapter(task, kRank, oplora::InitKind::random_svd, rng));
    oplora::OploraHyper h;
    h.eta = 0.01;
    h.alpha = alpha;
    h.beta = beta;
    h.delta = 1.0;
    h.num_iters = 2;
    oplora::OploraState st(h);
    for (auto _ : state) {
        const auto batch = oplora::sample_batch(task, rng);
        oplora::linear_task_forward_backward(task, layer, batch);
        benchmark::DoNotOptimize(oplora::oplora_step(layer, st));
    }
}

void BM_OploraStep(benchmark::State& state) { run_oplora(state, 0.0, 1.0); }
void BM_OploraMomentumStep(benchmark::State& state) { run_oplora(state, 0.75, 1.0); }
void BM_OploraScaledStep(benchmark::State& state) { run_oplora(state, 0.75, 0.95); }
BENCHMARK(BM_OploraStep)->Arg(150)->Arg(300)->Arg(600);
BENCHMARK(BM_OploraMomentumStep)->Arg(150)->Arg(300)->Arg(600);
BENCHMARK(BM_OploraScaledStep)->Arg(150)->Arg(300)->Arg(600);

void BM_PrecLoraStep(benchmark::State& state) {
    std::mt19937_64 rng(2);
    const std::size_t d_out = static_cast<std::size_t>(state.range(0));
    const LinearTask task = make_task(d_out, d_out / 3, rng);
    LoraLinear layer(Mat(task.d_out(), task.d_in()),
                     oplora::init_linear_adapter(task, kRank, oplora::InitKind::random_svd, rng));
    for (auto _ : state) {
        const auto batch = oplora::sample_batch(task, rng);
        oplora::linear_task_forward_backward(task, layer, batch);
        benchmark::DoNotOptimize(oplora::prec_lora_step(layer, 0.01, 1e-3));
    }
}
BENCHMARK(BM_PrecLoraStep)->Arg(150)->Arg(300)->Arg(600);

void BM_SvdLoraStep(benchmark::State& state) {
    std::mt19937_64 rng(3);
    const std::size_t d_out = static_cast<std::size_t>(state.range(0));
    const LinearTask task = make_task(d_out, d_out / 3, rng);
    oplora::SvdLoraState st(oplora::init_linear_adapter(task, kRank, oplora::InitKind::random_svd, rng));
    for (auto _ : state) {
        const auto batch = oplora::sample_batch(task, rng);
        const oplora::DenseGrad g = oplora::linear_task_dense_grad(task, st.dense_weight, batch);
        benchmark::DoNotOptimize(oplora::svdlora_step(st, g.grad, 0.01, 0.75, kRank));
    }
}
BENCHMARK(BM_SvdLoraStep)->Arg(150)->Arg(300)->Arg(600)->Unit(benchmark::kMillisecond);

} // namespace
