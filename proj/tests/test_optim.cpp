// Copyright (c) 2026, The OPLoRA C++ Authors
// SPDX-License-Identifier: Apache-2.0
//

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "oplora/bench.hpp"
#include "oplora/errors.hpp"
#include "oplora/instrument.hpp"
#include "oplora/optim.hpp"
#include "test_util.hpp"

namespace oplora {
namespace {

using testing::dense_product;
using testing::fro;
using testing::gaussian;
using testing::gj_inverse;
using testing::naive_matmul;
using testing::naive_transpose;
using testing::plus_diag;
using testing::rel_diff;

struct Instance {
    LoraLinear layer;
    Mat s;
    Mat x;
    Mat g;
};

// Layer with random factors and a fresh capture; g = S^T X is the dense oracle.
Instance make_instance(std::size_t d_out, std::size_t d_in, std::size_t r, std::size_t b, std::mt19937_64& rng,
                       double grad_scale = 1.0) {
    LoraLinear layer(Mat(d_out, d_in), FactorPair(gaussian(d_out, r, rng), gaussian(d_in, r, rng)));
    Mat x = gaussian(b, d_in, rng);
    Mat s = gaussian(b, d_out, rng, grad_scale);
    layer.forward(x);
    layer.backward(s);
    Mat g = naive_matmul(naive_transpose(s), x);
    return {std::move(layer), std::move(s), std::move(x), std::move(g)};
}

void recapture(Instance& inst) {
    inst.layer.forward(inst.x);
    inst.layer.backward(inst.s);
}

// U - eta G V (V^T V + lam)^{-1}, V - eta G^T U (U^T U + lam)^{-1}.
FactorPair dense_prec_step(const FactorPair& p, const Mat& g, double eta, double lam) {
    const Mat u = p.u - eta * naive_matmul(naive_matmul(g, p.v), gj_inverse(plus_diag(gram(p.v), lam)));
    const Mat v =
        p.v - eta * naive_matmul(naive_matmul(naive_transpose(g), p.u), gj_inverse(plus_diag(gram(p.u), lam)));
    return FactorPair(u, v);
}

OploraHyper recovery_hyper(double lam) {
    OploraHyper h;
    h.eta = 0.05;
    h.alpha = 0.0;
    h.beta = 1.0;
    h.lambda = lam / h.eta;
    h.num_iters = 1;
    h.mode = LorsumMode::simultaneous;
    return h;
}

TEST(OploraStep, SimultaneousOneStepEqualsPrecLora) {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 10; ++trial) {
        Instance a = make_instance(14, 10, 3, 6, rng);
        LoraLinear b = a.layer;
        OploraState st(recovery_hyper(1e-12));
        const FactorPair op = oplora_step(a.layer, st);
        const FactorPair pl = prec_lora_step(b, 0.05, 1e-12);
        EXPECT_LT(max_abs_diff(op.u, pl.u), 1e-6);
        EXPECT_LT(max_abs_diff(op.v, pl.v), 1e-6);
    }
}

TEST(OploraStep, RecoveryErrorIsLinearInLambda) {
    std::mt19937_64 rng(2);
    Instance base = make_instance(16, 12, 3, 5, rng);
    const FactorPair exact = dense_prec_step(base.layer.adapter(), base.g, 0.05, 0.0);
    std::vector<double> err;
    for (double lam : {1e-6, 1e-9, 1e-12}) {
        Instance inst = base;
        recapture(inst);
        OploraState st(recovery_hyper(lam));
        const FactorPair out = oplora_step(inst.layer, st);
        err.push_back(std::hypot(frobenius_distance(out.u, exact.u), frobenius_distance(out.v, exact.v)));
    }
    const double c = err[0] / 1e-6;
    EXPECT_GT(c, 0.0);
    EXPECT_LE(err[1], 2.0 * c * 1e-9 + 1e-12);
    EXPECT_LE(err[2], 2.0 * c * 1e-12 + 1e-12);
}

TEST(OploraStep, ZeroGradientIsFixedPoint) {
    std::mt19937_64 rng(3);
    Instance inst = make_instance(12, 8, 3, 4, rng, 0.0);
    const Mat before = dense_product(inst.layer.adapter());
    OploraHyper h;
    h.eta = 0.3;
    h.num_iters = 2;
    OploraState st(h);
    oplora_step(inst.layer, st);
    EXPECT_LT(rel_diff(dense_product(inst.layer.adapter()), before), 1e-9);
}

TEST(OploraStep, MomentumZeroInitGivesBitIdenticalFirstStep) {
    std::mt19937_64 rng(4);
    Instance a = make_instance(15, 9, 3, 5, rng);
    Instance b = a;
    recapture(b);
    OploraHyper h;
    h.eta = 0.1;
    h.num_iters = 2;
    OploraState plain(h);
    h.alpha = 0.75;
    OploraState heavy(h);
    const FactorPair p = oplora_step(a.layer, plain);
    const FactorPair q = oplora_step(b.layer, heavy);
    ASSERT_EQ(p.u.size(), q.u.size());
    for (std::size_t i = 0; i < p.u.size(); ++i) {
        EXPECT_EQ(p.u.data()[i], q.u.data()[i]);
    }
    for (std::size_t i = 0; i < p.v.size(); ++i) {
        EXPECT_EQ(p.v.data()[i], q.v.data()[i]);
    }
    EXPECT_TRUE(heavy.momentum.has_value());
    EXPECT_FALSE(plain.momentum.has_value());
}

TEST(OploraStep, StaleCaptureIsRejected) {
    std::mt19937_64 rng(5);
    Instance inst = make_instance(8, 6, 2, 3, rng);
    OploraState st(OploraHyper{});
    oplora_step(inst.layer, st);
    EXPECT_THROW(oplora_step(inst.layer, st), StaleCaptureError);
    inst.layer.forward(inst.x);
    EXPECT_THROW(oplora_step(inst.layer, st), StaleCaptureError);
    EXPECT_EQ(st.steps, 1u);
}

TEST(OploraStep, FailureLeavesStateUntouched) {
    std::mt19937_64 rng(6);
    Instance inst = make_instance(10, 7, 3, 4, rng);
    OploraHyper h;
    h.alpha = 0.5;
    h.lambda = 0.0;
    OploraState st(h);
    oplora_step(inst.layer, st);
    const OploraState saved = st;

    // A zero adapter with no proximal term makes the first half-step singular.
    inst.layer.set_adapter(FactorPair::zeros(10, 7, 3));
    recapture(inst);
    EXPECT_THROW(oplora_step(inst.layer, st), SingularMetricError);
    EXPECT_EQ(st.steps, saved.steps);
    ASSERT_TRUE(st.momentum.has_value());
    EXPECT_EQ(max_abs_diff(st.momentum->u, saved.momentum->u), 0.0);
    EXPECT_EQ(max_abs_diff(st.momentum->v, saved.momentum->v), 0.0);
    EXPECT_EQ(inst.layer.adapter().u.max_abs(), 0.0);
    EXPECT_TRUE(inst.layer.has_capture());
}

TEST(OploraStep, HyperValidation) {
    OploraHyper h;
    h.eta = 0.0;
    EXPECT_THROW(h.validate(), ConfigError);
    h = OploraHyper{};
    h.alpha = 1.0;
    EXPECT_THROW(h.validate(), ConfigError);
    h = OploraHyper{};
    h.beta = 0.9;
    h.delta = 0.0;
    EXPECT_THROW(h.validate(), ConfigError);
    h = OploraHyper{};
    h.num_iters = 0;
    EXPECT_THROW(OploraState{h}, ConfigError);
}

TEST(OploraStep, StateWithinMemoryBudgetAndNoDenseAllocations) {
    std::mt19937_64 rng(7);
    const std::size_t d_out = 60, d_in = 24, r = 4;
    for (double beta : {1.0, 0.95}) {
        Instance inst = make_instance(d_out, d_in, r, 8, rng);
        OploraHyper h;
        h.alpha = 0.75;
        h.beta = beta;
        h.num_iters = 2;
        OploraState st(h);
        instrument::watch_shape(d_out, d_in, true);
        std::uint64_t watched = 0;
        for (int step = 0; step < 20; ++step) {
            inst.x = gaussian(8, d_in, rng);
            inst.s = gaussian(8, d_out, rng, 0.1);
            recapture(inst);
            instrument::Scope scope;
            oplora_step(inst.layer, st);
            watched += scope.delta().watched_allocations;
        }
        instrument::watch_shape(0, 0);
        EXPECT_EQ(watched, 0u);
        const std::size_t params = inst.layer.adapter().parameter_count();
        EXPECT_LE(st.scalar_count(), (beta < 1.0 ? 4 : 2) * params);
        EXPECT_EQ(st.metric_u.has_value(), beta < 1.0);
    }
}

TEST(PrecLora, Examples) {
    std::mt19937_64 rng(8);
    const FactorPair p(gaussian(9, 2, rng), gaussian(7, 2, rng));
    const FactorPair zero = FactorPair::zeros(9, 7, 2);
    const FactorPair same = prec_lora_update(p, zero, 0.1, 0.0);
    EXPECT_EQ(max_abs_diff(same.u, p.u), 0.0);
    EXPECT_EQ(max_abs_diff(same.v, p.v), 0.0);

    // Orthonormal factors: the preconditioner is the identity.
    const FactorPair q(testing::orthonormal_columns(9, 2, rng), testing::orthonormal_columns(7, 2, rng));
    const Mat g = gaussian(9, 7, rng);
    const FactorPair grads(naive_matmul(g, q.v), naive_matmul(naive_transpose(g), q.u));
    const FactorPair out = prec_lora_update(q, grads, 0.2, 0.0);
    EXPECT_LT(max_abs_diff(out.u, q.u - 0.2 * grads.u), 1e-10);
    EXPECT_LT(max_abs_diff(out.v, q.v - 0.2 * grads.v), 1e-10);

    EXPECT_THROW(prec_lora_update(FactorPair(Mat(9, 2), p.v), grads, 0.1, 0.0), SingularMetricError);
    EXPECT_THROW(prec_lora_update(p, FactorPair::zeros(9, 7, 3), 0.1, 0.0), ShapeError);
}

TEST(PrecLora, StepMatchesDenseOracle) {
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 10; ++trial) {
        Instance inst = make_instance(13, 8, 3, 4, rng);
        const FactorPair expect = dense_prec_step(inst.layer.adapter(), inst.g, 0.07, 1e-3);
        const FactorPair got = prec_lora_step(inst.layer, 0.07, 1e-3);
        EXPECT_LT(rel_diff(got.u, expect.u), 1e-10);
        EXPECT_LT(rel_diff(got.v, expect.v), 1e-10);
        EXPECT_FALSE(inst.layer.has_capture());
    }
}

FactorTerm dense_term(const Mat& a, const Mat& b) {
    FactorTerm t;
    t.left = a;
    t.right = b;
    return t;
}

TEST(MomentumLor, GeometricSeriesOracle) {
    std::mt19937_64 rng(10);
    const std::size_t d_out = 20, d_in = 12, r = 4;
    const Mat ga = gaussian(d_out, r, rng);
    const Mat gb = gaussian(d_in, r, rng);
    const Mat g = dense_product(ga, gb);
    FactorPair m(Mat(d_out, r), gaussian(d_in, r, rng, 1.0 / std::sqrt(double(d_in))));
    LorsumConfig cfg;
    cfg.num_iters = 2;
    cfg.relative_lambda = 1e-10;
    double partial = 0.0;
    for (int t = 0; t < 20; ++t) {
        partial = 0.5 * partial + 1.0;
        m = momentum_update_lor(m, dense_term(ga, gb), 0.5, cfg);
        EXPECT_LT(rel_diff(dense_product(m), partial * g), 1e-6) << "step " << t;
    }
}

TEST(MomentumLor, NoHistoryAndZeroGradient) {
    std::mt19937_64 rng(11);
    const Mat g = testing::with_spectrum(15, 10, {5, 4, 3, 1, 0.5, 0.25}, rng);
    const Mat ga = g;
    const Mat gb = Mat::identity(10);
    LorsumConfig cfg;
    cfg.num_iters = 30;
    cfg.relative_lambda = 1e-10;
    const FactorPair m0(Mat(15, 3), gaussian(10, 3, rng));
    const FactorPair m1 = momentum_update_lor(m0, dense_term(ga, gb), 0.0, cfg);
    EXPECT_LT(rel_diff(dense_product(m1), testing::best_rank_r(g, 3)), 1e-6);

    FactorPair z = m0;
    for (int t = 0; t < 3; ++t) {
        z = momentum_update_lor(z, dense_term(Mat(15, 2), Mat(10, 2)), 0.7, cfg);
        EXPECT_EQ(dense_product(z).max_abs(), 0.0);
    }
}

TEST(MomentumProj, FirstStepIsPreconditionedGradient) {
    std::mt19937_64 rng(12);
    const FactorPair p(gaussian(9, 3, rng), gaussian(6, 3, rng));
    const FactorPair g(gaussian(9, 3, rng), gaussian(6, 3, rng));
    FactorMomentumState st;
    st.alpha = 0.9;
    const FactorPair m = momentum_update_proj(st, p, g, 0.0);
    EXPECT_LT(rel_diff(m.u, naive_matmul(g.u, gj_inverse(gram(p.v)))), 1e-10);
    EXPECT_LT(rel_diff(m.v, naive_matmul(g.v, gj_inverse(gram(p.u)))), 1e-10);
    EXPECT_EQ(st.scalar_count(), 2 * p.parameter_count());
}

TEST(MomentumProj, OrthonormalFixedFactorsAccumulateNaively) {
    std::mt19937_64 rng(13);
    const FactorPair p(testing::orthonormal_columns(9, 3, rng), testing::orthonormal_columns(6, 3, rng));
    FactorMomentumState proj;
    FactorMomentumState naive;
    proj.alpha = naive.alpha = 0.6;
    for (int t = 0; t < 4; ++t) {
        const FactorPair g(gaussian(9, 3, rng), gaussian(6, 3, rng));
        const FactorPair a = momentum_update_proj(proj, p, g, 0.0);
        const FactorPair b = momentum_update_naive(naive, p, g, 0.0);
        EXPECT_LT(max_abs_diff(a.u, b.u), 1e-10);
        EXPECT_LT(max_abs_diff(a.v, b.v), 1e-10);
    }
}

TEST(MomentumProj, TwoStepTraceMatchesDenseRecursion) {
    std::mt19937_64 rng(14);
    const double alpha = 0.8, lam = 1e-3;
    const FactorPair p0(gaussian(10, 2, rng), gaussian(7, 2, rng));
    const FactorPair p1(gaussian(10, 2, rng), gaussian(7, 2, rng));
    const FactorPair g0(gaussian(10, 2, rng), gaussian(7, 2, rng));
    const FactorPair g1(gaussian(10, 2, rng), gaussian(7, 2, rng));
    FactorMomentumState st;
    st.alpha = alpha;
    momentum_update_proj(st, p0, g0, lam);
    const FactorPair m1 = momentum_update_proj(st, p1, g1, lam);

    const Mat mu0 = naive_matmul(g0.u, gj_inverse(plus_diag(gram(p0.v), lam)));
    const Mat mv0 = naive_matmul(g0.v, gj_inverse(plus_diag(gram(p0.u), lam)));
    const Mat mu1 = naive_matmul(g1.u + alpha * naive_matmul(mu0, naive_matmul(naive_transpose(p0.v), p1.v)),
                                 gj_inverse(plus_diag(gram(p1.v), lam)));
    const Mat mv1 = naive_matmul(g1.v + alpha * naive_matmul(mv0, naive_matmul(naive_transpose(p0.u), p1.u)),
                                 gj_inverse(plus_diag(gram(p1.u), lam)));
    EXPECT_LT(rel_diff(m1.u, mu1), 1e-10);
    EXPECT_LT(rel_diff(m1.v, mv1), 1e-10);
}

TEST(MomentumNaive, ClosedForms) {
    std::mt19937_64 rng(15);
    const FactorPair p(gaussian(8, 2, rng), gaussian(5, 2, rng));
    const FactorPair g(gaussian(8, 2, rng), gaussian(5, 2, rng));
    const Mat pu = naive_matmul(g.u, gj_inverse(gram(p.v)));
    const Mat pv = naive_matmul(g.v, gj_inverse(gram(p.u)));

    FactorMomentumState none;
    momentum_update_naive(none, p, g, 0.0);
    const FactorPair once = momentum_update_naive(none, p, g, 0.0);
    EXPECT_LT(rel_diff(once.u, pu), 1e-10);

    FactorMomentumState st;
    st.alpha = 0.4;
    momentum_update_naive(st, p, g, 0.0);
    const FactorPair twice = momentum_update_naive(st, p, g, 0.0);
    EXPECT_LT(rel_diff(twice.u, 1.4 * pu), 1e-10);
    EXPECT_LT(rel_diff(twice.v, 1.4 * pv), 1e-10);
}

TEST(Sgd, HeavyBallMatchesScalarRecursion) {
    std::mt19937_64 rng(16);
    FactorPair p(gaussian(4, 2, rng), gaussian(3, 2, rng));
    const FactorPair start = p;
    SgdState st;
    std::vector<FactorPair> grads;
    for (int t = 0; t < 5; ++t) {
        grads.emplace_back(gaussian(4, 2, rng), gaussian(3, 2, rng));
        p = sgd_step(p, grads.back(), 0.1, 0.9, st);
    }
    for (std::size_t i = 0; i < p.u.size(); ++i) {
        double w = start.u.data()[i], buf = 0.0;
        for (const auto& g : grads) {
            buf = 0.9 * buf + g.u.data()[i];
            w -= 0.1 * buf;
        }
        EXPECT_NEAR(p.u.data()[i], w, 1e-14);
    }
    SgdState fresh;
    const FactorPair same = sgd_step(start, FactorPair::zeros(4, 3, 2), 0.5, 0.9, fresh);
    EXPECT_EQ(max_abs_diff(same.u, start.u), 0.0);
}

TEST(AdamW, FirstStepAndScalarTrace) {
    std::mt19937_64 rng(17);
    const FactorPair p(gaussian(5, 2, rng), gaussian(4, 2, rng));
    AdamHyper h;
    h.weight_decay = 0.0;
    {
        AdamState st;
        const FactorPair same = adamw_step(p, FactorPair::zeros(5, 4, 2), 0.01, h, st);
        EXPECT_EQ(max_abs_diff(same.u, p.u), 0.0);
        EXPECT_EQ(max_abs_diff(same.v, p.v), 0.0);
    }
    {
        AdamState st;
        const FactorPair g(gaussian(5, 2, rng), gaussian(4, 2, rng));
        const FactorPair out = adamw_step(p, g, 0.01, h, st);
        for (std::size_t i = 0; i < g.u.size(); ++i) {
            const double gi = g.u.data()[i];
            EXPECT_NEAR(out.u.data()[i] - p.u.data()[i], -0.01 * gi / (std::abs(gi) + h.eps), 1e-9);
        }
    }
    AdamHyper hw;  // PyTorch defaults, decoupled weight decay 1e-2
    AdamState st;
    FactorPair q = p;
    std::vector<FactorPair> grads;
    for (int t = 0; t < 5; ++t) {
        grads.emplace_back(gaussian(5, 2, rng), gaussian(4, 2, rng));
        q = adamw_step(q, grads.back(), 0.02, hw, st);
    }
    for (std::size_t i = 0; i < q.v.size(); ++i) {
        double w = p.v.data()[i], m = 0.0, v = 0.0;
        for (int t = 1; t <= 5; ++t) {
            const double g = grads[t - 1].v.data()[i];
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            w *= 1.0 - 0.02 * 1e-2;
            w -= 0.02 * (m / (1.0 - std::pow(0.9, t))) / (std::sqrt(v / (1.0 - std::pow(0.999, t))) + 1e-8);
        }
        EXPECT_NEAR(q.v.data()[i], w, 1e-12);
    }
}

TEST(Kfac, BetaOneKeepsMetrics) {
    std::mt19937_64 rng(18);
    OploraHyper h;
    h.beta = 0.9;
    OploraState st(h);
    st.metric_u = Metric::damped_lowrank(gaussian(6, 2, rng), 1e-4);
    st.metric_v = Metric::damped_lowrank(gaussian(5, 2, rng), 1e-4);
    const Mat fu = st.metric_u->factor();
    kfac_scale_update(st, gaussian(3, 5, rng), gaussian(3, 6, rng), 1.0);
    EXPECT_EQ(max_abs_diff(st.metric_u->factor(), fu), 0.0);
    EXPECT_THROW(kfac_scale_update(st, gaussian(3, 5, rng), gaussian(2, 6, rng), 0.5), ShapeError);
}

TEST(Kfac, FullReplacementWithOrthogonalRows) {
    std::mt19937_64 rng(19);
    const std::size_t d_in = 12, d_out = 10, m = 4, b = 4;
    OploraHyper h;
    h.beta = 0.5;
    h.num_iters = 2;
    OploraState st(h);
    st.metric_u = Metric::damped_lowrank(thin_qr(gaussian(d_out, m, rng)).q, 1e-4);
    st.metric_v = Metric::damped_lowrank(thin_qr(gaussian(d_in, m, rng)).q, 1e-4);
    const Mat x = naive_transpose(testing::orthonormal_columns(d_in, b, rng));
    const Mat s = 2.0 * naive_transpose(testing::orthonormal_columns(d_out, b, rng));
    kfac_scale_update(st, x, s, 0.0);
    const Mat expect_v = (1.0 / b) * naive_matmul(naive_transpose(x), x);
    const Mat expect_u = (1.0 / b) * naive_matmul(naive_transpose(s), s);
    EXPECT_LT(rel_diff(dense_product(st.metric_v->factor(), st.metric_v->factor()), expect_v), 1e-7);
    EXPECT_LT(rel_diff(dense_product(st.metric_u->factor(), st.metric_u->factor()), expect_u), 1e-7);
}

TEST(Kfac, RepeatedBatchesConvergeToBatchStatistics) {
    std::mt19937_64 rng(20);
    const std::size_t d_in = 10, d_out = 8, m = 3, b = 3;
    OploraHyper h;
    h.beta = 0.5;
    h.num_iters = 2;
    OploraState st(h);
    st.metric_u = Metric::damped_lowrank(thin_qr(gaussian(d_out, m, rng)).q, 1e-4);
    st.metric_v = Metric::damped_lowrank(thin_qr(gaussian(d_in, m, rng)).q, 1e-4);
    const Mat x = gaussian(b, d_in, rng);
    const Mat s = gaussian(b, d_out, rng);
    const Mat target = (1.0 / b) * naive_matmul(naive_transpose(x), x);
    double prev = INFINITY;
    for (int t = 0; t < 40; ++t) {
        kfac_scale_update(st, x, s, 0.5);
        const double err = rel_diff(dense_product(st.metric_v->factor(), st.metric_v->factor()), target);
        if (t >= 5) {
            EXPECT_LE(err, prev * 1.01 + 1e-12);
        }
        prev = err;
    }
    EXPECT_LT(prev, 1e-6);
}

TEST(SvdLora, Examples) {
    std::mt19937_64 rng(21);
    const Mat w = gaussian(6, 4, rng);
    SvdLoraState st(Mat(6, 4), Mat(6, 4));
    const FactorPair full = svdlora_step(st, -1.0 * w, 1.0, 0.0, 4);
    EXPECT_LT(max_abs_diff(dense_product(full), w), 1e-8);
    EXPECT_LT(max_abs_diff(st.dense_weight, w), 1e-8);

    Mat d(5, 5);
    const double diag[] = {1.0, 5.0, 3.0, 4.0, 2.0};
    for (std::size_t i = 0; i < 5; ++i) {
        d(i, i) = diag[i];
    }
    SvdLoraState st2(Mat(5, 5), Mat(5, 5));
    const Mat top = dense_product(svdlora_step(st2, -1.0 * d, 1.0, 0.0, 2));
    for (std::size_t i = 0; i < 5; ++i) {
        EXPECT_NEAR(top(i, i), diag[i] >= 4.0 ? diag[i] : 0.0, 1e-10);
    }
    EXPECT_THROW(svdlora_step(st2, Mat(4, 5), 1.0, 0.0, 2), ShapeError);
    EXPECT_THROW(SvdLoraState(Mat(2, 2), Mat(2, 3)), ShapeError);
}

TEST(SvdLora, MomentumStaysDenseAndIterateIsProjected) {
    std::mt19937_64 rng(22);
    SvdLoraState st(FactorPair(gaussian(8, 2, rng), gaussian(6, 2, rng)));
    const Mat g1 = gaussian(8, 6, rng);
    const Mat g2 = gaussian(8, 6, rng);
    Mat w = st.dense_weight;
    w.add_scaled(-0.1, g1);
    w = testing::best_rank_r(w, 2);
    svdlora_step(st, g1, 0.1, 0.5, 2);
    EXPECT_LT(rel_diff(st.dense_weight, w), 1e-8);
    EXPECT_LT(max_abs_diff(st.dense_momentum, g1), 1e-15);
    svdlora_step(st, g2, 0.1, 0.5, 2);
    EXPECT_LT(max_abs_diff(st.dense_momentum, g2 + 0.5 * g1), 1e-14);
}

// Heavy ball on a unit-curvature quadratic with eta = 0.1, alpha = 0.75 has
// error recursion e' = 1.65 e - 0.75 e_prev, which first crosses zero near
// step 6. Loss falls strictly until then and stays below its start.
TEST(SvdLora, TunedSettingsDecreaseLossUntilFirstOvershoot) {
    std::mt19937_64 rng(23);
    const LinearTask task(make_target(40, 20, TargetSpec{}, rng), 0);
    const FactorPair init = init_linear_adapter(task, 4, InitKind::random_svd, rng);
    SvdLoraState st(init);
    const double start = linear_task_dense_loss(task, st.dense_weight);
    double prev = start;
    std::vector<std::size_t> all(20);
    for (std::size_t i = 0; i < 20; ++i) {
        all[i] = i;
    }
    for (int t = 0; t < 10; ++t) {
        const DenseGrad g = linear_task_dense_grad(task, st.dense_weight, all);
        svdlora_step(st, g.grad, 0.1, 0.75, 4);
        const double loss = linear_task_dense_loss(task, st.dense_weight);
        if (t < 5) {
            EXPECT_LT(loss, prev) << "step " << t;
        }
        EXPECT_LT(loss, start) << "step " << t;
        prev = loss;
    }
}

TEST(SvdLora, NoMomentumDecreasesLossMonotonically) {
    std::mt19937_64 rng(24);
    const LinearTask task(make_target(40, 20, TargetSpec{}, rng), 0);
    SvdLoraState st(init_linear_adapter(task, 4, InitKind::random_svd, rng));
    double prev = linear_task_dense_loss(task, st.dense_weight);
    std::vector<std::size_t> all(20);
    for (std::size_t i = 0; i < 20; ++i) {
        all[i] = i;
    }
    for (int t = 0; t < 10; ++t) {
        const DenseGrad g = linear_task_dense_grad(task, st.dense_weight, all);
        svdlora_step(st, g.grad, 0.1, 0.0, 4);
        const double loss = linear_task_dense_loss(task, st.dense_weight);
        EXPECT_LT(loss, prev) << "step " << t;
        prev = loss;
    }
}

bench::ExperimentConfig oracle_config(int k, std::size_t steps) {
    bench::ExperimentConfig cfg;
    cfg.task.kind = bench::TaskKind::linear;
    cfg.task.fixed_init = true;
    cfg.task.task_seed = 7;
    cfg.method = bench::Method::oplora;
    cfg.rank = 8;
    cfg.num_iters = {k};
    cfg.eta = {0.5};
    cfg.steps = steps;
    cfg.track_oracle = true;
    return cfg;
}

TEST(OploraLinearTask, DistanceToSvdloraShrinksWithIterations) {
    double prev = INFINITY;
    for (int k : {1, 2, 4, 8}) {
        const auto cfg = oracle_config(k, 20);
        const auto runs = bench::expand_runs(cfg);
        const auto res = bench::run_single(cfg, runs.front());
        ASSERT_EQ(res.status, bench::RunStatus::ok) << res.message;
        const double d = res.records.back().oracle_gap;
        EXPECT_LE(d, prev + 1e-10) << "K=" << k;
        prev = d;
    }
}

TEST(OploraLinearTask, TracksSvdloraOnGapTwoSpectrum) {
    auto cfg = oracle_config(8, 50);
    cfg.task.target.kind = TargetSpec::Kind::spectrum;
    cfg.task.target.singular_values = {10, 9, 8, 7, 6, 5, 4.5, 4, 2, 1.5, 1, 0.5};
    cfg.eta = {0.5};
    const auto res = bench::run_single(cfg, bench::expand_runs(cfg).front());
    ASSERT_EQ(res.status, bench::RunStatus::ok) << res.message;
    // Relative to the SVDLoRA iterate, whose norm is close to the top-8 energy.
    double top = 0.0;
    for (int i = 0; i < 8; ++i) {
        const double s = cfg.task.target.singular_values[i];
        top += s * s;
    }
    EXPECT_LT(res.records.back().oracle_gap / std::sqrt(top), 0.05);
}

} // namespace
} // namespace oplora
