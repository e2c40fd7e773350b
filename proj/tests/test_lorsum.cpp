// Copyright (c) 2026, The OPLoRA C++ Authors
// SPDX-License-Identifier: Apache-2.0
//

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "oplora/errors.hpp"
#include "oplora/instrument.hpp"
#include "oplora/lorsum.hpp"
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

// Projection onto the column space of x: x (x^T x)^{-1} x^T.
Mat projector(const Mat& x) {
    const Mat xt = naive_transpose(x);
    return naive_matmul(naive_matmul(x, gj_inverse(naive_matmul(xt, x))), xt);
}

Mat dense_metric(const Metric& m) {
    Mat out = m.coeff() * dense_product(m.factor(), m.factor());
    return plus_diag(out, m.delta());
}

TEST(Lorsum, SelfSumIsFixedPoint) {
    std::mt19937_64 rng(1);
    const FactorPair a(gaussian(9, 3, rng), gaussian(7, 3, rng));
    WeightedFactorSum s;
    s.add(1.0, a);
    for (StartTurn turn : {StartTurn::in_first, StartTurn::out_first}) {
        LorsumConfig cfg;
        cfg.start_turn = turn;
        const FactorPair out = lorsum(a, s, cfg);
        EXPECT_LT(rel_diff(dense_product(out), dense_product(a)), 1e-9);
    }
}

TEST(Lorsum, ProximalZeroStepIsFixedPointUnderMetrics) {
    std::mt19937_64 rng(2);
    const FactorPair a(gaussian(10, 3, rng), gaussian(8, 3, rng));
    const Metric mu = Metric::damped_lowrank(gaussian(10, 3, rng), 0.1);
    const Metric mv = Metric::damped_lowrank(gaussian(8, 3, rng), 0.1);
    WeightedFactorSum s;
    s.add(1.0, a);
    LorsumConfig cfg;
    cfg.num_iters = 3;
    cfg.lambda_u = 0.05;
    cfg.lambda_v = 0.05;
    const FactorPair out = lorsum(a, s, cfg, mu, mv);
    EXPECT_LT(rel_diff(dense_product(out), dense_product(a)), 1e-9);
}

TEST(Lorsum, OrthogonalRank8SumMatchesSvd) {
    std::mt19937_64 rng(3);
    const Mat qu = testing::orthonormal_columns(30, 8, rng);
    const Mat qv = testing::orthonormal_columns(20, 8, rng);
    Mat u1 = qu.cols_range(0, 4);
    Mat u2 = qu.cols_range(4, 4);
    const Mat v1 = qv.cols_range(0, 4);
    const Mat v2 = qv.cols_range(4, 4);
    for (std::size_t j = 0; j < 4; ++j) {
        for (std::size_t i = 0; i < 30; ++i) {
            u1(i, j) *= 10.0 - j;
            u2(i, j) *= 3.0 - 0.5 * j;
        }
    }
    WeightedFactorSum s;
    s.add(1.0, u1, v1).add(1.0, u2, v2);
    // Anchor: the first term in the leading four columns, random directions in the rest.
    const FactorPair anchor(hcat(u1, gaussian(30, 4, rng, 0.1)), hcat(v1, gaussian(20, 4, rng, 0.1)));
    LorsumConfig cfg;
    cfg.num_iters = 32;
    const FactorPair out = lorsum(anchor, s, cfg);
    const Mat oracle = testing::best_rank_r(materialize(s), 8);
    EXPECT_LT(rel_diff(dense_product(out), oracle), 1e-6);
}

TEST(Lorsum, SimultaneousStepIsScaledGradientStep) {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t d_out = 12, d_in = 9, r = 3, b = 5;
        const Mat u = gaussian(d_out, r, rng);
        const Mat v = gaussian(d_in, r, rng);
        const Mat sb = gaussian(b, d_out, rng);
        const Mat xb = gaussian(b, d_in, rng);
        const double eta = 0.05;
        FactorTerm grad;
        grad.coeff = -eta;
        grad.left = sb;
        grad.right = xb;
        grad.left_transposed = true;
        grad.right_transposed = true;
        WeightedFactorSum s;
        s.add(1.0, u, v);
        s.add(grad);
        LorsumConfig cfg;
        cfg.mode = LorsumMode::simultaneous;
        cfg.lambda_u = 1e-12;
        cfg.lambda_v = 1e-12;
        const FactorPair out = lorsum(FactorPair(u, v), s, cfg);

        const Mat g = naive_matmul(naive_transpose(sb), xb);
        const Mat u_ref = u - eta * naive_matmul(naive_matmul(g, v), gj_inverse(naive_matmul(naive_transpose(v), v)));
        const Mat v_ref =
            v - eta * naive_matmul(naive_matmul(naive_transpose(g), u), gj_inverse(naive_matmul(naive_transpose(u), u)));
        EXPECT_LT(max_abs_diff(out.u, u_ref), 1e-6);
        EXPECT_LT(max_abs_diff(out.v, v_ref), 1e-6);
    }
}

TEST(Metric, InverseExamples) {
    std::mt19937_64 rng(5);
    const Mat x = gaussian(12, 4, rng);
    EXPECT_EQ(max_abs_diff(apply_inverse_metric(Metric::identity(), x), x), 0.0);
    EXPECT_LT(max_abs_diff(apply_inverse_metric(Metric::damped_lowrank(Mat(12, 2), 2.0), x), 0.5 * x), 1e-15);

    const Metric m = Metric::damped_lowrank(gaussian(12, 3, rng), 0.1);
    const Mat expect = naive_matmul(gj_inverse(dense_metric(m)), x);
    EXPECT_LT(rel_diff(apply_inverse_metric(m, x), expect), 1e-9);
    EXPECT_LT(rel_diff(apply_metric(m, x), naive_matmul(dense_metric(m), x)), 1e-12);

    EXPECT_THROW(apply_inverse_metric(Metric::damped_lowrank(gaussian(12, 3, rng), 0.0), x), SingularMetricError);
    EXPECT_THROW(apply_inverse_metric(m, gaussian(11, 4, rng)), ShapeError);
    EXPECT_THROW(Metric::damped_lowrank(Mat(3, 1), -1.0), DegenerateInputError);
}

TEST(Metric, GramExamples) {
    std::mt19937_64 rng(6);
    const Mat x = gaussian(10, 3, rng);
    EXPECT_LT(max_abs_diff(apply_metric_gram(Metric::identity(), x), gram(x)), 1e-15);
    EXPECT_LT(max_abs_diff(apply_metric_gram(Metric::damped_lowrank(Mat(10, 2), 1.0), x), gram(x)), 1e-13);
    const Metric m = Metric::damped_lowrank(gaussian(10, 4, rng), 0.3, 0.7);
    const Mat expect = naive_matmul(naive_transpose(x), naive_matmul(dense_metric(m), x));
    const Mat got = apply_metric_gram(m, x);
    EXPECT_LT(rel_diff(got, expect), 1e-12);
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 3; ++j) {
            EXPECT_EQ(got(i, j), got(j, i));
        }
    }
}

// After a U-side half-step from V, U V^T equals T P_V; after a V-side
// half-step from U, U V^T equals P_U T.
TEST(Lorsum, SubspaceIterationIdentitiesProperty) {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t d_out = 14 + trial % 5, d_in = 9 + trial % 4, r = 2 + trial % 3;
        WeightedFactorSum s;
        for (int t = 0; t < 3; ++t) {
            s.add(t == 0 ? 1.0 : -0.4, gaussian(d_out, r, rng), gaussian(d_in, r, rng));
        }
        const Mat total = materialize(s);
        const FactorPair anchor(gaussian(d_out, r, rng), gaussian(d_in, r, rng));
        LorsumConfig cfg;

        cfg.start_turn = StartTurn::out_first;
        const FactorPair a = lorsum(anchor, s, cfg);
        EXPECT_LT(rel_diff(dense_product(a.u, anchor.v), naive_matmul(total, projector(anchor.v))), 1e-8);
        EXPECT_LT(rel_diff(dense_product(a), naive_matmul(projector(a.u), total)), 1e-8);

        cfg.start_turn = StartTurn::in_first;
        const FactorPair b = lorsum(anchor, s, cfg);
        EXPECT_LT(rel_diff(dense_product(anchor.u, b.v), naive_matmul(projector(anchor.u), total)), 1e-8);
        EXPECT_LT(rel_diff(dense_product(b), naive_matmul(total, projector(b.v))), 1e-8);
    }
}

TEST(Lorsum, MonotoneApproachToSvdProperty) {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 10; ++trial) {
        const auto inst = testing::gap_sum(40, 30, 4, 3, 2.0, rng);
        const Mat oracle = testing::best_rank_r(inst.dense, 4);
        double prev = INFINITY;
        for (int k : {1, 2, 4, 8, 16, 32}) {
            LorsumConfig cfg;
            cfg.num_iters = k;
            const double err = frobenius_distance(dense_product(lorsum(inst.anchor, inst.terms, cfg)), oracle);
            EXPECT_LE(err, prev + 1e-10) << "K=" << k;
            prev = err;
        }
        EXPECT_LT(prev, 1e-6 * fro(inst.dense));
    }
}

TEST(Lorsum, FlopsLinearInIterationsAndDimension) {
    std::mt19937_64 rng(9);
    const auto inst = testing::gap_sum(60, 40, 4, 3, 2.0, rng);
    std::vector<double> ks, fk;
    for (int k : {1, 2, 4, 8, 16, 32}) {
        LorsumConfig cfg;
        cfg.num_iters = k;
        instrument::Scope scope;
        lorsum(inst.anchor, inst.terms, cfg);
        ks.push_back(k);
        fk.push_back(double(scope.delta().flops));
    }
    EXPECT_NEAR(testing::loglog_slope(ks, fk), 1.0, 0.1);

    std::vector<double> ds, fd;
    for (std::size_t d : {50, 100, 200, 400, 800}) {
        WeightedFactorSum s;
        for (int t = 0; t < 3; ++t) {
            s.add(1.0, gaussian(d, 4, rng), gaussian(d / 2, 4, rng));
        }
        const FactorPair anchor(gaussian(d, 4, rng), gaussian(d / 2, 4, rng));
        LorsumConfig cfg;
        cfg.num_iters = 2;
        instrument::Scope scope;
        lorsum(anchor, s, cfg);
        ds.push_back(double(d));
        fd.push_back(double(scope.delta().flops));
    }
    EXPECT_NEAR(testing::loglog_slope(ds, fd), 1.0, 0.1);
}

TEST(Lorsum, PeakAllocationIsThin) {
    std::mt19937_64 rng(10);
    const std::size_t d_out = 50, d_in = 30, b = 6;
    WeightedFactorSum s;
    s.add(1.0, gaussian(d_out, 4, rng), gaussian(d_in, 4, rng));
    FactorTerm g;
    g.coeff = -0.1;
    g.left = gaussian(b, d_out, rng);
    g.right = gaussian(b, d_in, rng);
    g.left_transposed = true;
    g.right_transposed = true;
    s.add(std::move(g));
    const FactorPair anchor(gaussian(d_out, 4, rng), gaussian(d_in, 4, rng));
    LorsumConfig cfg;
    cfg.num_iters = 4;
    instrument::Scope scope;
    lorsum(anchor, s, cfg);
    EXPECT_LE(scope.delta().peak_allocation, d_out * std::max<std::size_t>(4, b));
}

TEST(Lorsum, GaugeInvarianceProperty) {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        WeightedFactorSum s;
        for (int t = 0; t < 2; ++t) {
            s.add(1.0, gaussian(15, 3, rng), gaussian(11, 3, rng));
        }
        const FactorPair anchor(gaussian(15, 3, rng), gaussian(11, 3, rng));
        const Mat a = plus_diag(gaussian(3, 3, rng, 0.3), 1.5);
        const FactorPair moved(naive_matmul(anchor.u, a), naive_matmul(anchor.v, naive_transpose(gj_inverse(a))));
        LorsumConfig cfg;
        cfg.num_iters = 1 + trial % 3;
        EXPECT_LE(rel_diff(dense_product(lorsum(moved, s, cfg)), dense_product(lorsum(anchor, s, cfg))), 1e-6);
    }
}

TEST(Lorsum, SingularSystemNamesSideAndIteration) {
    std::mt19937_64 rng(12);
    WeightedFactorSum s;
    s.add(1.0, gaussian(8, 2, rng), gaussian(6, 2, rng));
    const FactorPair zero = FactorPair::zeros(8, 6, 2);
    LorsumConfig cfg;
    try {
        lorsum(zero, s, cfg);
        FAIL() << "expected a singular system";
    } catch (const SingularMetricError& e) {
        EXPECT_EQ(e.side(), 'V');
        EXPECT_EQ(e.iteration(), 0);
    }
    cfg.start_turn = StartTurn::out_first;
    try {
        lorsum(zero, s, cfg);
        FAIL() << "expected a singular system";
    } catch (const SingularMetricError& e) {
        EXPECT_EQ(e.side(), 'U');
    }
    cfg.lambda_u = 1e-3;
    cfg.lambda_v = 1e-3;
    EXPECT_NO_THROW(lorsum(zero, s, cfg));
}

TEST(Lorsum, RelativeLambdaRescuesRankDeficientSums) {
    std::mt19937_64 rng(13);
    // Rank-2 sum approximated at rank 4 starting from a zero left factor.
    WeightedFactorSum s;
    s.add(0.0, Mat(10, 4), gaussian(7, 4, rng));
    s.add(1.0, gaussian(10, 2, rng), gaussian(7, 2, rng));
    const FactorPair anchor(Mat(10, 4), gaussian(7, 4, rng));
    LorsumConfig cfg;
    cfg.num_iters = 2;
    EXPECT_THROW(lorsum(anchor, s, cfg), SingularMetricError);
    cfg.relative_lambda = 1e-10;
    const FactorPair out = lorsum(anchor, s, cfg);
    EXPECT_LT(rel_diff(dense_product(out), materialize(s)), 1e-6);
}

TEST(Lorsum, ConfigAndShapeErrors) {
    std::mt19937_64 rng(14);
    const FactorPair a(gaussian(6, 2, rng), gaussian(5, 2, rng));
    WeightedFactorSum s;
    s.add(1.0, a);
    LorsumConfig cfg;
    cfg.num_iters = 0;
    EXPECT_THROW(lorsum(a, s, cfg), ConfigError);
    cfg.num_iters = 1;
    cfg.lambda_u = -1.0;
    EXPECT_THROW(lorsum(a, s, cfg), ConfigError);
    cfg.lambda_u = 0.0;
    EXPECT_THROW(lorsum(a, WeightedFactorSum(), cfg), ShapeError);
    const FactorPair wrong(gaussian(7, 2, rng), gaussian(5, 2, rng));
    EXPECT_THROW(lorsum(wrong, s, cfg), ShapeError);
    // Metric inner rank above 4 r is refused.
    EXPECT_THROW(lorsum(a, s, cfg, Metric::damped_lowrank(gaussian(6, 9, rng), 0.1)), PolicyError);
    // A low-rank metric without damping cannot be inverted.
    WeightedFactorSum two = s;
    two.add(-0.1, gaussian(6, 1, rng), gaussian(5, 1, rng));
    EXPECT_THROW(lorsum(a, two, cfg, Metric::damped_lowrank(gaussian(6, 2, rng), 0.0)), SingularMetricError);
}

TEST(Lorsum, ScaledStepMatchesDenseMetricOracle) {
    // One out_first U half-step under metrics, checked against the dense formula
    // U = (c0 U0 V0^T Dv V + DU^{-1} sum_{i>0} c_i L_i R_i^T V + lam U0)(V^T Dv V + lam I)^{-1}.
    std::mt19937_64 rng(15);
    const FactorPair a(gaussian(9, 2, rng), gaussian(7, 2, rng));
    const Metric mu = Metric::damped_lowrank(gaussian(9, 2, rng), 0.2);
    const Metric mv = Metric::damped_lowrank(gaussian(7, 2, rng), 0.3);
    const Mat l = gaussian(9, 3, rng);
    const Mat rr = gaussian(7, 3, rng);
    WeightedFactorSum s;
    s.add(1.0, a).add(-0.2, l, rr);
    LorsumConfig cfg;
    cfg.start_turn = StartTurn::out_first;
    cfg.lambda_u = 0.01;
    cfg.lambda_v = 0.01;
    const FactorPair out = lorsum(a, s, cfg, mu, mv);

    const Mat du = dense_metric(mu);
    const Mat dv = dense_metric(mv);
    const Mat v = a.v;
    Mat num = naive_matmul(dense_product(a), naive_matmul(dv, v));
    num += naive_matmul(gj_inverse(du), naive_matmul(-0.2 * dense_product(l, rr), v));
    num += 0.01 * a.u;
    const Mat sys = plus_diag(naive_matmul(naive_transpose(v), naive_matmul(dv, v)), 0.01);
    EXPECT_LT(rel_diff(out.u, naive_matmul(num, gj_inverse(sys))), 1e-9);
}

TEST(SymmetricFactor, ReproducesPsdProduct) {
    std::mt19937_64 rng(16);
    for (int trial = 0; trial < 10; ++trial) {
        const Mat f = gaussian(12, 3, rng);
        // Same column space, different gauge on each side.
        const Mat a = plus_diag(gaussian(3, 3, rng, 0.2), 1.0);
        const FactorPair p(naive_matmul(f, a), naive_matmul(f, naive_transpose(gj_inverse(a))));
        const Mat q = symmetric_factor(p);
        EXPECT_LT(rel_diff(dense_product(q, q), dense_product(f, f)), 1e-9);
    }
    EXPECT_THROW(symmetric_factor(FactorPair(Mat(4, 1), Mat(5, 1))), ShapeError);
    EXPECT_EQ(symmetric_factor(FactorPair::zeros(4, 4, 2)).max_abs(), 0.0);
}

} // namespace
} // namespace oplora
