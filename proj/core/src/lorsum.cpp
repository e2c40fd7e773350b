// Copyright (c) 2026, The OPLoRA C++ Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "oplora/lorsum.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>

#include "oplora/errors.hpp"

namespace oplora {

namespace {

void add_to_diagonal(Mat& a, double s) {
    for (std::size_t i = 0; i < a.rows(); ++i) {
        a(i, i) += s;
    }
}

void symmetrize(Mat& a) {
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = i + 1; j < a.cols(); ++j) {
            const double s = 0.5 * (a(i, j) + a(j, i));
            a(i, j) = s;
            a(j, i) = s;
        }
    }
}

void require_rows(const Metric& m, const Mat& x, const char* op) {
    if (!m.is_identity() && m.factor().rows() != x.rows()) {
        throw ShapeError(fmt::format("{}: metric acts on dimension {}, operand has {} rows", op, m.factor().rows(),
                                     x.rows()));
    }
}

} // namespace

Metric Metric::damped_lowrank(Mat factor, double delta, double coeff) {
    if (!(delta >= 0.0) || !(coeff >= 0.0)) {
        throw DegenerateInputError("Metric: delta and coeff must be nonnegative");
    }
    Metric m;
    m.kind_ = Kind::damped_lowrank;
    m.factor_ = std::move(factor);
    m.delta_ = delta;
    m.coeff_ = coeff;
    return m;
}

void Metric::set_factor(Mat factor) {
    if (is_identity()) {
        throw ShapeError("Metric: identity metric has no factor");
    }
    if (factor.rows() != factor_.rows()) {
        throw ShapeError(fmt::format("Metric: factor has {} rows, metric acts on {}", factor.rows(), factor_.rows()));
    }
    factor_ = std::move(factor);
}

Mat apply_metric(const Metric& m, const Mat& x) {
    if (m.is_identity()) {
        return x;
    }
    require_rows(m, x, "apply_metric");
    Mat out = m.delta() * Mat(x);
    out.add_scaled(m.coeff(), matmul(m.factor(), matmul(m.factor(), x, true, false)));
    return out;
}

Mat apply_inverse_metric(const Metric& m, const Mat& x) {
    if (m.is_identity()) {
        return x;
    }
    require_rows(m, x, "apply_inverse_metric");
    if (!(m.delta() > 0.0)) {
        throw SingularMetricError("apply_inverse_metric: a low-rank metric needs damping delta > 0", 0);
    }
    // (delta I + c F F^T)^{-1} x = (x - c F (delta I + c F^T F)^{-1} F^T x) / delta
    const Mat& f = m.factor();
    Mat inner = gram(f);
    inner *= m.coeff();
    add_to_diagonal(inner, m.delta());
    Mat correction = matmul(f, solve_spd(inner, matmul(f, x, true, false)));
    Mat out = x;
    out.add_scaled(-m.coeff(), correction);
    out *= 1.0 / m.delta();
    return out;
}

Mat apply_metric_gram(const Metric& m, const Mat& x) {
    if (m.is_identity()) {
        return gram(x);
    }
    require_rows(m, x, "apply_metric_gram");
    Mat g = gram(x);
    g *= m.delta();
    g.add_scaled(m.coeff(), gram(matmul(m.factor(), x, true, false)));
    symmetrize(g);
    return g;
}

namespace {

enum class Side { u, v };

// One half-step: solves for the factor on `side` given the current estimate of
// the other factor.
Mat half_step(Side side, const Mat& other, const FactorPair& anchor, const WeightedFactorSum& terms,
              double lambda, double relative_lambda, const Metric& metric_self, const Metric& metric_other,
              int iteration) {
    const auto& all = terms.terms();
    const FactorTerm& t0 = all.front();
    const bool is_u = side == Side::u;

    // Anchor term measured in the other side's metric: c_0 L_0 R_0^T D other.
    Mat scaled_other = apply_metric(metric_other, other);
    Mat numerator = is_u ? t0.left_times(t0.right_t_times(scaled_other))
                         : t0.right_times(t0.left_t_times(scaled_other));
    numerator *= t0.coeff;

    if (all.size() > 1) {
        const std::size_t rows = is_u ? terms.d_out() : terms.d_in();
        Mat rest(rows, other.cols());
        for (std::size_t i = 1; i < all.size(); ++i) {
            const auto& t = all[i];
            rest.add_scaled(t.coeff, is_u ? t.left_times(t.right_t_times(other)) : t.right_times(t.left_t_times(other)));
        }
        numerator += apply_inverse_metric(metric_self, rest);
    }
    Mat system = apply_metric_gram(metric_other, other);
    if (relative_lambda > 0.0) {
        double top = 1.0;
        for (std::size_t i = 0; i < system.rows(); ++i) {
            top = std::max(top, system(i, i));
        }
        lambda += relative_lambda * top;
    }
    if (lambda != 0.0) {
        numerator.add_scaled(lambda, is_u ? anchor.u : anchor.v);
        add_to_diagonal(system, lambda);
    }
    try {
        return solve_spd(system, numerator.transposed()).transposed();
    } catch (const SingularMetricError& e) {
        throw SingularMetricError(fmt::format("lorsum: singular {}-side system at iteration {}: {}",
                                              is_u ? 'U' : 'V', iteration, e.what()),
                                  e.pivot(), is_u ? 'U' : 'V', iteration);
    }
}

void validate(const FactorPair& anchor, const WeightedFactorSum& terms, const LorsumConfig& cfg,
              const Metric& metric_u, const Metric& metric_v) {
    if (cfg.num_iters < 1) {
        throw ConfigError("num_iters", "lorsum needs at least one iteration");
    }
    if (!(cfg.lambda_u >= 0.0) || !(cfg.lambda_v >= 0.0) || !(cfg.relative_lambda >= 0.0)) {
        throw ConfigError("lambda", "proximal weights must be nonnegative");
    }
    if (terms.empty()) {
        throw ShapeError("lorsum: empty sum");
    }
    if (terms.d_out() != anchor.d_out() || terms.d_in() != anchor.d_in()) {
        throw ShapeError(fmt::format("lorsum: anchor is {}x{}, sum is {}x{}", anchor.d_out(), anchor.d_in(),
                                     terms.d_out(), terms.d_in()));
    }
    const auto cap = cfg.metric_rank_factor * std::max<std::size_t>(anchor.rank(), 1);
    for (const Metric* m : {&metric_u, &metric_v}) {
        if (m->inner_rank() > cap) {
            throw PolicyError(fmt::format("lorsum: metric inner rank {} exceeds {}", m->inner_rank(), cap));
        }
    }
    if (!metric_u.is_identity() && metric_u.factor().rows() != anchor.d_out()) {
        throw ShapeError("lorsum: U-side metric dimension mismatch");
    }
    if (!metric_v.is_identity() && metric_v.factor().rows() != anchor.d_in()) {
        throw ShapeError("lorsum: V-side metric dimension mismatch");
    }
}

} // namespace

FactorPair lorsum(const FactorPair& anchor, const WeightedFactorSum& terms, const LorsumConfig& cfg,
                  const Metric& metric_u, const Metric& metric_v) {
    validate(anchor, terms, cfg, metric_u, metric_v);

    Mat u = anchor.u;
    Mat v = anchor.v;
    auto update_u = [&](const Mat& v_cur, int k) {
        return half_step(Side::u, v_cur, anchor, terms, cfg.lambda_u, cfg.relative_lambda, metric_u, metric_v, k);
    };
    auto update_v = [&](const Mat& u_cur, int k) {
        return half_step(Side::v, u_cur, anchor, terms, cfg.lambda_v, cfg.relative_lambda, metric_v, metric_u, k);
    };

    for (int k = 0; k < cfg.num_iters; ++k) {
        if (cfg.mode == LorsumMode::simultaneous) {
            Mat next_u = update_u(v, k);
            Mat next_v = update_v(u, k);
            u = std::move(next_u);
            v = std::move(next_v);
        } else if (cfg.start_turn == StartTurn::in_first) {
            v = update_v(u, k);
            u = update_u(v, k);
        } else {
            u = update_u(v, k);
            v = update_v(u, k);
        }
    }
    return FactorPair(std::move(u), std::move(v));
}

Mat symmetric_factor(const FactorPair& p) {
    if (p.d_out() != p.d_in()) {
        throw ShapeError(fmt::format("symmetric_factor: {}x{} product is not square", p.d_out(), p.d_in()));
    }
    const std::size_t d = p.d_out();
    const std::size_t r = p.rank();
    Mat out(d, r);

    // Orthonormal basis Q = U E L^{-1/2} of span(U) from the eigenpairs of U^T U.
    const auto gram_eig = svd_dense(gram(p.u));
    const double top = gram_eig.sigma.empty() ? 0.0 : gram_eig.sigma.front();
    std::size_t keep = 0;
    while (keep < gram_eig.sigma.size() && gram_eig.sigma[keep] > 1e-12 * top && gram_eig.sigma[keep] > 0.0) {
        ++keep;
    }
    if (keep == 0) {
        return out;
    }
    Mat e = gram_eig.u.cols_range(0, keep);
    Mat basis_coeff = e;  // E L^{-1/2}
    Mat sqrt_l_et(keep, r); // L^{1/2} E^T = Q^T U
    for (std::size_t k = 0; k < keep; ++k) {
        const double l = gram_eig.sigma[k];
        for (std::size_t i = 0; i < r; ++i) {
            basis_coeff(i, k) /= std::sqrt(l);
            sqrt_l_et(k, i) = std::sqrt(l) * e(i, k);
        }
    }
    Mat q = matmul(p.u, basis_coeff);

    // Compressed product M = (Q^T U)(V^T Q), symmetrized.
    Mat m = matmul(sqrt_l_et, matmul(p.v, q, true, false));
    symmetrize(m);

    const auto eig = svd_dense(m);
    Mat coeffs(keep, r);
    for (std::size_t k = 0; k < keep; ++k) {
        double sign = 0.0;
        for (std::size_t i = 0; i < keep; ++i) {
            sign += eig.u(i, k) * eig.v(i, k);
        }
        const double lambda = sign >= 0.0 ? eig.sigma[k] : -eig.sigma[k];
        if (lambda <= 0.0) {
            continue;
        }
        const double s = std::sqrt(lambda);
        for (std::size_t i = 0; i < keep; ++i) {
            coeffs(i, k) = eig.u(i, k) * s;
        }
    }
    return matmul(q, coeffs);
}

} // namespace oplora
