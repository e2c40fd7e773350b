// Copyright (c) 2026, The OPLoRA C++ Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "oplora/optim.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>
#include <random>

#include "oplora/errors.hpp"

namespace oplora {

namespace {

void add_to_diagonal(Mat& a, double s) {
    for (std::size_t i = 0; i < a.rows(); ++i) {
        a(i, i) += s;
    }
}

// x (g + lambda I)^{-1} for symmetric g.
Mat right_solve(const Mat& x, Mat g, double lambda) {
    add_to_diagonal(g, lambda);
    return solve_spd(g, x.transposed()).transposed();
}

void require_same_shape(const FactorPair& a, const FactorPair& b, const char* op) {
    if (a.u.rows() != b.u.rows() || a.u.cols() != b.u.cols() || a.v.rows() != b.v.rows() ||
        a.v.cols() != b.v.cols()) {
        throw ShapeError(fmt::format("{}: factor shapes differ", op));
    }
}

std::size_t resolve_rank(std::size_t requested, std::size_t adapter_rank) {
    return requested == 0 ? adapter_rank : requested;
}

Metric initial_metric(std::size_t d, std::size_t m, double delta, std::mt19937_64& rng) {
    // Orthonormal factor from the QR of a Gaussian matrix.
    return Metric::damped_lowrank(thin_qr(random_gaussian(d, m, rng)).q, delta);
}

Mat tracked_metric_factor(const Mat& factor, const Mat& batch, double beta, const OploraHyper& h) {
    FactorTerm stats;
    stats.coeff = (1.0 - beta) / static_cast<double>(batch.rows());
    stats.left = batch;
    stats.right = batch;
    stats.left_transposed = true;
    stats.right_transposed = true;

    WeightedFactorSum sum;
    sum.add(beta, factor, factor);
    sum.add(std::move(stats));

    LorsumConfig cfg;
    cfg.num_iters = h.num_iters;
    cfg.relative_lambda = h.tracking_lambda;
    cfg.start_turn = h.start_turn;
    return symmetric_factor(lorsum(FactorPair(factor, factor), sum, cfg));
}

} // namespace

void OploraHyper::validate() const {
    if (!(eta > 0.0)) {
        throw ConfigError("eta", "must be positive");
    }
    if (!(alpha >= 0.0 && alpha < 1.0)) {
        throw ConfigError("alpha", "must lie in [0, 1)");
    }
    if (!(lambda >= 0.0)) {
        throw ConfigError("lambda", "must be nonnegative");
    }
    if (!(beta > 0.0 && beta <= 1.0)) {
        throw ConfigError("beta", "must lie in (0, 1]");
    }
    if (beta < 1.0 && !(delta > 0.0)) {
        throw ConfigError("delta", "scaled steps need positive damping");
    }
    if (num_iters < 1) {
        throw ConfigError("num_iters", "must be at least 1");
    }
    if (!(tracking_lambda >= 0.0)) {
        throw ConfigError("tracking_lambda", "must be nonnegative");
    }
}

std::size_t OploraState::scalar_count() const noexcept {
    std::size_t n = 0;
    if (momentum) {
        n += momentum->parameter_count();
    }
    if (metric_u) {
        n += metric_u->scalar_count();
    }
    if (metric_v) {
        n += metric_v->scalar_count();
    }
    return n;
}

void kfac_scale_update(OploraState& state, const Mat& x_batch, const Mat& s_batch, double beta) {
    if (!state.metric_u || !state.metric_v) {
        throw ShapeError("kfac_scale_update: metrics are not initialized");
    }
    if (x_batch.rows() == 0 || x_batch.rows() != s_batch.rows()) {
        throw ShapeError("kfac_scale_update: empty or mismatched batch");
    }
    if (beta == 1.0) {
        return;
    }
    Mat fv = tracked_metric_factor(state.metric_v->factor(), x_batch, beta, state.hyper);
    Mat fu = tracked_metric_factor(state.metric_u->factor(), s_batch, beta, state.hyper);
    state.metric_v->set_factor(std::move(fv));
    state.metric_u->set_factor(std::move(fu));
}

FactorPair momentum_update_lor(const FactorPair& momentum, const FactorTerm& gradient, double alpha,
                               const LorsumConfig& cfg) {
    WeightedFactorSum sum;
    sum.add(alpha, momentum);
    sum.add(gradient);
    return lorsum(momentum, sum, cfg);
}

const FactorPair& oplora_step(LoraLinear& layer, OploraState& state) {
    const OploraHyper& h = state.hyper;
    h.validate();
    const FactorTerm gradient = layer.gradient_term(1.0);
    const FactorPair& adapter = layer.adapter();
    const std::size_t r = adapter.rank();

    // Work on copies so that a failure leaves the state untouched.
    std::optional<Metric> metric_u = state.metric_u;
    std::optional<Metric> metric_v = state.metric_v;
    std::optional<FactorPair> momentum = state.momentum;
    std::mt19937_64 rng(h.seed ^ (0x9e3779b97f4a7c15ULL * (state.steps + 1)));

    if (state.scaling_enabled()) {
        if (!metric_u || !metric_v) {
            const std::size_t m = resolve_rank(h.metric_rank, r);
            metric_u = initial_metric(layer.d_out(), m, h.delta, rng);
            metric_v = initial_metric(layer.d_in(), m, h.delta, rng);
        } else {
            OploraState scratch;
            scratch.hyper = h;
            scratch.metric_u = std::move(metric_u);
            scratch.metric_v = std::move(metric_v);
            kfac_scale_update(scratch, layer.captured_x(), layer.captured_s(), h.beta);
            metric_u = std::move(scratch.metric_u);
            metric_v = std::move(scratch.metric_v);
        }
    }
    if (h.alpha > 0.0 && !momentum) {
        // Zero product: U_M = 0 with a random V_M, like a fresh LoRA adapter.
        const std::size_t mr = resolve_rank(h.momentum_rank, r);
        momentum = FactorPair(Mat(layer.d_out(), mr),
                              random_gaussian(layer.d_in(), mr, rng, 1.0 / std::sqrt(double(layer.d_in()))));
    }

    // Weight step on U V^T - eta G - eta alpha M, with the full unprojected momentum.
    WeightedFactorSum step;
    step.add(1.0, adapter);
    FactorTerm scaled_gradient = gradient;
    scaled_gradient.coeff = -h.eta;
    step.add(std::move(scaled_gradient));
    if (h.alpha > 0.0) {
        step.add(-h.eta * h.alpha, *momentum);
    }
    LorsumConfig cfg;
    cfg.num_iters = h.num_iters;
    cfg.lambda_u = h.eta * h.lambda;
    cfg.lambda_v = h.eta * h.lambda;
    cfg.start_turn = h.start_turn;
    cfg.mode = h.mode;
    FactorPair next = state.scaling_enabled() ? lorsum(adapter, step, cfg, *metric_u, *metric_v)
                                              : lorsum(adapter, step, cfg);

    if (h.alpha > 0.0) {
        LorsumConfig mcfg;
        mcfg.num_iters = h.num_iters;
        mcfg.relative_lambda = h.tracking_lambda;
        mcfg.start_turn = h.start_turn;
        momentum = momentum_update_lor(*momentum, gradient, h.alpha, mcfg);
    }

    state.metric_u = std::move(metric_u);
    state.metric_v = std::move(metric_v);
    state.momentum = std::move(momentum);
    ++state.steps;
    layer.set_adapter(std::move(next));
    layer.clear_capture();
    return layer.adapter();
}

FactorPair prec_lora_update(const FactorPair& factors, const FactorPair& factor_grads, double eta, double lambda) {
    require_same_shape(factors, factor_grads, "prec_lora_update");
    Mat u = factors.u;
    Mat v = factors.v;
    u.add_scaled(-eta, right_solve(factor_grads.u, gram(factors.v), lambda));
    v.add_scaled(-eta, right_solve(factor_grads.v, gram(factors.u), lambda));
    return FactorPair(std::move(u), std::move(v));
}

const FactorPair& prec_lora_step(LoraLinear& layer, double eta, double lambda) {
    FactorPair next = prec_lora_update(layer.adapter(), layer.factor_grads(), eta, lambda);
    layer.set_adapter(std::move(next));
    layer.clear_capture();
    return layer.adapter();
}

std::size_t FactorMomentumState::scalar_count() const noexcept {
    std::size_t n = 0;
    for (const auto* m : {&momentum_u, &momentum_v, &prev_u, &prev_v}) {
        if (*m) {
            n += (*m)->size();
        }
    }
    return n;
}

FactorPair momentum_update_proj(FactorMomentumState& state, const FactorPair& factors, const FactorPair& factor_grads,
                                double lambda) {
    require_same_shape(factors, factor_grads, "momentum_update_proj");
    Mat num_u = factor_grads.u;
    Mat num_v = factor_grads.v;
    if (state.momentum_u && state.prev_v) {
        num_u.add_scaled(state.alpha, matmul(*state.momentum_u, matmul(*state.prev_v, factors.v, true, false)));
    }
    if (state.momentum_v && state.prev_u) {
        num_v.add_scaled(state.alpha, matmul(*state.momentum_v, matmul(*state.prev_u, factors.u, true, false)));
    }
    Mat mu = right_solve(num_u, gram(factors.v), lambda);
    Mat mv = right_solve(num_v, gram(factors.u), lambda);

    state.momentum_u = mu;
    state.momentum_v = mv;
    state.prev_u = factors.u;
    state.prev_v = factors.v;
    return FactorPair(std::move(mu), std::move(mv));
}

FactorPair momentum_update_naive(FactorMomentumState& state, const FactorPair& factors,
                                 const FactorPair& factor_grads, double lambda) {
    require_same_shape(factors, factor_grads, "momentum_update_naive");
    Mat mu = right_solve(factor_grads.u, gram(factors.v), lambda);
    Mat mv = right_solve(factor_grads.v, gram(factors.u), lambda);
    if (state.momentum_u) {
        mu.add_scaled(state.alpha, *state.momentum_u);
    }
    if (state.momentum_v) {
        mv.add_scaled(state.alpha, *state.momentum_v);
    }
    state.momentum_u = mu;
    state.momentum_v = mv;
    return FactorPair(std::move(mu), std::move(mv));
}

FactorPair sgd_step(const FactorPair& factors, const FactorPair& grads, double eta, double alpha, SgdState& state) {
    require_same_shape(factors, grads, "sgd_step");
    FactorPair buf = grads;
    if (state.buffer && alpha != 0.0) {
        buf.u.add_scaled(alpha, state.buffer->u);
        buf.v.add_scaled(alpha, state.buffer->v);
    }
    FactorPair next = factors;
    next.u.add_scaled(-eta, buf.u);
    next.v.add_scaled(-eta, buf.v);
    state.buffer = std::move(buf);
    return next;
}

namespace {

void adamw_block(Mat& p, const Mat& g, Mat& m, Mat& v, double eta, const AdamHyper& h, std::uint64_t t) {
    const double bc1 = 1.0 - std::pow(h.beta1, double(t));
    const double bc2 = 1.0 - std::pow(h.beta2, double(t));
    auto pd = p.data();
    auto gd = g.data();
    auto md = m.data();
    auto vd = v.data();
    for (std::size_t i = 0; i < pd.size(); ++i) {
        md[i] = h.beta1 * md[i] + (1.0 - h.beta1) * gd[i];
        vd[i] = h.beta2 * vd[i] + (1.0 - h.beta2) * gd[i] * gd[i];
        pd[i] *= 1.0 - eta * h.weight_decay;
        const double mhat = md[i] / bc1;
        const double vhat = vd[i] / bc2;
        pd[i] -= eta * mhat / (std::sqrt(vhat) + h.eps);
    }
}

} // namespace

FactorPair adamw_step(const FactorPair& factors, const FactorPair& grads, double eta, const AdamHyper& hyper,
                      AdamState& state) {
    require_same_shape(factors, grads, "adamw_step");
    FactorPair m = state.m ? *state.m : FactorPair::zeros(factors.d_out(), factors.d_in(), factors.rank());
    FactorPair v = state.v ? *state.v : FactorPair::zeros(factors.d_out(), factors.d_in(), factors.rank());
    const std::uint64_t t = state.t + 1;
    FactorPair next = factors;
    adamw_block(next.u, grads.u, m.u, v.u, eta, hyper, t);
    adamw_block(next.v, grads.v, m.v, v.v, eta, hyper, t);
    state.m = std::move(m);
    state.v = std::move(v);
    state.t = t;
    return next;
}

SvdLoraState::SvdLoraState(const FactorPair& init)
    : dense_weight(matmul(init.u, init.v, false, true)), dense_momentum(init.d_out(), init.d_in()) {}

SvdLoraState::SvdLoraState(Mat weight, Mat momentum) : dense_weight(std::move(weight)), dense_momentum(std::move(momentum)) {
    if (dense_weight.rows() != dense_momentum.rows() || dense_weight.cols() != dense_momentum.cols()) {
        throw ShapeError("SvdLoraState: weight and momentum shapes differ");
    }
}

FactorPair svdlora_step(SvdLoraState& state, const Mat& grad, double eta, double alpha, std::size_t r) {
    if (grad.rows() != state.dense_weight.rows() || grad.cols() != state.dense_weight.cols()) {
        throw ShapeError("svdlora_step: gradient shape does not match the dense adapter");
    }
    Mat weight = state.dense_weight;
    Mat momentum = state.dense_momentum;
    dense_sgd_step(weight, momentum, grad, eta, alpha);
    FactorPair projected = truncated_svd(weight, r);
    state.dense_weight = matmul(projected.u, projected.v, false, true);
    state.dense_momentum = std::move(momentum);
    return projected;
}

void dense_sgd_step(Mat& weight, Mat& buffer, const Mat& grad, double eta, double alpha) {
    if (alpha != 0.0) {
        buffer *= alpha;
        buffer += grad;
        weight.add_scaled(-eta, buffer);
    } else {
        buffer = grad;
        weight.add_scaled(-eta, grad);
    }
}

} // namespace oplora
