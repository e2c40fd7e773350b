// Copyright (c) 2026, The OPLoRA C++ Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>

#include "oplora/lorsum.hpp"
#include "oplora/lowrank.hpp"
#include "oplora/matcore.hpp"
#include "oplora/nets.hpp"

namespace oplora {

struct OploraHyper {
    double eta = 0.1;
    /// Heavy-ball momentum coefficient in [0, 1). 0 disables the buffer.
    double alpha = 0.0;
    /// Factor weight decay; the proximal weight handed to lorsum is eta * lambda.
    double lambda = 1e-3;
    /// Scale smoothing in (0, 1]; 1 disables the K-FAC metrics.
    double beta = 1.0;
    /// Damping added to both metrics.
    double delta = 1e-4;
    /// Alternating iterations per lorsum call.
    int num_iters = 1;
    /// 0 means "same as the adapter rank".
    std::size_t momentum_rank = 0;
    std::size_t metric_rank = 0;
    StartTurn start_turn = StartTurn::in_first;
    LorsumMode mode = LorsumMode::alternating;
    /// Relative proximal weight for the momentum and metric tracking sums.
    /// Small but nonzero so that rank-deficient sums stay solvable.
    double tracking_lambda = 1e-10;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Persistent per-layer state of OPLoRA: the low-rank momentum buffer and the
/// K-FAC metric factors. Both are created lazily on the first step.
struct OploraState {
    OploraHyper hyper;
    std::optional<FactorPair> momentum;
    std::optional<Metric> metric_u;
    std::optional<Metric> metric_v;
    std::uint64_t steps = 0;

    OploraState() = default;
    explicit OploraState(OploraHyper h) : hyper(h) { hyper.validate(); }

    bool scaling_enabled() const noexcept { return hyper.beta < 1.0; }
    /// Scalars held across steps (momentum factors plus metric factors).
    std::size_t scalar_count() const noexcept;
};

/// One (scaled) OPLoRA step on a layer with fresh captures. Updates the
/// adapter, the momentum buffer and the metrics, then clears the captures.
/// On error neither the layer nor the state is modified.
const FactorPair& oplora_step(LoraLinear& layer, OploraState& state);

/// Rank-m symmetric EMA update of both metrics from a batch:
/// D_V <- beta D_V + (1 - beta) X^T X / B and D_U likewise with S.
void kfac_scale_update(OploraState& state, const Mat& x_batch, const Mat& s_batch, double beta);

/// Low-rank momentum: M <- lorsum(alpha M + G) with G = S^T X.
FactorPair momentum_update_lor(const FactorPair& momentum, const FactorTerm& gradient, double alpha,
                               const LorsumConfig& cfg);

/// Preconditioned LoRA (ScaledGD / Riemannian preconditioning), both factors
/// from the pre-step point:
///   U <- U - eta G V (V^T V + lambda I)^{-1},  V <- V - eta G^T U (U^T U + lambda I)^{-1}
/// Consumes the layer's captures.
const FactorPair& prec_lora_step(LoraLinear& layer, double eta, double lambda);

/// Same step computed from explicit inputs, without touching a layer.
FactorPair prec_lora_update(const FactorPair& factors, const FactorPair& factor_grads, double eta, double lambda);

// ---------------------------------------------------------------------------
// Momentum on preconditioned factor gradients (the projected buffer follows
// the factor subspaces, the naive one does not).

struct FactorMomentumState {
    double alpha = 0.0;
    std::optional<Mat> momentum_u;
    std::optional<Mat> momentum_v;
    /// Factors at the previous step, used to re-project the projected buffer.
    std::optional<Mat> prev_u;
    std::optional<Mat> prev_v;

    std::size_t scalar_count() const noexcept;
};

/// M_U <- G_U (V^T V + lambda I)^{-1} + alpha M_U V_prev^T V (V^T V + lambda I)^{-1}, and the
/// mirrored V-side recursion. Returns the new buffers (the factor steps before
/// scaling by -eta) and stores the current factors as the next step's previous ones.
FactorPair momentum_update_proj(FactorMomentumState& state, const FactorPair& factors, const FactorPair& factor_grads,
                                double lambda);

/// M_U <- G_U (V^T V + lambda I)^{-1} + alpha M_U, likewise for V.
FactorPair momentum_update_naive(FactorMomentumState& state, const FactorPair& factors,
                                 const FactorPair& factor_grads, double lambda);

// ---------------------------------------------------------------------------
// First-order baselines treating U and V as independent parameter blocks.

struct SgdState {
    std::optional<FactorPair> buffer;
};

/// Heavy ball: M <- alpha M + g, p <- p - eta M.
FactorPair sgd_step(const FactorPair& factors, const FactorPair& grads, double eta, double alpha, SgdState& state);

struct AdamHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-2;
};

struct AdamState {
    std::optional<FactorPair> m;
    std::optional<FactorPair> v;
    std::uint64_t t = 0;
};

/// AdamW with bias correction and decoupled weight decay p <- p (1 - eta wd).
FactorPair adamw_step(const FactorPair& factors, const FactorPair& grads, double eta, const AdamHyper& hyper,
                      AdamState& state);

// ---------------------------------------------------------------------------
// Dense oracle baseline.

struct SvdLoraState {
    Mat dense_weight;
    Mat dense_momentum;

    SvdLoraState() = default;
    /// Starts from the product of the given adapter with a zero momentum.
    explicit SvdLoraState(const FactorPair& init);
    SvdLoraState(Mat weight, Mat momentum);
};

/// Full dense heavy-ball step, then projection of the dense adapter onto its
/// best rank-r approximation. Momentum stays full rank.
FactorPair svdlora_step(SvdLoraState& state, const Mat& grad, double eta, double alpha, std::size_t r);

/// Dense heavy-ball step without projection (full training).
void dense_sgd_step(Mat& weight, Mat& buffer, const Mat& grad, double eta, double alpha);

} // namespace oplora
