// Copyright (c) 2026, The OPLoRA C++ Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstddef>

#include "oplora/lowrank.hpp"
#include "oplora/matcore.hpp"

namespace oplora {

/// Symmetric positive (semi)definite scale D + delta*I with D = coeff * F F^T.
///
/// The identity kind ignores factor and delta. A damped_lowrank metric with
/// delta > 0 is always positive definite; with delta == 0 it cannot be
/// inverted, since F F^T is rank deficient for thin F.
class Metric {
public:
    enum class Kind { identity, damped_lowrank };

    Metric() = default;

    static Metric identity() { return {}; }
    static Metric damped_lowrank(Mat factor, double delta, double coeff = 1.0);

    Kind kind() const noexcept { return kind_; }
    bool is_identity() const noexcept { return kind_ == Kind::identity; }
    const Mat& factor() const noexcept { return factor_; }
    double coeff() const noexcept { return coeff_; }
    double delta() const noexcept { return delta_; }
    /// Number of columns of the factor (the inner dimension m).
    std::size_t inner_rank() const noexcept { return is_identity() ? 0 : factor_.cols(); }
    std::size_t scalar_count() const noexcept { return factor_.size(); }

    void set_factor(Mat factor);

private:
    Kind kind_ = Kind::identity;
    Mat factor_;
    double coeff_ = 1.0;
    double delta_ = 0.0;
};

/// (D + delta I) x using thin products.
Mat apply_metric(const Metric& m, const Mat& x);

/// (D + delta I)^{-1} x via Woodbury; only an m x m system is solved.
Mat apply_inverse_metric(const Metric& m, const Mat& x);

/// x^T (D + delta I) x, symmetrized.
Mat apply_metric_gram(const Metric& m, const Mat& x);

enum class StartTurn { in_first, out_first };
enum class LorsumMode { alternating, simultaneous };

struct LorsumConfig {
    int num_iters = 1;
    /// Proximal weight on the U factor, already multiplied by any step size.
    double lambda_u = 0.0;
    double lambda_v = 0.0;
    /// Extra proximal weight on both sides, relative to max(1, largest diagonal
    /// entry) of each half-step system. Keeps rank-deficient sums solvable.
    double relative_lambda = 0.0;
    StartTurn start_turn = StartTurn::in_first;
    LorsumMode mode = LorsumMode::alternating;
    /// Metrics with an inner rank above metric_rank_factor * r are rejected.
    std::size_t metric_rank_factor = 4;
};

/// Rank-r approximation of sum_i c_i L_i R_i^T by proximal alternating least squares.
///
/// terms[0] must be the anchor's own product (the iterate being updated); the
/// anchor also seeds the iteration and receives the proximal pull. One
/// iteration updates both factors; with in_first the V (input side) factor is
/// solved first from the current U estimate, then U from the fresh V:
///
///   V <- (c_0 V_0 U_0^T D_U U + sum_{i>0} c_i D_V^{-1} R_i L_i^T U + lambda_v V_0)
///        (U^T D_U U + lambda_v I)^{-1}
///   U <- (c_0 U_0 V_0^T D_V V + sum_{i>0} c_i D_U^{-1} L_i R_i^T V + lambda_u U_0)
///        (V^T D_V V + lambda_u I)^{-1}
///
/// where D_* are the damped metrics. Only thin products and r x r solves are
/// used; nothing of size d_out x d_in is allocated.
FactorPair lorsum(const FactorPair& anchor, const WeightedFactorSum& terms, const LorsumConfig& cfg,
                  const Metric& metric_u = Metric::identity(), const Metric& metric_v = Metric::identity());

/// Symmetric factor F (d x r) with F F^T equal to the PSD part of sym(u v^T),
/// for a pair whose product approximates a symmetric matrix. Columns beyond
/// the numerical rank are zero.
Mat symmetric_factor(const FactorPair& p);

} // namespace oplora
