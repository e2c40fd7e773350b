// Copyright (c) 2026, The OPLoRA C++ Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstddef>
#include <vector>

#include "oplora/matcore.hpp"

namespace oplora {

/// Rank-r factorization representing u * v^T, u: d_out x r, v: d_in x r.
struct FactorPair {
    Mat u;
    Mat v;

    FactorPair() = default;
    FactorPair(Mat u_, Mat v_);

    std::size_t rank() const noexcept { return u.cols(); }
    std::size_t d_out() const noexcept { return u.rows(); }
    std::size_t d_in() const noexcept { return v.rows(); }
    std::size_t parameter_count() const noexcept { return u.size() + v.size(); }

    /// All-zero pair.
    static FactorPair zeros(std::size_t d_out, std::size_t d_in, std::size_t rank);
};

/// One summand coeff * L * R^T of a WeightedFactorSum.
///
/// A factor may be stored transposed (k x d instead of d x k) so that batch
/// captures such as X (B x d_in) enter a sum without being copied.
struct FactorTerm {
    double coeff = 1.0;
    Mat left;
    Mat right;
    bool left_transposed = false;
    bool right_transposed = false;

    std::size_t d_out() const noexcept { return left_transposed ? left.cols() : left.rows(); }
    std::size_t d_in() const noexcept { return right_transposed ? right.cols() : right.rows(); }
    std::size_t inner() const noexcept { return left_transposed ? left.rows() : left.cols(); }

    /// L * x for x: k x c.
    Mat left_times(const Mat& x) const;
    /// R * x for x: k x c.
    Mat right_times(const Mat& x) const;
    /// L^T * y for y: d_out x c.
    Mat left_t_times(const Mat& y) const;
    /// R^T * y for y: d_in x c.
    Mat right_t_times(const Mat& y) const;
};

/// Sum of coeff_i * L_i * R_i^T terms, never formed densely on hot paths.
class WeightedFactorSum {
public:
    WeightedFactorSum() = default;

    WeightedFactorSum& add(double coeff, Mat left, Mat right);
    WeightedFactorSum& add(double coeff, const FactorPair& pair);
    WeightedFactorSum& add(FactorTerm term);

    const std::vector<FactorTerm>& terms() const noexcept { return terms_; }
    bool empty() const noexcept { return terms_.empty(); }
    std::size_t d_out() const;
    std::size_t d_in() const;
    std::size_t max_inner() const noexcept;

    /// sum_i c_i L_i (R_i^T y), y: d_in x c. Result d_out x c.
    Mat times(const Mat& y) const;
    /// sum_i c_i R_i (L_i^T x), x: d_out x c. Result d_in x c.
    Mat transpose_times(const Mat& x) const;

private:
    std::vector<FactorTerm> terms_;
};

struct DenseCap {
    std::size_t max_elements = std::size_t{1} << 22;
};

/// Dense sum_i c_i L_i R_i^T. Oracle and test paths only: every call is
/// counted by instrument::counters().materialize_calls.
Mat materialize(const WeightedFactorSum& s, DenseCap cap = {});
Mat materialize(const FactorPair& p, DenseCap cap = {});

/// Balanced factors (U_r S_r^{1/2}, V_r S_r^{1/2}) of the best rank-r approximation.
FactorPair truncated_svd(const Mat& w, std::size_t r);

/// a^T a, symmetrized.
Mat gram(const Mat& a);

/// x (x^T x + lambda I)^{-1} x^T target.
Mat project_onto_colspace(const Mat& x, const Mat& target, double lambda = 0.0);

} // namespace oplora
