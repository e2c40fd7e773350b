// Copyright (c) 2026, The OPLoRA C++ Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "oplora/lowrank.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>

#include "oplora/errors.hpp"
#include "oplora/instrument.hpp"

namespace oplora {

FactorPair::FactorPair(Mat u_, Mat v_) : u(std::move(u_)), v(std::move(v_)) {
    if (u.cols() != v.cols()) {
        throw ShapeError(fmt::format("FactorPair: rank mismatch {} vs {}", u.cols(), v.cols()));
    }
    if (u.cols() > std::min(u.rows(), v.rows())) {
        throw ShapeError(fmt::format("FactorPair: rank {} exceeds min({}, {})", u.cols(), u.rows(), v.rows()));
    }
}

FactorPair FactorPair::zeros(std::size_t d_out, std::size_t d_in, std::size_t rank) {
    return FactorPair(Mat(d_out, rank), Mat(d_in, rank));
}

Mat FactorTerm::left_times(const Mat& x) const { return matmul(left, x, left_transposed, false); }

Mat FactorTerm::right_times(const Mat& x) const { return matmul(right, x, right_transposed, false); }

Mat FactorTerm::left_t_times(const Mat& y) const { return matmul(left, y, !left_transposed, false); }

Mat FactorTerm::right_t_times(const Mat& y) const { return matmul(right, y, !right_transposed, false); }

WeightedFactorSum& WeightedFactorSum::add(double coeff, Mat left, Mat right) {
    FactorTerm t;
    t.coeff = coeff;
    t.left = std::move(left);
    t.right = std::move(right);
    return add(std::move(t));
}

WeightedFactorSum& WeightedFactorSum::add(double coeff, const FactorPair& pair) { return add(coeff, pair.u, pair.v); }

WeightedFactorSum& WeightedFactorSum::add(FactorTerm term) {
    const auto k_left = term.left_transposed ? term.left.rows() : term.left.cols();
    const auto k_right = term.right_transposed ? term.right.rows() : term.right.cols();
    if (k_left != k_right) {
        throw ShapeError(fmt::format("WeightedFactorSum: term inner dims {} vs {}", k_left, k_right));
    }
    if (!terms_.empty() && (term.d_out() != d_out() || term.d_in() != d_in())) {
        throw ShapeError(fmt::format("WeightedFactorSum: term is {}x{}, sum is {}x{}", term.d_out(), term.d_in(),
                                     d_out(), d_in()));
    }
    terms_.push_back(std::move(term));
    return *this;
}

std::size_t WeightedFactorSum::d_out() const {
    if (terms_.empty()) {
        throw ShapeError("WeightedFactorSum: empty sum");
    }
    return terms_.front().d_out();
}

std::size_t WeightedFactorSum::d_in() const {
    if (terms_.empty()) {
        throw ShapeError("WeightedFactorSum: empty sum");
    }
    return terms_.front().d_in();
}

std::size_t WeightedFactorSum::max_inner() const noexcept {
    std::size_t k = 0;
    for (const auto& t : terms_) {
        k = std::max(k, t.inner());
    }
    return k;
}

Mat WeightedFactorSum::times(const Mat& y) const {
    Mat out(d_out(), y.cols());
    for (const auto& t : terms_) {
        out.add_scaled(t.coeff, t.left_times(t.right_t_times(y)));
    }
    return out;
}

Mat WeightedFactorSum::transpose_times(const Mat& x) const {
    Mat out(d_in(), x.cols());
    for (const auto& t : terms_) {
        out.add_scaled(t.coeff, t.right_times(t.left_t_times(x)));
    }
    return out;
}

Mat materialize(const WeightedFactorSum& s, DenseCap cap) {
    instrument::on_materialize();
    const auto rows = s.d_out();
    const auto cols = s.d_in();
    if (rows * cols > cap.max_elements) {
        throw PolicyError(fmt::format("materialize: {}x{} exceeds the dense cap of {} scalars", rows, cols,
                                      cap.max_elements));
    }
    Mat out(rows, cols);
    for (const auto& t : s.terms()) {
        out.add_scaled(t.coeff, matmul(t.left, t.right, t.left_transposed, !t.right_transposed));
    }
    return out;
}

Mat materialize(const FactorPair& p, DenseCap cap) {
    WeightedFactorSum s;
    s.add(1.0, p);
    return materialize(s, cap);
}

FactorPair truncated_svd(const Mat& w, std::size_t r) {
    if (r > std::min(w.rows(), w.cols())) {
        throw ShapeError(fmt::format("truncated_svd: rank {} exceeds min({}, {})", r, w.rows(), w.cols()));
    }
    const auto svd = svd_dense(w);
    Mat u(w.rows(), r);
    Mat v(w.cols(), r);
    for (std::size_t k = 0; k < r; ++k) {
        const double s = std::sqrt(svd.sigma[k]);
        for (std::size_t i = 0; i < w.rows(); ++i) {
            u(i, k) = svd.u(i, k) * s;
        }
        for (std::size_t i = 0; i < w.cols(); ++i) {
            v(i, k) = svd.v(i, k) * s;
        }
    }
    return FactorPair(std::move(u), std::move(v));
}

Mat gram(const Mat& a) {
    Mat g = matmul(a, a, true, false);
    for (std::size_t i = 0; i < g.rows(); ++i) {
        for (std::size_t j = i + 1; j < g.cols(); ++j) {
            const double s = 0.5 * (g(i, j) + g(j, i));
            g(i, j) = s;
            g(j, i) = s;
        }
    }
    return g;
}

Mat project_onto_colspace(const Mat& x, const Mat& target, double lambda) {
    if (x.rows() != target.rows()) {
        throw ShapeError(fmt::format("project_onto_colspace: {} rows vs {}", x.rows(), target.rows()));
    }
    Mat g = gram(x);
    for (std::size_t i = 0; i < g.rows(); ++i) {
        g(i, i) += lambda;
    }
    return matmul(x, solve_spd(g, matmul(x, target, true, false)));
}

} // namespace oplora
