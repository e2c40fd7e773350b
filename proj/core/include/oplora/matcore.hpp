// Copyright (c) 2026, The OPLoRA C++ Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstddef>
#include <initializer_list>
#include <random>
#include <span>
#include <vector>

namespace oplora {

/// Dense row-major matrix of doubles.
///
/// Every allocation is reported to oplora::instrument so that tests can audit
/// optimizer hot paths for full-size buffers. Construction from explicit data
/// rejects non-finite entries; results of arithmetic are not re-checked.
class Mat {
public:
    Mat() = default;
    Mat(std::size_t rows, std::size_t cols);
    Mat(std::size_t rows, std::size_t cols, std::vector<double> data);
    Mat(std::initializer_list<std::initializer_list<double>> rows);

    Mat(const Mat& other);
    Mat& operator=(const Mat& other);
    Mat(Mat&&) noexcept = default;
    Mat& operator=(Mat&&) noexcept = default;
    ~Mat() = default;

    static Mat identity(std::size_t n);
    static Mat diagonal(std::span<const double> values);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const noexcept { return data_[i * cols_ + j]; }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::span<double> row(std::size_t i) noexcept { return {data_.data() + i * cols_, cols_}; }
    std::span<const double> row(std::size_t i) const noexcept { return {data_.data() + i * cols_, cols_}; }

    Mat transposed() const;
    Mat col(std::size_t j) const;
    /// Columns [begin, begin + count).
    Mat cols_range(std::size_t begin, std::size_t count) const;

    Mat& operator+=(const Mat& other);
    Mat& operator-=(const Mat& other);
    Mat& operator*=(double s) noexcept;
    /// this += s * other
    Mat& add_scaled(double s, const Mat& other);

    double frobenius_norm() const noexcept;
    double max_abs() const noexcept;
    bool all_finite() const noexcept;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Mat operator+(Mat a, const Mat& b);
Mat operator-(Mat a, const Mat& b);
Mat operator*(double s, Mat a);

/// op(a) * op(b) with op = transpose when the flag is set. Summation runs over
/// the inner index in ascending order for every layout, so results are
/// bit-reproducible.
Mat matmul(const Mat& a, const Mat& b, bool transpose_a = false, bool transpose_b = false);

struct SolveOptions {
    std::size_t max_dim = 512;
    double symmetry_tol = 1e-10;
    /// A Cholesky pivot at or below pivot_tol * max(diag(a)) is reported singular.
    double pivot_tol = 1e-12;
};

/// Solves a x = b for symmetric positive definite a via Cholesky.
Mat solve_spd(const Mat& a, const Mat& b, const SolveOptions& opts = {});

struct QrResult {
    Mat q;
    Mat r;
};

/// Householder thin QR of a d x r matrix (d >= r), diag(r) >= 0.
QrResult thin_qr(const Mat& a);

struct SvdResult {
    Mat u;                    // m x p, p = min(m, n)
    std::vector<double> sigma; // nonincreasing
    Mat v;                    // n x p
};

struct SvdOptions {
    int max_sweeps = 100;
};

/// Thin SVD by one-sided Jacobi (preceded by a QR when the matrix is tall).
/// Sign convention: the first nonzero entry of every left singular vector is
/// nonnegative. Oracle and baseline paths only.
SvdResult svd_dense(const Mat& a, const SvdOptions& opts = {});

Mat sample_columns(const Mat& w, std::span<const std::size_t> indices);

/// Horizontal concatenation [a b].
Mat hcat(const Mat& a, const Mat& b);

double frobenius_distance(const Mat& a, const Mat& b);
double max_abs_diff(const Mat& a, const Mat& b);

/// i.i.d. N(0, scale^2) entries.
Mat random_gaussian(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double scale = 1.0);

} // namespace oplora
