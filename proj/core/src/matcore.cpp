// Copyright (c) 2026, The OPLoRA C++ Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "oplora/matcore.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>
#include <limits>
#include <numeric>

#include "oplora/errors.hpp"
#include "oplora/instrument.hpp"

namespace oplora {

namespace {

void require_same_shape(const Mat& a, const Mat& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError(fmt::format("{}: {}x{} vs {}x{}", op, a.rows(), a.cols(), b.rows(), b.cols()));
    }
}

double dot(const double* x, const double* y, std::size_t n) noexcept {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        s += x[i] * y[i];
    }
    return s;
}

} // namespace

Mat::Mat(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {
    instrument::on_allocation(rows, cols);
}

Mat::Mat(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows * cols) {
        throw ShapeError(fmt::format("Mat: {} values for a {}x{} matrix", data_.size(), rows, cols));
    }
    if (!all_finite()) {
        throw DegenerateInputError("Mat: non-finite entry");
    }
    instrument::on_allocation(rows, cols);
}

Mat::Mat(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
        if (r.size() != cols_) {
            throw ShapeError("Mat: ragged initializer");
        }
        data_.insert(data_.end(), r.begin(), r.end());
    }
    if (!all_finite()) {
        throw DegenerateInputError("Mat: non-finite entry");
    }
    instrument::on_allocation(rows_, cols_);
}

Mat::Mat(const Mat& other) : rows_(other.rows_), cols_(other.cols_), data_(other.data_) {
    instrument::on_allocation(rows_, cols_);
}

Mat& Mat::operator=(const Mat& other) {
    if (this != &other) {
        rows_ = other.rows_;
        cols_ = other.cols_;
        data_ = other.data_;
        instrument::on_allocation(rows_, cols_);
    }
    return *this;
}

Mat Mat::identity(std::size_t n) {
    Mat m(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        m(i, i) = 1.0;
    }
    return m;
}

Mat Mat::diagonal(std::span<const double> values) {
    Mat m(values.size(), values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        m(i, i) = values[i];
    }
    return m;
}

Mat Mat::transposed() const {
    Mat t(cols_, rows_);
    for (std::size_t i = 0; i < rows_; ++i) {
        for (std::size_t j = 0; j < cols_; ++j) {
            t(j, i) = (*this)(i, j);
        }
    }
    return t;
}

Mat Mat::col(std::size_t j) const { return cols_range(j, 1); }

Mat Mat::cols_range(std::size_t begin, std::size_t count) const {
    if (begin + count > cols_) {
        throw ShapeError(fmt::format("cols_range: [{}, {}) of {} columns", begin, begin + count, cols_));
    }
    Mat out(rows_, count);
    for (std::size_t i = 0; i < rows_; ++i) {
        std::copy_n(data_.data() + i * cols_ + begin, count, out.data_.data() + i * count);
    }
    return out;
}

Mat& Mat::operator+=(const Mat& other) { return add_scaled(1.0, other); }

Mat& Mat::operator-=(const Mat& other) { return add_scaled(-1.0, other); }

Mat& Mat::operator*=(double s) noexcept {
    for (auto& x : data_) {
        x *= s;
    }
    instrument::add_flops(data_.size());
    return *this;
}

Mat& Mat::add_scaled(double s, const Mat& other) {
    require_same_shape(*this, other, "add_scaled");
    for (std::size_t i = 0; i < data_.size(); ++i) {
        data_[i] += s * other.data_[i];
    }
    instrument::add_flops(2 * data_.size());
    return *this;
}

double Mat::frobenius_norm() const noexcept {
    // Scaled accumulation keeps tiny and huge entries from under/overflowing.
    double scale = max_abs();
    if (scale == 0.0 || !std::isfinite(scale)) {
        return scale;
    }
    double s = 0.0;
    for (double x : data_) {
        const double y = x / scale;
        s += y * y;
    }
    return scale * std::sqrt(s);
}

double Mat::max_abs() const noexcept {
    double m = 0.0;
    for (double x : data_) {
        m = std::max(m, std::abs(x));
    }
    return m;
}

bool Mat::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

Mat operator+(Mat a, const Mat& b) { return std::move(a += b); }

Mat operator-(Mat a, const Mat& b) { return std::move(a -= b); }

Mat operator*(double s, Mat a) { return std::move(a *= s); }

Mat matmul(const Mat& a, const Mat& b, bool transpose_a, bool transpose_b) {
    const std::size_t m = transpose_a ? a.cols() : a.rows();
    const std::size_t k = transpose_a ? a.rows() : a.cols();
    const std::size_t kb = transpose_b ? b.cols() : b.rows();
    const std::size_t n = transpose_b ? b.rows() : b.cols();
    if (k != kb) {
        throw ShapeError(fmt::format("matmul: inner dimensions {} and {}", k, kb));
    }
    Mat c(m, n);
    instrument::add_flops(2ULL * m * n * k);
    if (m == 0 || n == 0 || k == 0) {
        return c;
    }
    const double* A = a.data().data();
    const double* B = b.data().data();
    double* C = c.data().data();
    const std::size_t lda = a.cols();
    const std::size_t ldb = b.cols();

    if (!transpose_a && !transpose_b) {
        for (std::size_t i = 0; i < m; ++i) {
            double* ci = C + i * n;
            for (std::size_t p = 0; p < k; ++p) {
                const double aip = A[i * lda + p];
                const double* bp = B + p * ldb;
                for (std::size_t j = 0; j < n; ++j) {
                    ci[j] += aip * bp[j];
                }
            }
        }
    } else if (transpose_a && !transpose_b) {
        for (std::size_t i = 0; i < m; ++i) {
            double* ci = C + i * n;
            for (std::size_t p = 0; p < k; ++p) {
                const double aip = A[p * lda + i];
                const double* bp = B + p * ldb;
                for (std::size_t j = 0; j < n; ++j) {
                    ci[j] += aip * bp[j];
                }
            }
        }
    } else if (!transpose_a && transpose_b) {
        for (std::size_t i = 0; i < m; ++i) {
            const double* ai = A + i * lda;
            for (std::size_t j = 0; j < n; ++j) {
                C[i * n + j] = dot(ai, B + j * ldb, k);
            }
        }
    } else {
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                double s = 0.0;
                for (std::size_t p = 0; p < k; ++p) {
                    s += A[p * lda + i] * B[j * ldb + p];
                }
                C[i * n + j] = s;
            }
        }
    }
    return c;
}

Mat solve_spd(const Mat& a, const Mat& b, const SolveOptions& opts) {
    const std::size_t n = a.rows();
    if (a.cols() != n) {
        throw ShapeError(fmt::format("solve_spd: {}x{} system is not square", a.rows(), a.cols()));
    }
    if (b.rows() != n) {
        throw ShapeError(fmt::format("solve_spd: rhs has {} rows, system has {}", b.rows(), n));
    }
    if (n > opts.max_dim) {
        throw PolicyError(fmt::format("solve_spd: dimension {} exceeds the cap {}", n, opts.max_dim));
    }
    const double sym_tol = opts.symmetry_tol * std::max(1.0, a.max_abs());
    double max_diag = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        max_diag = std::max(max_diag, a(i, i));
        for (std::size_t j = i + 1; j < n; ++j) {
            if (!(std::abs(a(i, j) - a(j, i)) <= sym_tol)) {
                throw ShapeError(fmt::format("solve_spd: matrix is not symmetric at ({}, {})", i, j));
            }
        }
    }

    // Lower Cholesky factor, in place over a copy of the lower triangle.
    Mat l(n, n);
    const double pivot_floor = opts.pivot_tol * max_diag;
    for (std::size_t j = 0; j < n; ++j) {
        double d = a(j, j);
        for (std::size_t p = 0; p < j; ++p) {
            d -= l(j, p) * l(j, p);
        }
        if (!(d > pivot_floor) || !(max_diag > 0.0)) {
            throw SingularMetricError(fmt::format("solve_spd: non-positive pivot {} at index {}", d, j), j);
        }
        const double ljj = std::sqrt(d);
        l(j, j) = ljj;
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = a(i, j);
            for (std::size_t p = 0; p < j; ++p) {
                s -= l(i, p) * l(j, p);
            }
            l(i, j) = s / ljj;
        }
    }

    const std::size_t m = b.cols();
    Mat x = b;
    for (std::size_t c = 0; c < m; ++c) {
        for (std::size_t i = 0; i < n; ++i) {
            double s = x(i, c);
            for (std::size_t p = 0; p < i; ++p) {
                s -= l(i, p) * x(p, c);
            }
            x(i, c) = s / l(i, i);
        }
        for (std::size_t ii = n; ii-- > 0;) {
            double s = x(ii, c);
            for (std::size_t p = ii + 1; p < n; ++p) {
                s -= l(p, ii) * x(p, c);
            }
            x(ii, c) = s / l(ii, ii);
        }
    }
    instrument::add_flops(n * n * n / 3 + 2ULL * n * n * m);
    return x;
}

namespace {

// Householder QR without rank checks. Returns thin Q (m x n) and R (n x n)
// with nonnegative diagonal.
QrResult householder_qr(const Mat& a) {
    const std::size_t m = a.rows();
    const std::size_t n = a.cols();
    Mat r = a;
    std::vector<std::vector<double>> reflectors(n);

    for (std::size_t k = 0; k < n; ++k) {
        double norm = 0.0;
        for (std::size_t i = k; i < m; ++i) {
            norm += r(i, k) * r(i, k);
        }
        norm = std::sqrt(norm);
        if (norm == 0.0) {
            continue;
        }
        const double alpha = r(k, k) > 0.0 ? -norm : norm;
        std::vector<double> v(m - k);
        for (std::size_t i = k; i < m; ++i) {
            v[i - k] = r(i, k);
        }
        v[0] -= alpha;
        const double vnorm2 = std::inner_product(v.begin(), v.end(), v.begin(), 0.0);
        if (vnorm2 == 0.0) {
            continue;
        }
        for (std::size_t j = k; j < n; ++j) {
            double s = 0.0;
            for (std::size_t i = k; i < m; ++i) {
                s += v[i - k] * r(i, j);
            }
            const double f = 2.0 * s / vnorm2;
            for (std::size_t i = k; i < m; ++i) {
                r(i, j) -= f * v[i - k];
            }
        }
        for (auto& x : v) {
            x /= std::sqrt(vnorm2);
        }
        reflectors[k] = std::move(v);
    }

    Mat q(m, n);
    for (std::size_t j = 0; j < n; ++j) {
        q(j, j) = 1.0;
    }
    for (std::size_t kk = n; kk-- > 0;) {
        const auto& v = reflectors[kk];
        if (v.empty()) {
            continue;
        }
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t i = kk; i < m; ++i) {
                s += v[i - kk] * q(i, j);
            }
            for (std::size_t i = kk; i < m; ++i) {
                q(i, j) -= 2.0 * s * v[i - kk];
            }
        }
    }

    Mat rr(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        const double sign = r(i, i) < 0.0 ? -1.0 : 1.0;
        for (std::size_t j = i; j < n; ++j) {
            rr(i, j) = sign * r(i, j);
        }
        if (sign < 0.0) {
            for (std::size_t p = 0; p < m; ++p) {
                q(p, i) = -q(p, i);
            }
        }
    }
    instrument::add_flops(4ULL * m * n * n);
    return {std::move(q), std::move(rr)};
}

// One-sided Jacobi on the columns of a square-or-tall matrix held transposed:
// row j of `cols` is column j of the working matrix, row j of `vt` is column j
// of the accumulated right rotations.
void jacobi_sweeps(std::vector<std::vector<double>>& cols, std::vector<std::vector<double>>& vt, int max_sweeps) {
    const std::size_t n = cols.size();
    if (n < 2) {
        return;
    }
    const std::size_t m = cols[0].size();
    const double eps = 2.0 * std::numeric_limits<double>::epsilon();
    std::vector<double> norms(n);
    std::uint64_t flops = 0;

    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        for (std::size_t j = 0; j < n; ++j) {
            norms[j] = dot(cols[j].data(), cols[j].data(), m);
        }
        flops += 2ULL * n * m;
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double alpha = norms[p];
                const double beta = norms[q];
                if (alpha == 0.0 || beta == 0.0) {
                    continue;
                }
                const double gamma = dot(cols[p].data(), cols[q].data(), m);
                flops += 2ULL * m;
                if (!(std::abs(gamma) > eps * std::sqrt(alpha * beta))) {
                    continue;
                }
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                double* xp = cols[p].data();
                double* xq = cols[q].data();
                for (std::size_t i = 0; i < m; ++i) {
                    const double a = xp[i];
                    const double b = xq[i];
                    xp[i] = c * a - s * b;
                    xq[i] = s * a + c * b;
                }
                double* vp = vt[p].data();
                double* vq = vt[q].data();
                for (std::size_t i = 0; i < vt[p].size(); ++i) {
                    const double a = vp[i];
                    const double b = vq[i];
                    vp[i] = c * a - s * b;
                    vq[i] = s * a + c * b;
                }
                flops += 6ULL * (m + vt[p].size());
                norms[p] = alpha - t * gamma;
                norms[q] = beta + t * gamma;
            }
        }
        if (!rotated) {
            instrument::add_flops(flops);
            return;
        }
    }
    instrument::add_flops(flops);
    throw ConvergenceError(fmt::format("svd_dense: no convergence after {} Jacobi sweeps", max_sweeps));
}

// Completes the columns of u flagged in `missing` to an orthonormal set using
// canonical basis vectors.
void complete_basis(Mat& u, const std::vector<bool>& missing) {
    const std::size_t m = u.rows();
    const std::size_t p = u.cols();
    std::vector<std::size_t> have;
    for (std::size_t j = 0; j < p; ++j) {
        if (!missing[j]) {
            have.push_back(j);
        }
    }
    std::size_t next_e = 0;
    for (std::size_t j = 0; j < p; ++j) {
        if (!missing[j]) {
            continue;
        }
        std::vector<double> best;
        double best_norm = -1.0;
        for (std::size_t e = next_e; e < m; ++e) {
            std::vector<double> x(m, 0.0);
            x[e] = 1.0;
            for (int pass = 0; pass < 2; ++pass) {
                for (std::size_t h : have) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < m; ++i) {
                        s += u(i, h) * x[i];
                    }
                    for (std::size_t i = 0; i < m; ++i) {
                        x[i] -= s * u(i, h);
                    }
                }
            }
            const double nx = std::sqrt(std::inner_product(x.begin(), x.end(), x.begin(), 0.0));
            if (nx > best_norm) {
                best_norm = nx;
                best = std::move(x);
                next_e = e + 1;
            }
            if (best_norm > 0.5) {
                break;
            }
        }
        for (std::size_t i = 0; i < m; ++i) {
            u(i, j) = best[i] / best_norm;
        }
        have.push_back(j);
    }
}

// Flips singular pairs so the first nonzero entry of each left singular
// vector is nonnegative.
void apply_sign_convention(Mat& u, Mat& v) {
    for (std::size_t k = 0; k < u.cols(); ++k) {
        double colmax = 0.0;
        for (std::size_t i = 0; i < u.rows(); ++i) {
            colmax = std::max(colmax, std::abs(u(i, k)));
        }
        for (std::size_t i = 0; i < u.rows(); ++i) {
            const double x = u(i, k);
            if (std::abs(x) <= 1e-12 * colmax) {
                continue;
            }
            if (x < 0.0) {
                for (std::size_t r = 0; r < u.rows(); ++r) {
                    u(r, k) = -u(r, k);
                }
                for (std::size_t r = 0; r < v.rows(); ++r) {
                    v(r, k) = -v(r, k);
                }
            }
            break;
        }
    }
}

SvdResult svd_tall(const Mat& a, const SvdOptions& opts) {
    const std::size_t m = a.rows();
    const std::size_t n = a.cols();

    // Jacobi on R from a QR of a tall matrix; U = Q * U_R afterwards.
    const bool use_qr = m > n;
    QrResult qr;
    const Mat* work = &a;
    if (use_qr) {
        qr = householder_qr(a);
        work = &qr.r;
    }
    const std::size_t wm = work->rows();

    std::vector<std::vector<double>> cols(n, std::vector<double>(wm));
    std::vector<std::vector<double>> vt(n, std::vector<double>(n, 0.0));
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t i = 0; i < wm; ++i) {
            cols[j][i] = (*work)(i, j);
        }
        vt[j][j] = 1.0;
    }
    jacobi_sweeps(cols, vt, opts.max_sweeps);

    std::vector<double> sigma(n);
    for (std::size_t j = 0; j < n; ++j) {
        sigma[j] = std::sqrt(dot(cols[j].data(), cols[j].data(), wm));
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

    const double smax = n > 0 ? sigma[order[0]] : 0.0;
    const double zero_tol = smax * static_cast<double>(std::max(m, n)) * std::numeric_limits<double>::epsilon();

    SvdResult out;
    out.sigma.resize(n);
    Mat uw(wm, n);
    out.v = Mat(n, n);
    std::vector<bool> missing(n, false);
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t j = order[k];
        out.sigma[k] = sigma[j];
        for (std::size_t i = 0; i < n; ++i) {
            out.v(i, k) = vt[j][i];
        }
        if (sigma[j] <= zero_tol || sigma[j] == 0.0) {
            missing[k] = true;
            continue;
        }
        for (std::size_t i = 0; i < wm; ++i) {
            uw(i, k) = cols[j][i] / sigma[j];
        }
    }
    if (std::find(missing.begin(), missing.end(), true) != missing.end()) {
        complete_basis(uw, missing);
    }
    out.u = use_qr ? matmul(qr.q, uw) : std::move(uw);

    apply_sign_convention(out.u, out.v);
    return out;
}

} // namespace

QrResult thin_qr(const Mat& a) {
    if (a.rows() < a.cols()) {
        throw ShapeError(fmt::format("thin_qr: {}x{} is wider than tall", a.rows(), a.cols()));
    }
    auto qr = householder_qr(a);
    const double scale = a.frobenius_norm();
    for (std::size_t i = 0; i < qr.r.rows(); ++i) {
        if (!(qr.r(i, i) > 1e-12 * scale)) {
            throw DegenerateInputError(fmt::format("thin_qr: column {} is linearly dependent", i));
        }
    }
    return qr;
}

SvdResult svd_dense(const Mat& a, const SvdOptions& opts) {
    if (!a.all_finite()) {
        throw ConvergenceError("svd_dense: non-finite input");
    }
    if (a.rows() >= a.cols()) {
        return svd_tall(a, opts);
    }
    auto t = svd_tall(a.transposed(), opts);
    SvdResult out{std::move(t.v), std::move(t.sigma), std::move(t.u)};
    apply_sign_convention(out.u, out.v);
    return out;
}

Mat sample_columns(const Mat& w, std::span<const std::size_t> indices) {
    Mat out(w.rows(), indices.size());
    for (std::size_t c = 0; c < indices.size(); ++c) {
        if (indices[c] >= w.cols()) {
            throw ShapeError(fmt::format("sample_columns: index {} out of range for {} columns", indices[c], w.cols()));
        }
    }
    for (std::size_t i = 0; i < w.rows(); ++i) {
        for (std::size_t c = 0; c < indices.size(); ++c) {
            out(i, c) = w(i, indices[c]);
        }
    }
    return out;
}

Mat hcat(const Mat& a, const Mat& b) {
    if (a.rows() != b.rows()) {
        throw ShapeError(fmt::format("hcat: {} rows vs {}", a.rows(), b.rows()));
    }
    Mat out(a.rows(), a.cols() + b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        std::copy(a.row(i).begin(), a.row(i).end(), out.row(i).begin());
        std::copy(b.row(i).begin(), b.row(i).end(), out.row(i).begin() + a.cols());
    }
    return out;
}

double frobenius_distance(const Mat& a, const Mat& b) {
    require_same_shape(a, b, "frobenius_distance");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a.data()[i] - b.data()[i];
        s += d * d;
    }
    return std::sqrt(s);
}

double max_abs_diff(const Mat& a, const Mat& b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    }
    return m;
}

Mat random_gaussian(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double scale) {
    std::normal_distribution<double> dist(0.0, scale);
    Mat m(rows, cols);
    for (auto& x : m.data()) {
        x = dist(rng);
    }
    return m;
}

} // namespace oplora
