// Copyright (c) 2026, The OPLoRA C++ Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "oplora/nets.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>
#include <numeric>

#include "oplora/errors.hpp"

namespace oplora {

LoraLinear::LoraLinear(Mat w0, FactorPair adapter) : w0_(std::move(w0)), adapter_(std::move(adapter)) {
    if (adapter_.d_out() != w0_.rows() || adapter_.d_in() != w0_.cols()) {
        throw ShapeError(fmt::format("LoraLinear: adapter is {}x{}, base weight is {}x{}", adapter_.d_out(),
                                     adapter_.d_in(), w0_.rows(), w0_.cols()));
    }
}

void LoraLinear::set_adapter(FactorPair adapter) {
    if (adapter.d_out() != d_out() || adapter.d_in() != d_in()) {
        throw ShapeError("LoraLinear: adapter shape mismatch");
    }
    adapter_ = std::move(adapter);
}

Mat LoraLinear::apply(const Mat& x) const {
    if (x.cols() != d_in()) {
        throw ShapeError(fmt::format("LoraLinear: input has {} features, layer expects {}", x.cols(), d_in()));
    }
    Mat y = matmul(x, w0_, false, true);
    if (rank() > 0) {
        y += matmul(matmul(x, adapter_.v), adapter_.u, false, true);
    }
    return y;
}

Mat LoraLinear::forward(const Mat& x) {
    Mat y = apply(x);
    x_ = x;
    s_.reset();
    return y;
}

Mat LoraLinear::backward(const Mat& s) {
    if (!x_) {
        throw StaleCaptureError("LoraLinear: backward without a matching forward");
    }
    if (s.cols() != d_out() || s.rows() != x_->rows()) {
        throw ShapeError(fmt::format("LoraLinear: output gradient is {}x{}, expected {}x{}", s.rows(), s.cols(),
                                     x_->rows(), d_out()));
    }
    Mat grad_in = matmul(s, w0_);
    if (rank() > 0) {
        grad_in += matmul(matmul(s, adapter_.u), adapter_.v, false, true);
    }
    s_ = s;
    return grad_in;
}

const Mat& LoraLinear::captured_x() const {
    if (!has_capture()) {
        throw StaleCaptureError("LoraLinear: no fresh forward/backward capture");
    }
    return *x_;
}

const Mat& LoraLinear::captured_s() const {
    if (!has_capture()) {
        throw StaleCaptureError("LoraLinear: no fresh forward/backward capture");
    }
    return *s_;
}

void LoraLinear::clear_capture() noexcept {
    x_.reset();
    s_.reset();
}

FactorTerm LoraLinear::gradient_term(double coeff) const {
    FactorTerm t;
    t.coeff = coeff;
    t.left = captured_s();
    t.right = captured_x();
    t.left_transposed = true;
    t.right_transposed = true;
    return t;
}

FactorPair LoraLinear::factor_grads() const {
    const Mat& x = captured_x();
    const Mat& s = captured_s();
    Mat gu = matmul(s, matmul(x, adapter_.v), true, false);
    Mat gv = matmul(x, matmul(s, adapter_.u), true, false);
    return FactorPair(std::move(gu), std::move(gv));
}

// ---------------------------------------------------------------------------

Mat make_target(std::size_t d_out, std::size_t d_in, const TargetSpec& spec, std::mt19937_64& rng) {
    if (spec.kind == TargetSpec::Kind::gaussian) {
        return random_gaussian(d_out, d_in, rng);
    }
    const std::size_t p = std::min(d_out, d_in);
    if (spec.singular_values.size() > p) {
        throw ShapeError(fmt::format("make_target: {} singular values for a {}x{} target", spec.singular_values.size(),
                                     d_out, d_in));
    }
    const Mat left = thin_qr(random_gaussian(d_out, p, rng)).q;
    const Mat right = thin_qr(random_gaussian(d_in, p, rng)).q;
    Mat scaled = left;
    for (std::size_t k = 0; k < p; ++k) {
        const double s = k < spec.singular_values.size() ? spec.singular_values[k] : 0.0;
        for (std::size_t i = 0; i < d_out; ++i) {
            scaled(i, k) *= s;
        }
    }
    return matmul(scaled, right, false, true);
}

LinearTask::LinearTask(Mat target_, std::size_t batch_size_) : target(std::move(target_)), batch_size(batch_size_) {
    if (batch_size > target.cols()) {
        throw ShapeError(fmt::format("LinearTask: batch size {} exceeds {} columns", batch_size, target.cols()));
    }
}

std::vector<std::size_t> sample_rows(std::size_t n, std::size_t batch_size, std::mt19937_64& rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    if (batch_size == 0 || batch_size >= n) {
        return idx;
    }
    // Partial Fisher-Yates: the first batch_size slots form the sample.
    for (std::size_t i = 0; i < batch_size; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, n - 1);
        std::swap(idx[i], idx[pick(rng)]);
    }
    idx.resize(batch_size);
    return idx;
}

std::vector<std::size_t> sample_batch(const LinearTask& task, std::mt19937_64& rng) {
    return sample_rows(task.d_in(), task.full_batch() ? 0 : task.batch_size, rng);
}

Mat column_selector(std::size_t d_in, std::span<const std::size_t> indices) {
    Mat x(indices.size(), d_in);
    for (std::size_t b = 0; b < indices.size(); ++b) {
        if (indices[b] >= d_in) {
            throw ShapeError(fmt::format("column_selector: index {} out of range for {} columns", indices[b], d_in));
        }
        x(b, indices[b]) = 1.0;
    }
    return x;
}

namespace {

double batch_scale(const LinearTask& task, std::size_t batch) {
    if (batch == 0) {
        throw ShapeError("linear task: empty batch");
    }
    return static_cast<double>(task.d_in()) / static_cast<double>(batch);
}

// Output rows minus target columns, scaled; returns the scaled loss.
double residual_to_gradient(const LinearTask& task, Mat& outputs, std::span<const std::size_t> indices) {
    const double scale = batch_scale(task, indices.size());
    double loss = 0.0;
    for (std::size_t b = 0; b < indices.size(); ++b) {
        for (std::size_t i = 0; i < task.d_out(); ++i) {
            const double r = outputs(b, i) - task.target(i, indices[b]);
            loss += r * r;
            outputs(b, i) = scale * r;
        }
    }
    return 0.5 * scale * loss;
}

} // namespace

LinearGrad linear_task_grad(const LinearTask& task, const FactorPair& adapter, std::span<const std::size_t> indices) {
    if (adapter.d_out() != task.d_out() || adapter.d_in() != task.d_in()) {
        throw ShapeError("linear_task_grad: adapter does not match the task");
    }
    LinearGrad out;
    out.x = column_selector(task.d_in(), indices);
    out.s = matmul(matmul(out.x, adapter.v), adapter.u, false, true);
    out.loss = residual_to_gradient(task, out.s, indices);
    return out;
}

double linear_task_forward_backward(const LinearTask& task, LoraLinear& layer, std::span<const std::size_t> indices) {
    if (layer.d_out() != task.d_out() || layer.d_in() != task.d_in()) {
        throw ShapeError("linear_task_forward_backward: layer does not match the task");
    }
    Mat y = layer.forward(column_selector(task.d_in(), indices));
    const double loss = residual_to_gradient(task, y, indices);
    layer.backward(y);
    return loss;
}

double linear_task_loss(const LinearTask& task, const FactorPair& adapter) {
    const std::size_t r = adapter.rank();
    double loss = 0.0;
    for (std::size_t j = 0; j < task.d_in(); ++j) {
        for (std::size_t i = 0; i < task.d_out(); ++i) {
            double p = 0.0;
            for (std::size_t k = 0; k < r; ++k) {
                p += adapter.u(i, k) * adapter.v(j, k);
            }
            const double d = p - task.target(i, j);
            loss += d * d;
        }
    }
    return 0.5 * loss;
}

DenseGrad linear_task_dense_grad(const LinearTask& task, const Mat& weight, std::span<const std::size_t> indices) {
    const double scale = batch_scale(task, indices.size());
    DenseGrad out;
    out.grad = Mat(task.d_out(), task.d_in());
    double loss = 0.0;
    for (std::size_t idx : indices) {
        if (idx >= task.d_in()) {
            throw ShapeError("linear_task_dense_grad: index out of range");
        }
        for (std::size_t i = 0; i < task.d_out(); ++i) {
            const double r = weight(i, idx) - task.target(i, idx);
            loss += r * r;
            out.grad(i, idx) += scale * r;
        }
    }
    out.loss = 0.5 * scale * loss;
    return out;
}

double linear_task_dense_loss(const LinearTask& task, const Mat& weight) {
    const double d = frobenius_distance(weight, task.target);
    return 0.5 * d * d;
}

FactorPair init_linear_adapter(const LinearTask& task, std::size_t rank, InitKind kind, std::mt19937_64& rng) {
    if (kind == InitKind::svd_init) {
        return truncated_svd(task.target, rank);
    }
    Mat g = random_gaussian(task.d_out(), task.d_in(), rng);
    const double top = svd_dense(g).sigma.front();
    g *= 1.0 / top;
    return truncated_svd(g, rank);
}

// ---------------------------------------------------------------------------

namespace {

double activate(Nonlinearity f, double z) { return f == Nonlinearity::relu ? std::max(z, 0.0) : std::tanh(z); }

double activate_grad(Nonlinearity f, double z) {
    if (f == Nonlinearity::relu) {
        return z > 0.0 ? 1.0 : 0.0;
    }
    const double t = std::tanh(z);
    return 1.0 - t * t;
}

Mat select_rows(const Mat& m, std::span<const std::size_t> rows) {
    Mat out(rows.size(), m.cols());
    for (std::size_t b = 0; b < rows.size(); ++b) {
        if (rows[b] >= m.rows()) {
            throw ShapeError(fmt::format("select_rows: row {} out of range for {} rows", rows[b], m.rows()));
        }
        std::copy(m.row(rows[b]).begin(), m.row(rows[b]).end(), out.row(b).begin());
    }
    return out;
}

// Loss over the batch and, when grad is non-null, dL/dlogits.
double head_loss(const MlpTask& task, const Mat& logits, const Mat& targets, Mat* grad) {
    const double inv_b = 1.0 / static_cast<double>(logits.rows());
    double loss = 0.0;
    if (grad) {
        *grad = Mat(logits.rows(), logits.cols());
    }
    if (task.loss == LossKind::mse) {
        for (std::size_t b = 0; b < logits.rows(); ++b) {
            for (std::size_t j = 0; j < logits.cols(); ++j) {
                const double r = logits(b, j) - targets(b, j);
                loss += 0.5 * r * r;
                if (grad) {
                    (*grad)(b, j) = r * inv_b;
                }
            }
        }
        return loss * inv_b;
    }
    for (std::size_t b = 0; b < logits.rows(); ++b) {
        const auto row = logits.row(b);
        const double top = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (double x : row) {
            z += std::exp(x - top);
        }
        const auto label = static_cast<std::size_t>(targets(b, 0));
        loss += std::log(z) + top - row[label];
        if (grad) {
            for (std::size_t j = 0; j < row.size(); ++j) {
                (*grad)(b, j) = (std::exp(row[j] - top) / z - (j == label ? 1.0 : 0.0)) * inv_b;
            }
        }
    }
    return loss * inv_b;
}

} // namespace

void MlpTask::validate() const {
    if (dims.size() < 2) {
        throw ShapeError("MlpTask: need at least input and output dims");
    }
    if (inputs.cols() != dims.front()) {
        throw ShapeError("MlpTask: input width does not match dims");
    }
    if (loss == LossKind::mse && targets.cols() != dims.back()) {
        throw ShapeError("MlpTask: target width does not match dims");
    }
    if (inputs.rows() != targets.rows()) {
        throw ShapeError("MlpTask: inputs and targets disagree on sample count");
    }
}

MlpTask make_mlp_task(std::vector<std::size_t> dims, Nonlinearity nonlinearity, LossKind loss, std::size_t samples,
                      std::mt19937_64& rng) {
    MlpTask task;
    task.dims = std::move(dims);
    task.nonlinearity = nonlinearity;
    task.loss = loss;
    task.samples = samples;
    if (task.dims.size() < 2) {
        throw ShapeError("make_mlp_task: need at least input and output dims");
    }
    task.inputs = random_gaussian(samples, task.dims.front(), rng);

    Mat h = task.inputs;
    for (std::size_t l = 0; l + 1 < task.dims.size(); ++l) {
        const Mat w = random_gaussian(task.dims[l + 1], task.dims[l], rng, 1.0 / std::sqrt(double(task.dims[l])));
        h = matmul(h, w, false, true);
        if (l + 2 < task.dims.size()) {
            for (auto& x : h.data()) {
                x = activate(nonlinearity, x);
            }
        }
    }
    if (loss == LossKind::mse) {
        task.targets = std::move(h);
    } else {
        task.targets = Mat(samples, 1);
        for (std::size_t b = 0; b < samples; ++b) {
            const auto row = h.row(b);
            task.targets(b, 0) = double(std::max_element(row.begin(), row.end()) - row.begin());
        }
    }
    task.validate();
    return task;
}

MlpModel make_mlp_model(const MlpTask& task, std::size_t rank, std::mt19937_64& rng) {
    task.validate();
    MlpModel model;
    for (std::size_t l = 0; l + 1 < task.dims.size(); ++l) {
        const std::size_t d_in = task.dims[l];
        const std::size_t d_out = task.dims[l + 1];
        const double scale = 1.0 / std::sqrt(double(d_in));
        Mat w0 = random_gaussian(d_out, d_in, rng, scale);
        const std::size_t r = std::min({rank, d_in, d_out});
        FactorPair adapter(Mat(d_out, r), random_gaussian(d_in, r, rng, scale));
        model.layers.emplace_back(std::move(w0), std::move(adapter));
    }
    return model;
}

double mlp_forward_backward(const MlpTask& task, MlpModel& model, std::span<const std::size_t> batch) {
    task.validate();
    if (model.layers.size() + 1 != task.dims.size()) {
        throw ShapeError("mlp_forward_backward: model depth does not match the task");
    }
    const std::size_t depth = model.layers.size();
    std::vector<Mat> pre(depth);
    Mat h = select_rows(task.inputs, batch);
    for (std::size_t l = 0; l < depth; ++l) {
        pre[l] = model.layers[l].forward(h);
        if (l + 1 < depth) {
            h = pre[l];
            for (auto& x : h.data()) {
                x = activate(task.nonlinearity, x);
            }
        }
    }
    Mat grad;
    const double loss = head_loss(task, pre.back(), select_rows(task.targets, batch), &grad);
    for (std::size_t l = depth; l-- > 0;) {
        Mat grad_in = model.layers[l].backward(grad);
        if (l > 0) {
            for (std::size_t i = 0; i < grad_in.size(); ++i) {
                grad_in.data()[i] *= activate_grad(task.nonlinearity, pre[l - 1].data()[i]);
            }
            grad = std::move(grad_in);
        }
    }
    return loss;
}

double mlp_loss(const MlpTask& task, const MlpModel& model, std::span<const std::size_t> batch) {
    task.validate();
    Mat h = select_rows(task.inputs, batch);
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        h = model.layers[l].apply(h);
        if (l + 1 < model.layers.size()) {
            for (auto& x : h.data()) {
                x = activate(task.nonlinearity, x);
            }
        }
    }
    return head_loss(task, h, select_rows(task.targets, batch), nullptr);
}

} // namespace oplora
