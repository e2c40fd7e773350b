// Copyright (c) 2026, The OPLoRA C++ Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "oplora/lowrank.hpp"
#include "oplora/matcore.hpp"

namespace oplora {

/// Frozen base weight plus a rank-r adapter: y = x W0^T + (x V) U^T.
///
/// forward() records the batch input X and backward() the output gradient S,
/// so that the full weight gradient S^T X stays available in factored form.
/// Optimizer steps consume both captures and clear them.
class LoraLinear {
public:
    LoraLinear(Mat w0, FactorPair adapter);

    std::size_t d_out() const noexcept { return w0_.rows(); }
    std::size_t d_in() const noexcept { return w0_.cols(); }
    std::size_t rank() const noexcept { return adapter_.rank(); }

    const Mat& w0() const noexcept { return w0_; }
    /// Mutable base weight, for the full-training baseline only.
    Mat& base_weight() noexcept { return w0_; }

    const FactorPair& adapter() const noexcept { return adapter_; }
    void set_adapter(FactorPair adapter);

    /// x: B x d_in -> B x d_out. Replaces any previous capture.
    Mat forward(const Mat& x);
    /// Same product without recording a capture.
    Mat apply(const Mat& x) const;
    /// s: B x d_out -> input gradient B x d_in.
    Mat backward(const Mat& s);

    bool has_capture() const noexcept { return x_.has_value() && s_.has_value(); }
    /// Throws StaleCaptureError unless both captures are present.
    const Mat& captured_x() const;
    const Mat& captured_s() const;
    void clear_capture() noexcept;

    /// coeff * S^T X as a single factored term (S and X stored transposed).
    FactorTerm gradient_term(double coeff = 1.0) const;
    /// (G V, G^T U) computed as (S^T (X V), X^T (S U)).
    FactorPair factor_grads() const;

private:
    Mat w0_;
    FactorPair adapter_;
    std::optional<Mat> x_;
    std::optional<Mat> s_;
};

// ---------------------------------------------------------------------------
// Linear factorization task: min_{U,V} 1/2 ||U V^T - W||_F^2.

struct TargetSpec {
    enum class Kind { gaussian, spectrum };
    Kind kind = Kind::gaussian;
    /// Prescribed singular values for Kind::spectrum; missing ones are zero.
    std::vector<double> singular_values;
};

/// Random target with the requested spectrum.
Mat make_target(std::size_t d_out, std::size_t d_in, const TargetSpec& spec, std::mt19937_64& rng);

struct LinearTask {
    Mat target;
    /// 0 selects full-batch gradients.
    std::size_t batch_size = 0;

    LinearTask() = default;
    LinearTask(Mat target_, std::size_t batch_size_);

    std::size_t d_out() const noexcept { return target.rows(); }
    std::size_t d_in() const noexcept { return target.cols(); }
    bool full_batch() const noexcept { return batch_size == 0 || batch_size == target.cols(); }
};

/// Column indices for one step: all columns in full-batch mode, otherwise a
/// fresh sample without replacement.
std::vector<std::size_t> sample_batch(const LinearTask& task, std::mt19937_64& rng);

/// One-hot rows selecting the given columns: B x d_in.
Mat column_selector(std::size_t d_in, std::span<const std::size_t> indices);

struct LinearGrad {
    double loss = 0.0;
    /// B x d_out output gradient.
    Mat s;
    /// B x d_in one-hot batch input.
    Mat x;
};

/// Loss and gradient pair over the sampled columns, both scaled by
/// d_in / B so that they are unbiased estimates of the full-batch values.
LinearGrad linear_task_grad(const LinearTask& task, const FactorPair& adapter, std::span<const std::size_t> indices);

/// Same as linear_task_grad but runs forward/backward through the layer,
/// leaving fresh captures on it. Returns the scaled batch loss.
double linear_task_forward_backward(const LinearTask& task, LoraLinear& layer, std::span<const std::size_t> indices);

/// Full-batch loss 1/2 ||U V^T - W||_F^2, accumulated column by column.
double linear_task_loss(const LinearTask& task, const FactorPair& adapter);

/// Loss and dense gradient (U V^T - W restricted to the sampled columns,
/// scaled as above) for a dense iterate. Oracle path.
struct DenseGrad {
    double loss = 0.0;
    Mat grad;
};
DenseGrad linear_task_dense_grad(const LinearTask& task, const Mat& weight, std::span<const std::size_t> indices);
double linear_task_dense_loss(const LinearTask& task, const Mat& weight);

enum class InitKind { random_svd, svd_init };

/// Initial adapter: truncated SVD of a unit-spectral-norm Gaussian matrix, or
/// of the target itself for svd_init.
FactorPair init_linear_adapter(const LinearTask& task, std::size_t rank, InitKind kind, std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// Small multi-layer task with planted teacher labels.

enum class Nonlinearity { relu, tanh };
enum class LossKind { mse, cross_entropy };

struct MlpTask {
    std::vector<std::size_t> dims;
    Nonlinearity nonlinearity = Nonlinearity::tanh;
    LossKind loss = LossKind::mse;
    std::size_t samples = 256;
    std::size_t batch_size = 0;

    Mat inputs;
    /// mse: teacher outputs (samples x d_out). cross_entropy: one column of labels.
    Mat targets;

    void validate() const;
    std::size_t num_classes() const noexcept { return dims.back(); }
};

/// Gaussian inputs pushed through a random teacher with the same architecture.
MlpTask make_mlp_task(std::vector<std::size_t> dims, Nonlinearity nonlinearity, LossKind loss, std::size_t samples,
                      std::mt19937_64& rng);

struct MlpModel {
    std::vector<LoraLinear> layers;
};

/// Random frozen base weights (scaled by 1/sqrt(fan_in)) and adapters with a
/// zero U factor and random V factor.
MlpModel make_mlp_model(const MlpTask& task, std::size_t rank, std::mt19937_64& rng);

/// Forward and reverse sweep over the batch rows. Every layer ends up with a
/// fresh X/S capture. Returns the mean loss over the batch.
double mlp_forward_backward(const MlpTask& task, MlpModel& model, std::span<const std::size_t> batch);

/// Loss only, without touching captures.
double mlp_loss(const MlpTask& task, const MlpModel& model, std::span<const std::size_t> batch);

std::vector<std::size_t> sample_rows(std::size_t n, std::size_t batch_size, std::mt19937_64& rng);

} // namespace oplora
