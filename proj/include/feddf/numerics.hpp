#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <span>
#include <string>

#include "feddf/errors.hpp"

namespace feddf {

using Scalar = double;
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

// Floor applied to predicted probabilities before taking logs.
inline constexpr Scalar kProbFloor = 1e-12;

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& x) {
    return x.allFinite();
}

template <typename Derived>
void require_finite(const Eigen::DenseBase<Derived>& x, const char* what) {
    if (!x.allFinite()) {
        throw NumericError(std::string(what) + ": non-finite value");
    }
}

/// Numerically stable softmax of a single logit vector (max-subtracted).
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> softmax(const Eigen::MatrixBase<Derived>& logits) {
    using S = typename Derived::Scalar;
    require_finite(logits, "softmax");
    Eigen::Matrix<S, Eigen::Dynamic, 1> z = logits.reshaped();
    z.array() = (z.array() - z.maxCoeff()).exp();
    return z / z.sum();
}

/// Row-wise softmax; each row of the result is a probability vector.
Matrix softmax_rows(const Matrix& logits);

/// KL(target || pred) = sum_i target_i ln(target_i / pred_i), with 0 ln 0 = 0.
/// Predictions are clamped to kProbFloor.
template <typename DA, typename DB>
Scalar kl_div(const Eigen::MatrixBase<DA>& target, const Eigen::MatrixBase<DB>& pred) {
    if (target.size() != pred.size()) {
        throw ShapeError("kl_div: length mismatch");
    }
    Scalar sum = 0;
    for (Eigen::Index i = 0; i < target.size(); ++i) {
        const Scalar t = target.reshaped()(i);
        if (t <= 0) continue;
        const Scalar p = std::max(pred.reshaped()(i), kProbFloor);
        sum += t * std::log(t / p);
    }
    return sum;
}

/// Batch-mean KL between row distributions.
Scalar kl_div_rows(const Matrix& target, const Matrix& pred);

/// Mean over the batch of -ln softmax(logits)_label.
Scalar cross_entropy(std::span<const int> labels, const Matrix& logits);

/// d(mean CE)/d(logits): (softmax - onehot) / n.
Matrix cross_entropy_logit_grad(std::span<const int> labels, const Matrix& logits);

/// d(mean KL(target || softmax(logits)))/d(logits): (softmax - target) / n.
Matrix kl_logit_grad(const Matrix& target, const Matrix& logits);

enum class OptimizerKind { sgd, adam };
enum class LrSchedule { constant, cosine };

struct AdamHyper {
    Scalar beta1 = 0.9;
    Scalar beta2 = 0.999;
    Scalar eps = 1e-8;
};

struct OptimizerState {
    OptimizerKind kind = OptimizerKind::sgd;
    std::int64_t step_count = 0;
    Vector m;  // first moment (adam)
    Vector v;  // second moment (adam)
    Scalar base_lr = 0.1;
    LrSchedule schedule = LrSchedule::constant;
    std::int64_t total_steps = 0;  // cosine horizon
    AdamHyper adam{};

    static OptimizerState sgd(Scalar lr);
    static OptimizerState adam_with(Scalar lr, Eigen::Index n_params, LrSchedule schedule = LrSchedule::constant,
                                    std::int64_t total_steps = 0);
};

/// Learning rate used for step index `t` (0-based count of steps already taken).
/// Cosine: base_lr * 0.5 * (1 + cos(pi * t / total_steps)), clamped to 0 past the horizon.
Scalar scheduled_lr(const OptimizerState& state, std::int64_t t);

/// Applies one optimizer step in place: updates `params` and advances `state`.
void opt_step(OptimizerState& state, Vector& params, const Vector& grad);

}  // namespace feddf
