#include "feddf/numerics.hpp"

#include <numbers>

namespace feddf {

Matrix softmax_rows(const Matrix& logits) {
    require_finite(logits, "softmax_rows");
    Matrix out = logits;
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
        auto row = out.row(r);
        row.array() = (row.array() - row.maxCoeff()).exp();
        row /= row.sum();
    }
    return out;
}

Scalar kl_div_rows(const Matrix& target, const Matrix& pred) {
    if (target.rows() != pred.rows() || target.cols() != pred.cols()) {
        throw ShapeError("kl_div_rows: shape mismatch");
    }
    if (target.rows() == 0) return 0;
    Scalar sum = 0;
    for (Eigen::Index r = 0; r < target.rows(); ++r) {
        sum += kl_div(target.row(r), pred.row(r));
    }
    return sum / static_cast<Scalar>(target.rows());
}

namespace {

void check_labels(std::span<const int> labels, const Matrix& logits) {
    if (static_cast<Eigen::Index>(labels.size()) != logits.rows()) {
        throw ShapeError("cross_entropy: label count does not match batch rows");
    }
    for (int y : labels) {
        if (y < 0 || y >= logits.cols()) {
            throw IndexError("cross_entropy: label " + std::to_string(y) + " out of range");
        }
    }
}

}  // namespace

Scalar cross_entropy(std::span<const int> labels, const Matrix& logits) {
    check_labels(labels, logits);
    require_finite(logits, "cross_entropy");
    if (logits.rows() == 0) return 0;
    Scalar sum = 0;
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const auto row = logits.row(r);
        const Scalar mx = row.maxCoeff();
        const Scalar lse = mx + std::log((row.array() - mx).exp().sum());
        sum += lse - row(labels[static_cast<std::size_t>(r)]);
    }
    return sum / static_cast<Scalar>(logits.rows());
}

Matrix cross_entropy_logit_grad(std::span<const int> labels, const Matrix& logits) {
    check_labels(labels, logits);
    Matrix g = softmax_rows(logits);
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
        g(r, labels[static_cast<std::size_t>(r)]) -= 1;
    }
    return g / static_cast<Scalar>(std::max<Eigen::Index>(g.rows(), 1));
}

Matrix kl_logit_grad(const Matrix& target, const Matrix& logits) {
    if (target.rows() != logits.rows() || target.cols() != logits.cols()) {
        throw ShapeError("kl_logit_grad: shape mismatch");
    }
    Matrix g = softmax_rows(logits) - target;
    return g / static_cast<Scalar>(std::max<Eigen::Index>(g.rows(), 1));
}

OptimizerState OptimizerState::sgd(Scalar lr) {
    OptimizerState s;
    s.kind = OptimizerKind::sgd;
    s.base_lr = lr;
    return s;
}

OptimizerState OptimizerState::adam_with(Scalar lr, Eigen::Index n_params, LrSchedule schedule,
                                         std::int64_t total_steps) {
    OptimizerState s;
    s.kind = OptimizerKind::adam;
    s.base_lr = lr;
    s.schedule = schedule;
    s.total_steps = total_steps;
    s.m = Vector::Zero(n_params);
    s.v = Vector::Zero(n_params);
    return s;
}

Scalar scheduled_lr(const OptimizerState& state, std::int64_t t) {
    if (state.schedule == LrSchedule::constant) return state.base_lr;
    if (state.total_steps <= 0 || t >= state.total_steps) return 0;
    const Scalar frac = static_cast<Scalar>(t) / static_cast<Scalar>(state.total_steps);
    return state.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

void opt_step(OptimizerState& state, Vector& params, const Vector& grad) {
    if (grad.size() != params.size()) {
        throw ShapeError("opt_step: gradient length " + std::to_string(grad.size()) + " != params length " +
                         std::to_string(params.size()));
    }
    const Scalar lr = scheduled_lr(state, state.step_count);
    switch (state.kind) {
        case OptimizerKind::sgd:
            params -= lr * grad;
            break;
        case OptimizerKind::adam: {
            if (state.m.size() != params.size()) {
                state.m = Vector::Zero(params.size());
                state.v = Vector::Zero(params.size());
            }
            const auto& h = state.adam;
            const auto t = static_cast<Scalar>(state.step_count + 1);
            state.m = h.beta1 * state.m + (1 - h.beta1) * grad;
            state.v = h.beta2 * state.v + (1 - h.beta2) * grad.cwiseProduct(grad);
            const Scalar bc1 = 1 - std::pow(h.beta1, t);
            const Scalar bc2 = 1 - std::pow(h.beta2, t);
            params.array() -= lr * (state.m.array() / bc1) / ((state.v.array() / bc2).sqrt() + h.eps);
            break;
        }
    }
    ++state.step_count;
}

}  // namespace feddf
