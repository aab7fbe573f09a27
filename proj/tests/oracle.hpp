#pragma once

// Independent reference computations used to check the library.

#include <cmath>
#include <random>
#include <vector>

#include "feddf/models.hpp"

namespace oracle {

using feddf::Matrix;
using feddf::Scalar;
using feddf::Vector;

// Central differences of `loss` around every coordinate of params.values.
template <typename LossFn>
Vector finite_difference(const feddf::ParamVector& params, LossFn&& loss, Scalar h = 1e-6) {
    Vector g(params.values.size());
    feddf::ParamVector p = params;
    for (Eigen::Index i = 0; i < p.values.size(); ++i) {
        const Scalar x = p.values[i];
        p.values[i] = x + h;
        const Scalar up = loss(p);
        p.values[i] = x - h;
        const Scalar down = loss(p);
        p.values[i] = x;
        g[i] = (up - down) / (2 * h);
    }
    return g;
}

// Elementwise |a - f| / max(|a|, |f|, floor); near-zero coordinates are judged absolutely.
inline Scalar max_relative_error(const Vector& analytic, const Vector& numeric, Scalar floor = 1e-4) {
    Scalar worst = 0;
    for (Eigen::Index i = 0; i < analytic.size(); ++i) {
        const Scalar denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
        worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
    }
    return worst;
}

struct GradCase {
    feddf::Prototype proto;
    feddf::ParamVector params;
    Matrix inputs;
    std::vector<int> labels;
    Matrix targets;  // row distributions
    feddf::LossKind kind = feddf::LossKind::ce;
};

// Random small MLP, batch, and either labels or soft targets.
inline GradCase random_grad_case(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> width(1, 6);
    std::uniform_int_distribution<int> depth(1, 3);
    std::uniform_int_distribution<int> classes(2, 5);
    std::uniform_int_distribution<int> batch(1, 8);
    std::normal_distribution<Scalar> normal(0.0, 1.0);

    GradCase c;
    c.proto.id = "case" + std::to_string(seed);
    c.proto.layer_widths.push_back(width(rng));
    const int hidden = depth(rng);
    for (int l = 0; l < hidden; ++l) c.proto.layer_widths.push_back(width(rng));
    c.proto.layer_widths.push_back(classes(rng));
    c.proto.activation = (rng() % 2 == 0) ? feddf::Activation::relu : feddf::Activation::tanh;
    c.params = feddf::init_params(c.proto, rng());
    // Nonzero biases so relu units are rarely sitting on their kink.
    for (Eigen::Index i = 0; i < c.params.values.size(); ++i) c.params.values[i] += 0.1 * normal(rng);

    const int n = batch(rng);
    const int k = c.proto.class_count();
    c.inputs.resize(n, c.proto.input_dim());
    for (Eigen::Index i = 0; i < c.inputs.size(); ++i) c.inputs.data()[i] = normal(rng);
    c.kind = (rng() % 2 == 0) ? feddf::LossKind::ce : feddf::LossKind::kl_vs_target;
    if (c.kind == feddf::LossKind::ce) {
        std::uniform_int_distribution<int> label(0, k - 1);
        for (int i = 0; i < n; ++i) c.labels.push_back(label(rng));
    } else {
        c.targets.resize(n, k);
        for (Eigen::Index i = 0; i < c.targets.size(); ++i) c.targets.data()[i] = std::exp(normal(rng));
        for (int i = 0; i < n; ++i) c.targets.row(i) /= c.targets.row(i).sum();
    }
    return c;
}

// Loss of a case recomputed from scratch: forward pass written out with plain loops.
inline Scalar reference_loss(const GradCase& c, const feddf::ParamVector& p) {
    const auto& w = c.proto.layer_widths;
    Scalar total = 0;
    for (Eigen::Index r = 0; r < c.inputs.rows(); ++r) {
        std::vector<Scalar> a(c.inputs.row(r).data(), c.inputs.row(r).data() + c.inputs.cols());
        Eigen::Index off = 0;
        for (std::size_t l = 0; l + 1 < w.size(); ++l) {
            const int in = w[l];
            const int out = w[l + 1];
            std::vector<Scalar> z(static_cast<std::size_t>(out), 0.0);
            for (int j = 0; j < out; ++j) {
                Scalar s = p.values[off + static_cast<Eigen::Index>(in) * out + j];
                for (int i = 0; i < in; ++i) s += a[static_cast<std::size_t>(i)] * p.values[off + i * out + j];
                z[static_cast<std::size_t>(j)] = s;
            }
            off += static_cast<Eigen::Index>(in) * out + out;
            if (l + 2 < w.size()) {
                for (auto& v : z) v = c.proto.activation == feddf::Activation::relu ? std::max(v, 0.0) : std::tanh(v);
            }
            a = z;
        }
        Scalar mx = a[0];
        for (Scalar v : a) mx = std::max(mx, v);
        Scalar se = 0;
        for (Scalar v : a) se += std::exp(v - mx);
        const Scalar lse = mx + std::log(se);
        if (c.kind == feddf::LossKind::ce) {
            total += lse - a[static_cast<std::size_t>(c.labels[static_cast<std::size_t>(r)])];
        } else {
            for (std::size_t j = 0; j < a.size(); ++j) {
                const Scalar t = c.targets(r, static_cast<Eigen::Index>(j));
                if (t > 0) total += t * (std::log(t) - (a[j] - lse));
            }
        }
    }
    return total / static_cast<Scalar>(c.inputs.rows());
}

}  // namespace oracle
