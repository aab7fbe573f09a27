#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "feddf/numerics.hpp"

namespace feddf {

enum class Activation { relu, tanh };
enum class Precision { full, binary_ste };

/// Architecture descriptor for a fully-connected classifier.
/// `layer_widths` runs from input dimension through hidden widths to the class count.
struct Prototype {
    std::string id;
    std::vector<int> layer_widths;
    Activation activation = Activation::relu;
    Precision precision = Precision::full;

    int input_dim() const { return layer_widths.front(); }
    int class_count() const { return layer_widths.back(); }
    int layer_count() const { return static_cast<int>(layer_widths.size()) - 1; }
    Eigen::Index param_count() const;

    /// Throws ConfigError when fewer than two widths or any width < 1.
    void validate() const;

    bool operator==(const Prototype&) const = default;
};

/// Flat parameters: per layer, the (in x out) row-major weight block followed by the bias.
struct ParamVector {
    std::string prototype_id;
    Vector values;

    bool operator==(const ParamVector& o) const {
        return prototype_id == o.prototype_id && values.size() == o.values.size() && values == o.values;
    }
};

/// A prototype paired with a parameter vector of that prototype.
struct Model {
    Prototype proto;
    ParamVector params;
};

/// Offsets of layer `l`'s weight block and bias within a ParamVector.
struct LayerSlice {
    Eigen::Index weight_offset;
    Eigen::Index bias_offset;
    int in;
    int out;
};
std::vector<LayerSlice> layer_slices(const Prototype& proto);

/// He-uniform weights (bound sqrt(6 / fan_in)), zero biases.
ParamVector init_params(const Prototype& proto, std::uint64_t seed);

ParamVector zero_params(const Prototype& proto);

/// Sign-binarized weights scaled per layer by mean |w|; biases untouched.
/// sign(0) is taken as +1.
ParamVector binarize(const Prototype& proto, const ParamVector& params);

/// Raw logits (batch x classes). Binary-STE prototypes run on binarized weights.
Matrix predict_logits(const Prototype& proto, const ParamVector& params, const Matrix& inputs);
inline Matrix predict_logits(const Model& m, const Matrix& inputs) { return predict_logits(m.proto, m.params, inputs); }

enum class LossKind { ce, kl_vs_target };

/// Exact backprop gradient of the batch-mean loss w.r.t. every parameter.
/// `labels` is required for `ce`, `targets` (row distributions) for `kl_vs_target`.
/// Binary-STE prototypes are differentiated at their binarized weights (straight-through).
Vector grad(LossKind kind, const Prototype& proto, const ParamVector& params, const Matrix& inputs,
            std::span<const int> labels, const Matrix* targets = nullptr);

/// Scalar loss matching `grad`.
Scalar loss(LossKind kind, const Prototype& proto, const ParamVector& params, const Matrix& inputs,
            std::span<const int> labels, const Matrix* targets = nullptr);

/// Straight-through gradient for binarized prototypes: the full-precision gradient evaluated at the
/// binarized weights, applied to the master weights as if binarization were the identity.
Vector binarize_ste_grad(const Prototype& proto, const ParamVector& params, const Matrix& inputs,
                         std::span<const int> labels);

/// Weighted convex combination; weights are normalized internally.
ParamVector average_params(std::span<const ParamVector> models, std::span<const Scalar> weights);

/// Little-endian: u32 id length, id bytes, u64 value count, f64 values.
void write_params(std::ostream& os, const ParamVector& p);
ParamVector read_params(std::istream& is);

}  // namespace feddf
