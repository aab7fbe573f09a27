#include "feddf/models.hpp"

#include <bit>
#include <istream>
#include <ostream>
#include <random>

namespace feddf {

Eigen::Index Prototype::param_count() const {
    Eigen::Index n = 0;
    for (int l = 0; l + 1 < static_cast<int>(layer_widths.size()); ++l) {
        n += static_cast<Eigen::Index>(layer_widths[l]) * layer_widths[l + 1] + layer_widths[l + 1];
    }
    return n;
}

void Prototype::validate() const {
    if (layer_widths.size() < 2) {
        throw ConfigError("prototype needs at least an input and an output width", id);
    }
    for (int w : layer_widths) {
        if (w < 1) throw ConfigError("prototype widths must be >= 1", id);
    }
}

std::vector<LayerSlice> layer_slices(const Prototype& proto) {
    std::vector<LayerSlice> out;
    Eigen::Index off = 0;
    for (int l = 0; l < proto.layer_count(); ++l) {
        const int in = proto.layer_widths[l];
        const int o = proto.layer_widths[l + 1];
        out.push_back({off, off + static_cast<Eigen::Index>(in) * o, in, o});
        off += static_cast<Eigen::Index>(in) * o + o;
    }
    return out;
}

ParamVector init_params(const Prototype& proto, std::uint64_t seed) {
    proto.validate();
    ParamVector p{proto.id, Vector::Zero(proto.param_count())};
    std::mt19937_64 rng(seed);
    for (const auto& s : layer_slices(proto)) {
        const Scalar bound = std::sqrt(6.0 / s.in);
        std::uniform_real_distribution<Scalar> dist(-bound, bound);
        for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(s.in) * s.out; ++i) {
            p.values[s.weight_offset + i] = dist(rng);
        }
    }
    return p;
}

ParamVector zero_params(const Prototype& proto) {
    proto.validate();
    return {proto.id, Vector::Zero(proto.param_count())};
}

namespace {

void check_match(const Prototype& proto, const ParamVector& params) {
    if (params.prototype_id != proto.id) {
        throw ShapeError("prototype mismatch: params for '" + params.prototype_id + "' used with '" + proto.id + "'");
    }
    if (params.values.size() != proto.param_count()) {
        throw ShapeError("parameter length " + std::to_string(params.values.size()) + " does not match prototype '" +
                         proto.id + "' (" + std::to_string(proto.param_count()) + ")");
    }
}

void check_inputs(const Prototype& proto, const Matrix& inputs) {
    if (inputs.cols() != proto.input_dim()) {
        throw ShapeError("input width " + std::to_string(inputs.cols()) + " does not match prototype '" + proto.id +
                         "' input " + std::to_string(proto.input_dim()));
    }
}

using ConstMap = Eigen::Map<const Matrix>;

struct ForwardCache {
    std::vector<Matrix> activations;  // activations[0] = inputs, activations[l+1] = output of layer l
    std::vector<Matrix> pre;          // pre-activations per layer
};

ForwardCache forward(const Prototype& proto, const Vector& w, const Matrix& inputs) {
    ForwardCache c;
    c.activations.reserve(proto.layer_count() + 1);
    c.pre.reserve(proto.layer_count());
    c.activations.push_back(inputs);
    const auto slices = layer_slices(proto);
    for (std::size_t l = 0; l < slices.size(); ++l) {
        const auto& s = slices[l];
        ConstMap W(w.data() + s.weight_offset, s.in, s.out);
        Eigen::Map<const RowVector> b(w.data() + s.bias_offset, s.out);
        Matrix z = c.activations.back() * W;
        z.rowwise() += b;
        c.pre.push_back(z);
        if (l + 1 == slices.size()) {
            c.activations.push_back(std::move(z));
        } else if (proto.activation == Activation::relu) {
            c.activations.push_back(z.cwiseMax(0.0));
        } else {
            c.activations.push_back(z.array().tanh().matrix());
        }
    }
    return c;
}

Vector backward(const Prototype& proto, const Vector& w, const ForwardCache& c, Matrix delta) {
    Vector g = Vector::Zero(w.size());
    const auto slices = layer_slices(proto);
    for (int l = static_cast<int>(slices.size()) - 1; l >= 0; --l) {
        const auto& s = slices[static_cast<std::size_t>(l)];
        Eigen::Map<Matrix> gW(g.data() + s.weight_offset, s.in, s.out);
        Eigen::Map<RowVector> gb(g.data() + s.bias_offset, s.out);
        gW.noalias() = c.activations[static_cast<std::size_t>(l)].transpose() * delta;
        gb = delta.colwise().sum();
        if (l == 0) break;
        ConstMap W(w.data() + s.weight_offset, s.in, s.out);
        Matrix dA = delta * W.transpose();
        const Matrix& z = c.pre[static_cast<std::size_t>(l) - 1];
        if (proto.activation == Activation::relu) {
            delta = dA.array() * (z.array() > 0).cast<Scalar>();
        } else {
            const auto t = z.array().tanh();
            delta = dA.array() * (1 - t * t);
        }
    }
    return g;
}

const Vector& effective_weights(const Prototype& proto, const ParamVector& params, ParamVector& scratch) {
    if (proto.precision == Precision::binary_ste) {
        scratch = binarize(proto, params);
        return scratch.values;
    }
    return params.values;
}

Matrix logit_grad(LossKind kind, const Matrix& logits, std::span<const int> labels, const Matrix* targets) {
    if (kind == LossKind::ce) {
        return cross_entropy_logit_grad(labels, logits);
    }
    if (targets == nullptr) throw PreconditionError("grad: kl_vs_target requires targets");
    return kl_logit_grad(*targets, logits);
}

}  // namespace

ParamVector binarize(const Prototype& proto, const ParamVector& params) {
    check_match(proto, params);
    ParamVector out = params;
    for (const auto& s : layer_slices(proto)) {
        const Eigen::Index n = static_cast<Eigen::Index>(s.in) * s.out;
        auto seg = out.values.segment(s.weight_offset, n);
        const Scalar scale = seg.cwiseAbs().mean();
        seg = seg.unaryExpr([scale](Scalar x) { return x < 0 ? -scale : scale; });
    }
    return out;
}

Matrix predict_logits(const Prototype& proto, const ParamVector& params, const Matrix& inputs) {
    check_match(proto, params);
    check_inputs(proto, inputs);
    ParamVector scratch;
    const Vector& w = effective_weights(proto, params, scratch);
    return std::move(forward(proto, w, inputs).activations.back());
}

Vector grad(LossKind kind, const Prototype& proto, const ParamVector& params, const Matrix& inputs,
            std::span<const int> labels, const Matrix* targets) {
    check_match(proto, params);
    check_inputs(proto, inputs);
    if (inputs.rows() == 0) throw PreconditionError("grad: empty batch");
    if (kind == LossKind::kl_vs_target && targets == nullptr) {
        throw PreconditionError("grad: kl_vs_target requires targets");
    }
    if (kind == LossKind::ce && targets != nullptr) {
        throw PreconditionError("grad: ce takes labels, not targets");
    }
    ParamVector scratch;
    const Vector& w = effective_weights(proto, params, scratch);
    auto cache = forward(proto, w, inputs);
    Matrix delta = logit_grad(kind, cache.activations.back(), labels, targets);
    return backward(proto, w, cache, std::move(delta));
}

Scalar loss(LossKind kind, const Prototype& proto, const ParamVector& params, const Matrix& inputs,
            std::span<const int> labels, const Matrix* targets) {
    const Matrix logits = predict_logits(proto, params, inputs);
    if (kind == LossKind::ce) return cross_entropy(labels, logits);
    if (targets == nullptr) throw PreconditionError("loss: kl_vs_target requires targets");
    return kl_div_rows(*targets, softmax_rows(logits));
}

Vector binarize_ste_grad(const Prototype& proto, const ParamVector& params, const Matrix& inputs,
                         std::span<const int> labels) {
    if (proto.precision != Precision::binary_ste) {
        throw ConfigError("binarize_ste_grad called on a full-precision prototype", proto.id);
    }
    return grad(LossKind::ce, proto, params, inputs, labels);
}

ParamVector average_params(std::span<const ParamVector> models, std::span<const Scalar> weights) {
    if (models.empty()) throw PreconditionError("average_params: no models");
    if (models.size() != weights.size()) throw ShapeError("average_params: weight count mismatch");
    Scalar total = 0;
    for (std::size_t k = 0; k < models.size(); ++k) {
        if (models[k].prototype_id != models[0].prototype_id) {
            throw ShapeError("average_params: mixed prototypes '" + models[0].prototype_id + "' and '" +
                             models[k].prototype_id + "'");
        }
        if (models[k].values.size() != models[0].values.size()) {
            throw ShapeError("average_params: parameter length mismatch");
        }
        if (!(weights[k] >= 0)) throw PreconditionError("average_params: negative weight");
        total += weights[k];
    }
    if (!(total > 0)) throw PreconditionError("average_params: weights sum to zero");

    ParamVector out{models[0].prototype_id, Vector::Zero(models[0].values.size())};
    for (std::size_t k = 0; k < models.size(); ++k) {
        out.values += (weights[k] / total) * models[k].values;
    }
    // A convex combination of equal values is that value; keep such coordinates exact.
    for (Eigen::Index i = 0; i < out.values.size(); ++i) {
        const Scalar first = models[0].values[i];
        bool same = true;
        for (std::size_t k = 1; k < models.size() && same; ++k) same = models[k].values[i] == first;
        if (same) out.values[i] = first;
    }
    return out;
}

namespace {

template <typename T>
void put_le(std::ostream& os, T v) {
    static_assert(std::is_unsigned_v<T>);
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        os.put(static_cast<char>((v >> (8 * i)) & 0xff));
    }
}

template <typename T>
T get_le(std::istream& is) {
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        const int c = is.get();
        if (c == std::char_traits<char>::eof()) throw Error("read_params: truncated input");
        v |= static_cast<T>(static_cast<unsigned char>(c)) << (8 * i);
    }
    return v;
}

}  // namespace

void write_params(std::ostream& os, const ParamVector& p) {
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.prototype_id.size()));
    os.write(p.prototype_id.data(), static_cast<std::streamsize>(p.prototype_id.size()));
    put_le<std::uint64_t>(os, static_cast<std::uint64_t>(p.values.size()));
    for (Eigen::Index i = 0; i < p.values.size(); ++i) {
        put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(p.values[i]));
    }
}

ParamVector read_params(std::istream& is) {
    ParamVector p;
    const auto id_len = get_le<std::uint32_t>(is);
    p.prototype_id.resize(id_len);
    is.read(p.prototype_id.data(), id_len);
    if (!is) throw Error("read_params: truncated id");
    const auto n = get_le<std::uint64_t>(is);
    p.values.resize(static_cast<Eigen::Index>(n));
    for (std::uint64_t i = 0; i < n; ++i) {
        p.values[static_cast<Eigen::Index>(i)] = std::bit_cast<Scalar>(get_le<std::uint64_t>(is));
    }
    return p;
}

}  // namespace feddf
