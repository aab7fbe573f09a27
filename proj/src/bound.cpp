#include "feddf/bound.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

#include <json.hpp>

namespace feddf::bound {

namespace {

FiniteHypothesisClass make_class(std::string family, std::span<const Scalar> cuts, std::initializer_list<int> features,
                                 bool both_signs, int vc) {
    FiniteHypothesisClass H;
    H.family = std::move(family);
    H.vc_dim = vc;
    for (int f : features) {
        for (Scalar c : cuts) {
            H.hypotheses.push_back({f, c, false});
            if (both_signs) H.hypotheses.push_back({f, c, true});
        }
    }
    if (H.hypotheses.empty()) throw PreconditionError("hypothesis class is empty");
    return H;
}

using Bits = std::vector<std::uint64_t>;

Bits predictions(const Stump& h, const Dataset& s) {
    Bits b((static_cast<std::size_t>(s.size()) + 63) / 64, 0);
    for (Eigen::Index i = 0; i < s.size(); ++i) {
        if (h(s.inputs.row(i))) b[static_cast<std::size_t>(i) / 64] |= std::uint64_t{1} << (i % 64);
    }
    return b;
}

std::vector<Bits> all_predictions(const FiniteHypothesisClass& H, const Dataset& s) {
    std::vector<Bits> out;
    out.reserve(H.hypotheses.size());
    for (const auto& h : H.hypotheses) out.push_back(predictions(h, s));
    return out;
}

Scalar disagreement(const Bits& a, const Bits& b, Eigen::Index n) {
    std::int64_t c = 0;
    for (std::size_t w = 0; w < a.size(); ++w) c += std::popcount(a[w] ^ b[w]);
    return static_cast<Scalar>(c) / static_cast<Scalar>(n);
}

// Every hypothesis's predictions on one sample, plus the labels, as bitsets.
struct Evaluated {
    std::vector<Bits> preds;
    Bits labels;
    Eigen::Index n = 0;
};

Evaluated evaluate(const FiniteHypothesisClass& H, const Dataset& s) {
    Evaluated e;
    e.n = s.size();
    e.preds = all_predictions(H, s);
    e.labels.assign((static_cast<std::size_t>(s.size()) + 63) / 64, 0);
    for (Eigen::Index i = 0; i < s.size(); ++i) {
        if (s.labels[static_cast<std::size_t>(i)] != 0) e.labels[static_cast<std::size_t>(i) / 64] |= std::uint64_t{1} << (i % 64);
    }
    return e;
}

std::vector<Scalar> risks(const Evaluated& e) {
    std::vector<Scalar> out;
    out.reserve(e.preds.size());
    for (const auto& p : e.preds) out.push_back(disagreement(p, e.labels, e.n));
    return out;
}

Scalar divergence(const Evaluated& a, const Evaluated& b) {
    Scalar best = 0;
    // |Pr_A - Pr_B| is symmetric in (h, h'), so unordered pairs cover all ordered ones.
    for (std::size_t i = 0; i < a.preds.size(); ++i) {
        for (std::size_t j = i + 1; j < a.preds.size(); ++j) {
            const Scalar d = std::abs(disagreement(a.preds[i], a.preds[j], a.n) - disagreement(b.preds[i], b.preds[j], b.n));
            best = std::max(best, d);
        }
    }
    return 2 * best;
}

Scalar min_summed_risk(const std::vector<Scalar>& a, const std::vector<Scalar>& b) {
    Scalar best = std::numeric_limits<Scalar>::infinity();
    for (std::size_t i = 0; i < a.size(); ++i) best = std::min(best, a[i] + b[i]);
    return best;
}

std::size_t argmin(const std::vector<Scalar>& r) {
    return static_cast<std::size_t>(std::min_element(r.begin(), r.end()) - r.begin());
}

void require_sample(const Dataset& s, const char* what) {
    if (s.size() == 0) throw PreconditionError(std::string(what) + ": empty sample");
}

Dataset concat(std::span<const Dataset> parts) {
    Dataset out;
    Eigen::Index rows = 0;
    for (const auto& p : parts) rows += p.size();
    out.class_count = parts.front().class_count;
    out.inputs.resize(rows, parts.front().dim());
    Eigen::Index r = 0;
    for (const auto& p : parts) {
        out.inputs.middleRows(r, p.size()) = p.inputs;
        out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
        r += p.size();
    }
    return out;
}

}  // namespace

FiniteHypothesisClass FiniteHypothesisClass::thresholds(std::span<const Scalar> cuts) {
    return make_class("thresholds", cuts, {0}, false, 1);
}

FiniteHypothesisClass FiniteHypothesisClass::signed_thresholds(std::span<const Scalar> cuts) {
    return make_class("signed_thresholds", cuts, {0}, true, 2);
}

FiniteHypothesisClass FiniteHypothesisClass::stumps_2d(std::span<const Scalar> cuts) {
    return make_class("stumps_2d", cuts, {0, 1}, true, 3);
}

int FiniteHypothesisClass::effective_vc_dim() const {
    const int log_card = static_cast<int>(std::floor(std::log2(static_cast<double>(hypotheses.size()))));
    return std::min(vc_dim, log_card);
}

Scalar empirical_risk(const Stump& h, const Dataset& sample) {
    require_sample(sample, "empirical_risk");
    Eigen::Index wrong = 0;
    for (Eigen::Index i = 0; i < sample.size(); ++i) {
        if (h(sample.inputs.row(i)) != sample.labels[static_cast<std::size_t>(i)]) ++wrong;
    }
    return static_cast<Scalar>(wrong) / static_cast<Scalar>(sample.size());
}

Scalar ensemble_risk(std::span<const Stump> hyps, const Dataset& sample) {
    if (hyps.empty()) throw PreconditionError("ensemble_risk: no hypotheses");
    require_sample(sample, "ensemble_risk");
    Scalar total = 0;
    const auto k = static_cast<Scalar>(hyps.size());
    for (Eigen::Index i = 0; i < sample.size(); ++i) {
        int votes = 0;
        for (const auto& h : hyps) votes += h(sample.inputs.row(i));
        total += std::abs(votes / k - sample.labels[static_cast<std::size_t>(i)]);
    }
    return total / static_cast<Scalar>(sample.size());
}

Scalar h_delta_h_divergence(const Dataset& sample_a, const Dataset& sample_b, const FiniteHypothesisClass& H) {
    require_sample(sample_a, "h_delta_h_divergence");
    require_sample(sample_b, "h_delta_h_divergence");
    return divergence(evaluate(H, sample_a), evaluate(H, sample_b));
}

Scalar lambda_k(const FiniteHypothesisClass& H, const Dataset& global_sample, const Dataset& local_sample) {
    require_sample(global_sample, "lambda_k");
    require_sample(local_sample, "lambda_k");
    return min_summed_risk(risks(evaluate(H, global_sample)), risks(evaluate(H, local_sample)));
}

const Stump& erm(const FiniteHypothesisClass& H, const Dataset& sample) {
    if (H.hypotheses.empty()) throw PreconditionError("erm: empty hypothesis class");
    require_sample(sample, "erm");
    return H.hypotheses[argmin(risks(evaluate(H, sample)))];
}

Scalar log_sauer_bound(std::int64_t m, int d) {
    if (m < 0 || d < 0) throw PreconditionError("log_sauer_bound: negative argument");
    if (d >= m) return static_cast<Scalar>(m) * std::log(2.0);
    // log-sum-exp over log C(m, i), i = 0..d
    std::vector<Scalar> terms;
    const auto lm = std::lgamma(static_cast<Scalar>(m) + 1);
    for (int i = 0; i <= d; ++i) {
        terms.push_back(lm - std::lgamma(i + 1.0) - std::lgamma(static_cast<Scalar>(m - i) + 1));
    }
    const Scalar mx = *std::max_element(terms.begin(), terms.end());
    Scalar s = 0;
    for (Scalar t : terms) s += std::exp(t - mx);
    return mx + std::log(s);
}

Scalar complexity_term(int K, std::int64_t m, Scalar delta, int vc_dim) {
    if (K < 1 || m < 1) throw PreconditionError("complexity_term: K and m must be positive");
    if (!(delta > 0 && delta < 1)) throw PreconditionError("complexity_term: delta must lie in (0, 1)");
    const Scalar log_tau = log_sauer_bound(2 * m, vc_dim);
    return (4 + std::sqrt(log_tau)) / ((delta / K) * std::sqrt(2.0 * static_cast<Scalar>(m)));
}

BoundReport check_bound(Scalar delta, const FiniteHypothesisClass& H, const Dataset& global_reference,
                        std::span<const ClientDomain> clients) {
    if (clients.empty()) throw PreconditionError("check_bound: no clients");
    require_sample(global_reference, "check_bound");
    const auto m = clients.front().sample.size();
    for (const auto& c : clients) {
        if (c.sample.size() != m) throw PreconditionError("check_bound: clients must hold equal m samples");
        require_sample(c.sample, "check_bound");
        require_sample(c.reference, "check_bound");
    }

    BoundReport r;
    r.K = static_cast<int>(clients.size());
    r.m = m;
    r.delta = delta;

    std::vector<Stump> local_erms;
    std::vector<Dataset> samples;
    for (const auto& c : clients) {
        local_erms.push_back(erm(H, c.sample));
        samples.push_back(c.sample);
    }
    r.lhs = ensemble_risk(local_erms, global_reference);

    const Dataset pooled = concat(samples);
    r.erm_term = std::ranges::min(risks(evaluate(H, pooled)));
    r.complexity_term = complexity_term(r.K, m, delta, H.effective_vc_dim());

    const Evaluated global = evaluate(H, global_reference);
    const auto global_risks = risks(global);
    Scalar disc = 0;
    for (const auto& c : clients) {
        const Evaluated local = evaluate(H, c.reference);
        DiscrepancyTerm d;
        d.half_divergence = 0.5 * divergence(local, global);
        d.lambda = min_summed_risk(global_risks, risks(local));
        disc += d.half_divergence + d.lambda;
        r.discrepancy_terms.push_back(d);
    }
    r.rhs = r.erm_term + r.complexity_term + disc / r.K;
    r.holds = r.lhs <= r.rhs;
    r.vacuous = r.rhs >= 1;
    return r;
}

std::string to_json(const BoundReport& r) {
    nlohmann::json j;
    j["K"] = r.K;
    j["m"] = r.m;
    j["delta"] = r.delta;
    j["lhs"] = r.lhs;
    j["erm_term"] = r.erm_term;
    j["complexity_term"] = r.complexity_term;
    auto terms = nlohmann::json::array();
    for (const auto& d : r.discrepancy_terms) {
        terms.push_back({{"half_divergence", d.half_divergence}, {"lambda", d.lambda}});
    }
    j["discrepancy_terms"] = terms;
    j["rhs"] = r.rhs;
    j["slack"] = r.slack();
    j["holds"] = r.holds;
    j["vacuous"] = r.vacuous;
    return j.dump();
}

namespace {

Dataset two_class_mixture(std::int64_t n, Scalar shift, Scalar noise, Rng& rng) {
    Dataset d;
    d.class_count = 2;
    d.inputs.resize(n, 1);
    d.labels.resize(static_cast<std::size_t>(n));
    std::normal_distribution<Scalar> normal(0.0, 1.0);
    std::bernoulli_distribution flip(noise);
    for (std::int64_t i = 0; i < n; ++i) {
        const int y = static_cast<int>(i % 2);
        d.inputs(i, 0) = (y == 1 ? 1.0 : -1.0) + shift + normal(rng);
        d.labels[static_cast<std::size_t>(i)] = flip(rng) ? 1 - y : y;
    }
    return d;
}

}  // namespace

BoundInstance make_instance(const InstanceSpec& spec) {
    if (spec.K < 1 || spec.m < 1 || spec.reference_size < 1) throw PreconditionError("make_instance: bad sizes");
    Rng rng(spec.seed);
    std::uniform_real_distribution<Scalar> shift(-spec.max_shift, spec.max_shift);
    BoundInstance inst;
    std::vector<Dataset> refs;
    for (int k = 0; k < spec.K; ++k) {
        const Scalar s = shift(rng);
        ClientDomain c;
        c.sample = two_class_mixture(spec.m, s, spec.label_noise, rng);
        c.reference = two_class_mixture(spec.reference_size, s, spec.label_noise, rng);
        refs.push_back(c.reference);
        inst.clients.push_back(std::move(c));
    }
    inst.global_reference = concat(refs);
    return inst;
}

}  // namespace feddf::bound
