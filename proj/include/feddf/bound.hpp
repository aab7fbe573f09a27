#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "feddf/data.hpp"

namespace feddf::bound {

/// Axis-aligned threshold: h(x) = [x_feature >= threshold], optionally negated.
struct Stump {
    int feature = 0;
    Scalar threshold = 0;
    bool negate = false;

    int operator()(const auto& x) const {
        const int v = x(feature) >= threshold ? 1 : 0;
        return negate ? 1 - v : v;
    }
};

/// A finite class of binary stumps with a documented VC-dimension upper bound.
struct FiniteHypothesisClass {
    std::string family;
    std::vector<Stump> hypotheses;
    int vc_dim = 1;

    /// One-sided thresholds [x >= t] on feature 0; VC dimension 1.
    static FiniteHypothesisClass thresholds(std::span<const Scalar> cuts);
    /// Thresholds of both orientations on feature 0; VC dimension 2.
    static FiniteHypothesisClass signed_thresholds(std::span<const Scalar> cuts);
    /// Both-orientation stumps on features 0 and 1 of 2-D inputs; VC dimension 3.
    static FiniteHypothesisClass stumps_2d(std::span<const Scalar> cuts);

    /// Smaller of the family bound and floor(log2 |H|).
    int effective_vc_dim() const;
};

/// Mean 0-1 loss of h on a binary-labelled sample.
Scalar empirical_risk(const Stump& h, const Dataset& sample);

/// Mean over the sample of |mean_k h_k(x) - y|: the averaged hypothesis under absolute loss.
Scalar ensemble_risk(std::span<const Stump> hyps, const Dataset& sample);

/// 2 * max over hypothesis pairs of |Pr_A[h != h'] - Pr_B[h != h']|, exhaustive.
Scalar h_delta_h_divergence(const Dataset& sample_a, const Dataset& sample_b, const FiniteHypothesisClass& H);

/// min over h of L_global(h) + L_local(h), exhaustive.
Scalar lambda_k(const FiniteHypothesisClass& H, const Dataset& global_sample, const Dataset& local_sample);

/// Empirical risk minimizer over H (first minimizer in class order).
const Stump& erm(const FiniteHypothesisClass& H, const Dataset& sample);

/// Sauer's bound sum_{i<=d} C(m, i), returned as its natural log.
Scalar log_sauer_bound(std::int64_t m, int d);

/// (4 + sqrt(log tau(2m))) / ((delta / K) * sqrt(2m)), with tau bounded by Sauer's lemma.
Scalar complexity_term(int K, std::int64_t m, Scalar delta, int vc_dim);

/// One client's domain: the m-sample it trains on and a large reference sample standing in for D_k.
struct ClientDomain {
    Dataset sample;
    Dataset reference;
};

struct DiscrepancyTerm {
    Scalar half_divergence = 0;  // 0.5 * d_HdH(D_k, D)
    Scalar lambda = 0;
};

struct BoundReport {
    int K = 0;
    std::int64_t m = 0;
    Scalar delta = 0.05;
    Scalar lhs = 0;              // L_D(mean_k h_k)
    Scalar erm_term = 0;         // L_Dhat(h_Dhat)
    Scalar complexity_term = 0;
    std::vector<DiscrepancyTerm> discrepancy_terms;
    Scalar rhs = 0;
    bool holds = false;
    bool vacuous = false;        // rhs >= 1
    Scalar slack() const { return rhs - lhs; }
};

/// Evaluates every term of the ensemble risk bound. `global_reference` stands in for D;
/// each client trains its ERM on its m-sample. Throws PreconditionError on unequal m.
BoundReport check_bound(Scalar delta, const FiniteHypothesisClass& H, const Dataset& global_reference,
                        std::span<const ClientDomain> clients);

std::string to_json(const BoundReport& r);

/// Generator for the seeded regression suite: K clients with shifted 1-D two-class mixtures.
struct InstanceSpec {
    int K = 2;
    std::int64_t m = 500;
    int reference_size = 100000;
    Scalar max_shift = 1.0;
    Scalar label_noise = 0.1;
    std::uint64_t seed = 0;
};

struct BoundInstance {
    std::vector<ClientDomain> clients;
    Dataset global_reference;
};

BoundInstance make_instance(const InstanceSpec& spec);

}  // namespace feddf::bound
