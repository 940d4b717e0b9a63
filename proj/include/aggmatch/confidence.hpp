#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "numerics.hpp"

namespace aggmatch {

/// Empirical argmax distribution over the hypothesis set; entries are
/// integer multiples of 1/M.
using VoteDistribution = ClassDistribution;

/// One-hot voting across hypotheses, ties breaking to the lowest class index.
inline VoteDistribution vote(std::span<const ClassDistribution> hypotheses) {
    if (hypotheses.empty())
        throw std::invalid_argument("vote: empty hypothesis list");
    VoteDistribution a(hypotheses.front().size(), 0.0);
    for (const auto& h : hypotheses) {
        if (h.size() != a.size())
            throw std::invalid_argument("vote: length mismatch");
        a[static_cast<std::size_t>(argmax_index(h))] += 1.0;
    }
    const double inv = 1.0 / static_cast<double>(hypotheses.size());
    for (double& v : a) v *= inv;
    return a;
}

/// Consensus confidence: exp of the negative vote entropy (nats). Unanimous
/// votes give 1; uniform votes over Y classes give 1/Y.
inline double confidence_weight(const VoteDistribution& a) {
    return std::exp(-entropy(a));
}

/// Thresholding variant: passes iff the vote entropy is at most tau_u.
inline int uncertainty_gate(const VoteDistribution& a, double tau_u) {
    if (!(tau_u >= 0.0))
        throw std::invalid_argument("uncertainty_gate: tau_u must be >= 0");
    return entropy(a) <= tau_u ? 1 : 0;
}

}  // namespace aggmatch
