#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "numerics.hpp"
#include "queue.hpp"

namespace aggmatch {

/// Raised when aggregation is asked to run without candidates; the caller is
/// expected to fall back to the warm-up pseudo-labeling path.
struct WarmupRequired : std::runtime_error {
    WarmupRequired() : std::runtime_error("aggregation: no candidates available") {}
};

/// Sign convention for the class term of the similarity. The printed form of
/// the similarity adds the Jensen-Shannon distance itself; under softmax that
/// weights disagreeing distributions higher, so the default negates it
/// (agreement attracts). Softmax shift invariance makes -JS equivalent to
/// 1-JS, so only the sign is meaningful.
enum class ClassTermOrientation { negative_distance, paper_literal };

struct AggregationConfig {
    double tau_sim = 0.05;    // softmax temperature over similarities
    double lambda_sim = 0.5;  // weight of the class term
    ClassTermOrientation orientation = ClassTermOrientation::negative_distance;

    void validate() const {
        if (!(tau_sim > 0.0))
            throw std::invalid_argument("aggregation: tau_sim must be positive");
        if (!(lambda_sim >= 0.0))
            throw std::invalid_argument("aggregation: lambda_sim must be >= 0");
    }
};

/// The anchor of one aggregation: feature and distribution of an unlabeled
/// instance's weak view under the current model, detached from the graph.
struct Query {
    FeatureVector feature;
    ClassDistribution distribution;

    double feature_norm = 0.0;
    double entropy2 = 0.0;

    static Query make(FeatureVector f, ClassDistribution d) {
        Query q;
        q.feature = std::move(f);
        q.distribution = std::move(d);
        q.feature_norm = norm(q.feature);
        q.entropy2 = entropy_bits(q.distribution);
        return q;
    }
};

/// Feature term (cosine) plus weighted class term (signed JS distance).
inline double similarity(const Query& q, const QueueEntry& c,
                         const AggregationConfig& cfg) {
    double cos = 0.0;
    if (q.feature_norm > 0.0 && c.feature_norm > 0.0) {
        cos = dot(q.feature, c.feature) / (q.feature_norm * c.feature_norm);
        cos = std::clamp(cos, -1.0, 1.0);
    }
    // JS divergence as entropy of the mixture minus mean entropy, reusing the
    // entropies cached on query and entry.
    double hm = 0.0;
    for (std::size_t i = 0; i < q.distribution.size(); ++i) {
        const double m = 0.5 * (q.distribution[i] + c.distribution[i]);
        if (m > 0.0) hm -= m * std::log2(m);
    }
    const double jsd = std::clamp(hm - 0.5 * (q.entropy2 + c.entropy2), 0.0, 1.0);
    const double js = std::sqrt(jsd);
    const double cls =
        cfg.orientation == ClassTermOrientation::negative_distance ? -js : js;
    return cos + cfg.lambda_sim * cls;
}

/// Softmax weights over scaled scores, max-subtracted before exponentiation.
inline std::vector<double> softmax_weights(std::span<const double> scores,
                                           double tau) {
    std::vector<double> w(scores.size());
    const double hi = *std::max_element(scores.begin(), scores.end());
    double sum = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        w[i] = std::exp((scores[i] - hi) / tau);
        sum += w[i];
    }
    for (double& v : w) v /= sum;
    return w;
}

/// Attention weights of `q` over the candidate set.
inline std::vector<double> aggregate_weights(
    const Query& q, std::span<const QueueEntry* const> candidates,
    const AggregationConfig& cfg) {
    if (candidates.empty()) throw WarmupRequired();
    std::vector<double> scores(candidates.size());
    for (std::size_t i = 0; i < candidates.size(); ++i)
        scores[i] = similarity(q, *candidates[i], cfg);
    return softmax_weights(scores, cfg.tau_sim);
}

/// Softmax-weighted average of the candidates' class distributions. The
/// result lies in the convex hull of the candidate distributions and is
/// invariant to candidate ordering.
inline ClassDistribution aggregate(const Query& q,
                                   std::span<const QueueEntry* const> candidates,
                                   const AggregationConfig& cfg) {
    const std::vector<double> w = aggregate_weights(q, candidates, cfg);
    ClassDistribution out(q.distribution.size(), 0.0);
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const ClassDistribution& p = candidates[i]->distribution;
        for (std::size_t c = 0; c < out.size(); ++c) out[c] += w[i] * p[c];
    }
    return out;
}

/// One aggregated hypothesis per partition subset.
inline std::vector<ClassDistribution> aggregate_per_subset(
    const Query& q, const QueuePartition& partition, const AggregationConfig& cfg) {
    if (partition.subsets.empty()) throw WarmupRequired();
    std::vector<ClassDistribution> hypotheses;
    hypotheses.reserve(partition.subsets.size());
    for (const auto& subset : partition.subsets) {
        if (subset.empty()) throw WarmupRequired();
        hypotheses.push_back(aggregate(q, subset, cfg));
    }
    return hypotheses;
}

/// Elementwise mean of the per-subset hypotheses.
inline ClassDistribution mean_aggregate(
    std::span<const ClassDistribution> hypotheses) {
    if (hypotheses.empty())
        throw std::invalid_argument("mean_aggregate: empty hypothesis list");
    ClassDistribution out(hypotheses.front().size(), 0.0);
    for (const auto& h : hypotheses) {
        if (h.size() != out.size())
            throw std::invalid_argument("mean_aggregate: length mismatch");
        for (std::size_t c = 0; c < out.size(); ++c) out[c] += h[c];
    }
    const double inv = 1.0 / static_cast<double>(hypotheses.size());
    for (double& v : out) v *= inv;
    return out;
}

}  // namespace aggmatch
