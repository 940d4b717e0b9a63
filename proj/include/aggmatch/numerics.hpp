#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace aggmatch {

/// Probability vector over the class set. Entries are non-negative and sum
/// to one within kDistributionTol.
using ClassDistribution = std::vector<double>;

/// Embedding from the penultimate layer of the backbone.
using FeatureVector = std::vector<double>;

inline constexpr double kProbFloor = 1e-12;       // floor applied before any log
inline constexpr double kDistributionTol = 1e-9;  // allowed |sum - 1|

inline bool all_finite(std::span<const double> values) {
    for (double v : values) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

inline bool is_distribution(const ClassDistribution& p,
                            double tol = kDistributionTol) {
    if (p.empty()) return false;
    double sum = 0.0;
    for (double v : p) {
        if (!(v >= 0.0)) return false;  // catches NaN as well
        sum += v;
    }
    return std::abs(sum - 1.0) <= tol;
}

/// Warning sink for recoverable numeric degeneracies. Replaceable in tests.
inline void default_warning_sink(const std::string& msg) {
    std::fprintf(stderr, "[aggmatch] warning: %s\n", msg.c_str());
}

inline void (*&warning_sink())(const std::string&) {
    static void (*sink)(const std::string&) = &default_warning_sink;
    return sink;
}

inline void warn(const std::string& msg) { warning_sink()(msg); }

inline ClassDistribution one_hot(std::size_t index, std::size_t size) {
    if (index >= size) throw std::invalid_argument("one_hot: index out of range");
    ClassDistribution p(size, 0.0);
    p[index] = 1.0;
    return p;
}

inline ClassDistribution uniform_distribution(std::size_t size) {
    if (size == 0) throw std::invalid_argument("uniform_distribution: empty");
    return ClassDistribution(size, 1.0 / static_cast<double>(size));
}

inline int argmax_index(std::span<const double> values) {
    if (values.empty()) throw std::invalid_argument("argmax_index: empty vector");
    int best = 0;
    for (int i = 1; i < static_cast<int>(values.size()); ++i) {
        if (values[i] > values[best]) best = i;  // ties resolve to lowest index
    }
    return best;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

/// Softmax with temperature. Scores are max-subtracted before exponentiation,
/// which also makes the result invariant under a constant shift of the input.
inline ClassDistribution softmax(std::span<const double> scores,
                                 double temperature) {
    if (scores.empty()) throw std::invalid_argument("softmax: empty score vector");
    if (!(temperature > 0.0))
        throw std::invalid_argument("softmax: temperature must be positive");
    if (!all_finite(scores))
        throw std::invalid_argument("softmax: non-finite score");

    const double hi = *std::max_element(scores.begin(), scores.end());
    ClassDistribution out(scores.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        out[i] = std::exp((scores[i] - hi) / temperature);
        sum += out[i];
    }
    for (double& v : out) v /= sum;
    return out;
}

/// Cosine similarity in [-1, 1]. A zero-norm operand yields 0: degenerate
/// embeddings early in training must not abort a run.
inline double cosine_similarity(const FeatureVector& a, const FeatureVector& b) {
    if (a.size() != b.size())
        throw std::invalid_argument("cosine_similarity: dimension mismatch");
    const double na = norm(a);
    const double nb = norm(b);
    if (na == 0.0 || nb == 0.0) {
        static std::atomic<bool> warned{false};
        if (!warned.exchange(true))
            warn("cosine_similarity: zero-norm feature vector, returning 0");
        return 0.0;
    }
    const double c = dot(a, b) / (na * nb);
    return std::clamp(c, -1.0, 1.0);
}

/// Shannon entropy in bits, ignoring zero entries.
inline double entropy_bits(std::span<const double> p) {
    double h = 0.0;
    for (double v : p) {
        if (v > 0.0) h -= v * std::log2(std::max(v, kProbFloor));
    }
    return h;
}

/// Shannon entropy in nats, ignoring zero entries.
inline double entropy(const ClassDistribution& p) {
    double h = 0.0;
    for (double v : p) {
        if (v > 0.0) h -= v * std::log(std::max(v, kProbFloor));
    }
    return h;
}

/// Jensen-Shannon distance: the square root of the Jensen-Shannon divergence
/// computed with base-2 logarithms, so the result is a metric in [0, 1].
inline double js_distance(const ClassDistribution& p, const ClassDistribution& q) {
    if (p.size() != q.size())
        throw std::invalid_argument("js_distance: length mismatch");
    ClassDistribution m(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) m[i] = 0.5 * (p[i] + q[i]);
    const double jsd =
        entropy_bits(m) - 0.5 * (entropy_bits(p) + entropy_bits(q));
    return std::sqrt(std::clamp(jsd, 0.0, 1.0));
}

/// Temperature sharpening: out_i proportional to p_i^(1/T). T = 1 is the
/// identity; T -> 0 approaches the argmax one-hot. Entries are scaled by the
/// maximum before exponentiation to avoid underflow at small T.
inline ClassDistribution sharpen(const ClassDistribution& p, double temperature) {
    if (!(temperature > 0.0))
        throw std::invalid_argument("sharpen: temperature must be positive");
    const double hi = *std::max_element(p.begin(), p.end());
    if (!(hi > 0.0)) throw std::invalid_argument("sharpen: invalid distribution");
    ClassDistribution out(p.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        out[i] = p[i] > 0.0 ? std::pow(p[i] / hi, 1.0 / temperature) : 0.0;
        sum += out[i];
    }
    for (double& v : out) v /= sum;
    return out;
}

/// Argmax class plus its one-hot distribution; ties break to the lowest index.
inline std::pair<int, ClassDistribution> hard_label(const ClassDistribution& p) {
    const int k = argmax_index(p);
    return {k, one_hot(static_cast<std::size_t>(k), p.size())};
}

/// Cross-entropy in nats with soft targets. Predictions are floored at
/// kProbFloor before the log.
inline double cross_entropy(const ClassDistribution& target,
                            const ClassDistribution& pred) {
    if (target.size() != pred.size())
        throw std::invalid_argument("cross_entropy: length mismatch");
    double ce = 0.0;
    for (std::size_t i = 0; i < target.size(); ++i) {
        if (target[i] > 0.0) ce -= target[i] * std::log(std::max(pred[i], kProbFloor));
    }
    return ce;
}

}  // namespace aggmatch
