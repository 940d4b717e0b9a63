#include <doctest.h>

#include <aggmatch/aggregation.hpp>
#include <aggmatch/numerics.hpp>
#include <aggmatch/queue.hpp>
#include <aggmatch/rng.hpp>

#include <cmath>
#include <vector>

using namespace aggmatch;

namespace {

QueueEntry candidate(FeatureVector f, ClassDistribution d) {
    return QueueEntry::make(std::move(f), std::move(d), EntrySource::unlabeled, 0);
}

std::vector<const QueueEntry*> views(const std::vector<QueueEntry>& owned) {
    std::vector<const QueueEntry*> v;
    for (const auto& e : owned) v.push_back(&e);
    return v;
}

ClassDistribution random_distribution(Rng& rng, std::size_t size) {
    ClassDistribution p(size);
    double sum = 0.0;
    for (auto& v : p) {
        v = -std::log(1.0 - rng.uniform());
        sum += v;
    }
    for (auto& v : p) v /= sum;
    return p;
}

// Naive double-loop reference, written from the raw formulas and independent
// of the library implementation: unnormalized softmax over
// cosine + lambda * sign(JS), JS via the base-2 KL form.
ClassDistribution naive_aggregate(const Query& q,
                                  const std::vector<QueueEntry>& candidates,
                                  const AggregationConfig& cfg) {
    auto cosine = [](const FeatureVector& a, const FeatureVector& b) {
        double num = 0.0, na = 0.0, nb = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            num += a[i] * b[i];
            na += a[i] * a[i];
            nb += b[i] * b[i];
        }
        if (na == 0.0 || nb == 0.0) return 0.0;
        return num / (std::sqrt(na) * std::sqrt(nb));
    };
    auto js = [](const ClassDistribution& p, const ClassDistribution& r) {
        double d = 0.0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double m = 0.5 * (p[i] + r[i]);
            if (p[i] > 0.0) d += 0.5 * p[i] * std::log2(p[i] / m);
            if (r[i] > 0.0) d += 0.5 * r[i] * std::log2(r[i] / m);
        }
        return std::sqrt(std::max(d, 0.0));
    };
    std::vector<double> expo(candidates.size());
    double total = 0.0;
    for (std::size_t l = 0; l < candidates.size(); ++l) {
        const double sign =
            cfg.orientation == ClassTermOrientation::negative_distance ? -1.0 : 1.0;
        const double s = cosine(q.feature, candidates[l].feature) +
                         cfg.lambda_sim * sign * js(q.distribution, candidates[l].distribution);
        expo[l] = std::exp(s / cfg.tau_sim);
        total += expo[l];
    }
    ClassDistribution out(q.distribution.size(), 0.0);
    for (std::size_t l = 0; l < candidates.size(); ++l) {
        for (std::size_t c = 0; c < out.size(); ++c)
            out[c] += (expo[l] / total) * candidates[l].distribution[c];
    }
    return out;
}

}  // namespace

TEST_CASE("similarity: identical pair, feature-only ablation, opposed pair") {
    AggregationConfig cfg;
    cfg.lambda_sim = 0.5;

    Query q = Query::make({1.0, 2.0, 3.0}, {0.2, 0.8});
    QueueEntry same = candidate({1.0, 2.0, 3.0}, {0.2, 0.8});
    CHECK(similarity(q, same, cfg) == doctest::Approx(1.0));

    cfg.lambda_sim = 0.0;
    QueueEntry other = candidate({-1.0, 0.5, 0.0}, {0.9, 0.1});
    CHECK(similarity(q, other, cfg) ==
          doctest::Approx(cosine_similarity(q.feature, other.feature)));

    cfg.lambda_sim = 0.5;
    Query qo = Query::make({1.0, 0.0}, {1.0, 0.0});
    QueueEntry co = candidate({0.0, 1.0}, {0.0, 1.0});
    CHECK(similarity(qo, co, cfg) == doctest::Approx(-0.5));
}

TEST_CASE("similarity: paper-literal orientation flips the class term sign") {
    AggregationConfig neg;
    AggregationConfig lit;
    lit.orientation = ClassTermOrientation::paper_literal;
    Query q = Query::make({1.0, 0.0}, {0.9, 0.1});
    QueueEntry c = candidate({1.0, 0.0}, {0.1, 0.9});
    const double js = js_distance(q.distribution, c.distribution);
    CHECK(similarity(q, c, neg) == doctest::Approx(1.0 - 0.5 * js));
    CHECK(similarity(q, c, lit) == doctest::Approx(1.0 + 0.5 * js));
}

TEST_CASE("aggregate: single candidate is returned exactly") {
    AggregationConfig cfg;
    std::vector<QueueEntry> pool;
    pool.push_back(candidate({0.3, 0.4}, {0.25, 0.35, 0.40}));
    Query q = Query::make({1.0, -1.0}, {0.1, 0.2, 0.7});
    auto out = aggregate(q, views(pool), cfg);
    CHECK(out == pool[0].distribution);
}

TEST_CASE("aggregate: equally similar candidates average evenly") {
    AggregationConfig cfg;
    Query q = Query::make({1.0, 0.0}, {0.5, 0.5});
    std::vector<QueueEntry> pool;
    // Both candidates orthogonal to the query feature and JS-symmetric
    // around its distribution.
    pool.push_back(candidate({0.0, 1.0}, {0.8, 0.2}));
    pool.push_back(candidate({0.0, 1.0}, {0.2, 0.8}));
    auto out = aggregate(q, views(pool), cfg);
    CHECK(out[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(out[1] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("aggregate: vanishing temperature selects the most similar candidate") {
    AggregationConfig cfg;
    cfg.tau_sim = 1e-6;
    Query q = Query::make({1.0, 0.1}, {0.6, 0.4});
    std::vector<QueueEntry> pool;
    pool.push_back(candidate({1.0, 0.1}, {0.6, 0.4}));   // strictly most similar
    pool.push_back(candidate({0.4, 1.0}, {0.3, 0.7}));
    pool.push_back(candidate({-1.0, 0.2}, {0.5, 0.5}));
    auto out = aggregate(q, views(pool), cfg);
    for (std::size_t c = 0; c < out.size(); ++c)
        CHECK(std::abs(out[c] - pool[0].distribution[c]) < 1e-6);
}

TEST_CASE("aggregate: empty candidate set signals warm-up") {
    AggregationConfig cfg;
    Query q = Query::make({1.0}, {1.0});
    std::vector<const QueueEntry*> none;
    CHECK_THROWS_AS(aggregate(q, none, cfg), WarmupRequired);

    QueuePartition part;
    part.subsets.resize(2);  // both empty
    CHECK_THROWS_AS(aggregate_per_subset(q, part, cfg), WarmupRequired);
}

TEST_CASE("aggregate_per_subset: identity at M=1 and identical subsets agree") {
    AggregationConfig cfg;
    Rng rng(21);
    std::vector<QueueEntry> pool;
    for (int i = 0; i < 6; ++i) {
        FeatureVector f(4);
        for (auto& v : f) v = rng.normal();
        pool.push_back(candidate(std::move(f), random_distribution(rng, 3)));
    }
    Query q = Query::make({1.0, 0.0, 0.0, 0.0}, random_distribution(rng, 3));

    QueuePartition single;
    single.subsets.push_back(views(pool));
    auto hyp = aggregate_per_subset(q, single, cfg);
    REQUIRE(hyp.size() == 1);
    auto direct = aggregate(q, views(pool), cfg);
    for (std::size_t c = 0; c < direct.size(); ++c)
        CHECK(hyp[0][c] == doctest::Approx(direct[c]).epsilon(1e-15));

    QueuePartition twin;
    twin.subsets.push_back(views(pool));
    twin.subsets.push_back(views(pool));
    auto pair = aggregate_per_subset(q, twin, cfg);
    REQUIRE(pair.size() == 2);
    CHECK(pair[0] == pair[1]);
}

TEST_CASE("mean_aggregate: fixed points and validity") {
    ClassDistribution a{1.0, 0.0};
    ClassDistribution b{0.0, 1.0};
    auto mixed = mean_aggregate(std::vector<ClassDistribution>{a, b});
    CHECK(mixed == ClassDistribution{0.5, 0.5});

    auto same = mean_aggregate(std::vector<ClassDistribution>{a, a, a});
    CHECK(same == a);

    Rng rng(3);
    std::vector<ClassDistribution> hs;
    for (int i = 0; i < 5; ++i) hs.push_back(random_distribution(rng, 4));
    CHECK(is_distribution(mean_aggregate(hs)));
    CHECK_THROWS_AS(mean_aggregate(std::vector<ClassDistribution>{}),
                    std::invalid_argument);
}

TEST_CASE("aggregate matches the naive reference on random instances") {
    Rng rng(2024);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t classes = 2 + rng.below(9);   // Y <= 10
        const std::size_t count = 1 + rng.below(64);    // <= 64 candidates
        const std::size_t dim = 2 + rng.below(15);
        AggregationConfig cfg;
        cfg.tau_sim = rng.uniform(0.05, 1.0);
        cfg.lambda_sim = rng.uniform(0.0, 1.0);
        cfg.orientation = rng.bernoulli(0.5) ? ClassTermOrientation::negative_distance
                                             : ClassTermOrientation::paper_literal;
        std::vector<QueueEntry> pool;
        for (std::size_t i = 0; i < count; ++i) {
            FeatureVector f(dim);
            for (auto& v : f) v = rng.normal();
            pool.push_back(candidate(std::move(f), random_distribution(rng, classes)));
        }
        FeatureVector qf(dim);
        for (auto& v : qf) v = rng.normal();
        Query q = Query::make(std::move(qf), random_distribution(rng, classes));

        auto fast = aggregate(q, views(pool), cfg);
        auto slow = naive_aggregate(q, pool, cfg);
        for (std::size_t c = 0; c < fast.size(); ++c)
            CHECK(std::abs(fast[c] - slow[c]) < 1e-12);
        CHECK(is_distribution(fast));
    }
}

TEST_CASE("aggregate: permutation invariance and convex hull membership") {
    Rng rng(404);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t classes = 2 + rng.below(5);
        const std::size_t count = 2 + rng.below(12);
        AggregationConfig cfg;
        cfg.tau_sim = rng.uniform(0.05, 0.5);
        std::vector<QueueEntry> pool;
        for (std::size_t i = 0; i < count; ++i) {
            FeatureVector f(6);
            for (auto& v : f) v = rng.normal();
            pool.push_back(candidate(std::move(f), random_distribution(rng, classes)));
        }
        FeatureVector qf(6);
        for (auto& v : qf) v = rng.normal();
        Query q = Query::make(std::move(qf), random_distribution(rng, classes));

        auto ordered = views(pool);
        auto out = aggregate(q, ordered, cfg);

        auto shuffled = ordered;
        rng.shuffle(shuffled);
        auto out2 = aggregate(q, shuffled, cfg);
        for (std::size_t c = 0; c < out.size(); ++c)
            CHECK(std::abs(out[c] - out2[c]) < 1e-12);

        for (std::size_t c = 0; c < out.size(); ++c) {
            double lo = 1.0, hi = 0.0;
            for (const auto& e : pool) {
                lo = std::min(lo, e.distribution[c]);
                hi = std::max(hi, e.distribution[c]);
            }
            CHECK(out[c] >= lo - 1e-12);
            CHECK(out[c] <= hi + 1e-12);
        }
    }
}

TEST_CASE("softmax weights: shift invariance makes -JS and 1-JS equivalent") {
    Rng rng(55);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 2 + rng.below(16);
        std::vector<double> neg_js(n);
        for (auto& s : neg_js) s = rng.uniform(-1.0, 0.0);
        std::vector<double> one_minus(n);
        for (std::size_t i = 0; i < n; ++i) one_minus[i] = 1.0 + neg_js[i];
        const double tau = rng.uniform(0.05, 1.0);
        auto wa = softmax_weights(neg_js, tau);
        auto wb = softmax_weights(one_minus, tau);
        for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(wa[i] - wb[i]) < 1e-12);
    }
}

TEST_CASE("softmax weights: lower temperature concentrates on the argmax") {
    Rng rng(66);
    std::vector<double> scores(10);
    for (auto& s : scores) s = rng.uniform(-1.0, 1.0);
    const int best = argmax_index(scores);
    double prev = 0.0;
    for (double tau : {2.0, 1.0, 0.5, 0.1, 0.05, 0.01}) {
        const double w = softmax_weights(scores, tau)[static_cast<std::size_t>(best)];
        CHECK(w >= prev - 1e-12);
        prev = w;
    }
    CHECK(prev > 0.999);
}
