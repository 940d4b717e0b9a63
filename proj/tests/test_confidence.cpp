#include <doctest.h>

#include <aggmatch/confidence.hpp>
#include <aggmatch/numerics.hpp>
#include <aggmatch/rng.hpp>

#include <cmath>
#include <vector>

using namespace aggmatch;

namespace {

// Hypothesis whose argmax is `cls`.
ClassDistribution peaked(int cls, std::size_t classes) {
    ClassDistribution p(classes, 0.1 / (classes - 1));
    p[static_cast<std::size_t>(cls)] = 0.9;
    double sum = 0.0;
    for (double v : p) sum += v;
    for (double& v : p) v /= sum;
    return p;
}

VoteDistribution votes_from_counts(const std::vector<int>& counts) {
    int m = 0;
    for (int c : counts) m += c;
    VoteDistribution a(counts.size());
    for (std::size_t i = 0; i < counts.size(); ++i)
        a[i] = static_cast<double>(counts[i]) / m;
    return a;
}

}  // namespace

TEST_CASE("vote: unanimity, counting, and the single-hypothesis case") {
    std::vector<ClassDistribution> all_two{peaked(2, 5), peaked(2, 5), peaked(2, 5)};
    auto a = vote(all_two);
    CHECK(a == one_hot(2, 5));

    std::vector<ClassDistribution> mixed{peaked(1, 5), peaked(2, 5), peaked(2, 5),
                                         peaked(3, 5)};
    auto b = vote(mixed);
    CHECK(b == VoteDistribution{0.0, 0.25, 0.5, 0.25, 0.0});

    auto c = vote(std::vector<ClassDistribution>{peaked(4, 6)});
    CHECK(c == one_hot(4, 6));

    CHECK_THROWS_AS(vote(std::vector<ClassDistribution>{}), std::invalid_argument);
}

TEST_CASE("vote: argmax ties inside a hypothesis break to the lowest index") {
    std::vector<ClassDistribution> hyp{{0.5, 0.5}, {0.5, 0.5}};
    CHECK(vote(hyp) == VoteDistribution{1.0, 0.0});
}

TEST_CASE("confidence weight: unanimity, uniformity, and a hand-computed mix") {
    CHECK(confidence_weight(one_hot(3, 8)) == doctest::Approx(1.0));
    CHECK(confidence_weight(uniform_distribution(10)) == doctest::Approx(0.1));

    VoteDistribution a{0.0, 0.25, 0.5, 0.25};
    // exp(-(0.5 ln2 + 0.5 ln4)) = 2^(-1.5)
    CHECK(confidence_weight(a) == doctest::Approx(std::pow(2.0, -1.5)));
    CHECK(confidence_weight(a) == doctest::Approx(0.35355).epsilon(1e-4));
}

TEST_CASE("uncertainty gate: unanimity, uniform rejection, analytic boundary") {
    CHECK(uncertainty_gate(one_hot(0, 4), 0.0) == 1);
    CHECK(uncertainty_gate(uniform_distribution(10), 1.5) == 0);
    CHECK(uncertainty_gate(VoteDistribution{0.5, 0.5}, 0.693148) == 1);
    CHECK(uncertainty_gate(VoteDistribution{0.5, 0.5}, 0.6) == 0);
    CHECK_THROWS_AS(uncertainty_gate(one_hot(0, 4), -0.1), std::invalid_argument);
}

TEST_CASE("confidence is in (0,1], equals 1 exactly at unanimity") {
    Rng rng(17);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t classes = 2 + rng.below(8);
        const int m = 1 + static_cast<int>(rng.below(12));
        std::vector<ClassDistribution> hyp;
        for (int i = 0; i < m; ++i)
            hyp.push_back(peaked(static_cast<int>(rng.below(classes)), classes));
        auto a = vote(hyp);
        const double c = confidence_weight(a);
        CHECK(c > 0.0);
        CHECK(c <= 1.0);

        const int first = argmax_index(hyp[0]);
        bool unanimous = true;
        for (const auto& h : hyp) unanimous &= (argmax_index(h) == first);
        CHECK((c == doctest::Approx(1.0)) == unanimous);
    }
}

TEST_CASE("confidence is invariant under permutation of the hypotheses") {
    Rng rng(29);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<ClassDistribution> hyp;
        for (int i = 0; i < 8; ++i) hyp.push_back(peaked(static_cast<int>(rng.below(4)), 4));
        const double before = confidence_weight(vote(hyp));
        rng.shuffle(hyp);
        CHECK(confidence_weight(vote(hyp)) == doctest::Approx(before).epsilon(1e-12));
    }
}

TEST_CASE("moving a vote from a minority to the majority never lowers confidence") {
    Rng rng(31);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t classes = 3 + rng.below(5);
        std::vector<int> counts(classes, 0);
        const int m = 8;
        for (int i = 0; i < m; ++i) counts[rng.below(classes)]++;

        int major = 0;
        for (std::size_t i = 1; i < classes; ++i)
            if (counts[i] > counts[major]) major = static_cast<int>(i);
        int minor = -1;
        for (std::size_t i = 0; i < classes; ++i) {
            if (static_cast<int>(i) != major && counts[i] > 0) {
                minor = static_cast<int>(i);
                break;
            }
        }
        if (minor < 0) continue;  // already unanimous

        const double before = confidence_weight(votes_from_counts(counts));
        counts[minor]--;
        counts[major]++;
        const double after = confidence_weight(votes_from_counts(counts));
        CHECK(after >= before - 1e-12);
    }
}

TEST_CASE("gate and weight formulations agree: gate passes iff -ln(c) <= tau_u") {
    Rng rng(37);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t classes = 2 + rng.below(6);
        std::vector<int> counts(classes, 0);
        for (int i = 0; i < 8; ++i) counts[rng.below(classes)]++;
        auto a = votes_from_counts(counts);
        const double tau_u = rng.uniform(0.0, 2.0);
        const bool via_gate = uncertainty_gate(a, tau_u) == 1;
        const bool via_weight = -std::log(confidence_weight(a)) <= tau_u;
        CHECK(via_gate == via_weight);
    }
}
