#include <doctest.h>

#include <aggmatch/rng.hpp>

#include <cmath>
#include <cstdint>
#include <vector>

using aggmatch::Rng;

TEST_CASE("rng is reproducible from its seed") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next() == b.next());

    Rng c(42), d(43);
    bool differs = false;
    for (int i = 0; i < 8; ++i) differs |= (c.next() != d.next());
    CHECK(differs);
}

TEST_CASE("derived streams are independent of one another") {
    Rng a = Rng::stream(7, 1);
    Rng b = Rng::stream(7, 2);
    bool differs = false;
    for (int i = 0; i < 8; ++i) differs |= (a.next() != b.next());
    CHECK(differs);
}

TEST_CASE("uniform stays in [0,1) and has a sane mean") {
    Rng r(3);
    double sum = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double u = r.uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
        sum += u;
    }
    CHECK(std::abs(sum / n - 0.5) < 0.02);
}

TEST_CASE("normal has approximately unit variance") {
    Rng r(5);
    double sum = 0.0, sq = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double z = r.normal();
        sum += z;
        sq += z * z;
    }
    const double mean = sum / n;
    const double var = sq / n - mean * mean;
    CHECK(std::abs(mean) < 0.03);
    CHECK(std::abs(var - 1.0) < 0.05);
}

TEST_CASE("below covers the full range without bias artifacts") {
    Rng r(11);
    std::vector<int> counts(5, 0);
    for (int i = 0; i < 5000; ++i) counts[static_cast<int>(r.below(5))]++;
    for (int c : counts) CHECK(c > 800);
    CHECK_THROWS_AS(r.below(0), std::invalid_argument);
}

TEST_CASE("shuffle is a permutation and reproducible per state") {
    std::vector<int> v1{0, 1, 2, 3, 4, 5, 6, 7};
    std::vector<int> v2 = v1;
    Rng a(9), b(9);
    a.shuffle(v1);
    b.shuffle(v2);
    CHECK(v1 == v2);
    std::vector<int> sorted = v1;
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7});
}

TEST_CASE("state round-trips through save/restore") {
    Rng r(17);
    r.next();
    r.next();
    const auto snapshot = r.state();
    const std::uint64_t expect = r.next();
    Rng s(0);
    s.set_state(snapshot);
    CHECK(s.next() == expect);
}
