#include <doctest.h>

#include <aggmatch/queue.hpp>
#include <aggmatch/rng.hpp>

#include <set>
#include <sstream>
#include <vector>

using namespace aggmatch;

namespace {

QueueEntry entry_for(int cls, double top_prob, int classes, long step = 0,
                     double feature_tag = 1.0) {
    ClassDistribution d(static_cast<std::size_t>(classes),
                        (1.0 - top_prob) / (classes - 1));
    d[static_cast<std::size_t>(cls)] = top_prob;
    FeatureVector f{feature_tag, 0.5, -0.25};
    return QueueEntry::make(std::move(f), std::move(d), EntrySource::unlabeled, step);
}

}  // namespace

TEST_CASE("unlabeled enqueue: inclusive gate boundary") {
    ClassBalancedQueue q(4, 8, 0.95);
    CHECK(q.enqueue_unlabeled(entry_for(2, 0.96, 4)));
    CHECK(q.fill(2) == 1);
    CHECK_FALSE(q.enqueue_unlabeled(entry_for(2, 0.94, 4)));
    CHECK(q.fill(2) == 1);
    CHECK(q.accepted_count() == 1);
    CHECK(q.rejected_count() == 1);

    // Routed by predicted class, not by any external label.
    CHECK(q.enqueue_unlabeled(entry_for(0, 0.99, 4)));
    CHECK(q.fill(0) == 1);
    CHECK(q.fill(1) == 0);
}

TEST_CASE("fifo eviction keeps the newest entries in arrival order") {
    ClassBalancedQueue q(2, 4, 0.5);
    for (long step = 0; step < 5; ++step)
        CHECK(q.enqueue_unlabeled(entry_for(1, 0.9, 2, step)));
    REQUIRE(q.fill(1) == 4);
    const auto& buf = q.entries(1);
    for (int i = 0; i < 4; ++i) CHECK(buf[i].step == i + 1);
}

TEST_CASE("labeled enqueue bypasses the gate and routes by label") {
    ClassBalancedQueue q(4, 8, 0.95);
    auto low = entry_for(1, 0.30, 4);  // far below the gate
    q.enqueue_labeled(low, 3);
    CHECK(q.fill(3) == 1);
    CHECK(q.fill(1) == 0);
    CHECK(q.entries(3).front().source == EntrySource::labeled);

    CHECK_THROWS_AS(q.enqueue_labeled(low, 4), std::invalid_argument);
    CHECK_THROWS_AS(q.enqueue_labeled(low, -1), std::invalid_argument);
}

TEST_CASE("partition: even split, identity split, floor rule") {
    ClassBalancedQueue q(2, 16, 0.5);
    for (int cls = 0; cls < 2; ++cls)
        for (long i = 0; i < 8; ++i)
            q.enqueue_unlabeled(entry_for(cls, 0.9, 2, i));

    Rng rng(1);
    auto part = q.partition(4, rng);
    REQUIRE(part.subsets.size() == 4);
    for (const auto& s : part.subsets) CHECK(s.size() == 4);  // 2 per class

    std::set<const QueueEntry*> seen;
    for (const auto& s : part.subsets)
        for (const QueueEntry* e : s) CHECK(seen.insert(e).second);

    Rng rng2(2);
    auto whole = q.partition(1, rng2);
    REQUIRE(whole.subsets.size() == 1);
    CHECK(whole.subsets[0].size() == q.total_fill());

    // 7 entries in one class with M = 4: one each, three sit out.
    ClassBalancedQueue q7(1, 16, 0.5);
    for (long i = 0; i < 7; ++i) q7.enqueue_unlabeled(entry_for(0, 0.9, 1, i));
    Rng rng3(3);
    auto p7 = q7.partition(4, rng3);
    for (const auto& s : p7.subsets) CHECK(s.size() == 1);
    CHECK(p7.total_entries() == 4);
}

TEST_CASE("partition is reproducible from the rng state") {
    ClassBalancedQueue q(3, 32, 0.5);
    Rng fill(9);
    for (int i = 0; i < 60; ++i)
        q.enqueue_unlabeled(entry_for(static_cast<int>(fill.below(3)), 0.8, 3, i));

    Rng a(77), b(77);
    auto pa = q.partition(4, a);
    auto pb = q.partition(4, b);
    REQUIRE(pa.subsets.size() == pb.subsets.size());
    for (std::size_t m = 0; m < pa.subsets.size(); ++m)
        CHECK(pa.subsets[m] == pb.subsets[m]);
}

TEST_CASE("ready requires every class to hold at least M entries") {
    ClassBalancedQueue q(3, 8, 0.5);
    CHECK_FALSE(q.ready(2));
    for (int cls = 0; cls < 3; ++cls)
        for (int i = 0; i < (cls == 2 ? 1 : 4); ++i)
            q.enqueue_unlabeled(entry_for(cls, 0.9, 3));
    CHECK_FALSE(q.ready(2));  // class 2 has M-1 entries
    q.enqueue_unlabeled(entry_for(2, 0.9, 3));
    CHECK(q.ready(2));
}

TEST_CASE("queue invariants hold under random operation sequences") {
    const int classes = 4;
    const std::size_t cap = 6;
    ClassBalancedQueue q(classes, cap, 0.6);
    Rng rng(123);
    for (int op = 0; op < 500; ++op) {
        const int cls = static_cast<int>(rng.below(classes));
        const double top = rng.uniform(0.3, 1.0);
        if (rng.bernoulli(0.8)) {
            q.enqueue_unlabeled(entry_for(cls, top, classes, op));
        } else {
            q.enqueue_labeled(entry_for(cls, top, classes, op), cls);
        }
        for (int c = 0; c < classes; ++c) {
            CHECK(q.fill(c) <= cap);
            const auto& buf = q.entries(c);
            for (std::size_t i = 0; i < buf.size(); ++i) {
                if (i > 0) CHECK(buf[i - 1].step <= buf[i].step);  // oldest first
                if (buf[i].source == EntrySource::unlabeled) {
                    const double mx =
                        buf[i].distribution[static_cast<std::size_t>(
                            argmax_index(buf[i].distribution))];
                    CHECK(mx >= q.gate());  // every stored unlabeled entry passed the gate
                }
            }
        }
    }

    // Partition properties on the final state.
    Rng prng(5);
    const int M = 3;
    auto part = q.partition(M, prng);
    std::set<const QueueEntry*> seen;
    for (const auto& s : part.subsets)
        for (const QueueEntry* e : s) CHECK(seen.insert(e).second);
    std::size_t expect = 0;
    for (int c = 0; c < classes; ++c) expect += (q.fill(c) / M) * M;
    CHECK(part.total_entries() == expect);
}

TEST_CASE("csv dump lists every entry with class and source") {
    ClassBalancedQueue q(2, 4, 0.5);
    q.enqueue_unlabeled(entry_for(0, 0.9, 2, 1));
    q.enqueue_labeled(entry_for(1, 0.4, 2, 2), 1);
    std::ostringstream os;
    q.dump_csv(os);
    const std::string text = os.str();
    CHECK(text.find("class,step,source,max_prob,f0,f1,f2") == 0);
    CHECK(text.find("0,1,unlabeled,0.9") != std::string::npos);
    CHECK(text.find("1,2,labeled,") != std::string::npos);
}
