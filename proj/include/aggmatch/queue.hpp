#pragma once

#include <cstdio>
#include <deque>
#include <ostream>
#include <stdexcept>
#include <vector>

#include "numerics.hpp"
#include "rng.hpp"

namespace aggmatch {

enum class EntrySource { unlabeled, labeled };

/// One memorized (feature, distribution) pair from the momentum model.
/// `feature_norm` and `entropy2` are derived values cached at construction
/// for the similarity hot path.
struct QueueEntry {
    FeatureVector feature;
    ClassDistribution distribution;
    EntrySource source = EntrySource::unlabeled;
    long step = 0;

    double feature_norm = 0.0;
    double entropy2 = 0.0;  // base-2 entropy of `distribution`

    static QueueEntry make(FeatureVector f, ClassDistribution d, EntrySource src,
                           long step) {
        QueueEntry e;
        e.feature = std::move(f);
        e.distribution = std::move(d);
        e.source = src;
        e.step = step;
        e.feature_norm = norm(e.feature);
        e.entropy2 = entropy_bits(e.distribution);
        return e;
    }
};

/// Views into queue entries, split per subset. Pointers stay valid while the
/// queue is not mutated; the training loop takes a partition after all
/// enqueues of a step and drops it before the next step.
struct QueuePartition {
    std::vector<std::vector<const QueueEntry*>> subsets;

    std::size_t total_entries() const {
        std::size_t n = 0;
        for (const auto& s : subsets) n += s.size();
        return n;
    }
};

// ============================================================================
// Per-class FIFO ring buffers with a confidence gate on unlabeled entries.
// ============================================================================
class ClassBalancedQueue {
public:
    ClassBalancedQueue(int class_count, std::size_t capacity_per_class,
                       double confidence_gate)
        : class_count_(class_count),
          capacity_(capacity_per_class),
          gate_(confidence_gate),
          buffers_(static_cast<std::size_t>(class_count)) {
        if (class_count <= 0)
            throw std::invalid_argument("queue: class_count must be positive");
        if (capacity_per_class == 0)
            throw std::invalid_argument("queue: capacity must be positive");
        if (!(confidence_gate > 0.0 && confidence_gate <= 1.0))
            throw std::invalid_argument("queue: gate must be in (0,1]");
    }

    /// Gated enqueue for unlabeled entries. Accepted entries land in the
    /// buffer of their predicted class; returns whether the gate passed.
    bool enqueue_unlabeled(QueueEntry entry) {
        entry.source = EntrySource::unlabeled;
        const int cls = argmax_index(entry.distribution);
        const double top = entry.distribution[static_cast<std::size_t>(cls)];
        if (top >= gate_) {
            push(cls, std::move(entry));
            ++accepted_;
            return true;
        }
        ++rejected_;
        return false;
    }

    /// Ungated enqueue for labeled entries, routed to the ground-truth class.
    void enqueue_labeled(QueueEntry entry, int label) {
        if (label < 0 || label >= class_count_)
            throw std::invalid_argument("queue: label out of range");
        entry.source = EntrySource::labeled;
        push(label, std::move(entry));
    }

    /// Random even split into `subsets` disjoint subsets. Per class, a random
    /// selection of floor(n/M)*M entries is dealt out so every subset holds
    /// the same count per class; the remainder sits out this partition.
    QueuePartition partition(int subsets, Rng& rng) const {
        if (subsets < 1)
            throw std::invalid_argument("queue: subset count must be >= 1");
        QueuePartition part;
        part.subsets.resize(static_cast<std::size_t>(subsets));
        std::vector<std::size_t> order;
        for (const auto& buffer : buffers_) {
            const std::size_t per_subset = buffer.size() / static_cast<std::size_t>(subsets);
            if (per_subset == 0) continue;
            order.resize(buffer.size());
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            rng.shuffle(order);
            std::size_t next = 0;
            for (auto& subset : part.subsets) {
                for (std::size_t k = 0; k < per_subset; ++k)
                    subset.push_back(&buffer[order[next++]]);
            }
        }
        return part;
    }

    /// True once every class holds at least `subsets` entries, i.e. a
    /// partition would give every subset one candidate per class.
    bool ready(int subsets) const {
        for (const auto& buffer : buffers_) {
            if (buffer.size() < static_cast<std::size_t>(subsets)) return false;
        }
        return true;
    }

    int class_count() const { return class_count_; }
    std::size_t capacity_per_class() const { return capacity_; }
    double gate() const { return gate_; }

    std::size_t fill(int cls) const { return buffers_[static_cast<std::size_t>(cls)].size(); }

    std::size_t total_fill() const {
        std::size_t n = 0;
        for (const auto& b : buffers_) n += b.size();
        return n;
    }

    const std::deque<QueueEntry>& entries(int cls) const {
        return buffers_[static_cast<std::size_t>(cls)];
    }

    long accepted_count() const { return accepted_; }
    long rejected_count() const { return rejected_; }

    /// CSV dump for offline inspection: class, step, source, max prob, feature.
    void dump_csv(std::ostream& os) const {
        os << "class,step,source,max_prob";
        const int dim = feature_dim();
        for (int i = 0; i < dim; ++i) os << ",f" << i;
        os << "\n";
        char buf[32];
        for (int cls = 0; cls < class_count_; ++cls) {
            for (const auto& e : buffers_[static_cast<std::size_t>(cls)]) {
                const double top = e.distribution[static_cast<std::size_t>(
                    argmax_index(e.distribution))];
                os << cls << "," << e.step << ","
                   << (e.source == EntrySource::labeled ? "labeled" : "unlabeled");
                std::snprintf(buf, sizeof(buf), "%.9g", top);
                os << "," << buf;
                for (double v : e.feature) {
                    std::snprintf(buf, sizeof(buf), "%.9g", v);
                    os << "," << buf;
                }
                os << "\n";
            }
        }
    }

private:
    int feature_dim() const {
        for (const auto& b : buffers_) {
            if (!b.empty()) return static_cast<int>(b.front().feature.size());
        }
        return 0;
    }

    void push(int cls, QueueEntry entry) {
        auto& buffer = buffers_[static_cast<std::size_t>(cls)];
        if (buffer.size() == capacity_) buffer.pop_front();  // evict oldest
        buffer.push_back(std::move(entry));
    }

    int class_count_;
    std::size_t capacity_;
    double gate_;
    std::vector<std::deque<QueueEntry>> buffers_;
    long accepted_ = 0;
    long rejected_ = 0;
};

}  // namespace aggmatch
