#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "aggregation.hpp"
#include "confidence.hpp"
#include "data.hpp"
#include "model.hpp"
#include "numerics.hpp"
#include "queue.hpp"
#include "rng.hpp"

namespace aggmatch {

enum class Method { aggmatch, fixmatch, supervised };
enum class ConfidenceMode { weighting, thresholding };
enum class LabelMode { hard, soft };

inline std::string to_string(Method m) {
    switch (m) {
        case Method::aggmatch: return "aggmatch";
        case Method::fixmatch: return "fixmatch";
        case Method::supervised: return "supervised";
    }
    return "?";
}

struct TrainConfig {
    Method method = Method::aggmatch;
    long iterations = 5000;
    double lr = 0.03;
    double lambda_u = 1.0;         // unsupervised loss weight
    double sharpen_temp = 0.5;     // pseudo-label sharpening temperature
    double conf_threshold = 0.95;  // queue gate and fallback confidence gate
    double tau_sim = 0.05;
    double lambda_sim = 0.5;
    double momentum = 0.999;       // EMA coefficient of the momentum model
    int queue_capacity = 256;      // per-class queue length
    int subsets = 8;               // disjoint queue subsets for voting
    int batch_size = 32;           // labeled batch size B
    int mu = 3;                    // unlabeled batch = mu * B
    ConfidenceMode confidence_mode = ConfidenceMode::weighting;
    double tau_u = 1.0;            // entropy threshold of the thresholding mode
    bool store_labeled_onehot = false;
    ClassTermOrientation orientation = ClassTermOrientation::negative_distance;
    LabelMode fixmatch_labels = LabelMode::hard;
    std::uint64_t seed = 1;
    long eval_cadence = 100;
    long eval_unlabeled_sample = 1000;  // 0 = evaluate pseudo labels on all

    void validate() const {
        if (iterations < 0) throw std::invalid_argument("train: iterations must be >= 0");
        if (!(lr >= 0.0)) throw std::invalid_argument("train: lr must be >= 0");
        if (!(lambda_u >= 0.0)) throw std::invalid_argument("train: lambda must be >= 0");
        if (!(sharpen_temp > 0.0)) throw std::invalid_argument("train: T must be > 0");
        if (!(conf_threshold > 0.0 && conf_threshold <= 1.0))
            throw std::invalid_argument("train: tau must be in (0,1]");
        if (!(tau_sim > 0.0)) throw std::invalid_argument("train: tau_sim must be > 0");
        if (!(lambda_sim >= 0.0)) throw std::invalid_argument("train: lambda_sim must be >= 0");
        if (!(momentum >= 0.0 && momentum <= 1.0))
            throw std::invalid_argument("train: lambda_m must be in [0,1]");
        if (queue_capacity <= 0) throw std::invalid_argument("train: L must be > 0");
        if (subsets <= 0) throw std::invalid_argument("train: M must be > 0");
        if (batch_size <= 0) throw std::invalid_argument("train: B must be > 0");
        if (mu < 0) throw std::invalid_argument("train: mu must be >= 0");
        if (!(tau_u >= 0.0)) throw std::invalid_argument("train: tau_u must be >= 0");
        if (eval_cadence <= 0) throw std::invalid_argument("train: eval_cadence must be > 0");
        if (eval_unlabeled_sample < 0)
            throw std::invalid_argument("train: eval_unlabeled_sample must be >= 0");
    }

    AggregationConfig aggregation() const {
        AggregationConfig cfg;
        cfg.tau_sim = tau_sim;
        cfg.lambda_sim = lambda_sim;
        cfg.orientation = orientation;
        return cfg;
    }
};

struct StepReport {
    long iteration = 0;
    double loss_sup = 0.0;
    double loss_unsup = 0.0;
    double loss_total = 0.0;
    double mean_confidence = 0.0;
    std::vector<std::size_t> queue_fill;
    long enqueued = 0;  // unlabeled entries accepted this step
    long rejected = 0;  // unlabeled entries gated out this step
};

struct PseudoLabel {
    ClassDistribution target;
    double confidence = 0.0;
};

struct EvalMetrics {
    double test_accuracy = 0.0;
    std::vector<double> per_class_accuracy;
    double pl_precision = std::numeric_limits<double>::quiet_NaN();
    double pl_recall = 0.0;
    double pl_precision_weighted = std::numeric_limits<double>::quiet_NaN();
    double mean_confidence = 0.0;
    long counted = 0;  // pseudo labels with confidence >= 0.5
    // Vote-entropy histogram over [0, ln Y] in kVoteEntropyBins uniform bins;
    // filled only when subset voting was active.
    std::vector<long> vote_entropy_hist;
};

inline constexpr int kVoteEntropyBins = 8;

/// Raised when a step produces a non-finite loss; carries a diagnostic dump.
struct NonFiniteLoss : std::runtime_error {
    std::string diagnostics;
    explicit NonFiniteLoss(std::string diag)
        : std::runtime_error("training aborted: non-finite loss"),
          diagnostics(std::move(diag)) {}
};

// ----------------------------------------------------------------------------
// Loss primitives
// ----------------------------------------------------------------------------

/// Mean cross-entropy of weak-view predictions against the ground truth.
inline double supervised_loss(std::span<const LabeledExample> batch,
                              const ModelState& theta) {
    if (batch.empty()) throw std::invalid_argument("supervised_loss: empty batch");
    double total = 0.0;
    for (const auto& ex : batch) {
        auto out = forward(ex.weak, theta);
        total += cross_entropy(one_hot(static_cast<std::size_t>(ex.label),
                                       out.distribution.size()),
                               out.distribution);
    }
    return total / static_cast<double>(batch.size());
}

/// Confidence-weighted mean cross-entropy of strong-view predictions against
/// the pseudo labels. Pseudo labels and confidences are constants here.
inline double unsupervised_loss(std::span<const UnlabeledExample> batch,
                                std::span<const PseudoLabel> pseudo,
                                const ModelState& theta) {
    if (batch.size() != pseudo.size())
        throw std::invalid_argument("unsupervised_loss: batch/pseudo size mismatch");
    if (batch.empty()) return 0.0;
    double total = 0.0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        if (pseudo[b].confidence == 0.0) continue;
        auto out = forward(batch[b].strong, theta);
        total += pseudo[b].confidence * cross_entropy(pseudo[b].target, out.distribution);
    }
    return total / static_cast<double>(batch.size());
}

/// Confidence-gated pseudo label from one weak-view prediction.
inline PseudoLabel fixmatch_pseudo_item(const ClassDistribution& weak_dist,
                                        double tau, LabelMode mode,
                                        double sharpen_temp) {
    PseudoLabel out;
    const double top =
        weak_dist[static_cast<std::size_t>(argmax_index(weak_dist))];
    out.confidence = top >= tau ? 1.0 : 0.0;
    out.target = mode == LabelMode::hard ? hard_label(weak_dist).second
                                         : sharpen(weak_dist, sharpen_temp);
    return out;
}

// ----------------------------------------------------------------------------
// Evaluation (always under the trained parameters, never the momentum copy)
// ----------------------------------------------------------------------------

/// Test accuracy plus pseudo-label precision/recall on the unlabeled items
/// listed by `eval_indices`. Counted pseudo labels are those with confidence
/// >= 0.5; the weighted precision variant uses the confidences themselves.
/// Aggregation-based pseudo labels use a partition drawn from rng streams
/// independent of training, so evaluation never perturbs a run.
inline EvalMetrics evaluate_model(const ModelState& theta,
                                  const ClassBalancedQueue* queue,
                                  const TrainConfig& cfg, const Dataset& test,
                                  const Dataset& unlabeled,
                                  std::span<const std::size_t> eval_indices,
                                  long iteration) {
    EvalMetrics m;

    // Test accuracy on clean instances.
    std::vector<long> per_class_total(static_cast<std::size_t>(test.class_count), 0);
    std::vector<long> per_class_hit(static_cast<std::size_t>(test.class_count), 0);
    long hits = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
        auto out = forward(test.instances[i], theta);
        const int pred = argmax_index(out.distribution);
        const int truth = test.labels[i];
        per_class_total[static_cast<std::size_t>(truth)]++;
        if (pred == truth) {
            ++hits;
            per_class_hit[static_cast<std::size_t>(truth)]++;
        }
    }
    m.test_accuracy = test.size() ? static_cast<double>(hits) / test.size() : 0.0;
    m.per_class_accuracy.resize(per_class_total.size(), 0.0);
    for (std::size_t c = 0; c < per_class_total.size(); ++c) {
        m.per_class_accuracy[c] =
            per_class_total[c] ? static_cast<double>(per_class_hit[c]) / per_class_total[c]
                               : std::numeric_limits<double>::quiet_NaN();
    }

    if (cfg.method == Method::supervised || eval_indices.empty()) {
        m.pl_recall = 0.0;
        m.mean_confidence = 0.0;
        return m;  // no pseudo-labeling path; precision stays NaN
    }

    const bool aggregated = cfg.method == Method::aggmatch && queue != nullptr &&
                            queue->ready(cfg.subsets);
    std::optional<QueuePartition> partition;
    if (aggregated) {
        Rng rng = Rng::stream(mix_seed(cfg.seed, 0xE7A1ULL),
                              static_cast<std::uint64_t>(iteration));
        partition = queue->partition(cfg.subsets, rng);
    }
    const AggregationConfig agg = cfg.aggregation();

    long counted = 0, counted_correct = 0, truth_total = 0;
    double conf_sum = 0.0, weighted_hit = 0.0, weight_sum = 0.0;
    for (std::size_t idx : eval_indices) {
        const int truth = unlabeled.eval_labels[idx];
        if (truth < 0) continue;  // no ground truth available for this item
        ++truth_total;
        auto out = forward(unlabeled.instances[idx], theta);

        int pred;
        double confidence;
        if (aggregated) {
            Query q = Query::make(std::move(out.feature), out.distribution);
            auto hyps = aggregate_per_subset(q, *partition, agg);
            const VoteDistribution votes = vote(hyps);
            confidence = cfg.confidence_mode == ConfidenceMode::weighting
                             ? confidence_weight(votes)
                             : uncertainty_gate(votes, cfg.tau_u);
            pred = argmax_index(mean_aggregate(hyps));
            if (m.vote_entropy_hist.empty())
                m.vote_entropy_hist.assign(kVoteEntropyBins, 0);
            const double span = std::log(static_cast<double>(votes.size()));
            const int bin = std::min<int>(
                kVoteEntropyBins - 1,
                static_cast<int>(entropy(votes) / span * kVoteEntropyBins));
            m.vote_entropy_hist[static_cast<std::size_t>(bin)]++;
        } else {
            const double top =
                out.distribution[static_cast<std::size_t>(argmax_index(out.distribution))];
            confidence = top >= cfg.conf_threshold ? 1.0 : 0.0;
            pred = argmax_index(out.distribution);
        }

        conf_sum += confidence;
        const bool correct = pred == truth;
        weighted_hit += confidence * correct;
        weight_sum += confidence;
        if (confidence >= 0.5) {
            ++counted;
            counted_correct += correct;
        }
    }

    m.counted = counted;
    m.mean_confidence = truth_total ? conf_sum / truth_total : 0.0;
    m.pl_recall = truth_total ? static_cast<double>(counted_correct) / truth_total : 0.0;
    if (counted > 0)
        m.pl_precision = static_cast<double>(counted_correct) / counted;
    if (weight_sum > 0.0) m.pl_precision_weighted = weighted_hit / weight_sum;
    return m;
}

// ============================================================================
// Trainer: one object per (method, seed) run, owning all mutable state.
// ============================================================================
class Trainer {
public:
    Trainer(Dataset labeled, Dataset unlabeled, const ModelConfig& model_cfg,
            const TrainConfig& train_cfg, const AugmentationSpec& augment_cfg)
        : labeled_(std::move(labeled)),
          unlabeled_(std::move(unlabeled)),
          cfg_(train_cfg),
          aug_(augment_cfg),
          queue_(model_cfg.class_count,
                 static_cast<std::size_t>(train_cfg.queue_capacity),
                 train_cfg.conf_threshold),
          labeled_sampler_(labeled_.size(), Rng::stream(train_cfg.seed, kLabeledSampler)),
          unlabeled_sampler_(std::max<std::size_t>(unlabeled_.size(), 1),
                             Rng::stream(train_cfg.seed, kUnlabeledSampler)),
          labeled_aug_(Rng::stream(train_cfg.seed, kLabeledAug)),
          unlabeled_aug_(Rng::stream(train_cfg.seed, kUnlabeledAug)),
          partition_rng_(Rng::stream(train_cfg.seed, kPartition)) {
        cfg_.validate();
        aug_.validate();
        Rng init = Rng::stream(cfg_.seed, kInit);
        theta_ = ModelState::init(model_cfg, init);
        theta_m_ = theta_;  // momentum copy starts as an exact clone
        pick_eval_sample();
    }

    const TrainConfig& config() const { return cfg_; }
    long iteration() const { return iteration_; }
    const ModelState& model() const { return theta_; }
    const MomentumState& momentum_model() const { return theta_m_; }
    const ClassBalancedQueue& queue() const { return queue_; }
    const Dataset& labeled_set() const { return labeled_; }
    const Dataset& unlabeled_set() const { return unlabeled_; }
    std::span<const std::size_t> eval_sample() const { return eval_indices_; }

    StepReport step() {
        try {
            return step_impl();
        } catch (const NonFiniteLoss&) {
            throw;
        } catch (const std::invalid_argument&) {
            // Shapes are internally consistent inside a step, so a parameter
            // error from the numeric layer means activations overflowed.
            const double nan = std::numeric_limits<double>::quiet_NaN();
            throw NonFiniteLoss(diagnostics(nan, nan));
        }
    }

private:
    StepReport step_impl() {
        const long accepted_before = queue_.accepted_count();
        const long rejected_before = queue_.rejected_count();
        ++iteration_;

        SplitSpec batch_spec;
        batch_spec.batch_size = cfg_.batch_size;
        batch_spec.mu = cfg_.method == Method::supervised ? 0 : cfg_.mu;
        Batch batch = next_batches(labeled_, unlabeled_, batch_spec, aug_,
                                   labeled_sampler_, unlabeled_sampler_,
                                   labeled_aug_, unlabeled_aug_);

        // Forward passes under the trained parameters.
        std::vector<ForwardOutput> fwd_labeled;
        fwd_labeled.reserve(batch.labeled.size());
        for (const auto& ex : batch.labeled) fwd_labeled.push_back(forward(ex.weak, theta_));

        std::vector<ForwardOutput> fwd_weak, fwd_strong;
        fwd_weak.reserve(batch.unlabeled.size());
        fwd_strong.reserve(batch.unlabeled.size());
        for (const auto& ex : batch.unlabeled) {
            fwd_weak.push_back(forward(ex.weak, theta_));
            fwd_strong.push_back(forward(ex.strong, theta_));
        }

        // Queue maintenance via the momentum model: gated unlabeled entries
        // first, then ungated labeled entries, before this step's partition.
        if (cfg_.method == Method::aggmatch) {
            for (const auto& ex : batch.unlabeled) {
                auto mom = forward(ex.weak, theta_m_);
                queue_.enqueue_unlabeled(QueueEntry::make(
                    std::move(mom.feature), std::move(mom.distribution),
                    EntrySource::unlabeled, iteration_));
            }
            for (const auto& ex : batch.labeled) {
                auto mom = forward(ex.weak, theta_m_);
                ClassDistribution stored =
                    cfg_.store_labeled_onehot
                        ? one_hot(static_cast<std::size_t>(ex.label),
                                  mom.distribution.size())
                        : std::move(mom.distribution);
                queue_.enqueue_labeled(
                    QueueEntry::make(std::move(mom.feature), std::move(stored),
                                     EntrySource::labeled, iteration_),
                    ex.label);
            }
        }

        // Pseudo labels for the unlabeled batch.
        std::vector<PseudoLabel> pseudo;
        pseudo.reserve(batch.unlabeled.size());
        if (!batch.unlabeled.empty()) {
            if (cfg_.method == Method::aggmatch && queue_.ready(cfg_.subsets)) {
                const QueuePartition partition =
                    queue_.partition(cfg_.subsets, partition_rng_);
                const AggregationConfig agg = cfg_.aggregation();
                for (const auto& fw : fwd_weak) {
                    Query q = Query::make(fw.feature, fw.distribution);
                    auto hyps = aggregate_per_subset(q, partition, agg);
                    const VoteDistribution votes = vote(hyps);
                    PseudoLabel pl;
                    pl.confidence = cfg_.confidence_mode == ConfidenceMode::weighting
                                        ? confidence_weight(votes)
                                        : uncertainty_gate(votes, cfg_.tau_u);
                    pl.target = sharpen(mean_aggregate(hyps), cfg_.sharpen_temp);
                    pseudo.push_back(std::move(pl));
                }
            } else {
                // Warm-up (or plain FixMatch): pseudo labels from the weak
                // view under theta, gated at the confidence threshold.
                const LabelMode mode = cfg_.method == Method::fixmatch
                                           ? cfg_.fixmatch_labels
                                           : LabelMode::soft;
                for (const auto& fw : fwd_weak)
                    pseudo.push_back(fixmatch_pseudo_item(
                        fw.distribution, cfg_.conf_threshold, mode, cfg_.sharpen_temp));
            }
        }

        // Losses and gradients. Pseudo labels and confidences are constants;
        // gradient flows only through the supervised weak branch and the
        // unlabeled strong branch.
        StepReport report;
        report.iteration = iteration_;

        Gradients grads = Gradients::zeros_like(theta_);
        const double inv_b = 1.0 / static_cast<double>(batch.labeled.size());
        double loss_sup = 0.0;
        std::vector<double> dlogits(static_cast<std::size_t>(theta_.class_count));
        for (std::size_t b = 0; b < batch.labeled.size(); ++b) {
            const auto target = one_hot(
                static_cast<std::size_t>(batch.labeled[b].label), dlogits.size());
            loss_sup += cross_entropy(target, fwd_labeled[b].distribution);
            for (std::size_t c = 0; c < dlogits.size(); ++c)
                dlogits[c] = (fwd_labeled[b].distribution[c] - target[c]) * inv_b;
            backward_and_accumulate(theta_, fwd_labeled[b].cache, dlogits, {}, grads);
        }
        loss_sup *= inv_b;

        double loss_unsup = 0.0;
        double conf_sum = 0.0;
        if (!batch.unlabeled.empty()) {
            const double inv_u = 1.0 / static_cast<double>(batch.unlabeled.size());
            for (std::size_t b = 0; b < batch.unlabeled.size(); ++b) {
                conf_sum += pseudo[b].confidence;
                if (pseudo[b].confidence == 0.0) continue;
                loss_unsup += pseudo[b].confidence *
                              cross_entropy(pseudo[b].target, fwd_strong[b].distribution);
                if (cfg_.lambda_u == 0.0) continue;  // zero weight: no gradient
                const double w = cfg_.lambda_u * pseudo[b].confidence * inv_u;
                for (std::size_t c = 0; c < dlogits.size(); ++c)
                    dlogits[c] =
                        w * (fwd_strong[b].distribution[c] - pseudo[b].target[c]);
                backward_and_accumulate(theta_, fwd_strong[b].cache, dlogits, {}, grads);
            }
            loss_unsup *= inv_u;
        }

        const double loss_total = loss_sup + cfg_.lambda_u * loss_unsup;
        if (!std::isfinite(loss_total) || !grads.all_finite_grads())
            throw NonFiniteLoss(diagnostics(loss_sup, loss_unsup));

        sgd_step(theta_, grads, cfg_.lr);
        if (!theta_.all_params_finite())
            throw NonFiniteLoss(diagnostics(loss_sup, loss_unsup));
        momentum_update(theta_m_, theta_, cfg_.momentum);

        report.loss_sup = loss_sup;
        report.loss_unsup = loss_unsup;
        report.loss_total = loss_total;
        report.mean_confidence =
            batch.unlabeled.empty() ? 0.0 : conf_sum / batch.unlabeled.size();
        report.queue_fill.resize(static_cast<std::size_t>(queue_.class_count()));
        for (int c = 0; c < queue_.class_count(); ++c)
            report.queue_fill[static_cast<std::size_t>(c)] = queue_.fill(c);
        report.enqueued = queue_.accepted_count() - accepted_before;
        report.rejected = queue_.rejected_count() - rejected_before;
        return report;
    }

public:
    EvalMetrics evaluate(const Dataset& test) const {
        return evaluate_model(theta_, &queue_, cfg_, test, unlabeled_,
                              eval_indices_, iteration_);
    }

    // ------------------------------------------------------------------
    // Checkpointing: parameters, momentum parameters, queue contents.
    // ------------------------------------------------------------------

    void save_checkpoint(std::ostream& os) const {
        os << "AGGMATCH-CKPT 1\n";
        os << "dims " << theta_.input_dim << " " << theta_.feature_dim << " "
           << theta_.class_count << "\n";
        os << "iteration " << iteration_ << "\n";
        os << "theta\n";
        write_parameters(os, theta_);
        os << "theta_m\n";
        write_parameters(os, theta_m_);
        os << "queue " << queue_.class_count() << " " << queue_.capacity_per_class()
           << " " << queue_.gate() << "\n";
        os << "stats";
        for (int c = 0; c < queue_.class_count(); ++c) os << " " << queue_.fill(c);
        os << "\n";
        os << "entries " << queue_.total_fill() << "\n";
        char buf[32];
        for (int c = 0; c < queue_.class_count(); ++c) {
            for (const auto& e : queue_.entries(c)) {
                os << "e " << c << " " << e.step << " "
                   << (e.source == EntrySource::labeled ? 1 : 0) << " "
                   << e.feature.size() << " " << e.distribution.size() << "\n";
                for (std::size_t i = 0; i < e.feature.size(); ++i) {
                    std::snprintf(buf, sizeof(buf), "%.17g", e.feature[i]);
                    os << buf << (i + 1 == e.feature.size() ? "\n" : " ");
                }
                for (std::size_t i = 0; i < e.distribution.size(); ++i) {
                    std::snprintf(buf, sizeof(buf), "%.17g", e.distribution[i]);
                    os << buf << (i + 1 == e.distribution.size() ? "\n" : " ");
                }
            }
        }
        os << "end\n";
    }

    void save_checkpoint(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
        save_checkpoint(out);
    }

    /// Restores parameters, momentum parameters, queue contents and the
    /// iteration counter from a checkpoint stream.
    void load_checkpoint(std::istream& is) {
        std::string magic, version;
        if (!(is >> magic >> version) || magic != "AGGMATCH-CKPT" || version != "1")
            throw std::runtime_error("checkpoint: bad magic");
        std::string tag;
        int in_dim = 0, feat_dim = 0, classes = 0;
        if (!(is >> tag >> in_dim >> feat_dim >> classes) || tag != "dims")
            throw std::runtime_error("checkpoint: bad dims");
        if (in_dim != theta_.input_dim || feat_dim != theta_.feature_dim ||
            classes != theta_.class_count)
            throw std::runtime_error("checkpoint: architecture mismatch");
        if (!(is >> tag >> iteration_) || tag != "iteration")
            throw std::runtime_error("checkpoint: bad iteration");
        if (!(is >> tag) || tag != "theta")
            throw std::runtime_error("checkpoint: missing theta");
        theta_ = read_parameters(is, in_dim, feat_dim, classes);
        if (!(is >> tag) || tag != "theta_m")
            throw std::runtime_error("checkpoint: missing theta_m");
        theta_m_ = read_parameters(is, in_dim, feat_dim, classes);

        int q_classes = 0;
        std::size_t capacity = 0;
        double gate = 0.0;
        if (!(is >> tag >> q_classes >> capacity >> gate) || tag != "queue")
            throw std::runtime_error("checkpoint: bad queue header");
        queue_ = ClassBalancedQueue(q_classes, capacity, gate);
        if (!(is >> tag) || tag != "stats")
            throw std::runtime_error("checkpoint: bad queue stats");
        for (int c = 0; c < q_classes; ++c) {
            std::size_t ignored;
            is >> ignored;
        }
        std::size_t count = 0;
        if (!(is >> tag >> count) || tag != "entries")
            throw std::runtime_error("checkpoint: bad entry count");
        for (std::size_t i = 0; i < count; ++i) {
            int cls = 0, source = 0;
            long step = 0;
            std::size_t fdim = 0, pdim = 0;
            if (!(is >> tag >> cls >> step >> source >> fdim >> pdim) || tag != "e")
                throw std::runtime_error("checkpoint: bad entry header");
            FeatureVector f(fdim);
            ClassDistribution p(pdim);
            for (double& v : f)
                if (!(is >> v)) throw std::runtime_error("checkpoint: truncated entry");
            for (double& v : p)
                if (!(is >> v)) throw std::runtime_error("checkpoint: truncated entry");
            QueueEntry entry = QueueEntry::make(
                std::move(f), std::move(p),
                source ? EntrySource::labeled : EntrySource::unlabeled, step);
            if (source) {
                queue_.enqueue_labeled(std::move(entry), cls);
            } else {
                // Stored unlabeled entries passed the gate when enqueued.
                queue_.enqueue_unlabeled(std::move(entry));
            }
        }
        if (!(is >> tag) || tag != "end")
            throw std::runtime_error("checkpoint: missing end marker");
    }

    void load_checkpoint(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
        load_checkpoint(in);
    }

private:
    enum Streams : std::uint64_t {
        kInit = 1,
        kLabeledSampler = 2,
        kUnlabeledSampler = 3,
        kLabeledAug = 4,
        kUnlabeledAug = 5,
        kPartition = 6,
        kEvalSample = 7,
    };

    void pick_eval_sample() {
        const std::size_t n = unlabeled_.size();
        eval_indices_.clear();
        if (n == 0) return;
        const std::size_t want =
            cfg_.eval_unlabeled_sample == 0
                ? n
                : std::min<std::size_t>(n, static_cast<std::size_t>(cfg_.eval_unlabeled_sample));
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        if (want < n) {
            Rng rng = Rng::stream(cfg_.seed, kEvalSample);
            rng.shuffle(idx);
            idx.resize(want);
            std::sort(idx.begin(), idx.end());
        }
        eval_indices_ = std::move(idx);
    }

    std::string diagnostics(double loss_sup, double loss_unsup) const {
        std::ostringstream os;
        os << "iteration " << iteration_ << "\n";
        os << "loss_sup " << loss_sup << " loss_unsup " << loss_unsup << "\n";
        os << "params_finite " << (theta_.all_params_finite() ? 1 : 0) << "\n";
        os << "queue_fill";
        for (int c = 0; c < queue_.class_count(); ++c) os << " " << queue_.fill(c);
        os << "\n";
        os << "enqueue accepted " << queue_.accepted_count() << " rejected "
           << queue_.rejected_count() << "\n";
        return os.str();
    }

    Dataset labeled_;
    Dataset unlabeled_;
    TrainConfig cfg_;
    AugmentationSpec aug_;
    ModelState theta_;
    MomentumState theta_m_;
    ClassBalancedQueue queue_;
    EpochSampler labeled_sampler_;
    EpochSampler unlabeled_sampler_;
    Rng labeled_aug_;
    Rng unlabeled_aug_;
    Rng partition_rng_;
    std::vector<std::size_t> eval_indices_;
    long iteration_ = 0;
};

}  // namespace aggmatch
