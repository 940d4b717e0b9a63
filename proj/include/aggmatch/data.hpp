#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "numerics.hpp"
#include "rng.hpp"

namespace aggmatch {

struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Default blobs geometry: tuned so a fully supervised model reaches roughly
// 97% test accuracy at sigma 0.4 while class boundaries stay in low-density
// regions.
inline constexpr double kDefaultBlobSigma = 0.4;
inline constexpr double kDefaultBlobRadius = 0.88;
inline constexpr double kDefaultBlobSeparation = 1.76;

// ============================================================================
// Dataset and split/noise/augmentation specifications
// ============================================================================

struct Dataset {
    std::vector<std::vector<double>> instances;
    std::vector<int> labels;       // -1 marks an unlabeled item
    std::vector<int> eval_labels;  // hidden ground truth of unlabeled items,
                                   // read only by the metrics path
    int class_count = 0;
    int grid_rows = 0;  // image geometry; 0 for plain vector data
    int grid_cols = 0;

    std::size_t size() const { return instances.size(); }
    int dim() const { return instances.empty() ? 0 : static_cast<int>(instances[0].size()); }
};

struct SplitSpec {
    int labels_per_class = 4;
    std::uint64_t seed = 0;
    int batch_size = 32;  // B
    int mu = 3;           // unlabeled batch = mu * B

    void validate() const {
        if (labels_per_class <= 0)
            throw std::invalid_argument("split: labels_per_class must be positive");
        if (batch_size <= 0) throw std::invalid_argument("split: B must be positive");
        if (mu < 0) throw std::invalid_argument("split: mu must be >= 0");
    }
};

struct NoiseSpec {
    std::map<int, int> mapping;  // class -> replacement class
    double rate = 0.0;
    std::uint64_t seed = 0;

    void validate(int class_count) const {
        if (!(rate >= 0.0 && rate <= 1.0))
            throw std::invalid_argument("noise: rate must be in [0,1]");
        for (const auto& [from, to] : mapping) {
            if (from == to)
                throw std::invalid_argument("noise: mapping may not fix a class");
            if (from < 0 || from >= class_count || to < 0 || to >= class_count)
                throw std::invalid_argument("noise: mapping class out of range");
        }
    }
};

enum class AugmentMode { vector, grid };
enum class Strength { weak, strong };

struct AugmentationSpec {
    AugmentMode mode = AugmentMode::vector;
    // vector geometry
    double sigma_weak = 0.05;
    double sigma_strong = 0.2;
    double dropout = 0.25;  // fraction of coordinates zeroed by the strong view
    // grid geometry
    double flip_prob = 0.5;
    int shift = 2;
    int cutout = 8;
    double jitter = 0.2;

    void validate() const {
        if (!(sigma_weak >= 0.0) || !(sigma_strong >= sigma_weak))
            throw std::invalid_argument("augment: need sigma_strong >= sigma_weak >= 0");
        if (!(dropout >= 0.0 && dropout < 1.0))
            throw std::invalid_argument("augment: dropout must be in [0,1)");
        if (!(flip_prob >= 0.0 && flip_prob <= 1.0))
            throw std::invalid_argument("augment: flip_prob must be in [0,1]");
        if (shift < 0 || cutout < 0)
            throw std::invalid_argument("augment: shift/cutout must be >= 0");
        if (!(jitter >= 0.0 && jitter < 1.0))
            throw std::invalid_argument("augment: jitter must be in [0,1)");
    }
};

// ============================================================================
// Loaders
// ============================================================================

/// CSV with header `label,f0,...,f{D-1}`. Label -1 marks unlabeled rows.
inline Dataset load_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("csv: cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || line.empty())
        throw ParseError("csv: empty file " + path);
    if (line.back() == '\r') line.pop_back();

    if (line.rfind("label", 0) != 0)
        throw ParseError("csv: header must start with 'label' in " + path);

    std::size_t columns = 1;
    for (char ch : line) columns += (ch == ',');
    if (columns < 2) throw ParseError("csv: header names no feature columns");

    Dataset d;
    int max_label = -1;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::stringstream row(line);
        std::string cell;
        std::vector<double> values;
        while (std::getline(row, cell, ',')) {
            std::size_t used = 0;
            double v = 0.0;
            try {
                v = std::stod(cell, &used);
            } catch (const std::exception&) {
                throw ParseError("csv: bad number at line " + std::to_string(line_no));
            }
            if (used != cell.size())
                throw ParseError("csv: bad number at line " + std::to_string(line_no));
            values.push_back(v);
        }
        if (values.size() != columns)
            throw ParseError("csv: row width mismatch at line " + std::to_string(line_no));
        const int label = static_cast<int>(values[0]);
        if (label < -1 || static_cast<double>(label) != values[0])
            throw ParseError("csv: bad label at line " + std::to_string(line_no));
        d.labels.push_back(label);
        d.instances.emplace_back(values.begin() + 1, values.end());
        max_label = std::max(max_label, label);
    }
    if (d.instances.empty()) throw ParseError("csv: no data rows in " + path);
    d.class_count = max_label + 1;
    if (d.class_count <= 0) throw ParseError("csv: no labeled rows in " + path);
    return d;
}

namespace detail {

inline std::uint32_t read_be32(std::istream& in, std::size_t offset) {
    unsigned char bytes[4];
    if (!in.read(reinterpret_cast<char*>(bytes), 4))
        throw ParseError("idx: truncated at byte " + std::to_string(offset));
    return (std::uint32_t(bytes[0]) << 24) | (std::uint32_t(bytes[1]) << 16) |
           (std::uint32_t(bytes[2]) << 8) | std::uint32_t(bytes[3]);
}

}  // namespace detail

/// IDX image file (magic 0x00000803); bytes are scaled to [0,1]. A labels
/// file (magic 0x00000801) is optional; without it every item is unlabeled.
inline Dataset load_idx(const std::string& images_path,
                        const std::string& labels_path = "") {
    std::ifstream img(images_path, std::ios::binary);
    if (!img) throw ParseError("idx: cannot open " + images_path);
    const std::uint32_t magic = detail::read_be32(img, 0);
    if (magic != 0x00000803)
        throw ParseError("idx: bad image magic at byte 0 in " + images_path);
    const std::uint32_t count = detail::read_be32(img, 4);
    const std::uint32_t rows = detail::read_be32(img, 8);
    const std::uint32_t cols = detail::read_be32(img, 12);
    const std::size_t dim = static_cast<std::size_t>(rows) * cols;
    if (count == 0 || dim == 0) throw ParseError("idx: empty image file");

    Dataset d;
    d.grid_rows = static_cast<int>(rows);
    d.grid_cols = static_cast<int>(cols);
    std::vector<unsigned char> buf(dim);
    for (std::uint32_t i = 0; i < count; ++i) {
        if (!img.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(dim)))
            throw ParseError("idx: truncated at byte " + std::to_string(16 + std::size_t(i) * dim));
        std::vector<double> x(dim);
        for (std::size_t k = 0; k < dim; ++k) x[k] = buf[k] / 255.0;
        d.instances.push_back(std::move(x));
    }

    if (labels_path.empty()) {
        d.labels.assign(count, -1);
        d.class_count = 0;
        return d;
    }
    std::ifstream lab(labels_path, std::ios::binary);
    if (!lab) throw ParseError("idx: cannot open " + labels_path);
    if (detail::read_be32(lab, 0) != 0x00000801)
        throw ParseError("idx: bad label magic at byte 0 in " + labels_path);
    if (detail::read_be32(lab, 4) != count)
        throw ParseError("idx: label count mismatch");
    int max_label = -1;
    for (std::uint32_t i = 0; i < count; ++i) {
        char byte = 0;
        if (!lab.get(byte))
            throw ParseError("idx: truncated at byte " + std::to_string(8 + i));
        d.labels.push_back(static_cast<unsigned char>(byte));
        max_label = std::max(max_label, d.labels.back());
    }
    d.class_count = max_label + 1;
    return d;
}

// ============================================================================
// Synthetic generators
// ============================================================================

/// Two interleaved half circles with isotropic noise; the classic 2-d
/// two-class benchmark.
inline Dataset synth_moons(int n, double sigma, std::uint64_t seed) {
    if (n < 2) throw std::invalid_argument("moons: need n >= 2");
    Dataset d;
    d.class_count = 2;
    Rng rng(seed);
    constexpr double kPi = 3.141592653589793238462643383279502884;
    for (int i = 0; i < n; ++i) {
        const int cls = i % 2;
        const double t = kPi * rng.uniform();
        std::vector<double> x(2);
        if (cls == 0) {
            x[0] = std::cos(t);
            x[1] = std::sin(t);
        } else {
            x[0] = 1.0 - std::cos(t);
            x[1] = 0.5 - std::sin(t);
        }
        x[0] += sigma * rng.normal();
        x[1] += sigma * rng.normal();
        d.instances.push_back(std::move(x));
        d.labels.push_back(cls);
    }
    return d;
}

/// Deterministic center layout for the blobs benchmark. Classes come in
/// pairs: pair bases sit on a circle of `radius` spanned by two diagonal
/// directions and the two classes of a pair sit at +-separation/2 along a
/// third diagonal. All three directions are orthonormalized +-1 patterns, so
/// the class signal is spread evenly over every coordinate and no single
/// coordinate is load-bearing. An odd trailing class sits at its base.
inline std::vector<std::vector<double>> blob_centers(int classes, int dim,
                                                     double radius,
                                                     double separation) {
    if (dim < 3) throw std::invalid_argument("blobs: need dim >= 3");
    constexpr double kPi = 3.141592653589793238462643383279502884;

    // Orthonormal basis from all-ones, alternating, and period-4 patterns.
    std::vector<std::vector<double>> basis(3, std::vector<double>(dim));
    for (int j = 0; j < dim; ++j) {
        basis[0][static_cast<std::size_t>(j)] = 1.0;
        basis[1][static_cast<std::size_t>(j)] = j % 2 == 0 ? 1.0 : -1.0;
        basis[2][static_cast<std::size_t>(j)] = j % 4 < 2 ? 1.0 : -1.0;
    }
    for (std::size_t k = 0; k < basis.size(); ++k) {
        for (std::size_t prev = 0; prev < k; ++prev) {
            const double proj = dot(basis[k], basis[prev]);
            for (int j = 0; j < dim; ++j)
                basis[k][static_cast<std::size_t>(j)] -= proj * basis[prev][static_cast<std::size_t>(j)];
        }
        const double len = norm(basis[k]);
        if (len < 1e-9) throw std::invalid_argument("blobs: degenerate center basis");
        for (double& v : basis[k]) v /= len;
    }

    const int pairs = (classes + 1) / 2;
    std::vector<std::vector<double>> centers;
    for (int cls = 0; cls < classes; ++cls) {
        const int pair = cls / 2;
        const double angle = 2.0 * kPi * pair / pairs;
        std::vector<double> c(static_cast<std::size_t>(dim), 0.0);
        for (int j = 0; j < dim; ++j) {
            c[static_cast<std::size_t>(j)] =
                radius * (std::cos(angle) * basis[0][static_cast<std::size_t>(j)] +
                          std::sin(angle) * basis[1][static_cast<std::size_t>(j)]);
        }
        if (2 * pair + 1 < classes) {  // paired class: offset along the third axis
            const double sign = cls % 2 == 0 ? 0.5 : -0.5;
            for (int j = 0; j < dim; ++j)
                c[static_cast<std::size_t>(j)] +=
                    sign * separation * basis[2][static_cast<std::size_t>(j)];
        }
        centers.push_back(std::move(c));
    }
    return centers;
}

/// Y isotropic Gaussians at distinct centers.
inline Dataset synth_blobs(int n, int classes, int dim, double sigma,
                           std::uint64_t seed, double radius = kDefaultBlobRadius,
                           double separation = kDefaultBlobSeparation) {
    if (classes < 1) throw std::invalid_argument("blobs: need >= 1 class");
    if (n < classes) throw std::invalid_argument("blobs: need n >= class count");
    const auto centers = blob_centers(classes, dim, radius, separation);
    Dataset d;
    d.class_count = classes;
    Rng rng(seed);
    for (int i = 0; i < n; ++i) {
        const int cls = i % classes;
        std::vector<double> x = centers[static_cast<std::size_t>(cls)];
        for (double& v : x) v += sigma * rng.normal();
        d.instances.push_back(std::move(x));
        d.labels.push_back(cls);
    }
    return d;
}

inline Dataset synth(const std::string& kind, int n, int classes, int dim,
                     double sigma, std::uint64_t seed, double radius = kDefaultBlobRadius,
                     double separation = kDefaultBlobSeparation) {
    if (kind == "moons") {
        if (classes != 2) throw std::invalid_argument("moons: class count must be 2");
        return synth_moons(n, sigma, seed);
    }
    if (kind == "blobs") return synth_blobs(n, classes, dim, sigma, seed, radius, separation);
    throw std::invalid_argument("synth: unknown kind '" + kind + "'");
}

// ============================================================================
// Split / noise
// ============================================================================

/// Chooses labels_per_class items per class uniformly at random as the
/// labeled set; everything else becomes unlabeled with its ground truth moved
/// to eval_labels. Items already marked -1 go straight to the unlabeled set.
inline std::pair<Dataset, Dataset> split(const Dataset& d, const SplitSpec& spec) {
    spec.validate();
    std::vector<std::vector<std::size_t>> per_class(
        static_cast<std::size_t>(d.class_count));
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (d.labels[i] >= 0)
            per_class[static_cast<std::size_t>(d.labels[i])].push_back(i);
    }

    Rng rng = Rng::stream(spec.seed, 0x511D7ULL);
    std::vector<bool> keep_labeled(d.size(), false);
    for (int cls = 0; cls < d.class_count; ++cls) {
        auto& pool = per_class[static_cast<std::size_t>(cls)];
        if (pool.size() < static_cast<std::size_t>(spec.labels_per_class))
            throw std::invalid_argument("split: class " + std::to_string(cls) +
                                        " has too few labeled samples");
        rng.shuffle(pool);
        for (int k = 0; k < spec.labels_per_class; ++k) keep_labeled[pool[static_cast<std::size_t>(k)]] = true;
    }

    Dataset labeled, unlabeled;
    labeled.class_count = unlabeled.class_count = d.class_count;
    labeled.grid_rows = unlabeled.grid_rows = d.grid_rows;
    labeled.grid_cols = unlabeled.grid_cols = d.grid_cols;
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (keep_labeled[i]) {
            labeled.instances.push_back(d.instances[i]);
            labeled.labels.push_back(d.labels[i]);
        } else {
            unlabeled.instances.push_back(d.instances[i]);
            unlabeled.labels.push_back(-1);
            unlabeled.eval_labels.push_back(d.labels[i]);  // -1 stays -1
        }
    }
    return {std::move(labeled), std::move(unlabeled)};
}

/// Asymmetric label corruption: each item of a mapped class flips to its
/// mapped class with probability `rate`. Instances are never touched.
inline void inject_noise(Dataset& labeled, const NoiseSpec& spec) {
    spec.validate(labeled.class_count);
    if (spec.rate == 0.0 || spec.mapping.empty()) return;
    Rng rng = Rng::stream(spec.seed, 0xA015E11ULL);
    for (std::size_t i = 0; i < labeled.size(); ++i) {
        auto it = spec.mapping.find(labeled.labels[i]);
        if (it == spec.mapping.end()) continue;
        if (rng.uniform() < spec.rate) labeled.labels[i] = it->second;
    }
}

// ============================================================================
// Augmentation
// ============================================================================

namespace detail {

inline std::vector<double> augment_vector(std::span<const double> x,
                                          const AugmentationSpec& spec,
                                          Strength strength, Rng& rng) {
    std::vector<double> out(x.begin(), x.end());
    const double sigma =
        strength == Strength::weak ? spec.sigma_weak : spec.sigma_strong;
    for (double& v : out) v += sigma * rng.normal();
    if (strength == Strength::strong && spec.dropout > 0.0) {
        const auto k = static_cast<std::size_t>(
            std::llround(spec.dropout * static_cast<double>(out.size())));
        std::vector<std::size_t> idx(out.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        // partial Fisher-Yates: first k positions become the dropped set
        for (std::size_t i = 0; i < k; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(rng.below(idx.size() - i));
            std::swap(idx[i], idx[j]);
            out[idx[i]] = 0.0;
        }
    }
    return out;
}

inline std::vector<double> augment_grid(std::span<const double> x,
                                        const AugmentationSpec& spec, int rows,
                                        int cols, Strength strength, Rng& rng) {
    std::vector<double> out(x.begin(), x.end());
    auto at = [&](std::vector<double>& img, int r, int c) -> double& {
        return img[static_cast<std::size_t>(r) * cols + c];
    };
    // horizontal flip
    if (rng.uniform() < spec.flip_prob) {
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols / 2; ++c)
                std::swap(at(out, r, c), at(out, r, cols - 1 - c));
    }
    // shift with zero padding
    if (spec.shift > 0) {
        const int dr = static_cast<int>(rng.below(2 * spec.shift + 1)) - spec.shift;
        const int dc = static_cast<int>(rng.below(2 * spec.shift + 1)) - spec.shift;
        std::vector<double> shifted(out.size(), 0.0);
        for (int r = 0; r < rows; ++r) {
            for (int c = 0; c < cols; ++c) {
                const int sr = r - dr, sc = c - dc;
                if (sr >= 0 && sr < rows && sc >= 0 && sc < cols)
                    at(shifted, r, c) = at(out, sr, sc);
            }
        }
        out = std::move(shifted);
    }
    if (strength == Strength::strong) {
        if (spec.cutout > 0 && spec.cutout <= std::min(rows, cols)) {
            const int r0 = static_cast<int>(rng.below(rows - spec.cutout + 1));
            const int c0 = static_cast<int>(rng.below(cols - spec.cutout + 1));
            for (int r = r0; r < r0 + spec.cutout; ++r)
                for (int c = c0; c < c0 + spec.cutout; ++c) at(out, r, c) = 0.0;
        }
        if (spec.jitter > 0.0) {
            const double scale = 1.0 + rng.uniform(-spec.jitter, spec.jitter);
            for (double& v : out) v = std::clamp(v * scale, 0.0, 1.0);
        }
    }
    return out;
}

}  // namespace detail

inline std::vector<double> augment(std::span<const double> x,
                                   const AugmentationSpec& spec, Strength strength,
                                   Rng& rng, int grid_rows = 0, int grid_cols = 0) {
    spec.validate();
    if (spec.mode == AugmentMode::grid) {
        if (grid_rows <= 0 || grid_cols <= 0 ||
            static_cast<std::size_t>(grid_rows) * grid_cols != x.size())
            throw std::invalid_argument("augment: grid mode needs matching geometry");
        return detail::augment_grid(x, spec, grid_rows, grid_cols, strength, rng);
    }
    return detail::augment_vector(x, spec, strength, rng);
}

// ============================================================================
// Batching
// ============================================================================

/// Draws indices in epochs: a full random permutation is consumed before the
/// next reshuffle, so coverage is even.
class EpochSampler {
public:
    EpochSampler(std::size_t count, Rng rng) : rng_(rng) {
        perm_.resize(count);
        for (std::size_t i = 0; i < count; ++i) perm_[i] = i;
        reshuffle();
    }

    std::size_t next() {
        if (perm_.empty()) throw std::logic_error("EpochSampler: empty index set");
        if (pos_ == perm_.size()) reshuffle();
        return perm_[pos_++];
    }

private:
    void reshuffle() {
        rng_.shuffle(perm_);
        pos_ = 0;
    }

    std::vector<std::size_t> perm_;
    std::size_t pos_ = 0;
    Rng rng_;
};

struct LabeledExample {
    std::size_t index = 0;
    std::vector<double> weak;
    int label = 0;
};

struct UnlabeledExample {
    std::size_t index = 0;
    std::vector<double> weak;
    std::vector<double> strong;
};

struct Batch {
    std::vector<LabeledExample> labeled;
    std::vector<UnlabeledExample> unlabeled;
};

/// One training step's worth of data: B labeled items with weak views and
/// mu*B unlabeled items with weak+strong views.
inline Batch next_batches(const Dataset& labeled, const Dataset& unlabeled,
                          const SplitSpec& spec, const AugmentationSpec& aug,
                          EpochSampler& labeled_sampler,
                          EpochSampler& unlabeled_sampler, Rng& labeled_rng,
                          Rng& unlabeled_rng) {
    if (labeled.size() == 0) throw std::invalid_argument("batch: empty labeled set");
    Batch batch;
    batch.labeled.reserve(static_cast<std::size_t>(spec.batch_size));
    for (int b = 0; b < spec.batch_size; ++b) {
        LabeledExample ex;
        ex.index = labeled_sampler.next();
        ex.label = labeled.labels[ex.index];
        ex.weak = augment(labeled.instances[ex.index], aug, Strength::weak,
                          labeled_rng, labeled.grid_rows, labeled.grid_cols);
        batch.labeled.push_back(std::move(ex));
    }
    const int u_count = spec.mu * spec.batch_size;
    if (u_count > 0 && unlabeled.size() == 0)
        throw std::invalid_argument("batch: empty unlabeled set");
    batch.unlabeled.reserve(static_cast<std::size_t>(u_count));
    for (int b = 0; b < u_count; ++b) {
        UnlabeledExample ex;
        ex.index = unlabeled_sampler.next();
        ex.weak = augment(unlabeled.instances[ex.index], aug, Strength::weak,
                          unlabeled_rng, unlabeled.grid_rows, unlabeled.grid_cols);
        ex.strong = augment(unlabeled.instances[ex.index], aug, Strength::strong,
                            unlabeled_rng, unlabeled.grid_rows, unlabeled.grid_cols);
        batch.unlabeled.push_back(std::move(ex));
    }
    return batch;
}

}  // namespace aggmatch
