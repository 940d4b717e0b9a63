#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "data.hpp"
#include "trainer.hpp"

namespace aggmatch {

inline constexpr const char* kArtifactVersion = "0.1.0";

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using json = nlohmann::json;

// ----------------------------------------------------------------------------
// Strict config parsing: unknown keys are rejected, missing required keys are
// reported by their dotted path, and all ranges are validated before any
// compute starts.
// ----------------------------------------------------------------------------

namespace detail {

class StrictObject {
public:
    StrictObject(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object())
            throw ConfigError("config: '" + path_ + "' must be an object");
    }

    bool has(const std::string& name) {
        seen_.insert(name);
        return j_.contains(name);
    }

    const json& require(const std::string& name) {
        seen_.insert(name);
        if (!j_.contains(name))
            throw ConfigError("config: missing required key '" + dotted(name) + "'");
        return j_.at(name);
    }

    template <typename T>
    T require_as(const std::string& name) {
        return convert<T>(require(name), dotted(name));
    }

    template <typename T>
    T optional_as(const std::string& name, T fallback) {
        seen_.insert(name);
        if (!j_.contains(name)) return fallback;
        return convert<T>(j_.at(name), dotted(name));
    }

    std::string dotted(const std::string& name) const {
        return path_.empty() ? name : path_ + "." + name;
    }

    /// Call after consuming every known key; any leftover key is an error.
    void finish() const {
        for (const auto& item : j_.items()) {
            if (!seen_.count(item.key()))
                throw ConfigError("config: unknown key '" + dotted(item.key()) + "'");
        }
    }

    template <typename T>
    static T convert(const json& value, const std::string& where) {
        try {
            return value.get<T>();
        } catch (const json::exception&) {
            throw ConfigError("config: bad value type at '" + where + "'");
        }
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

inline Method parse_method(const std::string& name, const std::string& where) {
    if (name == "aggmatch") return Method::aggmatch;
    if (name == "fixmatch") return Method::fixmatch;
    if (name == "supervised") return Method::supervised;
    throw ConfigError("config: unknown method '" + name + "' at '" + where + "'");
}

}  // namespace detail

struct DatasetSpec {
    std::string kind;  // blobs | moons | csv | idx
    int n = 4000;
    int test_n = 1000;
    int dim = 32;
    int classes = 4;
    double sigma = kDefaultBlobSigma;
    double radius = kDefaultBlobRadius;
    double separation = kDefaultBlobSeparation;
    int probe_n = 16;  // probe batch size for the attention dump
    std::string path, test_path;                      // csv
    std::string images, labels;                       // idx train
    std::string test_images, test_labels;             // idx test
};

struct ExperimentConfig {
    DatasetSpec dataset;
    SplitSpec split;
    NoiseSpec noise;
    AugmentationSpec augment;
    ModelConfig model;  // input_dim/class_count filled per dataset
    TrainConfig train;  // seed/method filled per run
    std::vector<Method> methods;
    std::vector<std::uint64_t> seeds;
    std::string output_dir;
    bool parallel_seeds = false;
};

inline ExperimentConfig parse_experiment_config(const json& root) {
    detail::StrictObject top(root, "");
    ExperimentConfig cfg;

    {
        detail::StrictObject d(top.require("dataset"), "dataset");
        cfg.dataset.kind = d.require_as<std::string>("kind");
        cfg.dataset.n = d.optional_as<int>("n", cfg.dataset.n);
        cfg.dataset.test_n = d.optional_as<int>("test_n", cfg.dataset.test_n);
        cfg.dataset.dim = d.optional_as<int>("dim", cfg.dataset.dim);
        cfg.dataset.classes = d.optional_as<int>("classes", cfg.dataset.classes);
        cfg.dataset.sigma = d.optional_as<double>("sigma", cfg.dataset.sigma);
        cfg.dataset.radius = d.optional_as<double>("radius", cfg.dataset.radius);
        cfg.dataset.separation =
            d.optional_as<double>("separation", cfg.dataset.separation);
        cfg.dataset.probe_n = d.optional_as<int>("probe_n", cfg.dataset.probe_n);
        cfg.dataset.path = d.optional_as<std::string>("path", "");
        cfg.dataset.test_path = d.optional_as<std::string>("test_path", "");
        cfg.dataset.images = d.optional_as<std::string>("images", "");
        cfg.dataset.labels = d.optional_as<std::string>("labels", "");
        cfg.dataset.test_images = d.optional_as<std::string>("test_images", "");
        cfg.dataset.test_labels = d.optional_as<std::string>("test_labels", "");
        d.finish();

        const std::string& kind = cfg.dataset.kind;
        if (kind == "blobs" || kind == "moons") {
            if (cfg.dataset.n <= 0 || cfg.dataset.test_n <= 0)
                throw ConfigError("config: dataset.n and dataset.test_n must be positive");
            if (kind == "moons" && cfg.dataset.classes != 2)
                throw ConfigError("config: dataset.classes must be 2 for moons");
            if (!(cfg.dataset.sigma >= 0.0))
                throw ConfigError("config: dataset.sigma must be >= 0");
        } else if (kind == "csv") {
            if (cfg.dataset.path.empty() || cfg.dataset.test_path.empty())
                throw ConfigError("config: csv dataset needs dataset.path and dataset.test_path");
        } else if (kind == "idx") {
            if (cfg.dataset.images.empty() || cfg.dataset.labels.empty() ||
                cfg.dataset.test_images.empty() || cfg.dataset.test_labels.empty())
                throw ConfigError(
                    "config: idx dataset needs dataset.images/labels/test_images/test_labels");
        } else {
            throw ConfigError("config: unknown dataset.kind '" + kind + "'");
        }
        if (cfg.dataset.probe_n <= 0)
            throw ConfigError("config: dataset.probe_n must be positive");
    }

    {
        detail::StrictObject s(top.require("split"), "split");
        cfg.split.labels_per_class = s.require_as<int>("labels_per_class");
        cfg.split.batch_size = s.optional_as<int>("B", 32);
        cfg.split.mu = s.optional_as<int>("mu", 3);
        s.finish();
        try {
            cfg.split.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("config: ") + e.what());
        }
    }

    {
        detail::StrictObject n(top.require("noise"), "noise");
        cfg.noise.rate = n.optional_as<double>("rate", 0.0);
        if (n.has("mapping")) {
            const json& mapping = n.require("mapping");
            if (!mapping.is_object())
                throw ConfigError("config: noise.mapping must be an object");
            for (const auto& item : mapping.items()) {
                int from = 0;
                try {
                    from = std::stoi(item.key());
                } catch (const std::exception&) {
                    throw ConfigError("config: noise.mapping key '" + item.key() +
                                      "' is not a class index");
                }
                cfg.noise.mapping[from] =
                    detail::StrictObject::convert<int>(item.value(),
                                                       "noise.mapping." + item.key());
            }
        }
        n.finish();
        if (!(cfg.noise.rate >= 0.0 && cfg.noise.rate <= 1.0))
            throw ConfigError("config: noise.rate must be in [0,1]");
    }

    {
        detail::StrictObject a(top.require("augment"), "augment");
        const std::string mode = a.optional_as<std::string>("mode", "vector");
        if (mode == "vector") {
            cfg.augment.mode = AugmentMode::vector;
        } else if (mode == "grid") {
            cfg.augment.mode = AugmentMode::grid;
        } else {
            throw ConfigError("config: augment.mode must be 'vector' or 'grid'");
        }
        cfg.augment.sigma_weak = a.optional_as<double>("sigma_weak", 0.05);
        cfg.augment.sigma_strong = a.optional_as<double>("sigma_strong", 0.2);
        cfg.augment.dropout = a.optional_as<double>("dropout", 0.25);
        cfg.augment.flip_prob = a.optional_as<double>("flip_prob", 0.5);
        cfg.augment.shift = a.optional_as<int>("shift", 2);
        cfg.augment.cutout = a.optional_as<int>("cutout", 8);
        cfg.augment.jitter = a.optional_as<double>("jitter", 0.2);
        a.finish();
        try {
            cfg.augment.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("config: ") + e.what());
        }
    }

    {
        detail::StrictObject m(top.require("model"), "model");
        cfg.model.hidden_dim = m.optional_as<int>("hidden", 16);
        cfg.model.feature_dim = m.optional_as<int>("feature_dim", 64);
        m.finish();
        if (cfg.model.hidden_dim <= 0 || cfg.model.feature_dim <= 0)
            throw ConfigError("config: model dimensions must be positive");
    }

    {
        detail::StrictObject t(top.require("train"), "train");
        const json& method = t.require("method");
        if (method.is_string()) {
            cfg.methods.push_back(
                detail::parse_method(method.get<std::string>(), "train.method"));
        } else if (method.is_array() && !method.empty()) {
            for (const auto& m : method)
                cfg.methods.push_back(detail::parse_method(
                    detail::StrictObject::convert<std::string>(m, "train.method"),
                    "train.method"));
        } else {
            throw ConfigError("config: train.method must be a string or string array");
        }
        cfg.train.iterations = t.require_as<long>("iterations");
        cfg.train.lr = t.require_as<double>("lr");
        cfg.train.lambda_u = t.optional_as<double>("lambda", 1.0);
        cfg.train.sharpen_temp = t.optional_as<double>("T", 0.5);
        cfg.train.conf_threshold = t.optional_as<double>("tau", 0.95);
        cfg.train.tau_sim = t.optional_as<double>("tau_sim", 0.05);
        cfg.train.lambda_sim = t.optional_as<double>("lambda_sim", 0.5);
        cfg.train.momentum = t.optional_as<double>("lambda_m", 0.999);
        cfg.train.queue_capacity = t.optional_as<int>("L", 256);
        cfg.train.subsets = t.optional_as<int>("M", 8);
        const std::string conf_mode =
            t.optional_as<std::string>("confidence_mode", "weighting");
        if (conf_mode == "weighting") {
            cfg.train.confidence_mode = ConfidenceMode::weighting;
        } else if (conf_mode == "thresholding") {
            cfg.train.confidence_mode = ConfidenceMode::thresholding;
        } else {
            throw ConfigError(
                "config: train.confidence_mode must be 'weighting' or 'thresholding'");
        }
        cfg.train.tau_u = t.optional_as<double>("tau_u", 1.0);
        cfg.train.store_labeled_onehot =
            t.optional_as<bool>("store_labeled_onehot", false);
        const std::string orientation =
            t.optional_as<std::string>("class_term_orientation", "negative_distance");
        if (orientation == "negative_distance") {
            cfg.train.orientation = ClassTermOrientation::negative_distance;
        } else if (orientation == "paper_literal") {
            cfg.train.orientation = ClassTermOrientation::paper_literal;
        } else {
            throw ConfigError(
                "config: train.class_term_orientation must be 'negative_distance' or "
                "'paper_literal'");
        }
        const std::string labels = t.optional_as<std::string>("fixmatch_labels", "hard");
        if (labels == "hard") {
            cfg.train.fixmatch_labels = LabelMode::hard;
        } else if (labels == "soft") {
            cfg.train.fixmatch_labels = LabelMode::soft;
        } else {
            throw ConfigError("config: train.fixmatch_labels must be 'hard' or 'soft'");
        }
        cfg.train.eval_cadence = t.optional_as<long>("eval_cadence", 100);
        cfg.train.eval_unlabeled_sample =
            t.optional_as<long>("eval_unlabeled_sample", 1000);
        t.finish();

        cfg.train.batch_size = cfg.split.batch_size;
        cfg.train.mu = cfg.split.mu;
        try {
            cfg.train.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("config: ") + e.what());
        }
    }

    {
        const json& seeds = top.require("seeds");
        if (!seeds.is_array() || seeds.empty())
            throw ConfigError("config: seeds must be a non-empty array");
        for (const auto& s : seeds)
            cfg.seeds.push_back(
                detail::StrictObject::convert<std::uint64_t>(s, "seeds"));
    }

    cfg.output_dir = detail::StrictObject::convert<std::string>(
        top.require("output_dir"), "output_dir");
    if (cfg.output_dir.empty())
        throw ConfigError("config: output_dir must not be empty");

    cfg.parallel_seeds = top.optional_as<bool>("parallel_seeds", false);
    top.finish();
    return cfg;
}

/// Applies `section.key=value` overrides onto the raw JSON document. Values
/// parse as JSON when possible and fall back to plain strings.
inline void apply_overrides(json& root, std::span<const std::string> overrides) {
    for (const std::string& entry : overrides) {
        const std::size_t eq = entry.find('=');
        if (eq == std::string::npos || eq == 0)
            throw ConfigError("override '" + entry + "' is not of the form key=value");
        std::string path = entry.substr(0, eq);
        const std::string raw = entry.substr(eq + 1);

        json value = json::parse(raw, nullptr, false);
        if (value.is_discarded()) value = raw;

        json* node = &root;
        std::size_t start = 0;
        for (;;) {
            const std::size_t dot = path.find('.', start);
            const std::string key = path.substr(start, dot - start);
            if (key.empty())
                throw ConfigError("override '" + entry + "' has an empty path segment");
            if (dot == std::string::npos) {
                (*node)[key] = value;
                break;
            }
            node = &(*node)[key];
            start = dot + 1;
        }
    }
}

/// Resolved-config echo: every effective value, suitable for an exact rerun.
inline json config_echo(const ExperimentConfig& cfg) {
    json j;
    json& d = j["dataset"];
    d["kind"] = cfg.dataset.kind;
    d["n"] = cfg.dataset.n;
    d["test_n"] = cfg.dataset.test_n;
    d["dim"] = cfg.dataset.dim;
    d["classes"] = cfg.dataset.classes;
    d["sigma"] = cfg.dataset.sigma;
    d["radius"] = cfg.dataset.radius;
    d["separation"] = cfg.dataset.separation;
    d["probe_n"] = cfg.dataset.probe_n;
    if (!cfg.dataset.path.empty()) d["path"] = cfg.dataset.path;
    if (!cfg.dataset.test_path.empty()) d["test_path"] = cfg.dataset.test_path;
    if (!cfg.dataset.images.empty()) d["images"] = cfg.dataset.images;
    if (!cfg.dataset.labels.empty()) d["labels"] = cfg.dataset.labels;
    if (!cfg.dataset.test_images.empty()) d["test_images"] = cfg.dataset.test_images;
    if (!cfg.dataset.test_labels.empty()) d["test_labels"] = cfg.dataset.test_labels;

    json& s = j["split"];
    s["labels_per_class"] = cfg.split.labels_per_class;
    s["B"] = cfg.split.batch_size;
    s["mu"] = cfg.split.mu;

    json& n = j["noise"];
    n["rate"] = cfg.noise.rate;
    n["mapping"] = json::object();
    for (const auto& [from, to] : cfg.noise.mapping)
        n["mapping"][std::to_string(from)] = to;

    json& a = j["augment"];
    a["mode"] = cfg.augment.mode == AugmentMode::vector ? "vector" : "grid";
    a["sigma_weak"] = cfg.augment.sigma_weak;
    a["sigma_strong"] = cfg.augment.sigma_strong;
    a["dropout"] = cfg.augment.dropout;
    a["flip_prob"] = cfg.augment.flip_prob;
    a["shift"] = cfg.augment.shift;
    a["cutout"] = cfg.augment.cutout;
    a["jitter"] = cfg.augment.jitter;

    json& m = j["model"];
    m["hidden"] = cfg.model.hidden_dim;
    m["feature_dim"] = cfg.model.feature_dim;

    json& t = j["train"];
    json methods = json::array();
    for (Method method : cfg.methods) methods.push_back(to_string(method));
    t["method"] = methods;
    t["iterations"] = cfg.train.iterations;
    t["lr"] = cfg.train.lr;
    t["lambda"] = cfg.train.lambda_u;
    t["T"] = cfg.train.sharpen_temp;
    t["tau"] = cfg.train.conf_threshold;
    t["tau_sim"] = cfg.train.tau_sim;
    t["lambda_sim"] = cfg.train.lambda_sim;
    t["lambda_m"] = cfg.train.momentum;
    t["L"] = cfg.train.queue_capacity;
    t["M"] = cfg.train.subsets;
    t["confidence_mode"] = cfg.train.confidence_mode == ConfidenceMode::weighting
                               ? "weighting"
                               : "thresholding";
    t["tau_u"] = cfg.train.tau_u;
    t["store_labeled_onehot"] = cfg.train.store_labeled_onehot;
    t["class_term_orientation"] =
        cfg.train.orientation == ClassTermOrientation::negative_distance
            ? "negative_distance"
            : "paper_literal";
    t["fixmatch_labels"] =
        cfg.train.fixmatch_labels == LabelMode::hard ? "hard" : "soft";
    t["eval_cadence"] = cfg.train.eval_cadence;
    t["eval_unlabeled_sample"] = cfg.train.eval_unlabeled_sample;

    j["seeds"] = cfg.seeds;
    j["output_dir"] = cfg.output_dir;
    j["parallel_seeds"] = cfg.parallel_seeds;
    return j;
}

// ----------------------------------------------------------------------------
// Run execution
// ----------------------------------------------------------------------------

struct BuiltData {
    Dataset labeled;
    Dataset unlabeled;
    Dataset test;
    ModelConfig model;
};

namespace detail {
// Per-run stream tags for dataset construction.
inline constexpr std::uint64_t kTrainData = 100;
inline constexpr std::uint64_t kTestData = 101;
inline constexpr std::uint64_t kSplit = 102;
inline constexpr std::uint64_t kNoise = 103;
}  // namespace detail

/// Builds the labeled/unlabeled/test sets for one run seed. Synthetic data is
/// drawn per seed; file-backed data is fixed and only the split varies.
inline BuiltData build_datasets(const ExperimentConfig& cfg, std::uint64_t seed) {
    Dataset train, test;
    const DatasetSpec& d = cfg.dataset;
    if (d.kind == "blobs" || d.kind == "moons") {
        train = synth(d.kind, d.n, d.classes, d.dim, d.sigma,
                      mix_seed(seed, detail::kTrainData), d.radius, d.separation);
        test = synth(d.kind, d.test_n, d.classes, d.dim, d.sigma,
                     mix_seed(seed, detail::kTestData), d.radius, d.separation);
    } else if (d.kind == "csv") {
        train = load_csv(d.path);
        test = load_csv(d.test_path);
    } else {
        train = load_idx(d.images, d.labels);
        test = load_idx(d.test_images, d.test_labels);
    }
    if (test.class_count > train.class_count) train.class_count = test.class_count;
    test.class_count = train.class_count;
    for (int y : test.labels)
        if (y < 0) throw ConfigError("config: test set contains unlabeled rows");

    SplitSpec split_spec = cfg.split;
    split_spec.seed = mix_seed(seed, detail::kSplit);
    auto [labeled, unlabeled] = split(train, split_spec);

    NoiseSpec noise_spec = cfg.noise;
    noise_spec.seed = mix_seed(seed, detail::kNoise);
    inject_noise(labeled, noise_spec);

    BuiltData out;
    out.model = cfg.model;
    out.model.input_dim = train.dim();
    out.model.class_count = train.class_count;
    out.labeled = std::move(labeled);
    out.unlabeled = std::move(unlabeled);
    out.test = std::move(test);
    return out;
}

struct RunSeries {
    std::vector<long> iters;
    std::vector<double> test_acc;
    std::vector<double> pl_precision;
    std::vector<double> pl_recall;
    std::vector<double> pl_precision_weighted;
    std::vector<double> mean_conf;
    std::vector<int> queue_ready;
    std::vector<std::vector<long>> vote_entropy_hist;  // empty before voting starts
};

struct RunResult {
    Method method = Method::supervised;
    std::uint64_t seed = 0;
    EvalMetrics final_eval;
    RunSeries series;
    double wall_seconds = 0.0;
};

namespace detail {

inline void csv_value(std::ostream& os, double v) {
    if (std::isnan(v)) {
        os << "nan";
        return;
    }
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    os << buf;
}

inline double round9(double v) {
    if (!std::isfinite(v)) return v;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return std::strtod(buf, nullptr);
}

}  // namespace detail

/// Trains one (method, seed) cell of the grid. When `metrics_path` is
/// non-empty, writes the per-cadence metrics CSV; when `checkpoint_path` is
/// non-empty, saves a final checkpoint.
inline RunResult run_single(const ExperimentConfig& cfg, Method method,
                            std::uint64_t seed, const std::string& metrics_path = "",
                            const std::string& checkpoint_path = "") {
    const auto t0 = std::chrono::steady_clock::now();
    BuiltData data = build_datasets(cfg, seed);

    TrainConfig tc = cfg.train;
    tc.method = method;
    tc.seed = seed;
    Trainer trainer(std::move(data.labeled), std::move(data.unlabeled), data.model,
                    tc, cfg.augment);

    std::ofstream metrics;
    if (!metrics_path.empty()) {
        metrics.open(metrics_path, std::ios::binary);  // LF endings everywhere
        if (!metrics)
            throw std::runtime_error("cannot write metrics file " + metrics_path);
        metrics << "iter,loss_sup,loss_unsup,test_acc,pl_precision,pl_recall,"
                   "mean_conf,queue_fill_min,queue_fill_max,enq_accept_rate\n";
    }

    RunResult result;
    result.method = method;
    result.seed = seed;

    double win_sup = 0.0, win_unsup = 0.0, win_conf = 0.0;
    long win_steps = 0, win_enq = 0, win_rej = 0;
    std::size_t fill_min = 0, fill_max = 0;

    EvalMetrics eval;
    for (long iter = 1; iter <= tc.iterations; ++iter) {
        StepReport report = trainer.step();
        win_sup += report.loss_sup;
        win_unsup += report.loss_unsup;
        win_conf += report.mean_confidence;
        win_enq += report.enqueued;
        win_rej += report.rejected;
        ++win_steps;
        fill_min = *std::min_element(report.queue_fill.begin(), report.queue_fill.end());
        fill_max = *std::max_element(report.queue_fill.begin(), report.queue_fill.end());

        if (iter % tc.eval_cadence == 0 || iter == tc.iterations) {
            eval = trainer.evaluate(data.test);
            const bool ready = trainer.queue().ready(tc.subsets);
            result.series.iters.push_back(iter);
            result.series.test_acc.push_back(eval.test_accuracy);
            result.series.pl_precision.push_back(eval.pl_precision);
            result.series.pl_recall.push_back(eval.pl_recall);
            result.series.pl_precision_weighted.push_back(eval.pl_precision_weighted);
            result.series.mean_conf.push_back(win_conf / win_steps);
            result.series.queue_ready.push_back(ready ? 1 : 0);
            result.series.vote_entropy_hist.push_back(eval.vote_entropy_hist);

            if (metrics.is_open()) {
                metrics << iter << ",";
                detail::csv_value(metrics, win_sup / win_steps);
                metrics << ",";
                detail::csv_value(metrics, win_unsup / win_steps);
                metrics << ",";
                detail::csv_value(metrics, eval.test_accuracy);
                metrics << ",";
                detail::csv_value(metrics, eval.pl_precision);
                metrics << ",";
                detail::csv_value(metrics, eval.pl_recall);
                metrics << ",";
                detail::csv_value(metrics, win_conf / win_steps);
                metrics << "," << fill_min << "," << fill_max << ",";
                const long attempts = win_enq + win_rej;
                detail::csv_value(metrics,
                                  attempts ? static_cast<double>(win_enq) / attempts : 0.0);
                metrics << "\n";
            }
            win_sup = win_unsup = win_conf = 0.0;
            win_steps = win_enq = win_rej = 0;
        }
    }
    if (tc.iterations == 0) eval = trainer.evaluate(data.test);
    result.final_eval = eval;

    if (!checkpoint_path.empty()) trainer.save_checkpoint(checkpoint_path);

    result.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

/// Honors AGGMATCH_OUTPUT_ROOT: a relative output_dir is placed under it.
inline std::filesystem::path resolve_output_dir(const ExperimentConfig& cfg) {
    std::filesystem::path dir = cfg.output_dir;
    if (const char* root = std::getenv("AGGMATCH_OUTPUT_ROOT")) {
        if (dir.is_relative() && *root) dir = std::filesystem::path(root) / dir;
    }
    return dir;
}

inline std::string run_file_name(const std::string& stem, Method method,
                                 std::uint64_t seed, const std::string& ext) {
    return stem + "_" + to_string(method) + "_" + std::to_string(seed) + ext;
}

/// Executes the whole method/seed grid and writes metrics CSVs, checkpoints
/// and the final report.json. Throws NonFiniteLoss with a diagnostic file
/// already written when a run diverges.
inline void run_experiment(const ExperimentConfig& cfg, std::ostream& log) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::filesystem::path out_dir = resolve_output_dir(cfg);
    std::filesystem::create_directories(out_dir);

    std::map<std::string, std::vector<RunResult>> by_method;
    for (Method method : cfg.methods) {
        std::vector<RunResult> results(cfg.seeds.size());
        std::vector<std::string> failures(cfg.seeds.size());

        auto run_one = [&](std::size_t k) {
            const std::uint64_t seed = cfg.seeds[k];
            const auto metrics = out_dir / run_file_name("metrics", method, seed, ".csv");
            const auto ckpt = out_dir / run_file_name("checkpoint", method, seed, ".txt");
            try {
                results[k] = run_single(cfg, method, seed, metrics.string(), ckpt.string());
            } catch (const NonFiniteLoss& e) {
                const auto diag = out_dir / run_file_name("diagnostic", method, seed, ".txt");
                std::ofstream df(diag);
                df << e.diagnostics;
                failures[k] = diag.string();
            }
        };

        if (cfg.parallel_seeds && cfg.seeds.size() > 1) {
            std::vector<std::thread> workers;
            for (std::size_t k = 0; k < cfg.seeds.size(); ++k)
                workers.emplace_back(run_one, k);
            for (auto& w : workers) w.join();
        } else {
            for (std::size_t k = 0; k < cfg.seeds.size(); ++k) run_one(k);
        }

        for (std::size_t k = 0; k < cfg.seeds.size(); ++k) {
            if (!failures[k].empty())
                throw NonFiniteLoss("diagnostic written to " + failures[k]);
            log << to_string(method) << " seed " << cfg.seeds[k]
                << ": test_acc " << results[k].final_eval.test_accuracy << "\n";
        }
        by_method[to_string(method)] = std::move(results);
    }

    json report;
    report["artifact_version"] = kArtifactVersion;
    report["config"] = config_echo(cfg);
    for (const auto& [name, results] : by_method) {
        json& slot = report["results"][name];
        double sum = 0.0, sq = 0.0;
        json per_seed = json::array();
        for (const RunResult& r : results) {
            sum += r.final_eval.test_accuracy;
            sq += r.final_eval.test_accuracy * r.final_eval.test_accuracy;
            json row;
            row["seed"] = r.seed;
            row["final_test_accuracy"] = detail::round9(r.final_eval.test_accuracy);
            json per_class = json::array();
            for (double a : r.final_eval.per_class_accuracy)
                per_class.push_back(detail::round9(a));
            row["per_class_accuracy"] = per_class;
            row["final_pl_precision"] = detail::round9(r.final_eval.pl_precision);
            row["final_pl_recall"] = detail::round9(r.final_eval.pl_recall);
            row["wall_seconds"] = detail::round9(r.wall_seconds);
            json series;
            series["iter"] = r.series.iters;
            auto dump_series = [&](const char* key, const std::vector<double>& v) {
                json arr = json::array();
                for (double x : v) arr.push_back(detail::round9(x));
                series[key] = arr;
            };
            dump_series("test_acc", r.series.test_acc);
            dump_series("pl_precision", r.series.pl_precision);
            dump_series("pl_recall", r.series.pl_recall);
            dump_series("pl_precision_weighted", r.series.pl_precision_weighted);
            dump_series("mean_conf", r.series.mean_conf);
            series["queue_ready"] = r.series.queue_ready;
            series["vote_entropy_hist"] = r.series.vote_entropy_hist;
            row["series"] = series;
            per_seed.push_back(row);
        }
        const double mean = sum / results.size();
        const double var =
            results.size() > 1 ? std::max(0.0, sq / results.size() - mean * mean) : 0.0;
        slot["mean_accuracy"] = detail::round9(mean);
        slot["std_accuracy"] = detail::round9(std::sqrt(var));
        slot["per_seed"] = per_seed;
    }
    report["wall_clock_seconds"] = detail::round9(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());

    std::ofstream rf(out_dir / "report.json", std::ios::binary);
    rf << report.dump(2) << "\n";
    log << "report written to " << (out_dir / "report.json").string() << "\n";
}

// ----------------------------------------------------------------------------
// Dumps: features, attention weights, queue contents from a saved checkpoint.
// ----------------------------------------------------------------------------

/// Restores the first (method, seed) cell's checkpoint and writes the
/// requested CSV. Returns the path of the written file.
inline std::string dump_artifacts(const ExperimentConfig& cfg,
                                  const std::string& what) {
    const Method method = cfg.methods.front();
    const std::uint64_t seed = cfg.seeds.front();
    const std::filesystem::path out_dir = resolve_output_dir(cfg);
    const auto ckpt = out_dir / run_file_name("checkpoint", method, seed, ".txt");
    if (!std::filesystem::exists(ckpt))
        throw ConfigError("dump: missing checkpoint " + ckpt.string());

    BuiltData data = build_datasets(cfg, seed);
    TrainConfig tc = cfg.train;
    tc.method = method;
    tc.seed = seed;
    Trainer trainer(data.labeled, data.unlabeled, data.model, tc, cfg.augment);
    trainer.load_checkpoint(ckpt.string());

    char buf[32];
    if (what == "features") {
        const auto path = out_dir / run_file_name("features", method, seed, ".csv");
        std::ofstream os(path, std::ios::binary);
        os << "label";
        for (int i = 0; i < data.model.feature_dim; ++i) os << ",f" << i;
        os << "\n";
        for (std::size_t i = 0; i < data.test.size(); ++i) {
            auto out = forward(data.test.instances[i], trainer.model());
            os << data.test.labels[i];
            for (double v : out.feature) {
                std::snprintf(buf, sizeof(buf), "%.9g", v);
                os << "," << buf;
            }
            os << "\n";
        }
        return path.string();
    }

    if (what == "attention") {
        // Candidate pool: every queue entry, class-major, oldest first.
        std::vector<const QueueEntry*> candidates;
        std::vector<int> candidate_class;
        for (int c = 0; c < trainer.queue().class_count(); ++c) {
            for (const auto& e : trainer.queue().entries(c)) {
                candidates.push_back(&e);
                candidate_class.push_back(c);
            }
        }
        if (candidates.empty())
            throw ConfigError("dump: checkpoint queue is empty, nothing to attend to");

        const auto path = out_dir / run_file_name("attention", method, seed, ".csv");
        std::ofstream os(path, std::ios::binary);
        os << "query";
        for (std::size_t i = 0; i < candidates.size(); ++i) os << ",c" << i;
        os << "\nclass";
        for (int c : candidate_class) os << "," << c;
        os << "\n";

        const int probe = std::min<int>(cfg.dataset.probe_n,
                                        static_cast<int>(trainer.unlabeled_set().size()));
        const AggregationConfig agg = tc.aggregation();
        for (int i = 0; i < probe; ++i) {
            auto out = forward(trainer.unlabeled_set().instances[static_cast<std::size_t>(i)],
                               trainer.model());
            Query q = Query::make(std::move(out.feature), std::move(out.distribution));
            const auto weights = aggregate_weights(q, candidates, agg);
            os << i;
            for (double w : weights) {
                std::snprintf(buf, sizeof(buf), "%.9g", w);
                os << "," << buf;
            }
            os << "\n";
        }
        return path.string();
    }

    if (what == "queue") {
        const auto path = out_dir / run_file_name("queue", method, seed, ".csv");
        std::ofstream os(path, std::ios::binary);
        trainer.queue().dump_csv(os);
        return path.string();
    }

    throw ConfigError("dump: unknown target '" + what +
                      "' (expected features, attention or queue)");
}

}  // namespace aggmatch
