#pragma once

#include <cmath>
#include <cstddef>
#include <istream>
#include <ostream>
#include <span>
#include <stdexcept>
#include <vector>

#include "numerics.hpp"
#include "rng.hpp"

namespace aggmatch {

// ============================================================================
// Backbone + classifier head. An MLP with ReLU hidden layers; the activation
// of the last hidden layer is the feature embedding, the final linear layer
// produces class logits.
// ============================================================================

struct ModelConfig {
    int input_dim = 0;
    int hidden_dim = 16;
    int feature_dim = 64;  // penultimate width, i.e. the embedding dimension
    int class_count = 0;

    void validate() const {
        if (input_dim <= 0 || hidden_dim <= 0 || feature_dim <= 0 || class_count <= 0)
            throw std::invalid_argument("ModelConfig: all dimensions must be positive");
    }
};

struct Layer {
    int in = 0;
    int out = 0;
    std::vector<double> w;  // row-major, w[o * in + i]
    std::vector<double> b;  // b[o]
};

struct ModelState {
    int input_dim = 0;
    int feature_dim = 0;
    int class_count = 0;
    std::vector<Layer> layers;  // ReLU after each layer except the last

    static ModelState init(const ModelConfig& cfg, Rng& rng) {
        cfg.validate();
        ModelState m;
        m.input_dim = cfg.input_dim;
        m.feature_dim = cfg.feature_dim;
        m.class_count = cfg.class_count;
        const int dims[4] = {cfg.input_dim, cfg.hidden_dim, cfg.feature_dim,
                             cfg.class_count};
        for (int k = 0; k < 3; ++k) {
            Layer layer;
            layer.in = dims[k];
            layer.out = dims[k + 1];
            layer.w.resize(static_cast<std::size_t>(layer.in) * layer.out);
            layer.b.assign(static_cast<std::size_t>(layer.out), 0.0);
            const double bound = std::sqrt(6.0 / (layer.in + layer.out));
            for (double& v : layer.w) v = rng.uniform(-bound, bound);
            m.layers.push_back(std::move(layer));
        }
        return m;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += l.w.size() + l.b.size();
        return n;
    }

    bool all_params_finite() const {
        for (const auto& l : layers) {
            if (!all_finite(l.w) || !all_finite(l.b)) return false;
        }
        return true;
    }
};

/// EMA copy of the model parameters; identical shape by construction.
using MomentumState = ModelState;

struct ForwardCache {
    std::vector<std::vector<double>> inputs;  // inputs[k] feeds layers[k]
    std::vector<std::vector<double>> pre;     // pre-activations of layers[k]
};

struct ForwardOutput {
    FeatureVector feature;          // last hidden activation
    ClassDistribution distribution; // softmax of the head logits
    ForwardCache cache;
};

inline void affine(const Layer& l, std::span<const double> x,
                   std::vector<double>& out) {
    out.assign(static_cast<std::size_t>(l.out), 0.0);
    for (int o = 0; o < l.out; ++o) {
        const double* row = l.w.data() + static_cast<std::size_t>(o) * l.in;
        double acc = l.b[static_cast<std::size_t>(o)];
        for (int i = 0; i < l.in; ++i) acc += row[i] * x[static_cast<std::size_t>(i)];
        out[static_cast<std::size_t>(o)] = acc;
    }
}

inline ForwardOutput forward(std::span<const double> x, const ModelState& m) {
    if (static_cast<int>(x.size()) != m.input_dim)
        throw std::invalid_argument("forward: input dimension mismatch");
    ForwardOutput out;
    out.cache.inputs.reserve(m.layers.size());
    out.cache.pre.reserve(m.layers.size());

    std::vector<double> a(x.begin(), x.end());
    for (std::size_t k = 0; k < m.layers.size(); ++k) {
        out.cache.inputs.push_back(a);
        std::vector<double> z;
        affine(m.layers[k], a, z);
        out.cache.pre.push_back(z);
        if (k + 1 < m.layers.size()) {
            for (double& v : z) v = v > 0.0 ? v : 0.0;  // ReLU
            a = std::move(z);
        } else {
            out.distribution = softmax(z, 1.0);
        }
    }
    // Feature = input of the classifier head (post-ReLU penultimate activation).
    out.feature = out.cache.inputs.back();
    return out;
}

struct Gradients {
    std::vector<Layer> layers;

    static Gradients zeros_like(const ModelState& m) {
        Gradients g;
        for (const auto& l : m.layers) {
            Layer zl;
            zl.in = l.in;
            zl.out = l.out;
            zl.w.assign(l.w.size(), 0.0);
            zl.b.assign(l.b.size(), 0.0);
            g.layers.push_back(std::move(zl));
        }
        return g;
    }

    bool all_finite_grads() const {
        for (const auto& l : layers) {
            if (!all_finite(l.w) || !all_finite(l.b)) return false;
        }
        return true;
    }
};

/// Accumulates exact analytic parameter gradients for one sample into `grads`.
/// `dlogits` is the loss gradient at the head logits; `dfeature` (optional,
/// may be empty) is an additional loss gradient at the feature embedding.
inline void backward_and_accumulate(const ModelState& m, const ForwardCache& cache,
                                    std::span<const double> dlogits,
                                    std::span<const double> dfeature,
                                    Gradients& grads) {
    if (cache.inputs.size() != m.layers.size() || cache.pre.size() != m.layers.size())
        throw std::logic_error("backward: cache does not match model");
    if (static_cast<int>(dlogits.size()) != m.class_count)
        throw std::logic_error("backward: dlogits size mismatch");
    if (!dfeature.empty() && static_cast<int>(dfeature.size()) != m.feature_dim)
        throw std::logic_error("backward: dfeature size mismatch");

    std::vector<double> delta(dlogits.begin(), dlogits.end());
    for (std::size_t k = m.layers.size(); k-- > 0;) {
        const Layer& l = m.layers[k];
        Layer& g = grads.layers[k];
        const auto& input = cache.inputs[k];

        for (int o = 0; o < l.out; ++o) {
            const double d = delta[static_cast<std::size_t>(o)];
            g.b[static_cast<std::size_t>(o)] += d;
            double* grow = g.w.data() + static_cast<std::size_t>(o) * l.in;
            for (int i = 0; i < l.in; ++i) grow[i] += d * input[static_cast<std::size_t>(i)];
        }
        if (k == 0) break;

        std::vector<double> dprev(static_cast<std::size_t>(l.in), 0.0);
        for (int o = 0; o < l.out; ++o) {
            const double d = delta[static_cast<std::size_t>(o)];
            const double* row = l.w.data() + static_cast<std::size_t>(o) * l.in;
            for (int i = 0; i < l.in; ++i) dprev[static_cast<std::size_t>(i)] += d * row[i];
        }
        if (k == m.layers.size() - 1 && !dfeature.empty()) {
            for (int i = 0; i < l.in; ++i) dprev[static_cast<std::size_t>(i)] += dfeature[static_cast<std::size_t>(i)];
        }
        // ReLU derivative through the previous layer's pre-activation.
        const auto& pre_prev = cache.pre[k - 1];
        for (std::size_t i = 0; i < dprev.size(); ++i) {
            if (pre_prev[i] <= 0.0) dprev[i] = 0.0;
        }
        delta = std::move(dprev);
    }
}

/// Plain SGD: params <- params - lr * grads. Non-finite gradients abort.
inline void sgd_step(ModelState& m, const Gradients& grads, double lr) {
    if (!(lr >= 0.0)) throw std::invalid_argument("sgd_step: lr must be >= 0");
    if (grads.layers.size() != m.layers.size())
        throw std::logic_error("sgd_step: gradient shape mismatch");
    if (!grads.all_finite_grads())
        throw std::runtime_error("sgd_step: non-finite gradient");
    for (std::size_t k = 0; k < m.layers.size(); ++k) {
        Layer& l = m.layers[k];
        const Layer& g = grads.layers[k];
        if (g.w.size() != l.w.size() || g.b.size() != l.b.size())
            throw std::logic_error("sgd_step: gradient shape mismatch");
        for (std::size_t i = 0; i < l.w.size(); ++i) l.w[i] -= lr * g.w[i];
        for (std::size_t i = 0; i < l.b.size(); ++i) l.b[i] -= lr * g.b[i];
    }
}

/// EMA update: theta_m <- momentum * theta_m + (1 - momentum) * theta.
inline void momentum_update(MomentumState& theta_m, const ModelState& theta,
                            double momentum) {
    if (!(momentum >= 0.0 && momentum <= 1.0))
        throw std::invalid_argument("momentum_update: coefficient must be in [0,1]");
    if (theta_m.layers.size() != theta.layers.size())
        throw std::invalid_argument("momentum_update: shape mismatch");
    for (std::size_t k = 0; k < theta.layers.size(); ++k) {
        Layer& ml = theta_m.layers[k];
        const Layer& l = theta.layers[k];
        if (ml.w.size() != l.w.size() || ml.b.size() != l.b.size())
            throw std::invalid_argument("momentum_update: shape mismatch");
        for (std::size_t i = 0; i < l.w.size(); ++i)
            ml.w[i] = momentum * ml.w[i] + (1.0 - momentum) * l.w[i];
        for (std::size_t i = 0; i < l.b.size(); ++i)
            ml.b[i] = momentum * ml.b[i] + (1.0 - momentum) * l.b[i];
    }
}

// ----------------------------------------------------------------------------
// Parameter serialization (portable text, round-trip exact via %.17g).
// ----------------------------------------------------------------------------

inline void write_parameters(std::ostream& os, const ModelState& m) {
    os << "layers " << m.layers.size() << "\n";
    char buf[32];
    for (const auto& l : m.layers) {
        os << "layer " << l.in << " " << l.out << "\n";
        for (std::size_t i = 0; i < l.w.size(); ++i) {
            std::snprintf(buf, sizeof(buf), "%.17g", l.w[i]);
            os << buf << (i + 1 == l.w.size() ? "\n" : " ");
        }
        for (std::size_t i = 0; i < l.b.size(); ++i) {
            std::snprintf(buf, sizeof(buf), "%.17g", l.b[i]);
            os << buf << (i + 1 == l.b.size() ? "\n" : " ");
        }
    }
}

inline ModelState read_parameters(std::istream& is, int input_dim, int feature_dim,
                                  int class_count) {
    ModelState m;
    m.input_dim = input_dim;
    m.feature_dim = feature_dim;
    m.class_count = class_count;
    std::string tag;
    std::size_t count = 0;
    if (!(is >> tag >> count) || tag != "layers")
        throw std::runtime_error("model checkpoint: bad layers header");
    for (std::size_t k = 0; k < count; ++k) {
        Layer l;
        if (!(is >> tag >> l.in >> l.out) || tag != "layer" || l.in <= 0 || l.out <= 0)
            throw std::runtime_error("model checkpoint: bad layer header");
        l.w.resize(static_cast<std::size_t>(l.in) * l.out);
        l.b.resize(static_cast<std::size_t>(l.out));
        for (double& v : l.w)
            if (!(is >> v)) throw std::runtime_error("model checkpoint: truncated weights");
        for (double& v : l.b)
            if (!(is >> v)) throw std::runtime_error("model checkpoint: truncated biases");
        m.layers.push_back(std::move(l));
    }
    return m;
}

}  // namespace aggmatch
