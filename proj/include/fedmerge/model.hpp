#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "fedmerge/errors.hpp"
#include "fedmerge/params.hpp"
#include "fedmerge/rng.hpp"

namespace fedmerge {

struct Example {
    std::vector<double> x;
    int y = 0;
};

enum class Arch { LinearSoftmax, Mlp1 };

inline std::string arch_name(Arch a) { return a == Arch::LinearSoftmax ? "linear_softmax" : "mlp1"; }

struct ModelSpec {
    Arch arch = Arch::LinearSoftmax;
    std::size_t d_in = 2;
    std::size_t d_hidden = 8; // Mlp1 only
    std::size_t n_classes = 2;
    std::size_t rank = 1;

    std::size_t n_layers() const { return arch == Arch::LinearSoftmax ? 1 : 2; }

    // (rows m, cols n) of each adapted linear layer.
    std::pair<std::size_t, std::size_t> layer_dims(std::size_t layer) const {
        if (arch == Arch::LinearSoftmax) { return {n_classes, d_in}; }
        return layer == 0 ? std::pair<std::size_t, std::size_t>{d_hidden, d_in}
                          : std::pair<std::size_t, std::size_t>{n_classes, d_hidden};
    }

    void validate() const {
        if (d_in == 0 || n_classes < 2 || rank == 0) { throw ConfigError("model: d_in>0, n_classes>=2, rank>0 required"); }
        if (arch == Arch::Mlp1 && d_hidden == 0) { throw ConfigError("model: d_hidden>0 required for mlp1"); }
        for (std::size_t l = 0; l < n_layers(); ++l) {
            const auto [m, n] = layer_dims(l);
            if (rank > std::min(m, n)) { throw ConfigError("model: rank exceeds min(m, n) of layer " + std::to_string(l)); }
        }
    }
};

// Low-rank update pair for one linear layer: delta W = B * A, B is m x r,
// A is r x n, both row-major.
struct LoraAdapter {
    std::string layer_name;
    std::size_t m = 0, n = 0, r = 0;
    std::vector<double> b; // m x r
    std::vector<double> a; // r x n
};

// delta W = B * A as a dense m x n row-major matrix.
inline std::vector<double> compose_update(const LoraAdapter& ad) {
    std::vector<double> w(ad.m * ad.n, 0.0);
    for (std::size_t i = 0; i < ad.m; ++i) {
        for (std::size_t k = 0; k < ad.r; ++k) {
            const double bik = ad.b[i * ad.r + k];
            if (bik == 0.0) { continue; }
            for (std::size_t j = 0; j < ad.n; ++j) { w[i * ad.n + j] += bik * ad.a[k * ad.n + j]; }
        }
    }
    return w;
}

// Frozen base weights plus trainable adapters. The effective weight of layer l
// is base_l + B_l * A_l; training never touches base.
struct AdaptedModel {
    ModelSpec spec;
    ParamVector base;                  // blocks "layer<l>.base", m x n each
    std::vector<LoraAdapter> adapters; // one per layer
};

inline std::string layer_label(std::size_t l) { return "layer" + std::to_string(l); }

// B starts at zero and A at a zero-mean Gaussian with std init_scale/sqrt(r),
// so the initial update B*A is exactly zero and its scale is rank-independent
// once training moves B.
inline std::vector<LoraAdapter> init_adapters(const ModelSpec& spec, Rng& rng, double init_scale = 1.0) {
    std::vector<LoraAdapter> out;
    const double std_a = init_scale / std::sqrt(static_cast<double>(spec.rank));
    for (std::size_t l = 0; l < spec.n_layers(); ++l) {
        const auto [m, n] = spec.layer_dims(l);
        LoraAdapter ad;
        ad.layer_name = layer_label(l);
        ad.m = m;
        ad.n = n;
        ad.r = spec.rank;
        ad.b.assign(m * spec.rank, 0.0);
        ad.a.resize(spec.rank * n);
        for (double& v : ad.a) { v = std_a * rng.normal(); }
        out.push_back(std::move(ad));
    }
    return out;
}

inline ParamVector make_base(const ModelSpec& spec, Rng& rng, double scale) {
    ParamVector base;
    for (std::size_t l = 0; l < spec.n_layers(); ++l) {
        const auto [m, n] = spec.layer_dims(l);
        std::vector<double> w(m * n);
        for (double& v : w) { v = scale * rng.normal(); }
        base.add_block(layer_label(l) + ".base", {m, n}, std::move(w));
    }
    return base;
}

// Full-rank adapters (r = min(m, n) per layer) span the whole weight space;
// used to realize pre-training as ordinary adapter training.
inline std::vector<LoraAdapter> init_full_rank_adapters(const ModelSpec& spec, Rng& rng, double init_scale = 1.0) {
    std::vector<LoraAdapter> out;
    for (std::size_t l = 0; l < spec.n_layers(); ++l) {
        const auto [m, n] = spec.layer_dims(l);
        const std::size_t r = std::min(m, n);
        LoraAdapter ad;
        ad.layer_name = layer_label(l);
        ad.m = m;
        ad.n = n;
        ad.r = r;
        ad.b.assign(m * r, 0.0);
        ad.a.resize(r * n);
        const double std_a = init_scale / std::sqrt(static_cast<double>(r));
        for (double& v : ad.a) { v = std_a * rng.normal(); }
        out.push_back(std::move(ad));
    }
    return out;
}


inline AdaptedModel make_model(const ModelSpec& spec, ParamVector base, std::vector<LoraAdapter> adapters) {
    spec.validate();
    return AdaptedModel{spec, std::move(base), std::move(adapters)};
}

// Adapter coordinates as a flat vector: "layer<l>.loraA", "layer<l>.loraB"
// per layer. This is the layout of gradients, Fisher diagonals and task
// vectors.
inline ParamVector adapters_to_params(const std::vector<LoraAdapter>& adapters) {
    ParamVector out;
    for (const LoraAdapter& ad : adapters) {
        out.add_block(ad.layer_name + ".loraA", {ad.r, ad.n}, ad.a);
        out.add_block(ad.layer_name + ".loraB", {ad.m, ad.r}, ad.b);
    }
    return out;
}

inline std::vector<LoraAdapter> params_to_adapters(const std::vector<LoraAdapter>& layout, const ParamVector& pv) {
    adapters_to_params(layout).require_compatible(pv);
    std::vector<LoraAdapter> out = layout;
    std::size_t i = 0;
    for (LoraAdapter& ad : out) {
        ad.a = pv.block(i++).values;
        ad.b = pv.block(i++).values;
    }
    return out;
}

// Full checkpoint layout: base and adapter blocks interleaved per layer.
inline ParamVector model_to_params(const AdaptedModel& model) {
    ParamVector out;
    for (std::size_t l = 0; l < model.spec.n_layers(); ++l) {
        const Block* base = model.base.find(layer_label(l) + ".base");
        out.add_block(base->name, base->shape, base->values);
        const LoraAdapter& ad = model.adapters[l];
        out.add_block(ad.layer_name + ".loraA", {ad.r, ad.n}, ad.a);
        out.add_block(ad.layer_name + ".loraB", {ad.m, ad.r}, ad.b);
    }
    return out;
}

// Composed per-layer weights base + B*A, blocks "layer<l>.weight". This is the
// coordinate system interpolation scans operate in.
inline ParamVector effective_weights(const AdaptedModel& model) {
    ParamVector out;
    for (std::size_t l = 0; l < model.spec.n_layers(); ++l) {
        const Block* base = model.base.find(layer_label(l) + ".base");
        std::vector<double> w = compose_update(model.adapters[l]);
        for (std::size_t k = 0; k < w.size(); ++k) { w[k] += base->values[k]; }
        out.add_block(layer_label(l) + ".weight", base->shape, std::move(w));
    }
    return out;
}

namespace detail {

inline void matvec(const double* w, std::size_t m, std::size_t n, const double* x, double* out) {
    for (std::size_t i = 0; i < m; ++i) {
        long double acc = 0.0L;
        const double* row = w + i * n;
        for (std::size_t j = 0; j < n; ++j) { acc += static_cast<long double>(row[j]) * x[j]; }
        out[i] = static_cast<double>(acc);
    }
}

} // namespace detail

struct Activations {
    std::vector<double> logits;
    std::vector<double> probs;
    std::vector<double> hidden;    // tanh output, Mlp1 only
    double log_sum_exp = 0.0;
};

inline Activations forward_cache(const AdaptedModel& model, const std::vector<double>& x) {
    const ModelSpec& spec = model.spec;
    if (x.size() != spec.d_in) {
        throw ShapeError("forward: input dimension " + std::to_string(x.size()) + " != " + std::to_string(spec.d_in));
    }
    Activations act;
    std::vector<double> eff0 = compose_update(model.adapters[0]);
    {
        const Block* base = model.base.find(layer_label(0) + ".base");
        for (std::size_t k = 0; k < eff0.size(); ++k) { eff0[k] += base->values[k]; }
    }
    if (spec.arch == Arch::LinearSoftmax) {
        act.logits.resize(spec.n_classes);
        detail::matvec(eff0.data(), spec.n_classes, spec.d_in, x.data(), act.logits.data());
    } else {
        std::vector<double> pre(spec.d_hidden);
        detail::matvec(eff0.data(), spec.d_hidden, spec.d_in, x.data(), pre.data());
        act.hidden.resize(spec.d_hidden);
        for (std::size_t i = 0; i < spec.d_hidden; ++i) { act.hidden[i] = std::tanh(pre[i]); }
        std::vector<double> eff1 = compose_update(model.adapters[1]);
        const Block* base = model.base.find(layer_label(1) + ".base");
        for (std::size_t k = 0; k < eff1.size(); ++k) { eff1[k] += base->values[k]; }
        act.logits.resize(spec.n_classes);
        detail::matvec(eff1.data(), spec.n_classes, spec.d_hidden, act.hidden.data(), act.logits.data());
    }
    double zmax = act.logits[0];
    for (const double z : act.logits) { zmax = std::max(zmax, z); }
    long double sum = 0.0L;
    for (const double z : act.logits) { sum += std::exp(static_cast<long double>(z - zmax)); }
    act.log_sum_exp = zmax + static_cast<double>(std::log(sum));
    act.probs.resize(spec.n_classes);
    for (std::size_t c = 0; c < spec.n_classes; ++c) { act.probs[c] = std::exp(act.logits[c] - act.log_sum_exp); }
    return act;
}

inline std::vector<double> forward(const AdaptedModel& model, const std::vector<double>& x) {
    return forward_cache(model, x).probs;
}

inline double ce_loss(const Activations& act, int y) { return act.log_sum_exp - act.logits[static_cast<std::size_t>(y)]; }

// Which adapter roles receive gradient; everything else stays exactly zero.
struct GradMask {
    bool lora_a = true;
    bool lora_b = true;
};

namespace detail {

// Accumulates the cross-entropy gradient for (x, y) into grad (adapter
// layout), scaled by weight. dlogits = probs - onehot(y); per layer, with
// G = dlogits_for_that_layer * input^T: dB = G A^T, dA = B^T G.
inline void accumulate_ce_grad(const AdaptedModel& model, const std::vector<double>& x, const Activations& act,
                               int y, const GradMask& mask, double weight, ParamVector& grad) {
    const ModelSpec& spec = model.spec;
    std::vector<double> dlogits = act.probs;
    dlogits[static_cast<std::size_t>(y)] -= 1.0;

    const auto add_layer = [&](std::size_t layer, const std::vector<double>& dout, const std::vector<double>& input) {
        const LoraAdapter& ad = model.adapters[layer];
        Block* ga = grad.find(ad.layer_name + ".loraA");
        Block* gb = grad.find(ad.layer_name + ".loraB");
        if (mask.lora_b) {
            // dB[i,k] = dout[i] * (A input)[k]
            std::vector<double> ax(ad.r, 0.0);
            for (std::size_t k = 0; k < ad.r; ++k) {
                long double acc = 0.0L;
                for (std::size_t j = 0; j < ad.n; ++j) { acc += static_cast<long double>(ad.a[k * ad.n + j]) * input[j]; }
                ax[k] = static_cast<double>(acc);
            }
            for (std::size_t i = 0; i < ad.m; ++i) {
                for (std::size_t k = 0; k < ad.r; ++k) { gb->values[i * ad.r + k] += weight * dout[i] * ax[k]; }
            }
        }
        if (mask.lora_a) {
            // dA[k,j] = (B^T dout)[k] * input[j]
            for (std::size_t k = 0; k < ad.r; ++k) {
                long double acc = 0.0L;
                for (std::size_t i = 0; i < ad.m; ++i) { acc += static_cast<long double>(ad.b[i * ad.r + k]) * dout[i]; }
                const double btd = static_cast<double>(acc);
                for (std::size_t j = 0; j < ad.n; ++j) { ga->values[k * ad.n + j] += weight * btd * input[j]; }
            }
        }
    };

    if (spec.arch == Arch::LinearSoftmax) {
        add_layer(0, dlogits, x);
        return;
    }
    add_layer(1, dlogits, act.hidden);
    // backprop through layer 1's effective weight and the tanh
    const LoraAdapter& ad1 = model.adapters[1];
    const Block* base1 = model.base.find(layer_label(1) + ".base");
    std::vector<double> dhidden(spec.d_hidden, 0.0);
    std::vector<double> eff1 = compose_update(ad1);
    for (std::size_t k = 0; k < eff1.size(); ++k) { eff1[k] += base1->values[k]; }
    for (std::size_t j = 0; j < spec.d_hidden; ++j) {
        long double acc = 0.0L;
        for (std::size_t i = 0; i < spec.n_classes; ++i) { acc += static_cast<long double>(eff1[i * spec.d_hidden + j]) * dlogits[i]; }
        dhidden[j] = static_cast<double>(acc) * (1.0 - act.hidden[j] * act.hidden[j]);
    }
    add_layer(0, dhidden, x);
}

} // namespace detail

// Cross-entropy gradient of a single example over adapter coordinates.
inline ParamVector ce_grad(const AdaptedModel& model, const Example& ex, const GradMask& mask = {}) {
    ParamVector grad = adapters_to_params(model.adapters).zeros_like();
    const Activations act = forward_cache(model, ex.x);
    detail::accumulate_ce_grad(model, ex.x, act, ex.y, mask, 1.0, grad);
    return grad;
}

// Mean cross-entropy and its gradient over adapter coordinates; non-masked
// coordinates come back exactly zero.
inline std::pair<double, ParamVector> loss_and_grad(const AdaptedModel& model, const std::vector<Example>& batch,
                                                    const GradMask& mask = {}) {
    if (batch.empty()) { throw ConfigError("loss_and_grad: empty batch"); }
    ParamVector layout = adapters_to_params(model.adapters).zeros_like();
    std::vector<std::vector<long double>> acc(layout.block_count());
    for (std::size_t b = 0; b < layout.block_count(); ++b) { acc[b].assign(layout.block(b).count(), 0.0L); }
    long double loss = 0.0L;
    ParamVector single = layout.zeros_like();
    for (const Example& ex : batch) {
        for (std::size_t b = 0; b < single.block_count(); ++b) {
            std::fill(single.block(b).values.begin(), single.block(b).values.end(), 0.0);
        }
        const Activations act = forward_cache(model, ex.x);
        loss += ce_loss(act, ex.y);
        detail::accumulate_ce_grad(model, ex.x, act, ex.y, mask, 1.0, single);
        for (std::size_t b = 0; b < single.block_count(); ++b) {
            for (std::size_t k = 0; k < single.block(b).count(); ++k) { acc[b][k] += single.block(b).values[k]; }
        }
    }
    const long double inv_n = 1.0L / static_cast<long double>(batch.size());
    ParamVector grad = layout;
    for (std::size_t b = 0; b < grad.block_count(); ++b) {
        for (std::size_t k = 0; k < grad.block(b).count(); ++k) {
            grad.block(b).values[k] = static_cast<double>(acc[b][k] * inv_n);
        }
    }
    return {static_cast<double>(loss * inv_n), grad};
}

inline std::vector<ParamVector> per_sample_grads(const AdaptedModel& model, const std::vector<Example>& batch,
                                                 const GradMask& mask = {}) {
    if (batch.empty()) { throw ConfigError("per_sample_grads: empty batch"); }
    std::vector<ParamVector> out;
    out.reserve(batch.size());
    for (const Example& ex : batch) { out.push_back(ce_grad(model, ex, mask)); }
    return out;
}

// One SGD step on the adapter coordinates selected by the mask.
inline void sgd_step(std::vector<LoraAdapter>& adapters, const ParamVector& grad, double lr, const GradMask& mask = {}) {
    std::size_t i = 0;
    for (LoraAdapter& ad : adapters) {
        const Block& ga = grad.block(i++);
        const Block& gb = grad.block(i++);
        if (mask.lora_a) {
            for (std::size_t k = 0; k < ad.a.size(); ++k) { ad.a[k] -= lr * ga.values[k]; }
        }
        if (mask.lora_b) {
            for (std::size_t k = 0; k < ad.b.size(); ++k) { ad.b[k] -= lr * gb.values[k]; }
        }
    }
}

struct Metrics {
    double loss = 0.0;
    double accuracy = 0.0;
};

inline Metrics evaluate(const AdaptedModel& model, const std::vector<Example>& examples) {
    if (examples.empty()) { throw ConfigError("evaluate: empty example set"); }
    long double loss = 0.0L;
    std::size_t correct = 0;
    for (const Example& ex : examples) {
        const Activations act = forward_cache(model, ex.x);
        loss += ce_loss(act, ex.y);
        std::size_t argmax = 0;
        for (std::size_t c = 1; c < act.probs.size(); ++c) {
            if (act.probs[c] > act.probs[argmax]) { argmax = c; }
        }
        if (static_cast<int>(argmax) == ex.y) { correct += 1; }
    }
    return {static_cast<double>(loss / static_cast<long double>(examples.size())),
            static_cast<double>(correct) / static_cast<double>(examples.size())};
}

// Stand-in for a pre-trained backbone: trains a full-rank model on a generic
// pool and returns its effective weights as the frozen base W_Pre.
inline ParamVector pretrain_base(const ModelSpec& spec, const std::vector<Example>& pool, std::size_t steps,
                                 std::size_t batch_size, double lr, Rng& rng) {
    if (pool.empty()) { throw ConfigError("pretrain: empty pool"); }
    AdaptedModel model;
    model.spec = spec;
    Rng init_rng = rng.child("pretrain_init");
    model.base = make_base(spec, init_rng, 0.0);
    model.adapters = init_full_rank_adapters(spec, init_rng);
    // both factors random: a zero B would pin an MLP at the exact saddle
    // where no gradient reaches either layer
    for (LoraAdapter& ad : model.adapters) {
        const double std_b = 1.0 / std::sqrt(static_cast<double>(ad.r));
        for (double& v : ad.b) { v = std_b * init_rng.normal(); }
    }
    Rng batch_rng = rng.child("pretrain_batches");
    const std::size_t bs = std::min(batch_size, pool.size());
    for (std::size_t s = 0; s < steps; ++s) {
        std::vector<Example> batch;
        batch.reserve(bs);
        for (std::size_t k = 0; k < bs; ++k) { batch.push_back(pool[batch_rng.below(pool.size())]); }
        const auto [loss, grad] = loss_and_grad(model, batch);
        (void)loss;
        sgd_step(model.adapters, grad, lr);
    }
    const ParamVector eff = effective_weights(model);
    ParamVector out;
    for (std::size_t l = 0; l < spec.n_layers(); ++l) {
        const Block* w = eff.find(layer_label(l) + ".weight");
        out.add_block(layer_label(l) + ".base", w->shape, w->values);
    }
    return out;
}

// Evaluation of raw per-layer weights (blocks "layer<l>.weight") without the
// low-rank parameterization; used by interpolation scans.
inline Metrics eval_effective(const ModelSpec& spec, const ParamVector& weights, const std::vector<Example>& examples) {
    if (examples.empty()) { throw ConfigError("eval_effective: empty example set"); }
    AdaptedModel flat;
    flat.spec = spec;
    for (std::size_t l = 0; l < spec.n_layers(); ++l) {
        const Block* w = weights.find(layer_label(l) + ".weight");
        if (w == nullptr) { throw ShapeError("eval_effective: missing block " + layer_label(l) + ".weight"); }
        flat.base.add_block(layer_label(l) + ".base", w->shape, w->values);
        const auto [m, n] = spec.layer_dims(l);
        LoraAdapter ad;
        ad.layer_name = layer_label(l);
        ad.m = m;
        ad.n = n;
        ad.r = 1;
        ad.b.assign(m, 0.0);
        ad.a.assign(n, 0.0);
        flat.adapters.push_back(std::move(ad));
    }
    return evaluate(flat, examples);
}

} // namespace fedmerge
