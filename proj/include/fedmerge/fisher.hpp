#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "fedmerge/errors.hpp"
#include "fedmerge/model.hpp"
#include "fedmerge/params.hpp"
#include "fedmerge/rng.hpp"

namespace fedmerge {

enum class LabelMode { ExactExpectation, ModelSampled };

// Diagonal Fisher information over the adapter coordinates, evaluated at the
// model's current (trained) parameters:
//   F_k = (1/N) sum_n E_{y ~ p(.|x_n)} [ (d log p(y|x_n) / d theta_k)^2 ].
// ExactExpectation enumerates every label weighted by the model's own
// probabilities; ModelSampled draws labels from the model instead
// (draws_per_example per example).
inline ParamVector fisher_diag(const AdaptedModel& model, const std::vector<Example>& batch, LabelMode mode,
                               Rng* rng = nullptr, std::size_t draws_per_example = 1) {
    if (batch.empty()) { throw ConfigError("fisher_diag: empty batch"); }
    if (mode == LabelMode::ModelSampled && (rng == nullptr || draws_per_example == 0)) {
        throw ConfigError("fisher_diag: ModelSampled needs an rng and draws_per_example >= 1");
    }
    ParamVector layout = adapters_to_params(model.adapters).zeros_like();
    std::vector<std::vector<long double>> acc(layout.block_count());
    for (std::size_t b = 0; b < layout.block_count(); ++b) { acc[b].assign(layout.block(b).count(), 0.0L); }
    ParamVector scratch = layout.zeros_like();
    const GradMask mask{true, true};

    const auto accumulate_label = [&](const Example& ex, const Activations& act, int y, long double weight) {
        for (std::size_t b = 0; b < scratch.block_count(); ++b) {
            std::fill(scratch.block(b).values.begin(), scratch.block(b).values.end(), 0.0);
        }
        // The score gradient is the negated cross-entropy gradient; the sign
        // vanishes under the square.
        detail::accumulate_ce_grad(model, ex.x, act, y, mask, 1.0, scratch);
        for (std::size_t b = 0; b < scratch.block_count(); ++b) {
            const std::vector<double>& g = scratch.block(b).values;
            for (std::size_t k = 0; k < g.size(); ++k) {
                acc[b][k] += weight * static_cast<long double>(g[k]) * g[k];
            }
        }
    };

    const long double inv_n = 1.0L / static_cast<long double>(batch.size());
    for (const Example& ex : batch) {
        const Activations act = forward_cache(model, ex.x);
        if (mode == LabelMode::ExactExpectation) {
            for (std::size_t y = 0; y < model.spec.n_classes; ++y) {
                if (act.probs[y] == 0.0) { continue; }
                accumulate_label(ex, act, static_cast<int>(y), inv_n * act.probs[y]);
            }
        } else {
            const long double w = inv_n / static_cast<long double>(draws_per_example);
            for (std::size_t d = 0; d < draws_per_example; ++d) {
                const double u = rng->uniform();
                double cum = 0.0;
                std::size_t y = model.spec.n_classes - 1;
                for (std::size_t c = 0; c < model.spec.n_classes; ++c) {
                    cum += act.probs[c];
                    if (u < cum) {
                        y = c;
                        break;
                    }
                }
                accumulate_label(ex, act, static_cast<int>(y), w);
            }
        }
    }
    ParamVector fisher = layout;
    for (std::size_t b = 0; b < fisher.block_count(); ++b) {
        for (std::size_t k = 0; k < fisher.block(b).count(); ++k) {
            const double v = static_cast<double>(acc[b][k]);
            if (!std::isfinite(v)) { throw InvariantError("fisher_diag: non-finite entry in block " + fisher.block(b).name); }
            fisher.block(b).values[k] = v;
        }
    }
    return fisher;
}

// Laplace-posterior variance: var_k = 1 / (F_k + eps). The damping keeps
// zero-Fisher coordinates (dead units) from producing infinite variance.
inline ParamVector fisher_to_variance(const ParamVector& fisher, double eps) {
    ParamVector var = fisher;
    for (std::size_t b = 0; b < var.block_count(); ++b) {
        for (double& v : var.block(b).values) {
            if (v < 0.0) { throw InvariantError("fisher_to_variance: negative Fisher entry"); }
            v = 1.0 / (v + eps);
        }
    }
    return var;
}

// Gaussian approximation of a trained task vector: mean = adapter coordinates,
// per-coordinate variance = inverse damped Fisher diagonal.
struct GaussianDiag {
    ParamVector mean;
    ParamVector var;
};

inline GaussianDiag laplace_posterior(const AdaptedModel& model, const std::vector<Example>& batch, LabelMode mode,
                                      double eps, Rng* rng = nullptr, std::size_t draws_per_example = 1) {
    GaussianDiag g;
    g.mean = adapters_to_params(model.adapters);
    g.var = fisher_to_variance(fisher_diag(model, batch, mode, rng, draws_per_example), eps);
    return g;
}

// Diagonal cross-covariance: per-coordinate correlation of per-sample
// gradients, clipped into [0, rho_max] so that the resulting diagonal
// satisfies 0 <= cross_var_k <= min(var_F_k, var_L_k).
struct CrossDiag {
    ParamVector rho;
    ParamVector cross_var;
};

// grads_*: per-sample gradient populations under the two models on the same
// batch in the same order. var_*: the posterior variances the clip is
// expressed against. Moments use the 1/N batch-mean convention.
inline CrossDiag clipped_cross_from_grads(const std::vector<ParamVector>& grads_f,
                                          const std::vector<ParamVector>& grads_l, const ParamVector& var_f,
                                          const ParamVector& var_l) {
    if (grads_f.size() != grads_l.size()) { throw ShapeError("cross: population sizes differ"); }
    const std::size_t n = grads_f.size();
    if (n < 2) { throw ConfigError("cross: need at least 2 samples for a covariance"); }
    var_f.require_compatible(var_l);
    for (const ParamVector& g : grads_f) { g.require_compatible(var_f); }
    for (const ParamVector& g : grads_l) { g.require_compatible(var_f); }

    CrossDiag out;
    out.rho = var_f.zeros_like();
    out.cross_var = var_f.zeros_like();
    const long double inv_n = 1.0L / static_cast<long double>(n);
    for (std::size_t b = 0; b < var_f.block_count(); ++b) {
        const std::size_t count = var_f.block(b).count();
        for (std::size_t k = 0; k < count; ++k) {
            long double mean_f = 0.0L, mean_l = 0.0L;
            for (std::size_t s = 0; s < n; ++s) {
                mean_f += grads_f[s].block(b).values[k];
                mean_l += grads_l[s].block(b).values[k];
            }
            mean_f *= inv_n;
            mean_l *= inv_n;
            long double vf = 0.0L, vl = 0.0L, cov = 0.0L;
            for (std::size_t s = 0; s < n; ++s) {
                const long double df = grads_f[s].block(b).values[k] - mean_f;
                const long double dl = grads_l[s].block(b).values[k] - mean_l;
                vf += df * df;
                vl += dl * dl;
                cov += df * dl;
            }
            vf *= inv_n;
            vl *= inv_n;
            cov *= inv_n;
            double rho = 0.0;
            const long double denom = std::sqrt(vf * vl);
            if (denom > 0.0L) { rho = static_cast<double>(cov / denom); }
            const double pf = var_f.block(b).values[k];
            const double pl = var_l.block(b).values[k];
            double rho_max = 0.0;
            if (pf > 0.0 && pl > 0.0) { rho_max = std::sqrt(std::min(pf / pl, pl / pf)); }
            rho = std::max(0.0, std::min(rho, rho_max));
            out.rho.block(b).values[k] = rho;
            // sqrt rounding can spill a few ulps past the bound; the min
            // makes 0 <= cross_var <= min(var_f, var_l) hold exactly
            out.cross_var.block(b).values[k] = std::min(rho * std::sqrt(pf * pl), std::min(pf, pl));
        }
    }
    return out;
}

// Per-sample loss gradients at the true labels of a shared batch (same batch,
// same order, under both models), then the clipped correlation above.
inline CrossDiag cross_corr(const AdaptedModel& model_f, const AdaptedModel& model_l,
                            const std::vector<Example>& batch, const ParamVector& var_f, const ParamVector& var_l) {
    if (batch.size() < 2) { throw ConfigError("cross_corr: batch size < 2"); }
    const std::vector<ParamVector> gf = per_sample_grads(model_f, batch);
    const std::vector<ParamVector> gl = per_sample_grads(model_l, batch);
    return clipped_cross_from_grads(gf, gl, var_f, var_l);
}

struct TraceTriple {
    double a = 0.0; // tr(Sigma_FedIT)
    double b = 0.0; // tr(Sigma_Local)
    double c = 0.0; // tr(Sigma_Cross)
};

// Scalar traces of the three diagonals. The per-coordinate clip already forces
// c <= min(a, b) and c <= sqrt(a*b) mathematically; the final clamp absorbs
// summation rounding so callers can rely on the inequalities exactly.
inline TraceTriple traces(const ParamVector& var_f, const ParamVector& var_l, const CrossDiag& cross) {
    var_f.require_compatible(var_l);
    var_f.require_compatible(cross.cross_var);
    long double a = 0.0L, b = 0.0L, c = 0.0L;
    for (std::size_t i = 0; i < var_f.block_count(); ++i) {
        for (std::size_t k = 0; k < var_f.block(i).count(); ++k) {
            const double vf = var_f.block(i).values[k];
            const double vl = var_l.block(i).values[k];
            const double vc = cross.cross_var.block(i).values[k];
            if (vf < 0.0 || vl < 0.0) { throw InvariantError("traces: negative variance input"); }
            a += vf;
            b += vl;
            c += vc;
        }
    }
    TraceTriple t;
    t.a = static_cast<double>(a);
    t.b = static_cast<double>(b);
    t.c = static_cast<double>(c);
    t.c = std::max(0.0, std::min({t.c, t.a, t.b, std::sqrt(t.a * t.b)}));
    return t;
}

} // namespace fedmerge
