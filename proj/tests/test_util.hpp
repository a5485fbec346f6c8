#pragma once

// Shared test-only oracles: central finite differences, a one-sided Jacobi
// SVD for rank checks, and random model construction. These stay independent
// of the analytic gradient path they are used to verify.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "fedmerge/merge.hpp"
#include "fedmerge/model.hpp"
#include "fedmerge/params.hpp"
#include "fedmerge/rng.hpp"

namespace testutil {

inline fedmerge::AdaptedModel random_model(const fedmerge::ModelSpec& spec, fedmerge::Rng& rng, double scale = 0.5) {
    fedmerge::ParamVector base = fedmerge::make_base(spec, rng, scale);
    std::vector<fedmerge::LoraAdapter> adapters = fedmerge::init_adapters(spec, rng, 1.0);
    for (fedmerge::LoraAdapter& ad : adapters) {
        for (double& v : ad.a) { v = scale * rng.normal(); }
        for (double& v : ad.b) { v = scale * rng.normal(); }
    }
    return fedmerge::AdaptedModel{spec, std::move(base), std::move(adapters)};
}

inline std::vector<fedmerge::Example> random_batch(const fedmerge::ModelSpec& spec, std::size_t n,
                                                   fedmerge::Rng& rng) {
    std::vector<fedmerge::Example> batch(n);
    for (fedmerge::Example& ex : batch) {
        ex.x.resize(spec.d_in);
        for (double& v : ex.x) { v = rng.normal(); }
        ex.y = static_cast<int>(rng.below(spec.n_classes));
    }
    return batch;
}

inline double batch_loss(const fedmerge::AdaptedModel& model, const std::vector<fedmerge::Example>& batch) {
    long double acc = 0.0L;
    for (const fedmerge::Example& ex : batch) {
        const fedmerge::Activations act = fedmerge::forward_cache(model, ex.x);
        acc += fedmerge::ce_loss(act, ex.y);
    }
    return static_cast<double>(acc / static_cast<long double>(batch.size()));
}

// Central finite differences of the mean batch loss over every adapter
// coordinate (loraA then loraB per layer, matching the gradient layout).
inline fedmerge::ParamVector fd_grad(const fedmerge::AdaptedModel& model, const std::vector<fedmerge::Example>& batch,
                                     double h = 1e-5) {
    fedmerge::ParamVector grad = fedmerge::adapters_to_params(model.adapters).zeros_like();
    fedmerge::AdaptedModel probe = model;
    std::size_t blk = 0;
    for (std::size_t l = 0; l < model.adapters.size(); ++l) {
        for (int role = 0; role < 2; ++role) {
            std::vector<double>& coords = role == 0 ? probe.adapters[l].a : probe.adapters[l].b;
            for (std::size_t k = 0; k < coords.size(); ++k) {
                const double saved = coords[k];
                coords[k] = saved + h;
                const double up = batch_loss(probe, batch);
                coords[k] = saved - h;
                const double down = batch_loss(probe, batch);
                coords[k] = saved;
                grad.block(blk).values[k] = (up - down) / (2.0 * h);
            }
            blk += 1;
        }
    }
    return grad;
}

// Closed-form diagonal Fisher of a two-class LinearSoftmax LoRA model,
// derived by hand from the softmax score:
//   F_A[rho, j] = mean_n x_j^2 * ( sum_c p_c B_{c,rho}^2 - (sum_c p_c B_{c,rho})^2 )
//   F_B[c, rho] = mean_n p_c (1 - p_c) * (A_rho . x)^2
// Only forward probabilities are reused; the backprop path is not.
inline fedmerge::ParamVector closed_form_logistic_fisher(const fedmerge::AdaptedModel& model,
                                                         const std::vector<fedmerge::Example>& batch) {
    const fedmerge::LoraAdapter& ad = model.adapters[0];
    fedmerge::ParamVector out = fedmerge::adapters_to_params(model.adapters).zeros_like();
    fedmerge::Block* fa = out.find(ad.layer_name + ".loraA");
    fedmerge::Block* fb = out.find(ad.layer_name + ".loraB");
    for (const fedmerge::Example& ex : batch) {
        const std::vector<double> p = fedmerge::forward(model, ex.x);
        for (std::size_t rho = 0; rho < ad.r; ++rho) {
            double first = 0.0, second = 0.0;
            for (std::size_t c = 0; c < ad.m; ++c) {
                first += p[c] * ad.b[c * ad.r + rho] * ad.b[c * ad.r + rho];
                second += p[c] * ad.b[c * ad.r + rho];
            }
            const double var_b = first - second * second;
            for (std::size_t j = 0; j < ad.n; ++j) { fa->values[rho * ad.n + j] += ex.x[j] * ex.x[j] * var_b; }
            double ax = 0.0;
            for (std::size_t j = 0; j < ad.n; ++j) { ax += ad.a[rho * ad.n + j] * ex.x[j]; }
            for (std::size_t c = 0; c < ad.m; ++c) { fb->values[c * ad.r + rho] += p[c] * (1.0 - p[c]) * ax * ax; }
        }
    }
    for (std::size_t b = 0; b < out.block_count(); ++b) {
        for (double& v : out.block(b).values) { v /= static_cast<double>(batch.size()); }
    }
    return out;
}

// Exact argmin of the convex merged-trace sequence over an equispaced grid:
// binary search on the discrete slope plus an exhaustive window scan around
// the bracket. Same answer as a full scan at O(log n) cost.
inline double grid_argmin_convex(double a, double b, double c, std::size_t n_points) {
    const auto lambda_at = [&](std::size_t i) { return static_cast<double>(i) / static_cast<double>(n_points - 1); };
    const auto g = [&](std::size_t i) { return fedmerge::merged_trace(a, b, c, lambda_at(i)); };
    std::size_t lo = 0, hi = n_points - 2;
    while (lo < hi) {
        const std::size_t mid = lo + (hi - lo) / 2;
        if (g(mid + 1) < g(mid)) {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    const std::size_t window = 64;
    const std::size_t begin = lo > window ? lo - window : 0;
    const std::size_t end = std::min(n_points - 1, lo + window);
    std::size_t best = begin;
    for (std::size_t i = begin; i <= end; ++i) {
        if (g(i) < g(best)) { best = i; }
    }
    return lambda_at(best);
}

// Singular values by one-sided Jacobi on the columns of a row-major m x n
// matrix; good enough for small rank checks.
inline std::vector<double> singular_values(std::vector<double> mat, std::size_t m, std::size_t n) {
    const auto col_dot = [&](std::size_t i, std::size_t j) {
        long double acc = 0.0L;
        for (std::size_t r = 0; r < m; ++r) { acc += static_cast<long double>(mat[r * n + i]) * mat[r * n + j]; }
        return static_cast<double>(acc);
    };
    for (int sweep = 0; sweep < 60; ++sweep) {
        double off = 0.0;
        for (std::size_t i = 0; i + 1 < n; ++i) {
            for (std::size_t j = i + 1; j < n; ++j) {
                const double aii = col_dot(i, i);
                const double ajj = col_dot(j, j);
                const double aij = col_dot(i, j);
                off = std::max(off, std::abs(aij));
                if (std::abs(aij) <= 1e-300) { continue; }
                const double tau = (ajj - aii) / (2.0 * aij);
                const double t = (tau >= 0.0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t r = 0; r < m; ++r) {
                    const double vi = mat[r * n + i];
                    const double vj = mat[r * n + j];
                    mat[r * n + i] = c * vi - s * vj;
                    mat[r * n + j] = s * vi + c * vj;
                }
            }
        }
        if (off < 1e-14) { break; }
    }
    std::vector<double> sv(n);
    for (std::size_t j = 0; j < n; ++j) { sv[j] = std::sqrt(std::max(0.0, col_dot(j, j))); }
    std::sort(sv.begin(), sv.end(), std::greater<double>());
    return sv;
}

} // namespace testutil
