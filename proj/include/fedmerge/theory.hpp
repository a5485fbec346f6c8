#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "fedmerge/errors.hpp"
#include "fedmerge/rng.hpp"

namespace fedmerge {

// Synthetic loss landscape on which every symbol of the excess-loss bound is
// known exactly:
//   loss(w) = 1/2 sum_k h_k (w_k - w*_k)^2 + c3 sum_k |w_k - w*_k|^3,
// so the Hessian at the optimum is diag(h), the Hessian-Lipschitz constant is
// 6*c3, and Gaussian expectations of the quadratic part are closed-form.
struct QuadScenario {
    std::size_t dim = 1;
    std::vector<double> w_star;
    std::vector<double> w_pre;
    std::vector<double> h;         // diagonal curvature at the optimum, h_k <= smooth_l
    double cubic_c3 = 0.0;
    double smooth_l = 1.0;         // L
    double hess_lip = 0.0;         // L_H = 6 * cubic_c3
    double basin_radius = 1.0;     // delta
    std::vector<double> mu_f, mu_l;            // task-vector means
    std::vector<double> var_f, var_l, var_c;   // diagonal covariance blocks

    double loss(const std::vector<double>& w) const {
        long double acc = 0.0L;
        for (std::size_t k = 0; k < dim; ++k) {
            const double t = w[k] - w_star[k];
            acc += 0.5L * static_cast<long double>(h[k]) * t * t;
            acc += static_cast<long double>(cubic_c3) * std::abs(t) * t * t;
        }
        return static_cast<double>(acc);
    }

    // Distance of W_Pre + theta from the optimum for a mean task vector theta.
    double mean_distance(const std::vector<double>& mu) const {
        long double acc = 0.0L;
        for (std::size_t k = 0; k < dim; ++k) {
            const double t = w_pre[k] + mu[k] - w_star[k];
            acc += static_cast<long double>(t) * t;
        }
        return std::sqrt(static_cast<double>(acc));
    }

    double trace(const std::vector<double>& var) const {
        long double acc = 0.0L;
        for (const double v : var) { acc += v; }
        return static_cast<double>(acc);
    }

    void validate() const {
        const auto check_size = [&](const std::vector<double>& v, const char* name) {
            if (v.size() != dim) { throw ConfigError(std::string("scenario: wrong size for ") + name); }
        };
        check_size(w_star, "w_star");
        check_size(w_pre, "w_pre");
        check_size(h, "h");
        check_size(mu_f, "mu_f");
        check_size(mu_l, "mu_l");
        check_size(var_f, "var_f");
        check_size(var_l, "var_l");
        check_size(var_c, "var_c");
        for (std::size_t k = 0; k < dim; ++k) {
            if (h[k] < 0.0 || h[k] > smooth_l + 1e-12) { throw ConfigError("scenario: need 0 <= h_k <= L"); }
            if (var_f[k] < 0.0 || var_l[k] < 0.0 || var_c[k] < 0.0) { throw ConfigError("scenario: negative variance"); }
            // diagonal form of the joint-Gaussian PSD and domination conditions
            if (var_c[k] * var_c[k] > var_f[k] * var_l[k] * (1.0 + 1e-12)) {
                throw ConfigError("scenario: cross block breaks joint PSD");
            }
            if (var_c[k] > std::min(var_f[k], var_l[k]) * (1.0 + 1e-12)) {
                throw ConfigError("scenario: cross block not dominated by marginals");
            }
        }
        // the whole interpolation path of the means must sit inside the basin
        if (std::max(mean_distance(mu_f), mean_distance(mu_l)) > basin_radius + 1e-12) {
            throw ConfigError("scenario: mean path leaves the basin");
        }
        if (hess_lip != 6.0 * cubic_c3) { throw ConfigError("scenario: hess_lip must equal 6 * cubic_c3"); }
    }
};

// Exact joint draws: per coordinate the pair (theta_f_k, theta_l_k) follows
// the 2x2 covariance [[var_f, var_c], [var_c, var_l]] via its Cholesky
// factor. Exactly two normals are consumed per coordinate regardless of the
// branch so the stream layout is fixed.
inline void sample_joint_into(const QuadScenario& sc, Rng& rng, std::vector<double>& theta_f,
                              std::vector<double>& theta_l) {
    theta_f.resize(sc.dim);
    theta_l.resize(sc.dim);
    for (std::size_t k = 0; k < sc.dim; ++k) {
        const double z1 = rng.normal();
        const double z2 = rng.normal();
        const double sf = std::sqrt(sc.var_f[k]);
        const double sl = std::sqrt(sc.var_l[k]);
        double dev_f = sf * z1;
        double dev_l;
        if (sc.var_f[k] == 0.0) {
            dev_f = 0.0;
            dev_l = sl * z2;
        } else if (sc.var_c[k] * sc.var_c[k] >= sc.var_f[k] * sc.var_l[k]) {
            // fully correlated block; equal marginals reproduce dev_f exactly
            dev_l = (sl / sf) * dev_f;
        } else {
            const double w = sc.var_c[k] / sf;
            const double rest = sc.var_l[k] - w * w;
            dev_l = w * z1 + std::sqrt(std::max(0.0, rest)) * z2;
        }
        theta_f[k] = sc.mu_f[k] + dev_f;
        theta_l[k] = sc.mu_l[k] + dev_l;
    }
}

inline std::vector<std::pair<std::vector<double>, std::vector<double>>> sample_joint(const QuadScenario& sc,
                                                                                     std::size_t n, Rng& rng) {
    if (n == 0) { throw ConfigError("sample_joint: n >= 1 required"); }
    sc.validate();
    std::vector<std::pair<std::vector<double>, std::vector<double>>> out(n);
    for (std::size_t i = 0; i < n; ++i) { sample_joint_into(sc, rng, out[i].first, out[i].second); }
    return out;
}

enum class BoundTarget { FedIT, Local, Merge };

inline std::string bound_target_name(BoundTarget t) {
    switch (t) {
    case BoundTarget::FedIT: return "fedit";
    case BoundTarget::Local: return "local";
    case BoundTarget::Merge: return "merge";
    }
    return "";
}

struct BoundCheck {
    double lhs = 0.0;        // Monte Carlo estimate of E[loss(W_pre + theta) - loss(w*)]
    double lhs_stderr = 0.0;
    double rhs = 0.0;        // (L/2 + L_H*delta/6) * (delta^2 + tr(Sigma))
    bool holds = false;      // lhs <= rhs with 3-standard-error slack on lhs
    std::size_t escapes = 0; // draws that left the basin (should be zero by construction)
};

inline double bound_rhs(const QuadScenario& sc, double trace) {
    const double factor = sc.smooth_l / 2.0 + sc.hess_lip * sc.basin_radius / 6.0;
    return factor * (sc.basin_radius * sc.basin_radius + trace);
}

// tr(Sigma_Merge) at mixing weight lambda:
//   lambda^2 a + (1-lambda)^2 b + 2 lambda (1-lambda) c.
inline double merge_trace(const QuadScenario& sc, double lambda) {
    const double a = sc.trace(sc.var_f);
    const double b = sc.trace(sc.var_l);
    const double c = sc.trace(sc.var_c);
    const double mu = 1.0 - lambda;
    return lambda * lambda * a + mu * mu * b + 2.0 * lambda * mu * c;
}

// Monte Carlo check of the excess-loss bound for one model family. `lambda`
// is only read for BoundTarget::Merge.
inline BoundCheck check_bound(const QuadScenario& sc, BoundTarget which, double lambda, std::size_t n, Rng& rng) {
    if (n < 10000) { throw ConfigError("check_bound: n >= 1e4 required"); }
    sc.validate();
    const double loss_star = 0.0; // loss(w*) by construction
    long double sum = 0.0L, sum_sq = 0.0L;
    std::size_t escapes = 0;
    std::vector<double> tf, tl, w(sc.dim);
    for (std::size_t i = 0; i < n; ++i) {
        sample_joint_into(sc, rng, tf, tl);
        long double dist_sq = 0.0L;
        for (std::size_t k = 0; k < sc.dim; ++k) {
            double theta;
            switch (which) {
            case BoundTarget::FedIT: theta = tf[k]; break;
            case BoundTarget::Local: theta = tl[k]; break;
            default: theta = lambda * tf[k] + (1.0 - lambda) * tl[k]; break;
            }
            w[k] = sc.w_pre[k] + theta;
            const double t = w[k] - sc.w_star[k];
            dist_sq += static_cast<long double>(t) * t;
        }
        if (static_cast<double>(dist_sq) > sc.basin_radius * sc.basin_radius) { escapes += 1; }
        const double excess = sc.loss(w) - loss_star;
        sum += excess;
        sum_sq += static_cast<long double>(excess) * excess;
    }
    BoundCheck out;
    const long double mean = sum / static_cast<long double>(n);
    const long double var = std::max(0.0L, sum_sq / static_cast<long double>(n) - mean * mean);
    out.lhs = static_cast<double>(mean);
    out.lhs_stderr = static_cast<double>(std::sqrt(var / static_cast<long double>(n)));
    double trace;
    switch (which) {
    case BoundTarget::FedIT: trace = sc.trace(sc.var_f); break;
    case BoundTarget::Local: trace = sc.trace(sc.var_l); break;
    default: trace = merge_trace(sc, lambda); break;
    }
    out.rhs = bound_rhs(sc, trace);
    out.holds = out.lhs <= out.rhs + 3.0 * out.lhs_stderr;
    out.escapes = escapes;
    return out;
}

// Random PSD diagonal joint blocks; verifies |tr(S12)| <= sqrt(tr(S1) tr(S2)).
inline std::size_t check_trace_cs(std::size_t n_trials, Rng& rng) {
    if (n_trials == 0) { throw ConfigError("check_trace_cs: n_trials >= 1 required"); }
    std::size_t passes = 0;
    for (std::size_t trial = 0; trial < n_trials; ++trial) {
        const std::size_t d = 1 + static_cast<std::size_t>(rng.below(8));
        long double t1 = 0.0L, t2 = 0.0L, t12 = 0.0L;
        for (std::size_t k = 0; k < d; ++k) {
            const double v1 = rng.uniform() * 2.0;
            const double v2 = rng.uniform() * 2.0;
            const double rho = rng.uniform() * 2.0 - 1.0; // [-1, 1] keeps each 2x2 block PSD
            t1 += v1;
            t2 += v2;
            t12 += rho * std::sqrt(v1 * v2);
        }
        const double lhs = std::abs(static_cast<double>(t12));
        const double rhs = std::sqrt(static_cast<double>(t1) * static_cast<double>(t2));
        if (lhs <= rhs * (1.0 + 1e-12)) { passes += 1; }
    }
    return passes;
}

// Randomized scenario generator. Every output satisfies the stated
// assumptions, with the basin radius padded so that 6-sigma draws stay inside.
inline QuadScenario random_scenario(Rng& rng, std::size_t dim = 0, bool with_cubic = true) {
    QuadScenario sc;
    sc.dim = dim == 0 ? 2 + static_cast<std::size_t>(rng.below(6)) : dim;
    sc.w_star.resize(sc.dim);
    sc.w_pre.resize(sc.dim);
    sc.h.resize(sc.dim);
    sc.mu_f.resize(sc.dim);
    sc.mu_l.resize(sc.dim);
    sc.var_f.resize(sc.dim);
    sc.var_l.resize(sc.dim);
    sc.var_c.resize(sc.dim);
    double max_h = 0.0;
    for (std::size_t k = 0; k < sc.dim; ++k) {
        sc.w_star[k] = rng.uniform() * 2.0 - 1.0;
        sc.w_pre[k] = sc.w_star[k] + 0.2 * (rng.uniform() - 0.5);
        sc.h[k] = 0.2 + 1.8 * rng.uniform();
        max_h = std::max(max_h, sc.h[k]);
        sc.mu_f[k] = sc.w_star[k] - sc.w_pre[k] + 0.1 * (rng.uniform() - 0.5);
        sc.mu_l[k] = sc.w_star[k] - sc.w_pre[k] + 0.1 * (rng.uniform() - 0.5);
        sc.var_f[k] = 1e-4 + 0.01 * rng.uniform();
        sc.var_l[k] = 1e-4 + 0.01 * rng.uniform();
        const double rho = rng.uniform(); // [0, 1]
        sc.var_c[k] = rho * std::min({std::sqrt(sc.var_f[k] * sc.var_l[k]), sc.var_f[k], sc.var_l[k]});
    }
    sc.cubic_c3 = (with_cubic && rng.uniform() < 0.5) ? 0.01 + 0.2 * rng.uniform() : 0.0;
    sc.hess_lip = 6.0 * sc.cubic_c3;
    const double mean_reach = std::max(sc.mean_distance(sc.mu_f), sc.mean_distance(sc.mu_l));
    const double sigma_reach = std::sqrt(std::max(sc.trace(sc.var_f), sc.trace(sc.var_l)));
    sc.basin_radius = mean_reach + 8.0 * sigma_reach;
    sc.smooth_l = max_h + 6.0 * sc.cubic_c3 * sc.basin_radius;
    sc.validate();
    return sc;
}

} // namespace fedmerge
