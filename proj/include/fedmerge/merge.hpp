#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "fedmerge/errors.hpp"
#include "fedmerge/fisher.hpp"
#include "fedmerge/model.hpp"
#include "fedmerge/params.hpp"

namespace fedmerge {

// Convex-combination coefficients for the federated/local pair, together with
// the scalar traces that produced them. lambda_local is defined as
// 1 - lambda_fedit, so the pair always sums to one exactly.
struct MixingWeights {
    double lambda_fedit = 0.5;
    double lambda_local = 0.5;
    double a = 0.0, b = 0.0, c = 0.0;
    bool degenerate = false;
};

// Merged-posterior trace as a function of the federated weight:
//   g(lambda) = a*lambda^2 + b*(1-lambda)^2 + 2*lambda*(1-lambda)*c.
inline double merged_trace(double a, double b, double c, double lambda) {
    const double mu = 1.0 - lambda;
    return a * lambda * lambda + b * mu * mu + 2.0 * lambda * mu * c;
}

// Trace-optimal mixing weight lambda* = (b - c) / (a + b - 2c), clamped into
// [0, 1]. When the curvature a + b - 2c vanishes (relative to a + b) g is
// constant, any lambda is optimal and the symmetric 0.5 is returned with the
// degenerate flag set. Inputs must satisfy 0 <= c <= min(a, b); a violation
// signals a clipping bug upstream.
inline MixingWeights optimal_weights(double a, double b, double c, double degeneracy_tol = 1e-15) {
    if (a < 0.0 || b < 0.0 || c < 0.0) { throw InvariantError("optimal_weights: negative trace input"); }
    if (c > std::min(a, b)) { throw InvariantError("optimal_weights: c > min(a, b), upstream clipping is broken"); }
    MixingWeights w;
    w.a = a;
    w.b = b;
    w.c = c;
    const double curvature = a + b - 2.0 * c;
    if (curvature <= degeneracy_tol * (a + b)) {
        w.degenerate = true;
        w.lambda_fedit = 0.5;
    } else {
        w.lambda_fedit = (b - c) / curvature;
        w.lambda_fedit = std::max(0.0, std::min(1.0, w.lambda_fedit));
    }
    w.lambda_local = 1.0 - w.lambda_fedit;
    return w;
}

// Per-matrix convex combination: for each layer, A and B are merged
// separately (the merged update is B_merged * A_merged, not a combination of
// the composed products). Evaluated as local + lambda*(fedit - local) with the
// lambda = 1 endpoint special-cased, so both endpoints and the fedit == local
// fixed point are bit-exact.
inline std::vector<LoraAdapter> merge_adapters(const std::vector<LoraAdapter>& fedit,
                                               const std::vector<LoraAdapter>& local, const MixingWeights& w) {
    adapters_to_params(fedit).require_compatible(adapters_to_params(local));
    if (w.lambda_fedit == 1.0) { return fedit; }
    const double lambda = w.lambda_fedit;
    std::vector<LoraAdapter> out = local;
    for (std::size_t l = 0; l < out.size(); ++l) {
        for (std::size_t k = 0; k < out[l].a.size(); ++k) {
            out[l].a[k] = local[l].a[k] + lambda * (fedit[l].a[k] - local[l].a[k]);
        }
        for (std::size_t k = 0; k < out[l].b.size(); ++k) {
            out[l].b[k] = local[l].b[k] + lambda * (fedit[l].b[k] - local[l].b[k]);
        }
    }
    return out;
}

struct FisherWeightedModel {
    ParamVector mean;
    ParamVector fisher;
};

// Per-coordinate Fisher-weighted average of two or more models:
//   merged_k = sum_i F_ik mu_ik / (sum_i F_ik + eps).
inline ParamVector fisher_merge_baseline(const std::vector<FisherWeightedModel>& models, double eps) {
    if (models.size() < 2) { throw ConfigError("fisher_merge: need >= 2 (mean, fisher) pairs"); }
    for (const FisherWeightedModel& m : models) {
        models[0].mean.require_compatible(m.mean);
        models[0].mean.require_compatible(m.fisher);
    }
    ParamVector out = models[0].mean.zeros_like();
    for (std::size_t b = 0; b < out.block_count(); ++b) {
        for (std::size_t k = 0; k < out.block(b).count(); ++k) {
            long double num = 0.0L, den = 0.0L;
            for (const FisherWeightedModel& m : models) {
                const long double f = m.fisher.block(b).values[k];
                num += f * m.mean.block(b).values[k];
                den += f;
            }
            out.block(b).values[k] = static_cast<double>(num / (den + static_cast<long double>(eps)));
        }
    }
    return out;
}

struct GridPoint {
    double lambda = 0.0;
    double loss = 0.0;
    double accuracy = 0.0;
};

struct GridSearchResult {
    double best_lambda = 0.0;
    std::vector<GridPoint> curve;
};

// Evaluates the merged model at every grid lambda on the evaluation set and
// returns the argmin-loss lambda, ties broken toward the smaller lambda. The
// full curve is kept for ablation output.
inline GridSearchResult grid_search_lambda(const ModelSpec& spec, const ParamVector& base,
                                           const std::vector<LoraAdapter>& fedit,
                                           const std::vector<LoraAdapter>& local, const std::vector<double>& grid,
                                           const std::vector<Example>& eval_set) {
    if (grid.empty() || eval_set.empty()) { throw ConfigError("grid_search: empty grid or eval set"); }
    GridSearchResult result;
    std::size_t best = 0;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        MixingWeights w;
        w.lambda_fedit = grid[i];
        w.lambda_local = 1.0 - grid[i];
        const AdaptedModel merged{spec, base, merge_adapters(fedit, local, w)};
        const Metrics m = evaluate(merged, eval_set);
        result.curve.push_back(GridPoint{grid[i], m.loss, m.accuracy});
        if (m.loss < result.curve[best].loss ||
            (m.loss == result.curve[best].loss && grid[i] < result.curve[best].lambda)) {
            best = i;
        }
    }
    result.best_lambda = result.curve[best].lambda;
    return result;
}

struct LmcScan {
    std::vector<GridPoint> curve; // lambda weights w1: curve[0] = f(w2), curve[last] = f(w1)
    double barrier = 0.0;         // max over the curve minus max(endpoint losses)
};

// Loss along the straight line between two full effective-weight vectors:
// f(lambda*w1 + (1-lambda)*w2) at n_points equispaced lambdas in [0, 1],
// evaluated as w2 + lambda*(w1 - w2) with exact endpoints.
inline LmcScan lmc_scan(const ModelSpec& spec, const ParamVector& w1, const ParamVector& w2,
                        const std::vector<Example>& eval_set, std::size_t n_points) {
    if (n_points < 2) { throw ConfigError("lmc_scan: need at least 2 points"); }
    w1.require_compatible(w2);
    const ParamVector diff = axpby(1.0, w1, -1.0, w2);
    LmcScan scan;
    for (std::size_t i = 0; i < n_points; ++i) {
        const double lambda = static_cast<double>(i) / static_cast<double>(n_points - 1);
        const ParamVector w = (i + 1 == n_points) ? w1 : axpby(1.0, w2, lambda, diff);
        const Metrics m = eval_effective(spec, w, eval_set);
        scan.curve.push_back(GridPoint{lambda, m.loss, m.accuracy});
    }
    const double endpoint_max = std::max(scan.curve.front().loss, scan.curve.back().loss);
    double peak = endpoint_max;
    for (const GridPoint& p : scan.curve) { peak = std::max(peak, p.loss); }
    scan.barrier = peak - endpoint_max;
    return scan;
}

} // namespace fedmerge
