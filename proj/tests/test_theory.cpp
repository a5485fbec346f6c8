#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fedmerge/merge.hpp"
#include "fedmerge/theory.hpp"

using namespace fedmerge;

namespace {

QuadScenario simple_scenario(std::size_t dim, double var, double cross_frac) {
    QuadScenario sc;
    sc.dim = dim;
    sc.w_star.assign(dim, 0.5);
    sc.w_pre.assign(dim, 0.3);
    sc.h.assign(dim, 1.0);
    sc.mu_f.assign(dim, 0.2); // w_pre + mu = w_star
    sc.mu_l.assign(dim, 0.2);
    sc.var_f.assign(dim, var);
    sc.var_l.assign(dim, var);
    sc.var_c.assign(dim, cross_frac * var);
    sc.cubic_c3 = 0.0;
    sc.hess_lip = 0.0;
    sc.smooth_l = 1.0;
    sc.basin_radius = 8.0 * std::sqrt(var * static_cast<double>(dim)) + 1e-6;
    sc.validate();
    return sc;
}

} // namespace

TEST_CASE("fully correlated blocks give identical deviations per draw") {
    const QuadScenario sc = simple_scenario(4, 0.01, 1.0);
    Rng rng(70);
    for (const auto& [tf, tl] : sample_joint(sc, 200, rng)) {
        for (std::size_t k = 0; k < sc.dim; ++k) {
            CHECK(tf[k] - sc.mu_f[k] == tl[k] - sc.mu_l[k]);
        }
    }
}

TEST_CASE("zero cross block gives empirically independent draws") {
    const QuadScenario sc = simple_scenario(2, 0.04, 0.0);
    Rng rng(71);
    const std::size_t n = 100000;
    std::vector<long double> cov(sc.dim, 0.0L);
    for (const auto& [tf, tl] : sample_joint(sc, n, rng)) {
        for (std::size_t k = 0; k < sc.dim; ++k) {
            cov[k] += (tf[k] - sc.mu_f[k]) * (tl[k] - sc.mu_l[k]);
        }
    }
    for (std::size_t k = 0; k < sc.dim; ++k) {
        const double est = static_cast<double>(cov[k]) / n;
        CHECK(std::abs(est) < 4.0 * sc.var_f[k] / std::sqrt(static_cast<double>(n)));
    }
}

TEST_CASE("merged draws have the convex-combination mean") {
    const QuadScenario sc = simple_scenario(3, 0.01, 0.5);
    const double lambda = 0.3;
    Rng rng(72);
    const std::size_t n = 100000;
    std::vector<long double> mean(sc.dim, 0.0L);
    for (const auto& [tf, tl] : sample_joint(sc, n, rng)) {
        for (std::size_t k = 0; k < sc.dim; ++k) { mean[k] += lambda * tf[k] + (1.0 - lambda) * tl[k]; }
    }
    for (std::size_t k = 0; k < sc.dim; ++k) {
        const double expect = lambda * sc.mu_f[k] + (1.0 - lambda) * sc.mu_l[k];
        const double sigma = std::sqrt(merge_trace(sc, lambda) / static_cast<double>(sc.dim));
        CHECK(std::abs(static_cast<double>(mean[k]) / n - expect) <= 4.0 * sigma / std::sqrt(static_cast<double>(n)));
    }
}

TEST_CASE("a point mass at the optimum has zero excess loss") {
    QuadScenario sc = simple_scenario(3, 0.0, 0.0);
    Rng rng(73);
    const BoundCheck bc = check_bound(sc, BoundTarget::FedIT, 0.0, 10000, rng);
    CHECK(bc.lhs <= 1e-20);
    CHECK(bc.holds);
    CHECK(bc.escapes == 0);
}

TEST_CASE("isotropic quadratic: Monte Carlo matches the closed-form expectation") {
    // loss = (L/2)||w - w*||^2 with L = 1: E[excess] = (L/2)(||d||^2 + tr Sigma)
    QuadScenario sc = simple_scenario(4, 0.01, 0.3);
    sc.mu_f.assign(4, 0.15); // mean offset d: w_pre + mu - w_star = -0.05 per coordinate
    sc.basin_radius = std::sqrt(4 * 0.05 * 0.05) + 8.0 * std::sqrt(0.04) + 1e-9;
    sc.validate();
    Rng rng(74);
    const BoundCheck bc = check_bound(sc, BoundTarget::FedIT, 0.0, 200000, rng);
    const double dist_sq = 4 * 0.05 * 0.05;
    const double analytic = 0.5 * (dist_sq + 4 * 0.01);
    CHECK(std::abs(bc.lhs - analytic) <= 4.0 * bc.lhs_stderr);
    CHECK(bc.holds);
    // equality of the bound happens exactly when the mean sits on the basin edge
    const double rhs_at_edge = 0.5 * (sc.basin_radius * sc.basin_radius + 4 * 0.01);
    CHECK(bc.rhs == doctest::Approx(rhs_at_edge).epsilon(1e-12));
    CHECK(analytic < rhs_at_edge);
}

TEST_CASE("the bound holds across randomized scenarios including cubic losses") {
    Rng root(75);
    std::size_t cubic_seen = 0;
    for (std::size_t id = 0; id < 30; ++id) {
        Rng gen = root.child("scenario", id);
        const QuadScenario sc = random_scenario(gen);
        cubic_seen += sc.cubic_c3 > 0.0 ? 1 : 0;
        const double a = sc.trace(sc.var_f);
        const double b = sc.trace(sc.var_l);
        const double c = std::min({sc.trace(sc.var_c), a, b});
        const MixingWeights w = optimal_weights(a, b, c);
        for (const auto& [target, lambda] : std::vector<std::pair<BoundTarget, double>>{
                 {BoundTarget::FedIT, 0.0}, {BoundTarget::Local, 0.0}, {BoundTarget::Merge, w.lambda_fedit}}) {
            Rng mc = gen.child("mc", static_cast<std::uint64_t>(target));
            const BoundCheck bc = check_bound(sc, target, lambda, 20000, mc);
            CHECK(bc.holds);
            CHECK(bc.escapes == 0);
        }
        // the optimal merge never has a looser bound than either endpoint
        const double rhs_star = bound_rhs(sc, merge_trace(sc, w.lambda_fedit));
        CHECK(rhs_star <= bound_rhs(sc, merge_trace(sc, 0.0)) + 1e-12);
        CHECK(rhs_star <= bound_rhs(sc, merge_trace(sc, 1.0)) + 1e-12);
    }
    CHECK(cubic_seen > 0);
}

TEST_CASE("the bound is monotone in the posterior trace") {
    const QuadScenario sc = simple_scenario(3, 0.01, 0.0);
    const double r1 = bound_rhs(sc, 0.03);
    const double r2 = bound_rhs(sc, 0.05);
    CHECK(r2 > r1);
}

TEST_CASE("trace Cauchy-Schwarz edge cases and random trials") {
    // S12 = 0 and S12 = S1 = S2 are both inside the inequality
    Rng rng(76);
    CHECK(check_trace_cs(10000, rng) == 10000);
    QuadScenario sc = simple_scenario(2, 0.01, 1.0);
    const double c = sc.trace(sc.var_c);
    CHECK(c == doctest::Approx(std::sqrt(sc.trace(sc.var_f) * sc.trace(sc.var_l))).epsilon(1e-12));
}

TEST_CASE("scenario validation rejects broken inputs") {
    QuadScenario sc = simple_scenario(2, 0.01, 0.5);
    sc.var_c[0] = 0.02; // exceeds both marginals
    CHECK_THROWS_AS(sc.validate(), ConfigError);

    QuadScenario far = simple_scenario(2, 0.01, 0.5);
    far.mu_f[0] = 100.0; // mean path leaves the basin
    CHECK_THROWS_AS(far.validate(), ConfigError);

    QuadScenario lh = simple_scenario(2, 0.01, 0.5);
    lh.hess_lip = 1.0; // inconsistent with cubic_c3 = 0
    CHECK_THROWS_AS(lh.validate(), ConfigError);

    Rng rng(77);
    CHECK_THROWS_AS(check_bound(simple_scenario(2, 0.01, 0.0), BoundTarget::FedIT, 0.0, 100, rng), ConfigError);
    CHECK_THROWS_AS(sample_joint(simple_scenario(2, 0.01, 0.0), 0, rng), ConfigError);
}

TEST_CASE("random scenarios satisfy every stated assumption") {
    Rng root(78);
    for (std::size_t id = 0; id < 200; ++id) {
        Rng gen = root.child("scenario", id);
        const QuadScenario sc = random_scenario(gen); // validate() runs inside
        for (std::size_t k = 0; k < sc.dim; ++k) { CHECK(sc.h[k] <= sc.smooth_l); }
        CHECK(sc.mean_distance(sc.mu_f) <= sc.basin_radius);
        CHECK(sc.mean_distance(sc.mu_l) <= sc.basin_radius);
    }
}
