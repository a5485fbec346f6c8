#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fedmerge/fisher.hpp"
#include "test_util.hpp"

using namespace fedmerge;

namespace {

ParamVector const_pv(const ParamVector& layout, double value) {
    ParamVector out = layout.zeros_like();
    for (std::size_t b = 0; b < out.block_count(); ++b) {
        std::fill(out.block(b).values.begin(), out.block(b).values.end(), value);
    }
    return out;
}

} // namespace

TEST_CASE("scalar logistic at w = 0, x = 1 has Fisher exactly 1/4") {
    ModelSpec spec;
    spec.d_in = 1;
    spec.n_classes = 2;
    spec.rank = 2;
    AdaptedModel model;
    model.spec = spec;
    model.base.add_block("layer0.base", {2, 1}, {0.0, 0.0});
    LoraAdapter ad;
    ad.layer_name = "layer0";
    ad.m = 2;
    ad.n = 1;
    ad.r = 2;
    ad.b = {1.0, 0.0, 0.0, 1.0}; // identity, so the A block is the raw weight
    ad.a = {0.0, 0.0};
    model.adapters.push_back(ad);
    const std::vector<Example> batch = {Example{{1.0}, 0}};
    const ParamVector fisher = fisher_diag(model, batch, LabelMode::ExactExpectation);
    const Block* fa = fisher.find("layer0.loraA");
    CHECK(fa->values[0] == doctest::Approx(0.25).epsilon(1e-14));
    CHECK(fa->values[1] == doctest::Approx(0.25).epsilon(1e-14));
    // A is zero, so the B-block scores vanish
    const Block* fb = fisher.find("layer0.loraB");
    for (const double v : fb->values) { CHECK(v == 0.0); }
}

TEST_CASE("exact-expectation Fisher matches the closed form on random logistic models") {
    Rng rng(41);
    for (int trial = 0; trial < 50; ++trial) {
        ModelSpec spec;
        spec.d_in = 1 + rng.below(4);
        spec.n_classes = 2;
        spec.rank = 1 + rng.below(2);
        const AdaptedModel model = testutil::random_model(spec, rng, 0.7);
        const std::vector<Example> batch = testutil::random_batch(spec, 1 + rng.below(8), rng);
        const ParamVector fisher = fisher_diag(model, batch, LabelMode::ExactExpectation);
        const ParamVector oracle = testutil::closed_form_logistic_fisher(model, batch);
        for (std::size_t b = 0; b < fisher.block_count(); ++b) {
            for (std::size_t k = 0; k < fisher.block(b).count(); ++k) {
                CHECK(std::abs(fisher.block(b).values[k] - oracle.block(b).values[k]) <= 1e-10);
            }
        }
    }
}

TEST_CASE("a zero input contributes nothing to the Fisher") {
    ModelSpec spec;
    spec.d_in = 3;
    spec.n_classes = 2;
    spec.rank = 2;
    Rng rng(42);
    const AdaptedModel model = testutil::random_model(spec, rng);
    const std::vector<Example> zero_batch = {Example{{0.0, 0.0, 0.0}, 1}};
    const ParamVector fisher = fisher_diag(model, zero_batch, LabelMode::ExactExpectation);
    fisher.for_each([](double v) { CHECK(v == 0.0); });
}

TEST_CASE("model-sampled Fisher converges to the exact expectation") {
    ModelSpec spec;
    spec.d_in = 2;
    spec.n_classes = 2;
    spec.rank = 1;
    Rng rng(43);
    const AdaptedModel model = testutil::random_model(spec, rng, 0.6);
    const std::vector<Example> batch = testutil::random_batch(spec, 2, rng);
    const ParamVector exact = fisher_diag(model, batch, LabelMode::ExactExpectation);
    Rng label_rng(99);
    const ParamVector sampled = fisher_diag(model, batch, LabelMode::ModelSampled, &label_rng, 100000);
    double max_f = 0.0;
    exact.for_each([&](double v) { max_f = std::max(max_f, v); });
    for (std::size_t b = 0; b < exact.block_count(); ++b) {
        for (std::size_t k = 0; k < exact.block(b).count(); ++k) {
            const double e = exact.block(b).values[k];
            if (e > 1e-3 * max_f) {
                CHECK(std::abs(sampled.block(b).values[k] - e) <= 0.02 * e);
            }
        }
    }
}

TEST_CASE("Fisher is invariant under batch duplication") {
    ModelSpec spec;
    spec.d_in = 3;
    spec.n_classes = 3;
    spec.rank = 1;
    Rng rng(44);
    const AdaptedModel model = testutil::random_model(spec, rng);
    const std::vector<Example> batch = testutil::random_batch(spec, 5, rng);
    std::vector<Example> doubled = batch;
    doubled.insert(doubled.end(), batch.begin(), batch.end());
    const ParamVector f1 = fisher_diag(model, batch, LabelMode::ExactExpectation);
    const ParamVector f2 = fisher_diag(model, doubled, LabelMode::ExactExpectation);
    for (std::size_t b = 0; b < f1.block_count(); ++b) {
        for (std::size_t k = 0; k < f1.block(b).count(); ++k) {
            CHECK(f1.block(b).values[k] == doctest::Approx(f2.block(b).values[k]).epsilon(1e-14));
        }
    }
}

TEST_CASE("Fisher entries are nonnegative and the damped inverse is positive") {
    Rng rng(45);
    ModelSpec spec;
    spec.arch = Arch::Mlp1;
    spec.d_in = 3;
    spec.d_hidden = 4;
    spec.n_classes = 4;
    spec.rank = 2;
    const AdaptedModel model = testutil::random_model(spec, rng);
    const std::vector<Example> batch = testutil::random_batch(spec, 6, rng);
    const ParamVector fisher = fisher_diag(model, batch, LabelMode::ExactExpectation);
    fisher.for_each([](double v) { CHECK(v >= 0.0); });
    const ParamVector var = fisher_to_variance(fisher, 1e-8);
    var.for_each([](double v) {
        CHECK(v > 0.0);
        CHECK(std::isfinite(v));
    });
    CHECK_THROWS_AS(fisher_diag(model, {}, LabelMode::ExactExpectation), ConfigError);
}

TEST_CASE("self-correlation: identical models give rho 1 and cross_var = var") {
    ModelSpec spec;
    spec.d_in = 3;
    spec.n_classes = 2;
    spec.rank = 1;
    Rng rng(46);
    const AdaptedModel model = testutil::random_model(spec, rng);
    const std::vector<Example> batch = testutil::random_batch(spec, 8, rng);
    const ParamVector var = fisher_to_variance(fisher_diag(model, batch, LabelMode::ExactExpectation), 1e-8);
    const CrossDiag cross = cross_corr(model, model, batch, var, var);
    const std::vector<ParamVector> grads = per_sample_grads(model, batch);
    for (std::size_t b = 0; b < var.block_count(); ++b) {
        for (std::size_t k = 0; k < var.block(b).count(); ++k) {
            // coordinates whose per-sample gradients actually vary
            long double mean = 0.0L, sq = 0.0L;
            for (const ParamVector& g : grads) { mean += g.block(b).values[k]; }
            mean /= static_cast<long double>(grads.size());
            for (const ParamVector& g : grads) {
                const long double d = g.block(b).values[k] - mean;
                sq += d * d;
            }
            if (sq > 1e-20L) {
                CHECK(cross.rho.block(b).values[k] == doctest::Approx(1.0).epsilon(1e-12));
                CHECK(cross.cross_var.block(b).values[k] ==
                      doctest::Approx(var.block(b).values[k]).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("anti-correlated gradients clip to zero cross covariance") {
    ParamVector layout;
    layout.add_block("layer0.loraA", {3}, {0.0, 0.0, 0.0});
    std::vector<ParamVector> gf, gl;
    Rng rng(47);
    for (int s = 0; s < 10; ++s) {
        ParamVector g = layout.zeros_like();
        for (double& v : g.block(0).values) { v = rng.normal(); }
        ParamVector neg = g;
        for (double& v : neg.block(0).values) { v = -v; }
        gf.push_back(g);
        gl.push_back(neg);
    }
    const ParamVector var = const_pv(layout, 0.5);
    const CrossDiag cross = clipped_cross_from_grads(gf, gl, var, var);
    cross.rho.for_each([](double v) { CHECK(v == 0.0); });
    cross.cross_var.for_each([](double v) { CHECK(v == 0.0); });
}

TEST_CASE("clipping formula by hand: rho_max = 1/2, cross_var = 1") {
    // population with raw correlation sqrt(3)/2 ~ 0.866 above the clip level
    ParamVector layout;
    layout.add_block("layer0.loraA", {1}, {0.0});
    std::vector<ParamVector> gf, gl;
    for (const double v : {0.0, 1.0, 2.0}) {
        ParamVector g = layout.zeros_like();
        g.block(0).values[0] = v;
        gf.push_back(g);
    }
    for (const double v : {0.0, 1.0, 1.0}) {
        ParamVector g = layout.zeros_like();
        g.block(0).values[0] = v;
        gl.push_back(g);
    }
    ParamVector var_f = const_pv(layout, 1.0);
    ParamVector var_l = const_pv(layout, 4.0);
    const CrossDiag cross = clipped_cross_from_grads(gf, gl, var_f, var_l);
    CHECK(cross.rho.block(0).values[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(cross.cross_var.block(0).values[0] == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(cross.cross_var.block(0).values[0] <= 1.0);
}

TEST_CASE("cross estimation rejects tiny batches and mismatched layouts") {
    ModelSpec spec;
    spec.d_in = 2;
    spec.n_classes = 2;
    spec.rank = 1;
    Rng rng(48);
    const AdaptedModel model = testutil::random_model(spec, rng);
    const std::vector<Example> one = testutil::random_batch(spec, 1, rng);
    const ParamVector var = const_pv(adapters_to_params(model.adapters), 1.0);
    CHECK_THROWS_AS(cross_corr(model, model, one, var, var), ConfigError);

    ParamVector other;
    other.add_block("different", {2}, {1.0, 1.0});
    const std::vector<Example> batch = testutil::random_batch(spec, 4, rng);
    CHECK_THROWS_AS(cross_corr(model, model, batch, var, other), ShapeError);
}

TEST_CASE("trace examples") {
    ParamVector layout;
    layout.add_block("layer0.loraA", {4}, {0.0, 0.0, 0.0, 0.0});
    SUBCASE("zero cross gives c = 0") {
        CrossDiag cross{const_pv(layout, 0.0), const_pv(layout, 0.0)};
        const TraceTriple t = traces(const_pv(layout, 1.0), const_pv(layout, 2.0), cross);
        CHECK(t.a == 4.0);
        CHECK(t.b == 8.0);
        CHECK(t.c == 0.0);
    }
    SUBCASE("perfect correlation with equal variances gives a = b = c") {
        CrossDiag cross{const_pv(layout, 1.0), const_pv(layout, 1.5)};
        const TraceTriple t = traces(const_pv(layout, 1.5), const_pv(layout, 1.5), cross);
        CHECK(t.a == 6.0);
        CHECK(t.b == 6.0);
        CHECK(t.c == 6.0);
    }
    SUBCASE("negative variance is rejected") {
        CrossDiag cross{const_pv(layout, 0.0), const_pv(layout, 0.0)};
        CHECK_THROWS_AS(traces(const_pv(layout, -1.0), const_pv(layout, 1.0), cross), InvariantError);
    }
}

TEST_CASE("random clipped diagonals always satisfy c <= sqrt(ab) and c <= min(a,b)") {
    Rng rng(49);
    ParamVector layout;
    layout.add_block("layer0.loraA", {16}, std::vector<double>(16, 0.0));
    for (int trial = 0; trial < 1000; ++trial) {
        ParamVector vf = layout.zeros_like(), vl = layout.zeros_like();
        CrossDiag cross{layout.zeros_like(), layout.zeros_like()};
        for (std::size_t k = 0; k < 16; ++k) {
            const double f = std::exp(3.0 * (rng.uniform() - 0.5));
            const double l = std::exp(3.0 * (rng.uniform() - 0.5));
            const double rho_max = std::sqrt(std::min(f / l, l / f));
            const double rho = rng.uniform() * rho_max;
            vf.block(0).values[k] = f;
            vl.block(0).values[k] = l;
            cross.rho.block(0).values[k] = rho;
            cross.cross_var.block(0).values[k] = std::min(rho * std::sqrt(f * l), std::min(f, l));
        }
        const TraceTriple t = traces(vf, vl, cross);
        CHECK(t.c >= 0.0);
        CHECK(t.c <= std::min(t.a, t.b));
        CHECK(t.c <= std::sqrt(t.a * t.b));
    }
}
