#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>

#include "fedmerge/params.hpp"
#include "fedmerge/rng.hpp"

using namespace fedmerge;

namespace {

ParamVector make_pv(std::vector<double> a, std::vector<double> b = {}) {
    ParamVector v;
    const std::size_t na = a.size();
    const std::size_t nb = b.size();
    v.add_block("layer0.loraA", {na}, std::move(a));
    if (nb != 0) { v.add_block("layer0.loraB", {nb}, std::move(b)); }
    return v;
}

ParamVector random_pv(Rng& rng, std::size_t n1 = 7, std::size_t n2 = 5) {
    std::vector<double> a(n1), b(n2);
    for (double& v : a) { v = rng.normal(); }
    for (double& v : b) { v = rng.normal(); }
    return make_pv(std::move(a), std::move(b));
}

bool bit_equal(const ParamVector& x, const ParamVector& y) {
    if (!x.compatible_with(y)) { return false; }
    for (std::size_t b = 0; b < x.block_count(); ++b) {
        if (std::memcmp(x.block(b).values.data(), y.block(b).values.data(),
                        x.block(b).count() * sizeof(double)) != 0) {
            return false;
        }
    }
    return true;
}

} // namespace

TEST_CASE("axpby identity and convex fixed point") {
    Rng rng(11);
    const ParamVector x = random_pv(rng);
    CHECK(bit_equal(axpby(1.0, x, 0.0, x), x));
    CHECK(bit_equal(axpby(0.5, x, 0.5, x), x));
}

TEST_CASE("axpby hand arithmetic") {
    const ParamVector x = make_pv({0.0, 4.0});
    const ParamVector y = make_pv({4.0, 0.0});
    const ParamVector r = axpby(0.25, x, 0.75, y);
    CHECK(r.block(0).values[0] == 3.0);
    CHECK(r.block(0).values[1] == 1.0);
}

TEST_CASE("axpby bilinearity within a few ulps") {
    Rng rng(12);
    for (int trial = 0; trial < 50; ++trial) {
        const ParamVector x = random_pv(rng);
        const ParamVector y = random_pv(rng);
        const double alpha = rng.normal();
        const double beta = rng.normal();
        const ParamVector whole = axpby(alpha, x, beta, y);
        const ParamVector parts = axpby(1.0, axpby(alpha, x, 0.0, y), 1.0, axpby(0.0, x, beta, y));
        for (std::size_t b = 0; b < whole.block_count(); ++b) {
            for (std::size_t k = 0; k < whole.block(b).count(); ++k) {
                const double w = whole.block(b).values[k];
                const double p = parts.block(b).values[k];
                CHECK(std::abs(w - p) <= 4.0 * std::abs(w) * 1e-16 + 1e-300);
            }
        }
    }
}

TEST_CASE("shape mismatch names the first offending block") {
    ParamVector x = make_pv({1.0, 2.0});
    ParamVector y;
    y.add_block("layer1.loraA", {2}, {1.0, 2.0});
    CHECK_THROWS_WITH_AS(axpby(1.0, x, 1.0, y), doctest::Contains("layer0.loraA"), ShapeError);

    ParamVector z;
    z.add_block("layer0.loraA", {3}, {1.0, 2.0, 3.0});
    CHECK_THROWS_WITH_AS(dot(x, z), doctest::Contains("layer0.loraA"), ShapeError);

    ParamVector extra = make_pv({1.0, 2.0}, {1.0});
    CHECK_THROWS_WITH_AS(dot(x, extra), doctest::Contains("layer0.loraB"), ShapeError);
}

TEST_CASE("dot examples") {
    const ParamVector zero = make_pv({0.0, 0.0, 0.0});
    CHECK(dot(zero, zero) == 0.0);
    const ParamVector ones = make_pv({1.0, 1.0, 1.0});
    CHECK(dot(ones, ones) == 3.0);
    const ParamVector x = make_pv({1.0, 2.0});
    const ParamVector y = make_pv({3.0, -1.0});
    CHECK(dot(x, y) == 1.0);
}

TEST_CASE("dot(x,x) is nonnegative and zero only at zero") {
    Rng rng(13);
    for (int trial = 0; trial < 100; ++trial) {
        const ParamVector x = random_pv(rng);
        CHECK(dot(x, x) >= 0.0);
        CHECK(dot(x, x) > 0.0);
    }
    ParamVector z = make_pv({0.0, 0.0}, {0.0});
    CHECK(dot(z, z) == 0.0);
}

TEST_CASE("serialize round trip is bit exact") {
    Rng rng(14);
    for (int trial = 0; trial < 20; ++trial) {
        ParamVector v = random_pv(rng, 1 + rng.below(9), 1 + rng.below(9));
        // a couple of awkward values
    v.block(0).values[0] = 0.0;
        if (v.block(0).count() > 1) { v.block(0).values[1] = 5e-324; }
        CHECK(bit_equal(deserialize(serialize(v)), v));
    }
}

TEST_CASE("empty vector round trips") {
    const ParamVector empty;
    const ParamVector back = deserialize(serialize(empty));
    CHECK(back.block_count() == 0);
}

TEST_CASE("container byte length matches the format definition") {
    ParamVector v;
    v.add_block("w", {2, 3}, std::vector<double>(6, 1.5));
    v.add_block("bias2", {4}, std::vector<double>(4, -2.0));
    const std::size_t header = 4 + 2 + 4;
    const std::size_t block1 = 2 + 1 + 1 + 4 * 2 + 8 * 6;
    const std::size_t block2 = 2 + 5 + 1 + 4 * 1 + 8 * 4;
    CHECK(serialize(v).size() == header + block1 + block2 + 4);
}

TEST_CASE("malformed input is rejected") {
    Rng rng(15);
    ParamVector v = random_pv(rng);
    std::vector<unsigned char> bytes = serialize(v);

    std::vector<unsigned char> bad_magic = bytes;
    bad_magic[0] = 'Q';
    CHECK_THROWS_AS(deserialize(bad_magic), FormatError);

    std::vector<unsigned char> truncated(bytes.begin(), bytes.begin() + bytes.size() / 2);
    CHECK_THROWS_AS(deserialize(truncated), FormatError);

    std::vector<unsigned char> flipped = bytes;
    flipped[flipped.size() - 10] ^= 0x40; // payload bit -> checksum mismatch
    CHECK_THROWS_AS(deserialize(flipped), FormatError);

    std::vector<unsigned char> trailing = bytes;
    trailing.push_back(0);
    CHECK_THROWS_AS(deserialize(trailing), FormatError);
}

TEST_CASE("pvec file io") {
    Rng rng(16);
    const ParamVector v = random_pv(rng);
    const std::string path = "test_params_roundtrip.pvec";
    save_pvec(v, path);
    CHECK(bit_equal(load_pvec(path), v));
    std::remove(path.c_str());
    CHECK_THROWS_AS(load_pvec("does_not_exist.pvec"), IoError);
}

TEST_CASE("mean_of reproduces identical inputs bit exactly up to 64 copies") {
    Rng rng(17);
    const ParamVector x = random_pv(rng);
    for (const std::size_t k : {2u, 3u, 7u, 64u}) {
        std::vector<const ParamVector*> copies(k, &x);
        CHECK(bit_equal(mean_of(copies), x));
    }
}

TEST_CASE("duplicate block names are rejected") {
    ParamVector v;
    v.add_block("a", {1}, {1.0});
    CHECK_THROWS_AS(v.add_block("a", {1}, {2.0}), ShapeError);
}
