// Copyright (c) 2026, The ckptmerge Authors
// SPDX-License-Identifier: Apache-2.0
//
#include <cmath>
#include <numbers>

#include <doctest.h>

#include "ckptmerge/errors.hpp"
#include "ckptmerge/merge_ps.hpp"
#include "support.hpp"

using namespace ckptmerge;
using namespace testsupport;

namespace {

Checkpoint vec_model(std::vector<double> values, DType dtype = DType::F64) {
    Checkpoint c;
    const auto n = static_cast<std::uint64_t>(values.size());
    c.add(tensor("w", dtype, {n}, values));
    return c;
}

Checkpoint scalar_model(double v) {
    Checkpoint c;
    c.add(tensor("w", DType::F64, {}, {v}));
    return c;
}

std::vector<double> w_of(const MergeResult& r) { return r.model.at("w").to_double(); }

double norm(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s / (norm(a) * norm(b));
}

// Two-point spherical midpoint from the closed form
// sin(theta / 2) / sin(theta) * (a + b) on unit vectors.
std::vector<double> slerp_midpoint(const std::vector<double>& a, const std::vector<double>& b) {
    const double na = norm(a), nb = norm(b);
    const double theta = std::acos(std::clamp(cosine(a, b), -1.0, 1.0));
    const double k = std::sin(theta / 2) / std::sin(theta);
    std::vector<double> m(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) m[i] = k * (a[i] / na + b[i] / nb);
    return m;
}

}  // namespace

TEST_CASE("soup is the element-wise mean") {
    const std::vector<Checkpoint> two{scalar_model(2), scalar_model(4)};
    CHECK(w_of(soup(two, nullptr)) == std::vector<double>{3});
    const auto base = scalar_model(0);
    CHECK(w_of(soup(two, &base)) == std::vector<double>{2});

    PsMergeConfig weighted;
    weighted.weights = {3, 1};
    CHECK(w_of(soup(two, nullptr, weighted)) == std::vector<double>{2.5});
    weighted.weights = {1};
    CHECK_THROWS_AS(soup(two, nullptr, weighted), InvalidParameter);
    weighted.weights = {1, -1};
    CHECK_THROWS_AS(soup(two, nullptr, weighted), InvalidParameter);

    CHECK_THROWS_AS(soup(std::span<const Checkpoint>{}, nullptr), EmptyInput);
    const std::vector<Checkpoint> mixed{scalar_model(1), vec_model({1, 2})};
    CHECK_THROWS_AS(soup(mixed, nullptr), StructureMismatch);
}

TEST_CASE("identical models merge to that model for every parameter-space method") {
    std::mt19937_64 rng(21);
    for (DType dt : {DType::F32, DType::F64, DType::BF16}) {
        const auto m = random_model(rng, dt);
        const auto base = perturbed(m, rng, 0.3);
        const std::vector<Checkpoint> same{m, m, m};
        CHECK(values_equal(soup(same, nullptr).model, m));
        CHECK(values_equal(karcher_mean(same, nullptr).model, m));
        CHECK(values_equal(multi_slerp(same, nullptr).model, m));
        // Model Stock keeps the base's dtype; with identical models t = 1.
        CHECK(values_equal(model_stock(same, m).model, m));
        CHECK(max_tensor_rel_diff(model_stock(same, base).model, m) == 0.0);
    }
}

TEST_CASE("soup is permutation invariant") {
    std::mt19937_64 rng(22);
    const auto a = random_model(rng, DType::F64), b = random_model(rng, DType::F64), c = random_model(rng, DType::F64);
    const std::vector<Checkpoint> abc{a, b, c}, cab{c, a, b};
    CHECK(max_tensor_rel_diff(soup(abc, nullptr).model, soup(cab, nullptr).model) < 1e-15);
}

TEST_CASE("model stock interpolation ratio") {
    CHECK(model_stock_ratio(1.0, 2) == 1.0);
    CHECK(model_stock_ratio(0.0, 5) == 0.0);
    CHECK(model_stock_ratio(-0.7, 3) == 0.0);
    CHECK(model_stock_ratio(0.5, 2) == doctest::Approx(2.0 * 0.5 / 1.5));
    for (std::size_t k : {2u, 3u, 8u}) {
        double prev = -1.0;
        for (int i = -10; i <= 110; ++i) {
            const double t = model_stock_ratio(i / 100.0, k);
            CHECK(t >= 0.0);
            CHECK(t <= 1.0);
            CHECK(t >= prev);
            prev = t;
        }
    }
}

TEST_CASE("model stock worked cases") {
    const auto base = vec_model({1, 1});
    // Orthogonal task vectors give t = 0.
    const std::vector<Checkpoint> ortho{vec_model({2, 1}), vec_model({1, 3})};
    CHECK(w_of(model_stock(ortho, base)) == std::vector<double>{1, 1});
    // Parallel task vectors of different length: cos = 1, t = 1, mean delta.
    const std::vector<Checkpoint> parallel{vec_model({2, 2}), vec_model({4, 4})};
    const auto p = w_of(model_stock(parallel, base));
    CHECK(p[0] == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(p[1] == doctest::Approx(3.0).epsilon(1e-12));
    // Models equal to the base.
    const std::vector<Checkpoint> zero{base, base};
    CHECK(w_of(model_stock(zero, base)) == std::vector<double>{1, 1});
    // One zero-norm task vector falls back to base + mean delta with a warning.
    const std::vector<Checkpoint> half{base, vec_model({3, 1})};
    const auto fb = model_stock(half, base);
    CHECK(w_of(fb) == std::vector<double>{2, 1});
    CHECK(fb.report.fallback_count() == 1);
    CHECK(fb.report.warnings.size() == 2);

    const std::vector<Checkpoint> one{vec_model({2, 2})};
    CHECK_THROWS_AS(model_stock(one, base), InvalidParameter);
}

TEST_CASE("karcher mean of two orthogonal vectors is the bisector") {
    const std::vector<Checkpoint> pair{vec_model({3, 0}), vec_model({0, 3})};
    const auto r = karcher_mean(pair, nullptr);
    const auto v = w_of(r);
    CHECK(v[0] == doctest::Approx(3.0 / std::sqrt(2.0)).epsilon(1e-12));
    CHECK(v[1] == doctest::Approx(3.0 / std::sqrt(2.0)).epsilon(1e-12));
    CHECK(r.report.warnings.empty());
    REQUIRE(r.report.per_tensor.size() == 1);
    CHECK(r.report.per_tensor[0].iterations == 1);
}

TEST_CASE("antipodal and zero-norm inputs are degenerate") {
    const std::vector<Checkpoint> anti{vec_model({1, 0}), vec_model({-1, 0})};
    CHECK_THROWS_AS(karcher_mean(anti, nullptr), DegenerateInput);
    CHECK_THROWS_AS(multi_slerp(anti, nullptr), DegenerateInput);
    const std::vector<Checkpoint> zero{vec_model({0, 0}), vec_model({1, 2})};
    CHECK_THROWS_AS(karcher_mean(zero, nullptr), DegenerateInput);
    CHECK_THROWS_AS(multi_slerp(zero, nullptr), DegenerateInput);
}

TEST_CASE("multi-slerp examples") {
    const std::vector<Checkpoint> single{vec_model({0.5, -2, 1})};
    CHECK(w_of(multi_slerp(single, nullptr)) == std::vector<double>{0.5, -2, 1});

    const std::vector<double> a{2, 0, 0}, b{2 * std::cos(1.1), 2 * std::sin(1.1), 0};
    const std::vector<Checkpoint> pair{vec_model(a), vec_model(b)};
    const auto mid = slerp_midpoint(a, b);
    CHECK(cosine(w_of(multi_slerp(pair, nullptr)), mid) > 1.0 - 1e-12);
}

TEST_CASE("spherical means keep the mean input norm and agree for two points") {
    std::mt19937_64 rng(23);
    std::uniform_int_distribution<std::size_t> dim(2, 40);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = dim(rng);
        const auto x = random_values(n, rng), y = random_values(n, rng), z = random_values(n, rng);
        const std::vector<Checkpoint> three{vec_model(x), vec_model(y), vec_model(z)};
        const double target = (norm(x) + norm(y) + norm(z)) / 3.0;
        CHECK(norm(w_of(karcher_mean(three, nullptr))) == doctest::Approx(target).epsilon(1e-5));
        CHECK(norm(w_of(multi_slerp(three, nullptr))) == doctest::Approx(target).epsilon(1e-5));

        // Equal norms: both means coincide with the two-point midpoint.
        auto y2 = y;
        for (auto& v : y2) v *= norm(x) / norm(y);
        const std::vector<Checkpoint> pair{vec_model(x), vec_model(y2)};
        const auto mid = slerp_midpoint(x, y2);
        const auto k = w_of(karcher_mean(pair, nullptr));
        const auto s = w_of(multi_slerp(pair, nullptr));
        CHECK(cosine(k, mid) > 1.0 - 1e-6);
        CHECK(cosine(s, mid) > 1.0 - 1e-6);
        CHECK(cosine(k, s) > 1.0 - 1e-6);
    }
}

TEST_CASE("karcher iteration reports non-convergence and keeps the best iterate") {
    const std::vector<Checkpoint> spread{vec_model({1, 0, 0}), vec_model({0, 1, 0}), vec_model({0.2, 0.3, 1})};
    PsMergeConfig cfg;
    cfg.max_iterations = 1;
    cfg.tolerance = 1e-14;
    const auto r = karcher_mean(spread, nullptr, cfg);
    CHECK(r.report.warnings.size() == 1);
    cfg.max_iterations = 50;
    const auto full = karcher_mean(spread, nullptr, cfg);
    CHECK(full.report.warnings.empty());
    CHECK(norm(w_of(full)) == doctest::Approx((1.0 + 1.0 + std::sqrt(1.13)) / 3.0).epsilon(1e-12));

    cfg.tolerance = 0.0;
    CHECK_THROWS_AS(karcher_mean(spread, nullptr, cfg), InvalidParameter);
    cfg.tolerance = 1e-5;
    cfg.max_iterations = 0;
    CHECK_THROWS_AS(karcher_mean(spread, nullptr, cfg), InvalidParameter);
}

TEST_CASE("spherical methods are permutation invariant") {
    std::mt19937_64 rng(24);
    const auto centre = random_model(rng, DType::F64);
    const auto a = perturbed(centre, rng, 0.3), b = perturbed(centre, rng, 0.3), c = perturbed(centre, rng, 0.3);
    const std::vector<Checkpoint> abc{a, b, c}, bca{b, c, a};
    CHECK(max_tensor_rel_diff(karcher_mean(abc, nullptr).model, karcher_mean(bca, nullptr).model) < 1e-10);
    CHECK(max_tensor_rel_diff(multi_slerp(abc, nullptr).model, multi_slerp(bca, nullptr).model) < 1e-12);
    const auto base = random_model(rng, DType::F64);
    const auto ta = perturbed(base, rng, 0.1), tb = perturbed(base, rng, 0.1), tc = perturbed(base, rng, 0.1);
    const std::vector<Checkpoint> p1{ta, tb, tc}, p2{tc, tb, ta};
    CHECK(max_tensor_rel_diff(model_stock(p1, base).model, model_stock(p2, base).model) < 1e-12);
}
