// Copyright (c) 2026, The ckptmerge Authors
// SPDX-License-Identifier: Apache-2.0
//
#include <doctest.h>

#include "ckptmerge/errors.hpp"
#include "ckptmerge/merge_subspace.hpp"
#include "ckptmerge/merge_tau.hpp"
#include "support.hpp"

using namespace ckptmerge;
using namespace testsupport;
using linalg::Index;

namespace {

Checkpoint matrix_model(const Matrix& m, DType dtype = DType::F64) {
    Checkpoint c;
    c.add(tensor_from_matrix("w", dtype, m));
    return c;
}

Matrix merged_w(const MergeResult& r) { return matrix_of(r.model.at("w")); }

Matrix low_rank(Index m, Index n, Index rank, std::mt19937_64& rng) {
    return random_matrix(m, rank, rng) * random_matrix(rank, n, rng);
}

SubspaceMergeConfig config(SubspaceMethod m) { return default_subspace_config(m); }

MergeResult run(SubspaceMethod m, const Checkpoint& base, std::span<const TaskVector> taus,
                SubspaceMergeConfig cfg) {
    cfg.method = m;
    switch (m) {
        case SubspaceMethod::TsvM: return tsv_merge(base, taus, cfg);
        case SubspaceMethod::BoostedTsvM: return boosted_tsv_merge(base, taus, cfg);
        case SubspaceMethod::IsoC: return iso_c(base, taus, cfg);
        case SubspaceMethod::IsoCts: return iso_cts(base, taus, cfg);
    }
    throw std::logic_error("unreachable");
}

constexpr SubspaceMethod kAll[] = {SubspaceMethod::TsvM, SubspaceMethod::BoostedTsvM, SubspaceMethod::IsoC,
                                   SubspaceMethod::IsoCts};

// Two disjoint rank-1 task vectors 2 e1 e1^T and 3 e2 e2^T on a 4 x 4 zero base.
struct Disjoint {
    Checkpoint base = matrix_model(Matrix::Zero(4, 4));
    std::vector<TaskVector> taus;
    Disjoint() {
        Matrix a = Matrix::Zero(4, 4), b = Matrix::Zero(4, 4);
        a(0, 0) = 2.0;
        b(1, 1) = 3.0;
        taus.push_back(compute_task_vector(matrix_model(a), base, "a"));
        taus.push_back(compute_task_vector(matrix_model(b), base, "b"));
    }
};

}  // namespace

TEST_CASE("defaults") {
    for (SubspaceMethod m : kAll) {
        const auto cfg = config(m);
        CHECK(cfg.beta == 0.3);
        CHECK_FALSE(cfg.rank_fraction.has_value());
        CHECK(cfg.ns_iterations == 5);
        CHECK(cfg.ns_schedule == NsSchedule::Quintic);
        CHECK(cfg.orthogonalizer == Orthogonalizer::NewtonSchulz);
        CHECK(cfg.epsilon == 1e-12);
        CHECK(cfg.lambda == 1.0);
        CHECK(cfg.common_fraction == 0.5);
    }
    auto bad = config(SubspaceMethod::BoostedTsvM);
    bad.beta = 1.5;
    CHECK_THROWS_AS(validate(bad), InvalidParameter);
    bad = config(SubspaceMethod::TsvM);
    bad.rank_fraction = 0.0;
    CHECK_THROWS_AS(validate(bad), InvalidParameter);
    bad = config(SubspaceMethod::TsvM);
    bad.ns_iterations = 0;
    CHECK_THROWS_AS(validate(bad), InvalidParameter);
}

TEST_CASE("per-task rank defaults to 1 / T") {
    const auto cfg = config(SubspaceMethod::TsvM);
    CHECK(subspace::per_task_rank(64, 4, cfg) == 16);
    CHECK(subspace::per_task_rank(10, 3, cfg) == 3);
    CHECK(subspace::per_task_rank(3, 4, cfg) == 0);
    auto explicit_cfg = cfg;
    explicit_cfg.rank_fraction = 0.5;
    CHECK(subspace::per_task_rank(8, 2, explicit_cfg) == 4);
    CHECK_THROWS_AS(subspace::per_task_rank(8, 3, explicit_cfg), InvalidParameter);
}

TEST_CASE("single task at full rank reproduces the fine-tuned model") {
    std::mt19937_64 rng(41);
    for (int trial = 0; trial < 20; ++trial) {
        const auto base = random_model(rng);
        const auto tuned = perturbed(base, rng, 0.5);
        const std::vector<TaskVector> one{compute_task_vector(tuned, base, "t")};
        for (auto orth : {Orthogonalizer::NewtonSchulz, Orthogonalizer::Procrustes}) {
            auto cfg = config(SubspaceMethod::TsvM);
            cfg.rank_fraction = 1.0;
            cfg.orthogonalizer = orth;
            CHECK(max_tensor_rel_diff(tsv_merge(base, one, cfg).model, tuned) < 1e-4);
        }
    }
}

TEST_CASE("disjoint rank-1 tasks merge to their sum") {
    const Disjoint d;
    Matrix want = Matrix::Zero(4, 4);
    want(0, 0) = 2.0;
    want(1, 1) = 3.0;
    for (auto orth : {Orthogonalizer::NewtonSchulz, Orthogonalizer::Procrustes}) {
        auto cfg = config(SubspaceMethod::TsvM);
        cfg.rank_fraction = 0.5;
        cfg.orthogonalizer = orth;
        const auto r = tsv_merge(d.base, d.taus, cfg);
        CHECK((merged_w(r) - want).cwiseAbs().maxCoeff() < 1e-4);
        REQUIRE(r.report.per_tensor.size() == 1);
        CHECK(r.report.per_tensor[0].retained_rank == 2);
    }
}

TEST_CASE("zero task vectors give the base exactly") {
    std::mt19937_64 rng(42);
    const auto base = random_model(rng);
    const std::vector<TaskVector> zero{compute_task_vector(base, base, "a"), compute_task_vector(base, base, "b")};
    for (SubspaceMethod m : kAll) CHECK(values_equal(run(m, base, zero, config(m)).model, base));
}

TEST_CASE("boosting at beta = 1 is bit-identical to tsv") {
    std::mt19937_64 rng(43);
    const auto base = random_model(rng);
    std::vector<TaskVector> taus;
    for (int t = 0; t < 3; ++t) taus.push_back(compute_task_vector(perturbed(base, rng, 0.3), base, "t"));
    auto cfg = config(SubspaceMethod::BoostedTsvM);
    cfg.beta = 1.0;
    const auto boosted = boosted_tsv_merge(base, taus, cfg);
    const auto plain = tsv_merge(base, taus);
    CHECK(serialize_checkpoint(boosted.model) == serialize_checkpoint(plain.model));
}

TEST_CASE("small beta lifts every retained value to the task's largest") {
    std::mt19937_64 rng(44);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<Matrix> taus;
        for (int t = 0; t < 3; ++t) taus.push_back(low_rank(24, 18, 6, rng));
        auto cfg = config(SubspaceMethod::BoostedTsvM);
        cfg.beta = 1e-9;
        const auto boosted = subspace::tsv(taus, cfg);
        CHECK(boosted.s_star == std::vector<std::int64_t>{1, 1, 1});
        cfg.method = SubspaceMethod::TsvM;
        const auto plain = subspace::tsv(taus, cfg);
        CHECK(linalg::stable_rank(boosted.merged) >= linalg::stable_rank(plain.merged) - 1e-9);

        // Reference: each truncated spectrum becomes constant at its maximum.
        const Index k = subspace::per_task_rank(18, 3, cfg);
        std::vector<linalg::TruncatedSvd> parts;
        for (const auto& t : taus) {
            auto p = linalg::truncate_to(linalg::svd(t), k);
            p.sigma.setConstant(p.sigma[0]);
            parts.push_back(std::move(p));
        }
        const auto cat = linalg::block_concat(parts);
        const Matrix ref = linalg::newton_schulz_orthogonalize(cat.u_cat, 5, linalg::quintic_schedule()) *
                           cat.sigma_block.asDiagonal() *
                           linalg::newton_schulz_orthogonalize(cat.v_cat_t.transpose(), 5, linalg::quintic_schedule())
                               .transpose();
        CHECK((boosted.merged - ref).norm() <= 1e-10 * ref.norm());
    }
}

TEST_CASE("merged norm grows as beta decreases") {
    std::mt19937_64 rng(45);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<Matrix> taus;
        for (int t = 0; t < 2; ++t) {
            const auto s = linalg::svd(random_matrix(20, 20, rng));
            Eigen::VectorXd decay(20);
            for (Index i = 0; i < 20; ++i) decay[i] = std::pow(0.6, static_cast<double>(i));
            taus.push_back(s.u * decay.asDiagonal() * s.v_t);
        }
        auto cfg = config(SubspaceMethod::BoostedTsvM);
        double prev = 0.0;
        for (double beta : {1.0, 0.8, 0.6, 0.3, 0.1, 0.0}) {
            cfg.beta = beta;
            const auto r = subspace::tsv(taus, cfg);
            const double n = r.merged.norm();
            CHECK(n >= prev * (1.0 - 1e-12));
            prev = n;
            REQUIRE(r.boost_energy_ratio.has_value());
            CHECK(*r.boost_energy_ratio >= 1.0);
            for (auto s : r.s_star) CHECK(s >= 1);
        }
    }
}

TEST_CASE("merged rank is bounded by the retained directions") {
    std::mt19937_64 rng(46);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<Matrix> taus;
        for (int t = 0; t < 4; ++t) taus.push_back(random_matrix(30, 22, rng));
        auto cfg = config(SubspaceMethod::TsvM);
        cfg.rank_fraction = 0.1;
        const auto r = subspace::tsv(taus, cfg);
        CHECK(r.retained_rank == 8);
        const auto s = linalg::svd(r.merged);
        Index rank = 0;
        for (Index i = 0; i < s.sigma.size(); ++i) rank += s.sigma[i] > 1e-9 * s.sigma[0];
        CHECK(rank <= r.retained_rank);

        cfg.method = SubspaceMethod::IsoCts;
        const auto c = subspace::iso_cts(taus, cfg);
        const auto cs = linalg::svd(c.merged);
        Index crank = 0;
        for (Index i = 0; i < cs.sigma.size(); ++i) crank += cs.sigma[i] > 1e-9 * cs.sigma[0];
        CHECK(crank <= c.retained_rank);
    }
}

TEST_CASE("iso-c flattens the spectrum of the summed task matrix") {
    const Checkpoint base = matrix_model(Matrix::Zero(2, 2));
    Matrix a = Matrix::Zero(2, 2);
    a(0, 0) = 4;
    a(1, 1) = 2;
    const std::vector<TaskVector> one{compute_task_vector(matrix_model(a), base, "a")};
    const Matrix out = merged_w(iso_c(base, one));
    CHECK((out - 3.0 * Matrix::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-12);

    std::mt19937_64 rng(47);
    Eigen::HouseholderQR<Matrix> qr(random_matrix(5, 5, rng));
    const Matrix q = qr.householderQ();
    const std::vector<Matrix> split{0.75 * q, 1.75 * q};
    CHECK((subspace::iso_c(split, config(SubspaceMethod::IsoC)).merged - 2.5 * q).norm() < 1e-12);
}

TEST_CASE("iso-cts reduces to iso-c with one task and a full common share") {
    std::mt19937_64 rng(48);
    for (int trial = 0; trial < 10; ++trial) {
        const std::vector<Matrix> one{random_matrix(12, 9, rng)};
        auto cfg = config(SubspaceMethod::IsoCts);
        cfg.common_fraction = 1.0;
        const auto cts = subspace::iso_cts(one, cfg);
        const auto c = subspace::iso_c(one, cfg);
        CHECK((cts.merged - c.merged).norm() <= 1e-4 * c.merged.norm());
    }
}

TEST_CASE("iso-cts keeps both disjoint task directions") {
    Matrix a = Matrix::Zero(4, 4), b = Matrix::Zero(4, 4);
    a(0, 0) = 2.0;
    b(1, 1) = 3.0;
    const std::vector<Matrix> taus{a, b};
    const auto r = subspace::iso_cts(taus, config(SubspaceMethod::IsoCts));
    const Matrix basis = linalg::orthonormal_basis(r.merged);
    for (Index j = 0; j < 2; ++j) {
        const Matrix e = Matrix::Identity(4, 4).col(j);
        CHECK(linalg::principal_angles(basis, e).maxCoeff() < 1e-3);
    }
}

TEST_CASE("subspace methods are invariant to task order") {
    std::mt19937_64 rng(49);
    const auto base = random_model(rng, DType::F64);
    std::vector<TaskVector> taus;
    for (int t = 0; t < 3; ++t) {
        taus.push_back(compute_task_vector(perturbed(base, rng, 0.3), base, "t" + std::to_string(t)));
    }
    const std::vector<TaskVector> shuffled{taus[1], taus[2], taus[0]};
    for (SubspaceMethod m : kAll) {
        CHECK(max_tensor_rel_diff(run(m, base, taus, config(m)).model, run(m, base, shuffled, config(m)).model) <
              1e-10);
    }
}

TEST_CASE("too many directions for the matrix is rejected") {
    std::mt19937_64 rng(50);
    const std::vector<Matrix> taus{random_matrix(6, 4, rng), random_matrix(6, 4, rng), random_matrix(6, 4, rng)};
    auto cfg = config(SubspaceMethod::TsvM);
    cfg.rank_fraction = 0.5;
    CHECK_THROWS_AS(subspace::tsv(taus, cfg), InvalidParameter);
    auto cts = config(SubspaceMethod::IsoCts);
    cts.common_fraction = 0.2;
    const std::vector<Matrix> two{random_matrix(3, 3, rng), random_matrix(3, 3, rng)};
    CHECK_NOTHROW(subspace::iso_cts(two, cts));
}

TEST_CASE("tensors too small for the task count fall back with a warning") {
    std::mt19937_64 rng(51);
    Checkpoint base;
    base.add(tensor("narrow", DType::F64, {2, 6}, random_values(12, rng)));
    base.add(tensor("bias", DType::F64, {6}, random_values(6, rng)));
    std::vector<TaskVector> taus;
    for (int t = 0; t < 3; ++t) taus.push_back(compute_task_vector(perturbed(base, rng, 0.1), base, "t"));
    const auto r = tsv_merge(base, taus);
    CHECK(r.report.fallback_count() == 2);
    CHECK_FALSE(r.report.warnings.empty());
    // Fallback is base + lambda * mean(deltas).
    const auto ta = task_arithmetic(base, taus, 1.0 / 3.0);
    CHECK(max_tensor_rel_diff(r.model, ta.model) < 1e-12);
}

TEST_CASE("procrustes failures surface with a newton-schulz hint") {
    std::mt19937_64 rng(52);
    // Nearly parallel leading directions make the concatenated U singular.
    const Matrix a = low_rank(10, 10, 1, rng);
    Matrix b = a;
    b(0, 0) += 1e-13;
    const Checkpoint base = matrix_model(Matrix::Zero(10, 10));
    const std::vector<TaskVector> taus{compute_task_vector(matrix_model(a), base, "a"),
                                       compute_task_vector(matrix_model(b), base, "b")};
    auto cfg = config(SubspaceMethod::TsvM);
    cfg.rank_fraction = 0.1;
    cfg.orthogonalizer = Orthogonalizer::Procrustes;
    try {
        tsv_merge(base, taus, cfg);
        FAIL("expected IllConditioned");
    } catch (const IllConditioned& e) {
        CHECK(std::string(e.what()).find("newton_schulz") != std::string::npos);
    }
    cfg.orthogonalizer = Orthogonalizer::NewtonSchulz;
    const auto ok = tsv_merge(base, taus, cfg);
    CHECK(merged_w(ok).allFinite());
}

TEST_CASE("reports carry rank, energy and whitening residuals") {
    std::mt19937_64 rng(53);
    const auto base = random_model(rng, DType::F64);
    std::vector<TaskVector> taus;
    for (int t = 0; t < 2; ++t) taus.push_back(compute_task_vector(perturbed(base, rng, 0.3), base, "t"));
    const auto r = boosted_tsv_merge(base, taus);
    CHECK(r.report.method == "boosted_tsvm");
    for (const auto& rec : r.report.per_tensor) {
        if (rec.handling != "subspace") continue;
        REQUIRE(rec.retained_rank.has_value());
        REQUIRE(rec.energy_captured.has_value());
        CHECK(*rec.energy_captured > 0.0);
        CHECK(*rec.energy_captured <= 1.0 + 1e-12);
        REQUIRE(rec.ortho_residual.has_value());
        CHECK(rec.s_star.size() == 2);
        REQUIRE(rec.boost_energy_ratio.has_value());
        CHECK(*rec.boost_energy_ratio >= 1.0);
        CHECK(rec.iterations == 5);
    }
    CHECK(r.report.subspace_count() == 3);
}
