// Copyright (c) 2026, The ckptmerge Authors
// SPDX-License-Identifier: Apache-2.0
//
#include "ckptmerge/linalg.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include <fmt/core.h>

#include "ckptmerge/errors.hpp"

namespace ckptmerge::linalg {

namespace {

constexpr std::array<NsCoefficients, 5> kQuintic{{
    {4.0848, -6.8946, 2.9270},
    {3.9505, -6.3029, 2.6377},
    {3.7418, -5.5913, 2.3037},
    {2.8769, -3.1427, 1.2046},
    {2.8366, -3.0525, 1.2012},
}};

constexpr std::array<NsCoefficients, 1> kSimple{{{3.4445, -4.7750, 2.0315}}};

void require_finite(const Matrix& a, const char* what) {
    if (!a.allFinite()) throw NumericalError(fmt::format("{}: non-finite entries", what));
}

double gram_residual(const Matrix& x) {
    if (x.rows() >= x.cols()) {
        return (x.transpose() * x - Matrix::Identity(x.cols(), x.cols())).norm();
    }
    return (x * x.transpose() - Matrix::Identity(x.rows(), x.rows())).norm();
}

}  // namespace

TruncatedSvd svd(const Matrix& a) {
    require_finite(a, "svd");
    TruncatedSvd out;
    const Index k = std::min(a.rows(), a.cols());
    out.total_rank = k;
    if (k == 0) {
        out.u = Matrix(a.rows(), 0);
        out.sigma = Vector(0);
        out.v_t = Matrix(0, a.cols());
        return out;
    }
    Eigen::BDCSVD<Matrix> dec(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
    out.u = dec.matrixU();
    out.sigma = dec.singularValues();
    out.v_t = dec.matrixV().transpose();
    for (Index j = 0; j < k; ++j) {
        Index arg = 0;
        double best = -1.0;
        for (Index i = 0; i < out.u.rows(); ++i) {
            const double mag = std::abs(out.u(i, j));
            if (mag > best) {
                best = mag;
                arg = i;
            }
        }
        if (out.u(arg, j) < 0.0) {
            out.u.col(j) *= -1.0;
            out.v_t.row(j) *= -1.0;
        }
    }
    return out;
}

Index truncated_rank(Index total_rank, double rank_fraction) {
    if (!(rank_fraction > 0.0 && rank_fraction <= 1.0)) {
        throw InvalidParameter(fmt::format("rank fraction {} outside (0, 1]", rank_fraction));
    }
    if (total_rank == 0) return 0;
    // The 1e-9 slack keeps fractions such as 1/3 * 3 from flooring to 0.
    const auto k = static_cast<Index>(std::floor(rank_fraction * static_cast<double>(total_rank) + 1e-9));
    return std::clamp<Index>(k, 1, total_rank);
}

Index numerical_rank(const TruncatedSvd& s, std::optional<double> scale) {
    if (s.sigma.size() == 0) return 0;
    const double ref = scale.value_or(s.sigma[0]);
    const double tol = ref * static_cast<double>(std::max(s.rows(), s.cols())) * std::numeric_limits<double>::epsilon();
    Index r = 0;
    while (r < s.sigma.size() && s.sigma[r] > tol) ++r;
    return r;
}

TruncatedSvd truncate_to(const TruncatedSvd& full, Index rank) {
    rank = std::clamp<Index>(rank, 0, full.retained_rank());
    TruncatedSvd out;
    out.u = full.u.leftCols(rank);
    out.sigma = full.sigma.head(rank);
    out.v_t = full.v_t.topRows(rank);
    out.total_rank = full.total_rank;
    return out;
}

TruncatedSvd truncate(const TruncatedSvd& full, double rank_fraction) {
    return truncate_to(full, truncated_rank(full.total_rank, rank_fraction));
}

BoostedSpectrum boost_singular_values(const Vector& sigma, double beta, double epsilon) {
    if (!(beta >= 0.0 && beta <= 1.0)) throw InvalidParameter(fmt::format("beta {} outside [0, 1]", beta));
    if (!(epsilon > 0.0)) throw InvalidParameter(fmt::format("epsilon {} must be positive", epsilon));
    if (sigma.size() == 0) throw EmptyInput("boost_singular_values: empty spectrum");

    const Index r = sigma.size();
    Index s_star = r;
    if (beta < 1.0) {
        const double denom = sigma.sum() + epsilon;
        double prefix = 0.0;
        for (Index s = 0; s < r; ++s) {
            prefix += sigma[s];
            if (prefix / denom >= beta) {
                s_star = s + 1;
                break;
            }
        }
    }
    BoostedSpectrum out;
    out.s_star = s_star;
    out.values = sigma.cwiseMax(sigma[s_star - 1]);
    return out;
}

ConcatenatedFactors block_concat(std::span<const TruncatedSvd> parts) {
    if (parts.empty()) throw EmptyInput("block_concat: no factors");
    const Index m = parts.front().rows();
    const Index n = parts.front().cols();
    Index width = 0;
    for (const auto& p : parts) {
        if (p.rows() != m || p.cols() != n) {
            throw StructureMismatch(fmt::format("block_concat: factor of {}x{} among {}x{}", p.rows(), p.cols(), m, n));
        }
        width += p.retained_rank();
    }
    ConcatenatedFactors out;
    out.u_cat.resize(m, width);
    out.sigma_block.resize(width);
    out.v_cat_t.resize(width, n);
    Index offset = 0;
    for (const auto& p : parts) {
        const Index k = p.retained_rank();
        out.u_cat.middleCols(offset, k) = p.u;
        out.sigma_block.segment(offset, k) = p.sigma;
        out.v_cat_t.middleRows(offset, k) = p.v_t;
        out.task_offsets.emplace_back(offset, offset + k);
        offset += k;
    }
    return out;
}

Matrix procrustes_orthogonalize(const Matrix& a, double min_condition) {
    require_finite(a, "procrustes");
    if (a.cols() > a.rows()) {
        throw InvalidParameter(fmt::format("procrustes: {} columns exceed {} rows", a.cols(), a.rows()));
    }
    if (a.cols() == 0) return a;
    Eigen::BDCSVD<Matrix> dec(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto& s = dec.singularValues();
    const double smax = s[0];
    const double smin = s[s.size() - 1];
    if (!(smax > 0.0) || smin / smax < min_condition) {
        throw IllConditioned(fmt::format(
            "procrustes: condition ratio {:.3g} below {:.3g} for a {}x{} stack; "
            "use the newton_schulz orthogonalizer",
            smax > 0.0 ? smin / smax : 0.0, min_condition, a.rows(), a.cols()));
    }
    return dec.matrixU() * dec.matrixV().transpose();
}

std::span<const NsCoefficients> quintic_schedule() { return kQuintic; }
std::span<const NsCoefficients> simple_schedule() { return kSimple; }

Matrix newton_schulz_orthogonalize(const Matrix& a, int iterations, std::span<const NsCoefficients> schedule,
                                   std::vector<double>* residual_trace) {
    require_finite(a, "newton_schulz");
    if (schedule.empty()) throw InvalidParameter("newton_schulz: empty coefficient schedule");
    if (iterations < 0) throw InvalidParameter("newton_schulz: negative iteration count");
    const double norm = a.norm();
    if (!(norm > 0.0)) throw NumericalError("newton_schulz: zero matrix has no polar factor");

    Matrix x = a / norm;
    const bool tall = x.rows() >= x.cols();
    if (residual_trace) residual_trace->assign(1, gram_residual(x));
    for (int i = 0; i < iterations; ++i) {
        const auto& k = schedule[std::min<std::size_t>(static_cast<std::size_t>(i), schedule.size() - 1)];
        if (tall) {
            const Matrix g = x.transpose() * x;
            const Matrix poly = k.b * g + k.c * (g * g);
            x = k.a * x + x * poly;
        } else {
            const Matrix g = x * x.transpose();
            const Matrix poly = k.b * g + k.c * (g * g);
            x = k.a * x + poly * x;
        }
        if (residual_trace) residual_trace->push_back(gram_residual(x));
    }
    return x;
}

Matrix reconstruct(const Matrix& u_orth, const Vector& sigma_block, const Matrix& v_orth_t) {
    if (u_orth.cols() != sigma_block.size() || v_orth_t.rows() != sigma_block.size()) {
        throw StructureMismatch(fmt::format("reconstruct: u {}x{}, sigma {}, v_t {}x{}", u_orth.rows(), u_orth.cols(),
                                            sigma_block.size(), v_orth_t.rows(), v_orth_t.cols()));
    }
    return u_orth * sigma_block.asDiagonal() * v_orth_t;
}

double orthogonality_residual(const Matrix& x) { return gram_residual(x); }

double stable_rank(const Matrix& a) {
    if (a.size() == 0) return 0.0;
    const double fro2 = a.squaredNorm();
    if (fro2 == 0.0) return 0.0;
    Eigen::BDCSVD<Matrix> dec(a);
    const double smax = dec.singularValues()[0];
    return fro2 / (smax * smax);
}

Matrix orthonormal_basis(const Matrix& a, double rel_tol) {
    if (a.size() == 0) return Matrix(a.rows(), 0);
    Eigen::BDCSVD<Matrix> dec(a, Eigen::ComputeThinU);
    const auto& s = dec.singularValues();
    Index r = 0;
    while (r < s.size() && s[r] > rel_tol * s[0]) ++r;
    return dec.matrixU().leftCols(r);
}

Vector principal_angles(const Matrix& a, const Matrix& b) {
    const Matrix qa = orthonormal_basis(a);
    const Matrix qb = orthonormal_basis(b);
    const Index k = std::min(qa.cols(), qb.cols());
    if (k == 0) return Vector(0);
    Eigen::JacobiSVD<Matrix> dec(qa.transpose() * qb);
    Vector angles(k);
    // Cosines come out descending, so the angles ascend.
    for (Index i = 0; i < k; ++i) angles[i] = std::acos(std::clamp(dec.singularValues()[i], -1.0, 1.0));
    return angles;
}

}  // namespace ckptmerge::linalg
