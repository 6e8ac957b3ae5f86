// Copyright (c) 2026, The ckptmerge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense kernels shared by the subspace merge methods.
#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace ckptmerge::linalg {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;
using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Leading singular triples of a matrix: a ~= u * diag(sigma) * v_t.
struct TruncatedSvd {
    Matrix u;       // m x k, orthonormal columns
    Vector sigma;   // k values, descending, non-negative
    Matrix v_t;     // k x n, orthonormal rows
    Index total_rank = 0;  // min(m, n) of the source matrix

    Index retained_rank() const noexcept { return sigma.size(); }
    Index rows() const noexcept { return u.rows(); }
    Index cols() const noexcept { return v_t.cols(); }
};

/// Thin SVD. The largest-magnitude entry of every column of u is made
/// non-negative (first index wins ties) and v_t follows, so the output is
/// deterministic. Throws NumericalError on non-finite input.
TruncatedSvd svd(const Matrix& a);

/// max(1, floor(rank_fraction * total_rank)), capped at total_rank.
Index truncated_rank(Index total_rank, double rank_fraction);

/// Number of singular values above scale * max(m, n) * machine epsilon, where
/// scale defaults to sigma[0].
Index numerical_rank(const TruncatedSvd& s, std::optional<double> scale = std::nullopt);

/// Keeps the leading triples. Throws InvalidParameter unless 0 < rank_fraction <= 1.
TruncatedSvd truncate(const TruncatedSvd& full, double rank_fraction);
TruncatedSvd truncate_to(const TruncatedSvd& full, Index rank);

struct BoostedSpectrum {
    Vector values;
    Index s_star = 0;  // 1-based index of the clamp value
};

/// Raises every singular value to at least sigma[s*-1], where s* is the
/// smallest prefix length whose share of the spectrum sum, prefix / (total +
/// epsilon), reaches beta. When no prefix qualifies, and always at beta = 1,
/// s* is the spectrum length and the values are returned unchanged.
/// Throws InvalidParameter for beta outside [0, 1] or epsilon <= 0 and
/// EmptyInput for an empty spectrum.
BoostedSpectrum boost_singular_values(const Vector& sigma, double beta, double epsilon = 1e-12);

struct ConcatenatedFactors {
    Matrix u_cat;       // m x K
    Vector sigma_block; // K, block-ordered by task
    Matrix v_cat_t;     // K x n
    std::vector<std::pair<Index, Index>> task_offsets;  // half-open column ranges

    Index width() const noexcept { return sigma_block.size(); }
};

/// Throws EmptyInput for no parts and StructureMismatch when m or n differ.
ConcatenatedFactors block_concat(std::span<const TruncatedSvd> parts);

/// Polar factor of a (m x K, K <= m): the closest matrix with orthonormal
/// columns in Frobenius norm. Throws IllConditioned when
/// sigma_min / sigma_max < min_condition and InvalidParameter when K > m.
Matrix procrustes_orthogonalize(const Matrix& a, double min_condition = 1e-8);

struct NsCoefficients {
    double a;
    double b;
    double c;
};

/// Five-step quintic schedule: (4.0848, -6.8946, 2.9270), (3.9505, -6.3029,
/// 2.6377), (3.7418, -5.5913, 2.3037), (2.8769, -3.1427, 1.2046),
/// (2.8366, -3.0525, 1.2012).
std::span<const NsCoefficients> quintic_schedule();
/// Single fixed triple (3.4445, -4.7750, 2.0315).
std::span<const NsCoefficients> simple_schedule();

/// Quintic Newton-Schulz iteration towards the polar factor:
///   X <- a X + b (X X^T) X + c (X X^T)^2 X,   X_0 = input / ||input||_F.
/// Iteration i uses schedule[i], with the last entry repeating once the
/// schedule runs out. The smaller Gram matrix is used, which is the same map
/// as transposing wide inputs first. When `residual_trace` is given it
/// receives ||X^T X - I||_F (or ||X X^T - I||_F for wide inputs) before the
/// first and after every iteration. Throws NumericalError for a zero or
/// non-finite input and InvalidParameter for an empty schedule.
Matrix newton_schulz_orthogonalize(const Matrix& a, int iterations, std::span<const NsCoefficients> schedule,
                                   std::vector<double>* residual_trace = nullptr);

/// u_orth * diag(sigma_block) * v_orth_t. Throws StructureMismatch.
Matrix reconstruct(const Matrix& u_orth, const Vector& sigma_block, const Matrix& v_orth_t);

/// ||X^T X - I||_F over the smaller side.
double orthogonality_residual(const Matrix& x);

/// ||A||_F^2 / sigma_max^2, or 0 for the zero matrix.
double stable_rank(const Matrix& a);

/// Orthonormal basis of the column span (columns with sigma below
/// rel_tol * sigma_max are dropped).
Matrix orthonormal_basis(const Matrix& a, double rel_tol = 1e-10);

/// Principal angles (radians, ascending) between the column spans of a and b.
Vector principal_angles(const Matrix& a, const Matrix& b);

}  // namespace ckptmerge::linalg
