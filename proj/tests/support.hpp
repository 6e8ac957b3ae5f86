// Copyright (c) 2026, The ckptmerge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Generators and reference implementations shared by the test binaries. The
// references are written independently of the library code they check.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ckptmerge/checkpoint.hpp"
#include "ckptmerge/taskvec.hpp"

namespace testsupport {

using ckptmerge::Checkpoint;
using ckptmerge::DType;
using ckptmerge::Shape;
using ckptmerge::TensorData;
using Matrix = Eigen::MatrixXd;

inline std::vector<double> random_values(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> d(0.0, scale);
    std::vector<double> v(n);
    for (auto& x : v) x = d(rng);
    return v;
}

inline Matrix random_matrix(Eigen::Index m, Eigen::Index n, std::mt19937_64& rng) {
    std::normal_distribution<double> d(0.0, 1.0);
    Matrix a(m, n);
    for (Eigen::Index j = 0; j < n; ++j) {
        for (Eigen::Index i = 0; i < m; ++i) a(i, j) = d(rng);
    }
    return a;
}

inline std::size_t count_of(const Shape& s) {
    std::size_t n = 1;
    for (auto d : s) n *= static_cast<std::size_t>(d);
    return n;
}

inline TensorData tensor(const std::string& name, DType dtype, Shape shape, const std::vector<double>& values) {
    return TensorData::from_values(name, dtype, std::move(shape), values);
}

inline TensorData tensor_from_matrix(const std::string& name, DType dtype, const Matrix& m) {
    std::vector<double> v;
    v.reserve(static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) v.push_back(m(i, j));
    }
    return tensor(name, dtype, {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())}, v);
}

inline Matrix matrix_of(const TensorData& t) {
    const auto v = t.to_double();
    const auto& s = t.shape();
    const auto rows = static_cast<Eigen::Index>(s.at(0));
    const auto cols = static_cast<Eigen::Index>(v.size()) / std::max<Eigen::Index>(rows, 1);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = v[static_cast<std::size_t>(i * cols + j)];
    }
    return m;
}

/// A small model: two matrices, a folded 3-D tensor, a bias vector and a
/// scalar.
inline Checkpoint random_model(std::mt19937_64& rng, DType dtype = DType::F32, double scale = 1.0) {
    Checkpoint c;
    const std::vector<std::pair<std::string, Shape>> layout = {
        {"layers.0.attn.weight", {12, 8}}, {"layers.0.attn.bias", {12}}, {"layers.1.mlp.weight", {6, 10}},
        {"conv.weight", {4, 3, 2}},       {"scale", {}},
    };
    for (const auto& [name, shape] : layout) {
        c.add(tensor(name, dtype, shape, random_values(count_of(shape), rng, scale)));
    }
    c.metadata()["format"] = "test";
    return c;
}

/// base + delta with deltas drawn at `scale`.
inline Checkpoint perturbed(const Checkpoint& base, std::mt19937_64& rng, double scale) {
    Checkpoint c;
    for (const auto& [name, t] : base.tensors()) {
        auto v = t.to_double();
        const auto d = random_values(v.size(), rng, scale);
        for (std::size_t i = 0; i < v.size(); ++i) v[i] += d[i];
        c.add(tensor(name, t.dtype(), t.shape(), v));
    }
    c.metadata() = base.metadata();
    return c;
}

inline double rel_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (a[i] - b[i]) * (a[i] - b[i]);
        den += b[i] * b[i];
    }
    return den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);
}

inline double max_tensor_rel_diff(const Checkpoint& a, const Checkpoint& b) {
    double worst = 0.0;
    for (const auto& [name, t] : a.tensors()) worst = std::max(worst, rel_diff(t.to_double(), b.at(name).to_double()));
    return worst;
}

inline bool values_equal(const Checkpoint& a, const Checkpoint& b) {
    if (a.size() != b.size()) return false;
    for (const auto& [name, t] : a.tensors()) {
        const auto* o = b.find(name);
        if (!o || o->shape() != t.shape() || o->dtype() != t.dtype() || o->to_double() != t.to_double()) return false;
    }
    return true;
}

/// Polar factor from the eigendecomposition of A^T A: A (A^T A)^(-1/2).
inline Matrix polar_oracle(const Matrix& a) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(a.transpose() * a);
    const Eigen::VectorXd inv_sqrt = es.eigenvalues().array().sqrt().inverse();
    return a * es.eigenvectors() * inv_sqrt.asDiagonal() * es.eigenvectors().transpose();
}

/// Singular values from the eigenvalues of A^T A, descending.
inline std::vector<double> singular_values_oracle(const Matrix& a) {
    const Matrix g = a.cols() <= a.rows() ? Matrix(a.transpose() * a) : Matrix(a * a.transpose());
    Eigen::SelfAdjointEigenSolver<Matrix> es(g);
    std::vector<double> s;
    for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) s.push_back(std::sqrt(std::max(0.0, es.eigenvalues()[i])));
    std::sort(s.rbegin(), s.rend());
    return s;
}

/// Boost reference with a plain running sum: the floor is sigma[s-1] for the
/// smallest s whose prefix sum reaches beta * (total + eps).
inline std::vector<double> boost_oracle(const std::vector<double>& sigma, double beta, double eps = 1e-12) {
    if (beta >= 1.0) return sigma;
    double total = 0.0;
    for (double v : sigma) total += v;
    std::size_t s = sigma.size();
    double prefix = 0.0;
    for (std::size_t i = 0; i < sigma.size(); ++i) {
        prefix += sigma[i];
        if (prefix / (total + eps) >= beta) {
            s = i + 1;
            break;
        }
    }
    std::vector<double> out(sigma);
    for (auto& v : out) v = std::max(v, sigma[s - 1]);
    return out;
}

/// Random descending non-negative spectrum of length 1..max_len.
inline std::vector<double> random_spectrum(std::mt19937_64& rng, std::size_t max_len = 16) {
    std::uniform_int_distribution<std::size_t> len(1, max_len);
    std::uniform_real_distribution<double> u(0.0, 10.0);
    std::vector<double> s(len(rng));
    for (auto& v : s) v = u(rng);
    std::sort(s.rbegin(), s.rend());
    return s;
}

/// Temporary directory removed on destruction.
class TempDir {
public:
    TempDir() {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / ("ckptmerge-test-" + std::to_string(rd()) + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

}  // namespace testsupport
