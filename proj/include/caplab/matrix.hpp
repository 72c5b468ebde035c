#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "caplab/errors.hpp"
#include "caplab/rng.hpp"

namespace caplab {
namespace numkit {

/// Dense row-major matrix of 64-bit reals. The only tensor type in the
/// library; vectors are 1xN or Nx1 as convenient.
struct DenseMatrix {
    std::size_t rows{0};
    std::size_t cols{0};
    std::vector<double> data;

    DenseMatrix() = default;
    DenseMatrix(std::size_t r, std::size_t c, double fill = 0.0)
        : rows(r), cols(c), data(r * c, fill) {}

    static DenseMatrix identity(std::size_t n) {
        DenseMatrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m.at(i, i) = 1.0;
        return m;
    }

    static DenseMatrix gaussian(std::size_t r, std::size_t c, double stddev, Rng& rng) {
        DenseMatrix m(r, c);
        for (auto& x : m.data) x = rng.normal(0.0, stddev);
        return m;
    }

    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const {
        return {data.data() + r * cols, cols};
    }

    std::size_t size() const { return data.size(); }
    bool same_shape(const DenseMatrix& o) const {
        return rows == o.rows && cols == o.cols;
    }
    std::string shape_str() const {
        return std::to_string(rows) + "x" + std::to_string(cols);
    }

    void fill(double v) { data.assign(data.size(), v); }

    bool operator==(const DenseMatrix& o) const {
        return rows == o.rows && cols == o.cols && data == o.data;
    }
};

inline bool all_finite(const DenseMatrix& m) {
    for (double v : m.data)
        if (!std::isfinite(v)) return false;
    return true;
}

inline bool all_finite(std::span<const double> v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

inline void require_same_shape(const DenseMatrix& a, const DenseMatrix& b,
                               const char* what) {
    if (!a.same_shape(b))
        throw DimensionError(std::string(what) + ": shape " + a.shape_str() +
                             " vs " + b.shape_str());
}

/// C = A * B. Plain ikj loops; at desk scale this is fast enough and the
/// summation order is fixed, which the determinism contract relies on.
inline DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.cols != b.rows)
        throw DimensionError("matmul: " + a.shape_str() + " * " + b.shape_str());
    DenseMatrix c(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* arow = a.data.data() + i * a.cols;
        double* crow = c.data.data() + i * c.cols;
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = arow[k];
            if (aik == 0.0) continue;
            const double* brow = b.data.data() + k * b.cols;
            for (std::size_t j = 0; j < b.cols; ++j) crow[j] += aik * brow[j];
        }
    }
    return c;
}

/// C = A^T * B  (dW = X^T * dY in affine backward).
inline DenseMatrix matmul_at_b(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.rows != b.rows)
        throw DimensionError("matmul_at_b: " + a.shape_str() + " vs " + b.shape_str());
    DenseMatrix c(a.cols, b.cols);
    for (std::size_t k = 0; k < a.rows; ++k) {
        const double* arow = a.data.data() + k * a.cols;
        const double* brow = b.data.data() + k * b.cols;
        for (std::size_t i = 0; i < a.cols; ++i) {
            const double aki = arow[i];
            if (aki == 0.0) continue;
            double* crow = c.data.data() + i * c.cols;
            for (std::size_t j = 0; j < b.cols; ++j) crow[j] += aki * brow[j];
        }
    }
    return c;
}

/// C = A * B^T  (dX = dY * W^T in affine backward).
inline DenseMatrix matmul_a_bt(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.cols != b.cols)
        throw DimensionError("matmul_a_bt: " + a.shape_str() + " vs " + b.shape_str());
    DenseMatrix c(a.rows, b.rows);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* arow = a.data.data() + i * a.cols;
        double* crow = c.data.data() + i * c.cols;
        for (std::size_t j = 0; j < b.rows; ++j) {
            const double* brow = b.data.data() + j * b.cols;
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols; ++k) s += arow[k] * brow[k];
            crow[j] = s;
        }
    }
    return c;
}

inline void add_inplace(DenseMatrix& a, const DenseMatrix& b) {
    require_same_shape(a, b, "add_inplace");
    for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

inline void scale_inplace(DenseMatrix& a, double s) {
    for (auto& v : a.data) v *= s;
}

/// Column sums as a 1 x cols matrix (bias gradient).
inline DenseMatrix column_sums(const DenseMatrix& a) {
    DenseMatrix s(1, a.cols);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < a.cols; ++j) s.data[j] += a.at(i, j);
    return s;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm2(std::span<const double> v) { return std::sqrt(dot(v, v)); }

inline constexpr double kNormalizeEpsilon = 1e-12;

/// v / ||v||. Vectors at or below the epsilon floor are rejected rather than
/// clamped so that collapsed embeddings surface as errors.
inline std::vector<double> l2_normalize(std::span<const double> v) {
    const double n = norm2(v);
    if (!(n > kNormalizeEpsilon))
        throw DegenerateVectorError("l2_normalize: vector norm " + std::to_string(n) +
                                    " is at or below " + std::to_string(kNormalizeEpsilon));
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / n;
    return out;
}

/// Backward rule for y = v/||v||: dv = (g - y (y.g)) / ||v||.
/// `normalized` is the forward output, `norm` the cached input norm.
inline std::vector<double> l2_normalize_backward(std::span<const double> normalized,
                                                 double norm,
                                                 std::span<const double> grad_out) {
    const double yg = dot(normalized, grad_out);
    std::vector<double> g(normalized.size());
    for (std::size_t i = 0; i < g.size(); ++i)
        g[i] = (grad_out[i] - normalized[i] * yg) / norm;
    return g;
}

/// Row-wise normalization of a batch of embeddings; norms are returned for
/// the backward pass.
inline DenseMatrix l2_normalize_rows(const DenseMatrix& m, std::vector<double>& norms) {
    DenseMatrix out(m.rows, m.cols);
    norms.resize(m.rows);
    for (std::size_t i = 0; i < m.rows; ++i) {
        const double n = norm2(m.row(i));
        if (!(n > kNormalizeEpsilon))
            throw DegenerateVectorError("l2_normalize_rows: row " + std::to_string(i) +
                                        " has norm " + std::to_string(n));
        norms[i] = n;
        for (std::size_t j = 0; j < m.cols; ++j) out.at(i, j) = m.at(i, j) / n;
    }
    return out;
}

inline DenseMatrix l2_normalize_rows_backward(const DenseMatrix& normalized,
                                              const std::vector<double>& norms,
                                              const DenseMatrix& grad_out) {
    DenseMatrix g(normalized.rows, normalized.cols);
    for (std::size_t i = 0; i < normalized.rows; ++i) {
        const auto row = l2_normalize_backward(normalized.row(i), norms[i], grad_out.row(i));
        for (std::size_t j = 0; j < normalized.cols; ++j) g.at(i, j) = row[j];
    }
    return g;
}

inline std::uint64_t fingerprint(const DenseMatrix& m, std::uint64_t seed = 0) {
    std::uint64_t h = hash_combine(seed, hash_combine(m.rows, m.cols));
    return fnv1a(m.data.data(), m.data.size() * sizeof(double), h ^ 0xcbf29ce484222325ULL);
}

} // namespace numkit
} // namespace caplab
