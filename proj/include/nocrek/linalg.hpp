#pragma once
// Small dense vector/matrix helpers. Everything is double precision and
// row-major; sizes here are tiny (d_model <= a few hundred), so plain loops
// are all we need.

#include <cmath>
#include <cstddef>
#include <vector>

#include "nocrek/errors.hpp"

namespace nocrek {

using Vec = std::vector<double>;

struct Mat {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> a;

    Mat() = default;
    Mat(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), a(r * c, fill) {}

    double& operator()(std::size_t r, std::size_t c) { return a[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return a[r * cols + c]; }
    double* row(std::size_t r) { return a.data() + r * cols; }
    const double* row(std::size_t r) const { return a.data() + r * cols; }
    std::size_t size() const { return a.size(); }

    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
};

inline double dot(const Vec& x, const Vec& y) {
    if (x.size() != y.size())
        throw DimensionMismatchError("dot: vector sizes differ");
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
    return s;
}

inline double l2_norm(const Vec& x) {
    double s = 0.0;
    for (double v : x) s += v * v;
    return std::sqrt(s);
}

inline bool is_zero(const Vec& x) {
    for (double v : x)
        if (v != 0.0) return false;
    return true;
}

inline void normalize(Vec& x) {
    const double n = l2_norm(x);
    if (n > 0.0)
        for (double& v : x) v /= n;
}

inline bool all_finite(const Mat& m) {
    for (double v : m.a)
        if (!std::isfinite(v)) return false;
    return true;
}

// C = A * B
inline void matmul(const Mat& A, const Mat& B, Mat& C) {
    C = Mat(A.rows, B.cols);
    for (std::size_t i = 0; i < A.rows; ++i) {
        const double* arow = A.row(i);
        double* crow = C.row(i);
        for (std::size_t k = 0; k < A.cols; ++k) {
            const double aik = arow[k];
            if (aik == 0.0) continue;
            const double* brow = B.row(k);
            for (std::size_t j = 0; j < B.cols; ++j) crow[j] += aik * brow[j];
        }
    }
}

// C = A * B^T
inline void matmul_nt(const Mat& A, const Mat& B, Mat& C) {
    C = Mat(A.rows, B.rows);
    for (std::size_t i = 0; i < A.rows; ++i) {
        const double* arow = A.row(i);
        for (std::size_t j = 0; j < B.rows; ++j) {
            const double* brow = B.row(j);
            double s = 0.0;
            for (std::size_t k = 0; k < A.cols; ++k) s += arow[k] * brow[k];
            C(i, j) = s;
        }
    }
}

// C = A^T * B
inline void matmul_tn(const Mat& A, const Mat& B, Mat& C) {
    C = Mat(A.cols, B.cols);
    for (std::size_t k = 0; k < A.rows; ++k) {
        const double* arow = A.row(k);
        const double* brow = B.row(k);
        for (std::size_t i = 0; i < A.cols; ++i) {
            const double aki = arow[i];
            if (aki == 0.0) continue;
            double* crow = C.row(i);
            for (std::size_t j = 0; j < B.cols; ++j) crow[j] += aki * brow[j];
        }
    }
}

inline void add_inplace(Mat& dst, const Mat& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst.a[i] += src.a[i];
}

} // namespace nocrek
