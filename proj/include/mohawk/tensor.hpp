#pragma once

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include <cblas.h>

#include "mohawk/common.hpp"

namespace mohawk {

// Dense row-major f64 array, rank <= 4. The single value carrier for the
// whole library: model parameters, activations, mixer matrices.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<i64> shape_) : shape(std::move(shape_)) {
        data.assign(static_cast<size_t>(numel(shape)), 0.0);
    }
    Tensor(std::vector<i64> shape_, std::vector<double> data_)
        : shape(std::move(shape_)), data(std::move(data_)) {
        check(static_cast<i64>(data.size()) == numel(shape), "Tensor: data/shape mismatch");
    }

    static Tensor zeros(std::vector<i64> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<i64> shape, double v) {
        Tensor t(std::move(shape));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }
    static Tensor scalar(double v) { return Tensor({1}, {v}); }
    static Tensor identity(i64 n) {
        Tensor t({n, n});
        for (i64 i = 0; i < n; ++i) t.at(i, i) = 1.0;
        return t;
    }

    static i64 numel(const std::vector<i64>& s) {
        i64 n = 1;
        for (i64 d : s) {
            check(d >= 0, "Tensor: negative dimension");
            n *= d;
        }
        return n;
    }

    i64 size() const { return static_cast<i64>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    i64 dim(int i) const { return shape[static_cast<size_t>(i)]; }
    bool empty() const { return data.empty(); }

    double* ptr() { return data.data(); }
    const double* ptr() const { return data.data(); }

    double& operator[](i64 i) { return data[static_cast<size_t>(i)]; }
    double operator[](i64 i) const { return data[static_cast<size_t>(i)]; }

    double& at(i64 i) { return data[static_cast<size_t>(i)]; }
    double at(i64 i) const { return data[static_cast<size_t>(i)]; }
    double& at(i64 i, i64 j) { return data[static_cast<size_t>(i * shape[1] + j)]; }
    double at(i64 i, i64 j) const { return data[static_cast<size_t>(i * shape[1] + j)]; }
    double& at(i64 i, i64 j, i64 k) {
        return data[static_cast<size_t>((i * shape[1] + j) * shape[2] + k)];
    }
    double at(i64 i, i64 j, i64 k) const {
        return data[static_cast<size_t>((i * shape[1] + j) * shape[2] + k)];
    }
    double& at(i64 i, i64 j, i64 k, i64 l) {
        return data[static_cast<size_t>(((i * shape[1] + j) * shape[2] + k) * shape[3] + l)];
    }
    double at(i64 i, i64 j, i64 k, i64 l) const {
        return data[static_cast<size_t>(((i * shape[1] + j) * shape[2] + k) * shape[3] + l)];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }
    void zero() { fill(0.0); }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    std::string shape_str() const {
        std::string s = "(";
        for (size_t i = 0; i < shape.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape[i]);
        }
        return s + ")";
    }

    std::vector<i64> shape;
    std::vector<double> data;
};

// ---- elementwise / reductions ----

inline void axpy(double a, const Tensor& x, Tensor& y) {
    check(x.same_shape(y), "axpy: shape mismatch");
    cblas_daxpy(static_cast<int>(x.size()), a, x.ptr(), 1, y.ptr(), 1);
}

inline void scale(Tensor& x, double a) {
    cblas_dscal(static_cast<int>(x.size()), a, x.ptr(), 1);
}

inline double dot(const Tensor& x, const Tensor& y) {
    check(x.size() == y.size(), "dot: size mismatch");
    return cblas_ddot(static_cast<int>(x.size()), x.ptr(), 1, y.ptr(), 1);
}

inline double sum_squares(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data) s += v * v;
    return s;
}

inline double frobenius_norm(const Tensor& x) { return std::sqrt(sum_squares(x)); }

inline double max_abs(const Tensor& x) {
    double m = 0.0;
    for (double v : x.data) m = std::max(m, std::abs(v));
    return m;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    check(a.same_shape(b), "max_abs_diff: shape mismatch");
    double m = 0.0;
    for (i64 i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// ---- matrix products (rank-2 tensors, row-major), backed by BLAS ----

// C = alpha * op(A) @ op(B) + beta * C
inline void matmul_into(Tensor& C, const Tensor& A, const Tensor& B, bool trans_a = false,
                        bool trans_b = false, double alpha = 1.0, double beta = 0.0) {
    check(A.rank() == 2 && B.rank() == 2 && C.rank() == 2, "matmul: rank-2 tensors required");
    i64 m = trans_a ? A.dim(1) : A.dim(0);
    i64 k = trans_a ? A.dim(0) : A.dim(1);
    i64 kb = trans_b ? B.dim(1) : B.dim(0);
    i64 n = trans_b ? B.dim(0) : B.dim(1);
    check(k == kb, "matmul: inner dimension mismatch");
    check(C.dim(0) == m && C.dim(1) == n, "matmul: output shape mismatch");
    if (m == 0 || n == 0) return;
    if (k == 0) {
        if (beta == 0.0)
            C.zero();
        else
            scale(C, beta);
        return;
    }
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
                static_cast<int>(k), alpha, A.ptr(), static_cast<int>(A.dim(1)), B.ptr(),
                static_cast<int>(B.dim(1)), beta, C.ptr(), static_cast<int>(C.dim(1)));
}

inline Tensor matmul(const Tensor& A, const Tensor& B, bool trans_a = false,
                     bool trans_b = false) {
    i64 m = trans_a ? A.dim(1) : A.dim(0);
    i64 n = trans_b ? B.dim(0) : B.dim(1);
    Tensor C({m, n});
    matmul_into(C, A, B, trans_a, trans_b);
    return C;
}

// Raw strided GEMM on row-major buffers: C = alpha * op(A) @ op(B) + beta * C.
inline void gemm_raw(bool trans_a, bool trans_b, i64 m, i64 n, i64 k, double alpha,
                     const double* a, i64 lda, const double* b, i64 ldb, double beta, double* c,
                     i64 ldc) {
    if (m == 0 || n == 0) return;
    if (k == 0) {
        for (i64 i = 0; i < m; ++i)
            for (i64 j = 0; j < n; ++j) c[i * ldc + j] *= beta;
        return;
    }
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
                static_cast<int>(k), alpha, a, static_cast<int>(lda), b, static_cast<int>(ldb),
                beta, c, static_cast<int>(ldc));
}

inline Tensor transpose(const Tensor& A) {
    check(A.rank() == 2, "transpose: rank-2 tensor required");
    Tensor T({A.dim(1), A.dim(0)});
    for (i64 i = 0; i < A.dim(0); ++i)
        for (i64 j = 0; j < A.dim(1); ++j) T.at(j, i) = A.at(i, j);
    return T;
}

}  // namespace mohawk
