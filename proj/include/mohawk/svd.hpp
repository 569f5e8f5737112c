#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "mohawk/tensor.hpp"

namespace mohawk {

// M = U * diag(S) * V^T, economy size: U is m x k, S is k, V is n x k with
// k = min(m, n). S sorted descending, U/V have orthonormal columns.
struct SvdResult {
    Tensor u;
    Tensor s;
    Tensor v;
};

namespace detail {

// One-sided Jacobi on a tall matrix held column-major. Orthogonalizes the
// columns of A by plane rotations, accumulating them into V.
class JacobiWork {
public:
    JacobiWork(const Tensor& M)  // M is m x n with m >= n
        : m_(M.dim(0)), n_(M.dim(1)), a_(static_cast<size_t>(m_ * n_)),
          v_(static_cast<size_t>(n_ * n_), 0.0) {
        for (i64 i = 0; i < m_; ++i)
            for (i64 j = 0; j < n_; ++j) a_[static_cast<size_t>(j * m_ + i)] = M.at(i, j);
        for (i64 j = 0; j < n_; ++j) v_[static_cast<size_t>(j * n_ + j)] = 1.0;
    }

    void run() {
        if (n_ < 2) return;
        const double tol = 1e-14;
        const int max_sweeps = 60;
        std::vector<double> sq(static_cast<size_t>(n_));
        for (int sweep = 0; sweep < max_sweeps; ++sweep) {
            for (i64 j = 0; j < n_; ++j) {
                const double* c = col(j);
                sq[static_cast<size_t>(j)] =
                    cblas_ddot(static_cast<int>(m_), c, 1, c, 1);
            }
            bool rotated = false;
            for (i64 p = 0; p < n_ - 1; ++p) {
                for (i64 q = p + 1; q < n_; ++q) {
                    double app = sq[static_cast<size_t>(p)];
                    double aqq = sq[static_cast<size_t>(q)];
                    double gamma = cblas_ddot(static_cast<int>(m_), col(p), 1, col(q), 1);
                    if (std::abs(gamma) <= tol * std::sqrt(app * aqq)) continue;
                    rotated = true;
                    double zeta = (aqq - app) / (2.0 * gamma);
                    double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                               (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                    double cs = 1.0 / std::sqrt(1.0 + t * t);
                    double sn = cs * t;
                    cblas_drot(static_cast<int>(m_), col(q), 1, col(p), 1, cs, sn);
                    cblas_drot(static_cast<int>(n_), vcol(q), 1, vcol(p), 1, cs, sn);
                    sq[static_cast<size_t>(p)] = app - t * gamma;
                    sq[static_cast<size_t>(q)] = aqq + t * gamma;
                }
            }
            if (!rotated) break;
        }
    }

    // Extracts U (m x n), S (n), V (n x n), singular values descending.
    // Columns with zero norm get an orthonormal completion in U.
    void extract(Tensor& U, Tensor& S, Tensor& V) const {
        std::vector<double> snorm(static_cast<size_t>(n_));
        for (i64 j = 0; j < n_; ++j) {
            const double* c = col(j);
            snorm[static_cast<size_t>(j)] =
                std::sqrt(cblas_ddot(static_cast<int>(m_), c, 1, c, 1));
        }
        std::vector<i64> order(static_cast<size_t>(n_));
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](i64 a, i64 b) {
            return snorm[static_cast<size_t>(a)] > snorm[static_cast<size_t>(b)];
        });

        U = Tensor({m_, n_});
        S = Tensor({n_});
        V = Tensor({n_, n_});
        std::vector<i64> needs_fill;
        for (i64 jj = 0; jj < n_; ++jj) {
            i64 j = order[static_cast<size_t>(jj)];
            double s = snorm[static_cast<size_t>(j)];
            S[jj] = s;
            for (i64 i = 0; i < n_; ++i) V.at(i, jj) = v_[static_cast<size_t>(j * n_ + i)];
            if (s > 0.0) {
                const double* c = col(j);
                for (i64 i = 0; i < m_; ++i) U.at(i, jj) = c[i] / s;
            } else {
                needs_fill.push_back(jj);
            }
        }
        for (i64 jj : needs_fill) fill_orthonormal_column(U, jj);
    }

private:
    const double* col(i64 j) const { return a_.data() + j * m_; }
    double* col(i64 j) { return a_.data() + j * m_; }
    const double* vcol(i64 j) const { return v_.data() + j * n_; }
    double* vcol(i64 j) { return v_.data() + j * n_; }

    // Gram-Schmidt of basis vectors against the existing columns; the first
    // candidate keeping more than half its norm wins, so the choice is
    // deterministic.
    static void fill_orthonormal_column(Tensor& U, i64 jj) {
        i64 m = U.dim(0), n = U.dim(1);
        std::vector<double> cand(static_cast<size_t>(m));
        for (i64 e = 0; e < m; ++e) {
            std::fill(cand.begin(), cand.end(), 0.0);
            cand[static_cast<size_t>(e)] = 1.0;
            for (int pass = 0; pass < 2; ++pass) {
                for (i64 c = 0; c < n; ++c) {
                    if (c == jj) continue;
                    double d = 0.0;
                    bool empty = true;
                    for (i64 i = 0; i < m; ++i) {
                        d += U.at(i, c) * cand[static_cast<size_t>(i)];
                        if (U.at(i, c) != 0.0) empty = false;
                    }
                    if (empty) continue;
                    for (i64 i = 0; i < m; ++i) cand[static_cast<size_t>(i)] -= d * U.at(i, c);
                }
            }
            double nn = 0.0;
            for (double v : cand) nn += v * v;
            nn = std::sqrt(nn);
            if (nn > 0.5) {
                for (i64 i = 0; i < m; ++i) U.at(i, jj) = cand[static_cast<size_t>(i)] / nn;
                return;
            }
        }
        check(false, "svd: failed to complete orthonormal basis");
    }

    i64 m_, n_;
    std::vector<double> a_;  // column-major m x n
    std::vector<double> v_;  // column-major n x n
};

}  // namespace detail

inline SvdResult svd(const Tensor& M) {
    check(M.rank() == 2, "svd: rank-2 tensor required");
    check_input(M.all_finite(), "svd: non-finite input");
    i64 m = M.dim(0), n = M.dim(1);
    if (m == 0 || n == 0) {
        i64 k = std::min(m, n);
        return {Tensor({m, k}), Tensor({k}), Tensor({n, k})};
    }
    if (m >= n) {
        detail::JacobiWork w(M);
        w.run();
        SvdResult r;
        w.extract(r.u, r.s, r.v);
        return r;
    }
    detail::JacobiWork w(transpose(M));
    w.run();
    Tensor wu, ws, wv;
    w.extract(wu, ws, wv);
    return {std::move(wv), std::move(ws), std::move(wu)};
}

// Rank-r reconstruction U[:, :r] * diag(S[:r]) * V[:, :r]^T.
inline Tensor svd_truncated_reconstruct(const SvdResult& r, i64 rank) {
    i64 m = r.u.dim(0), n = r.v.dim(0), k = r.s.dim(0);
    i64 rr = std::min(rank, k);
    Tensor out({m, n});
    if (rr <= 0) return out;
    Tensor us({m, rr});
    for (i64 i = 0; i < m; ++i)
        for (i64 j = 0; j < rr; ++j) us.at(i, j) = r.u.at(i, j) * r.s[j];
    Tensor vr({n, rr});
    for (i64 i = 0; i < n; ++i)
        for (i64 j = 0; j < rr; ++j) vr.at(i, j) = r.v.at(i, j);
    matmul_into(out, us, vr, false, true);
    return out;
}

}  // namespace mohawk
