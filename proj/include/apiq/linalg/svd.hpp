#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <vector>

#include "apiq/linalg/kernels.hpp"

namespace apiq {

template <typename T>
struct SvdResult {
    Tensor<T> U; // d1 x k, orthonormal columns
    std::vector<T> S; // k values, non-increasing
    Tensor<T> V; // d2 x k, orthonormal columns
};

struct SvdOptions {
    double tol = 1e-10;
    int max_sweeps = 80;
};

namespace detail {

// Column-major working copy so a column is contiguous.
struct ColMatrix {
    std::size_t rows = 0, cols = 0;
    std::vector<double> v;
    double* col(std::size_t j) { return v.data() + j * rows; }
    const double* col(std::size_t j) const { return v.data() + j * rows; }
};

inline double dot(const double* x, const double* y, std::size_t n)
{
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += x[i] * y[i];
    return s;
}

// Fills columns of q whose norm is zero with unit vectors orthogonal to all
// other columns (Gram-Schmidt over the standard basis).
inline void complete_orthonormal(ColMatrix& q, std::vector<bool>& valid)
{
    std::size_t next_basis = 0;
    for (std::size_t j = 0; j < q.cols; ++j) {
        if (valid[j]) continue;
        for (; next_basis < q.rows; ++next_basis) {
            std::vector<double> e(q.rows, 0.0);
            e[next_basis] = 1.0;
            for (int pass = 0; pass < 2; ++pass) {
                for (std::size_t i = 0; i < q.cols; ++i) {
                    if (!valid[i]) continue;
                    const double p = dot(q.col(i), e.data(), q.rows);
                    for (std::size_t r = 0; r < q.rows; ++r) e[r] -= p * q.col(i)[r];
                }
            }
            const double n = std::sqrt(dot(e.data(), e.data(), q.rows));
            if (n > 1e-6) {
                for (std::size_t r = 0; r < q.rows; ++r) q.col(j)[r] = e[r] / n;
                valid[j] = true;
                ++next_basis;
                break;
            }
        }
        if (!valid[j]) throw NumericError("svd: could not complete orthonormal basis");
    }
}

// Hestenes one-sided Jacobi on a (rows >= cols). On exit a's columns are
// U*diag(S) and v holds the accumulated right rotations.
inline void hestenes(ColMatrix& a, ColMatrix& v, const SvdOptions& opt)
{
    const std::size_t n = a.cols, m = a.rows;
    v.rows = v.cols = n;
    v.v.assign(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) v.col(i)[i] = 1.0;

    double off = 0.0;
    for (int sweep = 0; sweep < opt.max_sweeps; ++sweep) {
        off = 0.0;
        for (std::size_t i = 0; i + 1 < n; ++i) {
            for (std::size_t j = i + 1; j < n; ++j) {
                double* ai = a.col(i);
                double* aj = a.col(j);
                const double alpha = dot(ai, ai, m);
                const double beta = dot(aj, aj, m);
                const double gamma = dot(ai, aj, m);
                if (alpha == 0.0 || beta == 0.0) continue;
                const double rel = std::abs(gamma) / std::sqrt(alpha * beta);
                off = std::max(off, rel);
                if (rel <= opt.tol) continue;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t r = 0; r < m; ++r) {
                    const double x = ai[r], y = aj[r];
                    ai[r] = c * x - s * y;
                    aj[r] = s * x + c * y;
                }
                double* vi = v.col(i);
                double* vj = v.col(j);
                for (std::size_t r = 0; r < n; ++r) {
                    const double x = vi[r], y = vj[r];
                    vi[r] = c * x - s * y;
                    vj[r] = s * x + c * y;
                }
            }
        }
        if (off <= opt.tol) return;
    }
    std::ostringstream os;
    os << "svd: one-sided Jacobi did not converge after " << opt.max_sweeps
       << " sweeps (residual off-diagonal " << off << ")";
    throw NumericError(os.str());
}

} // namespace detail

// Top-`rank` singular triplets of m[d1 x d2] by one-sided Jacobi applied on
// the smaller-dimension side. Computation runs in double precision.
template <typename T>
SvdResult<T> truncated_svd(const Tensor<T>& m, std::size_t rank, const SvdOptions& opt = {})
{
    require_rank(m.shape(), 2, "truncated_svd");
    const std::size_t d1 = m.rows(), d2 = m.cols();
    if (rank == 0 || rank > std::min(d1, d2))
        throw ArgumentError("truncated_svd: rank " + std::to_string(rank) + " outside [1, " +
                            std::to_string(std::min(d1, d2)) + "]");
    if (!m.all_finite()) throw ArgumentError("truncated_svd: non-finite input");

    // Work on a (tall) = m when d1 >= d2, else m^T; then swap roles.
    const bool tall = d1 >= d2;
    detail::ColMatrix a;
    a.rows = tall ? d1 : d2;
    a.cols = tall ? d2 : d1;
    a.v.resize(a.rows * a.cols);
    for (std::size_t i = 0; i < d1; ++i)
        for (std::size_t j = 0; j < d2; ++j) {
            const double x = static_cast<double>(m.at(i, j));
            if (tall)
                a.col(j)[i] = x;
            else
                a.col(i)[j] = x;
        }

    detail::ColMatrix v;
    detail::hestenes(a, v, opt);

    const std::size_t n = a.cols;
    std::vector<double> sigma(n);
    for (std::size_t j = 0; j < n; ++j) sigma[j] = std::sqrt(detail::dot(a.col(j), a.col(j), a.rows));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

    const double smax = sigma[order[0]];
    const double tiny = std::max(smax * 1e-13, 1e-300);

    detail::ColMatrix left;
    left.rows = a.rows;
    left.cols = rank;
    left.v.assign(left.rows * rank, 0.0);
    detail::ColMatrix right;
    right.rows = n;
    right.cols = rank;
    right.v.assign(n * rank, 0.0);
    std::vector<bool> valid(rank, false);
    std::vector<double> s(rank);
    for (std::size_t k = 0; k < rank; ++k) {
        const std::size_t j = order[k];
        s[k] = sigma[j];
        std::copy(v.col(j), v.col(j) + n, right.col(k));
        if (sigma[j] > tiny) {
            for (std::size_t r = 0; r < a.rows; ++r) left.col(k)[r] = a.col(j)[r] / sigma[j];
            valid[k] = true;
        } else {
            s[k] = 0.0;
        }
    }
    detail::complete_orthonormal(left, valid);

    // left spans the tall side. Map back to (U: d1 x k, V: d2 x k).
    const detail::ColMatrix& u_side = tall ? left : right;
    const detail::ColMatrix& v_side = tall ? right : left;
    SvdResult<T> out{Tensor<T>({d1, rank}), std::vector<T>(rank), Tensor<T>({d2, rank})};
    for (std::size_t k = 0; k < rank; ++k) {
        out.S[k] = static_cast<T>(s[k]);
        for (std::size_t i = 0; i < d1; ++i) out.U.at(i, k) = static_cast<T>(u_side.col(k)[i]);
        for (std::size_t i = 0; i < d2; ++i) out.V.at(i, k) = static_cast<T>(v_side.col(k)[i]);
    }
    return out;
}

// U * diag(S) * V^T.
template <typename T>
Tensor<T> svd_reconstruct(const SvdResult<T>& svd)
{
    Tensor<T> us = svd.U;
    for (std::size_t i = 0; i < us.rows(); ++i)
        for (std::size_t k = 0; k < us.cols(); ++k) us.at(i, k) *= svd.S[k];
    return matmul_nt(us, svd.V);
}

} // namespace apiq
