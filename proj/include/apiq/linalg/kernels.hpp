#pragma once

#include <cmath>
#include <cstddef>
#include <utility>

#include "apiq/linalg/parallel.hpp"
#include "apiq/linalg/tensor.hpp"

namespace apiq {

namespace detail {

// c[m x n] = a[m x k] * b[k x n]. Each c[i][j] accumulates a[i][p]*b[p][j]
// for p = 0, 1, ..., k-1 in that order, starting from +0. The inner loop runs
// over j so it vectorizes without reassociating any sum.
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n)
{
    parallel_for(m, k * n, [&](std::size_t r0, std::size_t r1) {
        for (std::size_t i = r0; i < r1; ++i) {
            T* ci = c + i * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] = T{0};
            const T* ai = a + i * k;
            for (std::size_t p = 0; p < k; ++p) {
                const T av = ai[p];
                const T* bp = b + p * n;
                for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
            }
        }
    });
}

template <typename T>
void transpose_into(const T* a, T* out, std::size_t rows, std::size_t cols)
{
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = a[i * cols + j];
}

} // namespace detail

template <typename T>
Tensor<T> transpose(const Tensor<T>& a)
{
    require_rank(a.shape(), 2, "transpose");
    Tensor<T> out({a.cols(), a.rows()});
    detail::transpose_into(a.data().data(), out.data().data(), a.rows(), a.cols());
    return out;
}

// Swaps the last two axes of a rank-3 tensor.
template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& a)
{
    require_rank(a.shape(), 3, "transpose_last2");
    const std::size_t bsz = a.dim(0), r = a.dim(1), c = a.dim(2);
    Tensor<T> out({bsz, c, r});
    for (std::size_t b = 0; b < bsz; ++b)
        detail::transpose_into(a.data().data() + b * r * c, out.data().data() + b * r * c, r, c);
    return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b)
{
    require_rank(a.shape(), 2, "matmul lhs");
    require_rank(b.shape(), 2, "matmul rhs");
    if (a.cols() != b.rows())
        throw DimensionError("matmul: inner extents differ " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    Tensor<T> c({a.rows(), b.cols()});
    detail::gemm_nn(a.data().data(), b.data().data(), c.data().data(), a.rows(), a.cols(), b.cols());
    return c;
}

// a * b^T with the same per-element accumulation order as matmul(a, transpose(b)).
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b)
{
    return matmul(a, transpose(b));
}

// Batched product over the leading axis: [B,m,k] x [B,k,n] -> [B,m,n].
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b)
{
    require_rank(a.shape(), 3, "bmm lhs");
    require_rank(b.shape(), 3, "bmm rhs");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
        throw DimensionError("bmm: incompatible " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const std::size_t bsz = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    Tensor<T> c({bsz, m, n});
    for (std::size_t i = 0; i < bsz; ++i)
        detail::gemm_nn(a.data().data() + i * m * k, b.data().data() + i * k * n,
                        c.data().data() + i * m * n, m, k, n);
    return c;
}

template <typename T, typename F>
Tensor<T> zip_with(const Tensor<T>& a, const Tensor<T>& b, F f, const char* what)
{
    require_same_shape(a.shape(), b.shape(), what);
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = f(a[i], b[i]);
    return out;
}

template <typename T, typename F>
Tensor<T> map(const Tensor<T>& a, F f)
{
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = f(a[i]);
    return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b)
{
    return zip_with(a, b, [](T x, T y) { return x + y; }, "add");
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b)
{
    return zip_with(a, b, [](T x, T y) { return x - y; }, "sub");
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b)
{
    return zip_with(a, b, [](T x, T y) { return x * y; }, "mul");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c)
{
    return map(a, [c](T x) { return x * c; });
}

// dst += src, element by element.
template <typename T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src)
{
    require_same_shape(dst.shape(), src.shape(), "accumulate");
    for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] += src[i];
}

// Sequential sums in double precision; used by losses and reports.
template <typename T>
double sum_sq(const Tensor<T>& a)
{
    double s = 0.0;
    for (T v : a.data()) s += static_cast<double>(v) * static_cast<double>(v);
    return s;
}

template <typename T>
double frobenius_norm(const Tensor<T>& a)
{
    return std::sqrt(sum_sq(a));
}

template <typename T>
double frobenius_distance(const Tensor<T>& a, const Tensor<T>& b)
{
    require_same_shape(a.shape(), b.shape(), "frobenius_distance");
    double s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        s += d * d;
    }
    return std::sqrt(s);
}

template <typename T>
T max_abs(const Tensor<T>& a)
{
    T m{0};
    for (T v : a.data()) m = std::max(m, static_cast<T>(std::abs(v)));
    return m;
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b)
{
    require_same_shape(a.shape(), b.shape(), "max_abs_diff");
    T m{0};
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, static_cast<T>(std::abs(a[i] - b[i])));
    return m;
}

template <typename T>
Tensor<T> identity(std::size_t n)
{
    Tensor<T> out({n, n});
    for (std::size_t i = 0; i < n; ++i) out.at(i, i) = T{1};
    return out;
}

// Rows [r0, r1) of a tensor whose leading axis indexes rows.
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t r0, std::size_t r1)
{
    if (a.rank() < 1 || r0 > r1 || r1 > a.dim(0))
        throw DimensionError("slice_rows out of range on " + shape_str(a.shape()));
    Shape shape = a.shape();
    shape[0] = r1 - r0;
    const std::size_t stride = a.numel() / a.dim(0);
    std::vector<T> data(a.data().begin() + static_cast<std::ptrdiff_t>(r0 * stride),
                        a.data().begin() + static_cast<std::ptrdiff_t>(r1 * stride));
    return Tensor<T>(std::move(shape), std::move(data));
}

template <typename T>
struct GroupMinMax {
    // Both are [d1/group x d2]; entry (g, c) covers rows g*group .. g*group+group-1 of column c.
    Tensor<T> mins;
    Tensor<T> maxs;
    std::size_t group = 0;
};

// Per-group extrema of w[d1 x d2], grouping `group` consecutive rows (the
// input axis) within each output column.
template <typename T>
GroupMinMax<T> group_minmax(const Tensor<T>& w, std::size_t group)
{
    require_rank(w.shape(), 2, "group_minmax");
    if (group == 0 || w.rows() % group != 0)
        throw ConfigError("group size " + std::to_string(group) + " does not divide input dimension " +
                          std::to_string(w.rows()));
    const std::size_t ng = w.rows() / group, d2 = w.cols();
    GroupMinMax<T> out{Tensor<T>({ng, d2}), Tensor<T>({ng, d2}), group};
    for (std::size_t g = 0; g < ng; ++g) {
        for (std::size_t c = 0; c < d2; ++c) {
            T lo = w.at(g * group, c), hi = lo;
            for (std::size_t r = g * group + 1; r < (g + 1) * group; ++r) {
                lo = std::min(lo, w.at(r, c));
                hi = std::max(hi, w.at(r, c));
            }
            out.mins.at(g, c) = lo;
            out.maxs.at(g, c) = hi;
        }
    }
    return out;
}

} // namespace apiq
