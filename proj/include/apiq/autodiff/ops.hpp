#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "apiq/autodiff/tape.hpp"

namespace apiq::ad {

// Fixed primitive vocabulary. No broadcasting: binary elementwise ops take
// identical shapes, and every composite (attention, MLP, fake-quant) is built
// from these.

enum class Trans { No, Yes };

namespace detail {

template <typename T>
Tensor<T> mm(const Tensor<T>& a, const Tensor<T>& b)
{
    return a.rank() == 3 ? bmm(a, b) : apiq::matmul(a, b);
}

template <typename T>
Tensor<T> tr(const Tensor<T>& a)
{
    return a.rank() == 3 ? transpose_last2(a) : apiq::transpose(a);
}

template <typename T>
T sigmoid(T x)
{
    return T{1} / (T{1} + std::exp(-x));
}

template <typename T>
using Rule = typename Tape<T>::BackwardFn;

} // namespace detail

// a * b, or a * b^T. Rank 2, or rank 3 batched over the leading axis.
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, Trans tb = Trans::No)
{
    const std::size_t ra = a.shape().size();
    if (ra != b.shape().size() || (ra != 2 && ra != 3))
        throw DimensionError("matmul: operands must both be rank 2 or rank 3, got " + shape_str(a.shape()) +
                             " and " + shape_str(b.shape()));
    Tensor<T> out = tb == Trans::Yes ? detail::mm(a.value(), detail::tr(b.value())) : detail::mm(a.value(), b.value());
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape().record("matmul", std::move(out), {a, b}, [ia, ib, tb](Tape<T>& t, const Tensor<T>& g, std::size_t) {
        const Tensor<T>& av = t.value(ia);
        const Tensor<T>& bv = t.value(ib);
        if (t.requires_grad(ia))
            t.accumulate_grad(ia, detail::mm(g, tb == Trans::Yes ? bv : detail::tr(bv)));
        if (t.requires_grad(ib)) {
            if (tb == Trans::Yes)
                t.accumulate_grad(ib, detail::mm(detail::tr(g), av));
            else
                t.accumulate_grad(ib, detail::mm(detail::tr(av), g));
        }
    });
}

template <typename T>
Var<T> transpose(const Var<T>& a)
{
    require_rank(a.shape(), 2, "transpose");
    const std::size_t ia = a.id();
    return a.tape().record("transpose", apiq::transpose(a.value()), {a},
                           [ia](Tape<T>& t, const Tensor<T>& g, std::size_t) { t.accumulate_grad(ia, apiq::transpose(g)); });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b)
{
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape().record("add", apiq::add(a.value(), b.value()), {a, b},
                           [ia, ib](Tape<T>& t, const Tensor<T>& g, std::size_t) {
                               t.accumulate_grad(ia, g);
                               t.accumulate_grad(ib, g);
                           });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b)
{
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape().record("sub", apiq::sub(a.value(), b.value()), {a, b},
                           [ia, ib](Tape<T>& t, const Tensor<T>& g, std::size_t) {
                               t.accumulate_grad(ia, g);
                               if (t.requires_grad(ib)) t.accumulate_grad(ib, apiq::scale(g, T{-1}));
                           });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b)
{
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape().record("mul", apiq::mul(a.value(), b.value()), {a, b},
                           [ia, ib](Tape<T>& t, const Tensor<T>& g, std::size_t) {
                               if (t.requires_grad(ia)) t.accumulate_grad(ia, apiq::mul(g, t.value(ib)));
                               if (t.requires_grad(ib)) t.accumulate_grad(ib, apiq::mul(g, t.value(ia)));
                           });
}

template <typename T>
Var<T> scale(const Var<T>& a, T c)
{
    const std::size_t ia = a.id();
    return a.tape().record("scale", apiq::scale(a.value(), c), {a},
                           [ia, c](Tape<T>& t, const Tensor<T>& g, std::size_t) { t.accumulate_grad(ia, apiq::scale(g, c)); });
}

// Sum of all elements as a scalar (accumulated in double, ascending index).
template <typename T>
Var<T> sum(const Var<T>& a)
{
    double s = 0.0;
    for (T v : a.value().data()) s += static_cast<double>(v);
    const std::size_t ia = a.id();
    return a.tape().record("sum", Tensor<T>::scalar(static_cast<T>(s)), {a},
                           [ia](Tape<T>& t, const Tensor<T>& g, std::size_t) {
                               t.accumulate_grad(ia, Tensor<T>(t.value(ia).shape(), g[0]));
                           });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a)
{
    const std::size_t ia = a.id();
    return a.tape().record("sigmoid", apiq::map(a.value(), [](T x) { return detail::sigmoid(x); }), {a},
                           [ia](Tape<T>& t, const Tensor<T>& g, std::size_t out) {
                               const Tensor<T>& y = t.value(out);
                               Tensor<T> d(y.shape());
                               for (std::size_t i = 0; i < y.numel(); ++i) d[i] = g[i] * y[i] * (T{1} - y[i]);
                               t.accumulate_grad(ia, d);
                           });
}

template <typename T>
Var<T> silu(const Var<T>& a)
{
    const std::size_t ia = a.id();
    return a.tape().record("silu", apiq::map(a.value(), [](T x) { return x * detail::sigmoid(x); }), {a},
                           [ia](Tape<T>& t, const Tensor<T>& g, std::size_t) {
                               const Tensor<T>& x = t.value(ia);
                               Tensor<T> d(x.shape());
                               for (std::size_t i = 0; i < x.numel(); ++i) {
                                   const T s = detail::sigmoid(x[i]);
                                   d[i] = g[i] * (s + x[i] * s * (T{1} - s));
                               }
                               t.accumulate_grad(ia, d);
                           });
}

template <typename T>
Var<T> exp(const Var<T>& a)
{
    const std::size_t ia = a.id();
    return a.tape().record("exp", apiq::map(a.value(), [](T x) { return std::exp(x); }), {a},
                           [ia](Tape<T>& t, const Tensor<T>& g, std::size_t out) {
                               t.accumulate_grad(ia, apiq::mul(g, t.value(out)));
                           });
}

// Gradient passes strictly inside (lo, hi); zero on and beyond the bounds.
template <typename T>
Var<T> clamp(const Var<T>& a, T lo, T hi)
{
    const std::size_t ia = a.id();
    return a.tape().record("clamp", apiq::map(a.value(), [lo, hi](T x) { return x < lo ? lo : (x > hi ? hi : x); }),
                           {a}, [ia, lo, hi](Tape<T>& t, const Tensor<T>& g, std::size_t) {
                               const Tensor<T>& x = t.value(ia);
                               Tensor<T> d(x.shape());
                               for (std::size_t i = 0; i < x.numel(); ++i) d[i] = (x[i] > lo && x[i] < hi) ? g[i] : T{0};
                               t.accumulate_grad(ia, d);
                           });
}

// Forward rounds half to even; backward is the identity (straight-through).
template <typename T>
Var<T> round_ste(const Var<T>& a)
{
    const std::size_t ia = a.id();
    return a.tape().record("round_ste", apiq::map(a.value(), [](T x) { return std::nearbyint(x); }), {a},
                           [ia](Tape<T>& t, const Tensor<T>& g, std::size_t) { t.accumulate_grad(ia, g); });
}

// Softmax over the last axis. With causal=true the trailing two axes form a
// t x t score matrix; entries above the diagonal are excluded and get
// probability exactly 0.
template <typename T>
Var<T> softmax(const Var<T>& a, bool causal = false)
{
    const Shape& sh = a.shape();
    if (sh.empty()) throw DimensionError("softmax: rank-0 input");
    const std::size_t n = sh.back();
    if (causal && (sh.size() < 2 || sh[sh.size() - 2] != n))
        throw DimensionError("softmax: causal mask needs square trailing axes, got " + shape_str(sh));
    const std::size_t rows = n == 0 ? 0 : a.numel() / n;
    Tensor<T> out(sh);
    const T* x = a.value().data().data();
    T* y = out.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t len = causal ? (r % n) + 1 : n;
        const T* xr = x + r * n;
        T* yr = y + r * n;
        T m = xr[0];
        for (std::size_t j = 1; j < len; ++j) m = std::max(m, xr[j]);
        T s{0};
        for (std::size_t j = 0; j < len; ++j) {
            yr[j] = std::exp(xr[j] - m);
            s += yr[j];
        }
        for (std::size_t j = 0; j < len; ++j) yr[j] /= s;
    }
    const std::size_t ia = a.id();
    return a.tape().record("softmax", std::move(out), {a}, [ia, n, rows](Tape<T>& t, const Tensor<T>& g, std::size_t o) {
        const Tensor<T>& yv = t.value(o);
        Tensor<T> d(yv.shape());
        for (std::size_t r = 0; r < rows; ++r) {
            const T* yr = yv.data().data() + r * n;
            const T* gr = g.data().data() + r * n;
            T dot{0};
            for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
            T* dr = d.data().data() + r * n;
            for (std::size_t j = 0; j < n; ++j) dr[j] = yr[j] * (gr[j] - dot);
        }
        t.accumulate_grad(ia, d);
    });
}

inline constexpr double kRmsNormEps = 1e-5;

// y = x / sqrt(mean(x^2) + eps) * gain, row-wise over the last axis.
template <typename T>
Var<T> rmsnorm(const Var<T>& x, const Var<T>& gain, T eps = static_cast<T>(kRmsNormEps))
{
    require_rank(x.shape(), 2, "rmsnorm");
    const std::size_t rows = x.shape()[0], d = x.shape()[1];
    if (gain.shape() != Shape{d}) throw DimensionError("rmsnorm: gain shape " + shape_str(gain.shape()) + " for width " + std::to_string(d));
    Tensor<T> out(x.shape());
    std::vector<T> inv(rows);
    const Tensor<T>& xv = x.value();
    const Tensor<T>& gv = gain.value();
    for (std::size_t r = 0; r < rows; ++r) {
        T ss{0};
        for (std::size_t j = 0; j < d; ++j) ss += xv.at(r, j) * xv.at(r, j);
        inv[r] = T{1} / std::sqrt(ss / static_cast<T>(d) + eps);
        for (std::size_t j = 0; j < d; ++j) out.at(r, j) = xv.at(r, j) * inv[r] * gv[j];
    }
    const std::size_t ix = x.id(), ig = gain.id();
    return x.tape().record("rmsnorm", std::move(out), {x, gain},
                           [ix, ig, rows, d, inv = std::move(inv)](Tape<T>& t, const Tensor<T>& g, std::size_t) {
                               const Tensor<T>& xv = t.value(ix);
                               const Tensor<T>& gv = t.value(ig);
                               if (t.requires_grad(ix)) {
                                   Tensor<T> dx(xv.shape());
                                   for (std::size_t r = 0; r < rows; ++r) {
                                       T dot{0};
                                       for (std::size_t j = 0; j < d; ++j) dot += g.at(r, j) * gv[j] * xv.at(r, j);
                                       const T k = inv[r] * inv[r] * inv[r] * dot / static_cast<T>(d);
                                       for (std::size_t j = 0; j < d; ++j)
                                           dx.at(r, j) = inv[r] * gv[j] * g.at(r, j) - k * xv.at(r, j);
                                   }
                                   t.accumulate_grad(ix, dx);
                               }
                               if (t.requires_grad(ig)) {
                                   Tensor<T> dg(Shape{d});
                                   for (std::size_t r = 0; r < rows; ++r)
                                       for (std::size_t j = 0; j < d; ++j) dg[j] += g.at(r, j) * xv.at(r, j) * inv[r];
                                   t.accumulate_grad(ig, dg);
                               }
                           });
}

// Row gather: out[i] = table[tokens[i]].
template <typename T>
Var<T> embedding(const Var<T>& table, std::span<const std::int32_t> tokens)
{
    require_rank(table.shape(), 2, "embedding");
    const std::size_t vocab = table.shape()[0], d = table.shape()[1];
    Tensor<T> out({tokens.size(), d});
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const auto tok = tokens[i];
        if (tok < 0 || static_cast<std::size_t>(tok) >= vocab)
            throw InputError("token " + std::to_string(tok) + " at position " + std::to_string(i) +
                             " outside vocabulary of size " + std::to_string(vocab));
        std::copy_n(table.value().data().data() + static_cast<std::size_t>(tok) * d, d, out.data().data() + i * d);
    }
    const std::size_t it = table.id();
    std::vector<std::int32_t> toks(tokens.begin(), tokens.end());
    return table.tape().record("embedding", std::move(out), {table},
                               [it, d, toks = std::move(toks)](Tape<T>& t, const Tensor<T>& g, std::size_t) {
                                   Tensor<T> dt(t.value(it).shape());
                                   for (std::size_t i = 0; i < toks.size(); ++i) {
                                       T* row = dt.data().data() + static_cast<std::size_t>(toks[i]) * d;
                                       for (std::size_t j = 0; j < d; ++j) row[j] += g.at(i, j);
                                   }
                                   t.accumulate_grad(it, dt);
                               });
}

// Rotary tables: angle(p, i) = p * theta^(-2i/dh), computed in double.
template <typename T>
struct RopeTable {
    std::size_t seq = 0, half = 0;
    std::vector<T> cos, sin;

    RopeTable(std::size_t t, std::size_t dh, double theta) : seq(t), half(dh / 2), cos(t * (dh / 2)), sin(t * (dh / 2))
    {
        for (std::size_t p = 0; p < t; ++p)
            for (std::size_t i = 0; i < half; ++i) {
                const double freq = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
                const double ang = static_cast<double>(p) * freq;
                cos[p * half + i] = static_cast<T>(std::cos(ang));
                sin[p * half + i] = static_cast<T>(std::sin(ang));
            }
    }
};

namespace detail {

template <typename T>
void rope_apply(const Tensor<T>& x, Tensor<T>& y, const RopeTable<T>& tab, bool inverse)
{
    const std::size_t bsz = x.dim(0), t = x.dim(1), dh = x.dim(2);
    for (std::size_t b = 0; b < bsz; ++b)
        for (std::size_t p = 0; p < t; ++p) {
            const T* xr = x.data().data() + (b * t + p) * dh;
            T* yr = y.data().data() + (b * t + p) * dh;
            for (std::size_t i = 0; i < dh / 2; ++i) {
                const T c = tab.cos[p * tab.half + i];
                const T s = inverse ? -tab.sin[p * tab.half + i] : tab.sin[p * tab.half + i];
                const T x0 = xr[2 * i], x1 = xr[2 * i + 1];
                yr[2 * i] = x0 * c - x1 * s;
                yr[2 * i + 1] = x0 * s + x1 * c;
            }
        }
}

} // namespace detail

// Rotates adjacent pairs (2i, 2i+1) of x[B, t, dh] by the position angle of
// the row index within t.
template <typename T>
Var<T> rope(const Var<T>& x, double theta)
{
    require_rank(x.shape(), 3, "rope");
    const std::size_t t = x.shape()[1], dh = x.shape()[2];
    if (dh % 2 != 0) throw DimensionError("rope: head dimension must be even, got " + std::to_string(dh));
    auto tab = std::make_shared<RopeTable<T>>(t, dh, theta);
    Tensor<T> out(x.shape());
    detail::rope_apply(x.value(), out, *tab, false);
    const std::size_t ix = x.id();
    return x.tape().record("rope", std::move(out), {x}, [ix, tab](Tape<T>& tp, const Tensor<T>& g, std::size_t) {
        Tensor<T> d(g.shape());
        detail::rope_apply(g, d, *tab, true);
        tp.accumulate_grad(ix, d);
    });
}

namespace detail {

// [n*t, heads*dh] <-> [n*heads, t, dh]
template <typename T>
Tensor<T> to_heads(const Tensor<T>& x, std::size_t n, std::size_t heads)
{
    const std::size_t t = x.dim(0) / n, d = x.dim(1), dh = d / heads;
    Tensor<T> out({n * heads, t, dh});
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t p = 0; p < t; ++p)
                std::copy_n(x.data().data() + (s * t + p) * d + h * dh, dh,
                            out.data().data() + ((s * heads + h) * t + p) * dh);
    return out;
}

template <typename T>
Tensor<T> from_heads(const Tensor<T>& x, std::size_t n, std::size_t heads)
{
    const std::size_t t = x.dim(1), dh = x.dim(2), d = heads * dh;
    Tensor<T> out({n * t, d});
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t p = 0; p < t; ++p)
                std::copy_n(x.data().data() + ((s * heads + h) * t + p) * dh, dh,
                            out.data().data() + (s * t + p) * d + h * dh);
    return out;
}

} // namespace detail

template <typename T>
Var<T> split_heads(const Var<T>& x, std::size_t n_seq, std::size_t heads)
{
    require_rank(x.shape(), 2, "split_heads");
    if (n_seq == 0 || x.shape()[0] % n_seq != 0 || heads == 0 || x.shape()[1] % heads != 0)
        throw DimensionError("split_heads: " + shape_str(x.shape()) + " not divisible into " + std::to_string(n_seq) +
                             " sequences x " + std::to_string(heads) + " heads");
    const std::size_t ix = x.id();
    return x.tape().record("split_heads", detail::to_heads(x.value(), n_seq, heads), {x},
                           [ix, n_seq, heads](Tape<T>& t, const Tensor<T>& g, std::size_t) {
                               t.accumulate_grad(ix, detail::from_heads(g, n_seq, heads));
                           });
}

template <typename T>
Var<T> merge_heads(const Var<T>& x, std::size_t n_seq, std::size_t heads)
{
    require_rank(x.shape(), 3, "merge_heads");
    if (x.shape()[0] != n_seq * heads) throw DimensionError("merge_heads: leading axis " + shape_str(x.shape()));
    const std::size_t ix = x.id();
    return x.tape().record("merge_heads", detail::from_heads(x.value(), n_seq, heads), {x},
                           [ix, n_seq, heads](Tape<T>& t, const Tensor<T>& g, std::size_t) {
                               t.accumulate_grad(ix, detail::to_heads(g, n_seq, heads));
                           });
}

// mean((a - b)^2) over all elements.
template <typename T>
Var<T> mse(const Var<T>& a, const Var<T>& b)
{
    require_same_shape(a.shape(), b.shape(), "mse");
    double s = 0.0;
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(a.value()[i]) - static_cast<double>(b.value()[i]);
        s += d * d;
    }
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape().record("mse", Tensor<T>::scalar(static_cast<T>(s / static_cast<double>(n))), {a, b},
                           [ia, ib, n](Tape<T>& t, const Tensor<T>& g, std::size_t) {
                               const Tensor<T>& av = t.value(ia);
                               const Tensor<T>& bv = t.value(ib);
                               const T k = g[0] * T{2} / static_cast<T>(n);
                               Tensor<T> d(av.shape());
                               for (std::size_t i = 0; i < n; ++i) d[i] = k * (av[i] - bv[i]);
                               if (t.requires_grad(ia)) t.accumulate_grad(ia, d);
                               if (t.requires_grad(ib)) t.accumulate_grad(ib, apiq::scale(d, T{-1}));
                           });
}

// Mean token cross-entropy of logits[N, V] against targets, via a
// max-subtracted log-sum-exp.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const std::int32_t> targets)
{
    require_rank(logits.shape(), 2, "cross_entropy");
    const std::size_t n = logits.shape()[0], v = logits.shape()[1];
    if (targets.size() != n) throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(n) + " rows");
    const Tensor<T>& x = logits.value();
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        const auto tgt = targets[r];
        if (tgt < 0 || static_cast<std::size_t>(tgt) >= v) throw InputError("cross_entropy: target out of range");
        const T* xr = x.data().data() + r * v;
        T m = xr[0];
        for (std::size_t j = 1; j < v; ++j) m = std::max(m, xr[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < v; ++j) s += std::exp(static_cast<double>(xr[j] - m));
        total += std::log(s) + static_cast<double>(m) - static_cast<double>(xr[tgt]);
    }
    const std::size_t il = logits.id();
    std::vector<std::int32_t> tg(targets.begin(), targets.end());
    return logits.tape().record("cross_entropy", Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(n))), {logits},
                                [il, n, v, tg = std::move(tg)](Tape<T>& t, const Tensor<T>& g, std::size_t) {
                                    const Tensor<T>& x = t.value(il);
                                    Tensor<T> d(x.shape());
                                    const T k = g[0] / static_cast<T>(n);
                                    for (std::size_t r = 0; r < n; ++r) {
                                        const T* xr = x.data().data() + r * v;
                                        T* dr = d.data().data() + r * v;
                                        T m = xr[0];
                                        for (std::size_t j = 1; j < v; ++j) m = std::max(m, xr[j]);
                                        T s{0};
                                        for (std::size_t j = 0; j < v; ++j) {
                                            dr[j] = std::exp(xr[j] - m);
                                            s += dr[j];
                                        }
                                        for (std::size_t j = 0; j < v; ++j) dr[j] = dr[j] / s * k;
                                        dr[tg[r]] -= k;
                                    }
                                    t.accumulate_grad(il, d);
                                });
}

} // namespace apiq::ad
