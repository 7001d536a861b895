#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "apiq/linalg/kernels.hpp"

namespace apiq::quant {

enum class ClipGranularity { PerMatrix, PerGroup };

inline std::string to_string(ClipGranularity g)
{
    return g == ClipGranularity::PerMatrix ? "per-matrix" : "per-group";
}

inline ClipGranularity parse_granularity(const std::string& s)
{
    if (s == "per-matrix") return ClipGranularity::PerMatrix;
    if (s == "per-group") return ClipGranularity::PerGroup;
    throw ConfigError("unknown clip granularity '" + s + "' (expected per-matrix or per-group)");
}

struct QuantSpec {
    int bits = 4;
    std::size_t group = 64;
    ClipGranularity granularity = ClipGranularity::PerMatrix;

    int levels() const { return (1 << bits) - 1; }

    void validate() const
    {
        if (bits != 2 && bits != 3 && bits != 4 && bits != 8)
            throw ConfigError("bits must be one of 2, 3, 4, 8 (got " + std::to_string(bits) + ")");
        if (group == 0) throw ConfigError("group size must be positive");
    }

    void validate_for(std::size_t d1) const
    {
        validate();
        if (d1 % group != 0)
            throw ConfigError("group size " + std::to_string(group) + " does not divide input dimension " +
                              std::to_string(d1));
    }
};

inline constexpr double kScaleFloor = 1e-8;
// sigmoid(40) rounds to exactly 1 in both float and double: "no clipping".
inline constexpr double kNoClipLogit = 40.0;
// Initial clipping logits; sigmoid(4) ~= 0.982 keeps nearly the full range.
inline constexpr double kInitClipLogit = 4.0;

template <typename T>
T sigmoid(T x)
{
    return T{1} / (T{1} + std::exp(-x));
}

// Round half to even (IEEE default rounding mode).
template <typename T>
T round_half_even(T x)
{
    return std::nearbyint(x);
}

// Clipping logits: one pair per matrix or one per group ([d1/g x d2]).
template <typename T>
struct ClipParams {
    Tensor<T> gamma;
    Tensor<T> beta;

    static ClipParams uniform(const QuantSpec& spec, std::size_t d1, std::size_t d2, double logit)
    {
        Shape shape = spec.granularity == ClipGranularity::PerMatrix ? Shape{1} : Shape{d1 / spec.group, d2};
        return {Tensor<T>(shape, static_cast<T>(logit)), Tensor<T>(shape, static_cast<T>(logit))};
    }

    // Index of the logit governing group (g, c) in a grid with d2 columns.
    std::size_t index(std::size_t g, std::size_t c, std::size_t d2) const
    {
        return gamma.numel() == 1 ? 0 : g * d2 + c;
    }
};

template <typename T>
struct GroupParams {
    Tensor<T> scale; // [d1/g x d2], every entry >= kScaleFloor
    std::vector<std::int32_t> zero; // same layout, each in [0, 2^b - 1]
    std::size_t group = 0;

    std::size_t groups() const { return scale.rows(); }
    std::size_t cols() const { return scale.cols(); }
};

// Scale for one group from its range and clip factors; floored at kScaleFloor.
template <typename T>
T group_scale(T lo, T hi, T clip_hi, T clip_lo, int levels)
{
    const T s = (clip_hi * hi - clip_lo * lo) / static_cast<T>(levels);
    return s >= static_cast<T>(kScaleFloor) ? s : static_cast<T>(kScaleFloor);
}

template <typename T>
std::int32_t group_zero(T lo, T clip_lo, T s, int levels)
{
    const T z = -round_half_even(clip_lo * lo / s);
    if (!(z > T{0})) return 0; // also maps NaN and -0 to 0
    if (z > static_cast<T>(levels)) return levels;
    return static_cast<std::int32_t>(z);
}

template <typename T>
GroupParams<T> clip_to_params(const GroupMinMax<T>& mm, const ClipParams<T>& clip, const QuantSpec& spec)
{
    const std::size_t ng = mm.mins.rows(), d2 = mm.mins.cols();
    GroupParams<T> out{Tensor<T>({ng, d2}), std::vector<std::int32_t>(ng * d2), mm.group};
    for (std::size_t g = 0; g < ng; ++g) {
        for (std::size_t c = 0; c < d2; ++c) {
            const std::size_t ci = clip.index(g, c, d2);
            const T sg = sigmoid(clip.gamma[ci]);
            const T sb = sigmoid(clip.beta[ci]);
            const T lo = mm.mins.at(g, c), hi = mm.maxs.at(g, c);
            const T s = group_scale(lo, hi, sg, sb, spec.levels());
            out.scale.at(g, c) = s;
            out.zero[g * d2 + c] = group_zero(lo, sb, s, spec.levels());
        }
    }
    return out;
}

// Integer code matrix in [0, 2^b - 1], row-major d1 x d2.
struct Codes {
    std::size_t rows = 0, cols = 0;
    std::vector<std::uint8_t> values;

    std::uint8_t at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
    friend bool operator==(const Codes&, const Codes&) = default;
};

template <typename T>
std::uint8_t quantize_value(T w, T s, std::int32_t z, int levels)
{
    T v = round_half_even(w / s) + static_cast<T>(z);
    if (!(v > T{0})) return 0;
    if (v > static_cast<T>(levels)) return static_cast<std::uint8_t>(levels);
    return static_cast<std::uint8_t>(v);
}

template <typename T>
T dequantize_value(std::uint8_t code, T s, std::int32_t z)
{
    return s * static_cast<T>(static_cast<std::int32_t>(code) - z);
}

// codes = clamp(round(w / s) + z, 0, 2^b - 1), group-wise.
template <typename T>
Codes quantize(const Tensor<T>& w, const GroupParams<T>& p, const QuantSpec& spec)
{
    require_rank(w.shape(), 2, "quantize");
    if (p.group == 0 || w.rows() != p.groups() * p.group || w.cols() != p.cols())
        throw DimensionError("quantize: parameters do not match weight shape " + shape_str(w.shape()));
    Codes out{w.rows(), w.cols(), std::vector<std::uint8_t>(w.numel())};
    const std::size_t d2 = w.cols();
    for (std::size_t r = 0; r < w.rows(); ++r) {
        const std::size_t g = r / p.group;
        for (std::size_t c = 0; c < d2; ++c)
            out.values[r * d2 + c] =
                quantize_value(w.at(r, c), p.scale.at(g, c), p.zero[g * d2 + c], spec.levels());
    }
    return out;
}

// Q = s * (codes - z).
template <typename T>
Tensor<T> dequantize(const Codes& codes, const GroupParams<T>& p)
{
    if (p.group == 0 || codes.rows != p.groups() * p.group || codes.cols != p.cols())
        throw DimensionError("dequantize: parameters do not match code shape");
    Tensor<T> out({codes.rows, codes.cols});
    const std::size_t d2 = codes.cols;
    for (std::size_t r = 0; r < codes.rows; ++r) {
        const std::size_t g = r / p.group;
        for (std::size_t c = 0; c < d2; ++c)
            out.at(r, c) = dequantize_value(codes.at(r, c), p.scale.at(g, c), p.zero[g * d2 + c]);
    }
    return out;
}

template <typename T>
GroupParams<T> params_for(const Tensor<T>& w, const ClipParams<T>& clip, const QuantSpec& spec)
{
    spec.validate_for(w.rows());
    return clip_to_params(group_minmax(w, spec.group), clip, spec);
}

// f(W) = s * (clamp(round(W/s) + z, 0, 2^b - 1) - z), params from clip.
template <typename T>
Tensor<T> fake_quant(const Tensor<T>& w, const ClipParams<T>& clip, const QuantSpec& spec)
{
    const auto p = params_for(w, clip, spec);
    return dequantize(quantize(w, p, spec), p);
}

// Fake-quant with fixed, precomputed parameters.
template <typename T>
Tensor<T> fake_quant(const Tensor<T>& w, const GroupParams<T>& p, const QuantSpec& spec)
{
    return dequantize(quantize(w, p, spec), p);
}

template <typename T>
Tensor<T> fake_quant_unclipped(const Tensor<T>& w, const QuantSpec& spec)
{
    return fake_quant(w, ClipParams<T>::uniform(spec, w.rows(), w.cols(), kNoClipLogit), spec);
}

} // namespace apiq::quant
