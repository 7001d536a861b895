#pragma once

#include <optional>

#include "apiq/linalg/kernels.hpp"
#include "apiq/linalg/rng.hpp"
#include "apiq/quant/pack.hpp"

namespace apiq::model {

// Low-rank adapter: delta = (alpha / r) * A * B^T with A [d1 x r], B [d2 x r].
// Rank 0 (empty A and B) disables the adapter.
template <typename T>
struct LoraPair {
    Tensor<T> A;
    Tensor<T> B;
    double alpha = 0.0;

    std::size_t rank() const { return A.empty() ? 0 : A.cols(); }
    T scaling() const { return rank() == 0 ? T{0} : static_cast<T>(alpha / static_cast<double>(rank())); }

    static LoraPair disabled() { return {}; }

    // A = B = 0 at rank r; alpha defaults to r.
    static LoraPair zeros(std::size_t d1, std::size_t d2, std::size_t r, double alpha = -1.0)
    {
        if (r == 0) return {};
        return {Tensor<T>({d1, r}), Tensor<T>({d2, r}), alpha < 0 ? static_cast<double>(r) : alpha};
    }

    // Standard LoRA start: A ~ U(-1/sqrt(d1), 1/sqrt(d1)), B = 0.
    static LoraPair standard(RngState& rng, std::size_t d1, std::size_t d2, std::size_t r, double alpha = -1.0)
    {
        LoraPair p = zeros(d1, d2, r, alpha);
        if (r == 0) return p;
        const double bound = 1.0 / std::sqrt(static_cast<double>(d1));
        p.A = rand_uniform<T>(rng, {d1, r}, static_cast<T>(-bound), static_cast<T>(bound));
        return p;
    }

    void validate(std::size_t d1, std::size_t d2) const
    {
        if (rank() == 0) {
            if (!A.empty() || !B.empty()) throw DimensionError("lora: rank 0 adapter must have empty factors");
            return;
        }
        if (A.shape() != Shape{d1, rank()} || B.shape() != Shape{d2, rank()})
            throw DimensionError("lora: factors " + shape_str(A.shape()) + " and " + shape_str(B.shape()) +
                                 " do not fit a " + std::to_string(d1) + "x" + std::to_string(d2) + " layer");
        if (rank() > std::min(d1, d2)) throw ConfigError("lora rank exceeds min(d1, d2)");
    }

    Tensor<T> delta(std::size_t d1, std::size_t d2) const
    {
        if (rank() == 0) return Tensor<T>({d1, d2});
        return apiq::scale(matmul_nt(A, B), scaling());
    }
};

// A frozen quantized weight: packed codes, their group parameters, the clip
// logits they came from and an adapter. `base` caches dequantize(codes).
template <typename T>
struct QuantizedLinear {
    quant::QuantSpec spec;
    quant::PackedCodes codes;
    quant::GroupParams<T> params;
    quant::ClipParams<T> clip;
    LoraPair<T> lora;
    Tensor<T> base;

    std::size_t d1() const { return codes.rows; }
    std::size_t d2() const { return codes.cols; }

    static QuantizedLinear freeze(const Tensor<T>& w, const quant::ClipParams<T>& clip, const quant::QuantSpec& spec,
                                  LoraPair<T> lora)
    {
        QuantizedLinear q;
        q.spec = spec;
        q.clip = clip;
        q.params = quant::params_for(w, clip, spec);
        const auto c = quant::quantize(w, q.params, spec);
        q.codes = quant::pack(c, spec);
        q.base = quant::dequantize(c, q.params);
        lora.validate(w.rows(), w.cols());
        q.lora = std::move(lora);
        return q;
    }

    // Recomputes `base` from the stored codes (after loading).
    void rebuild()
    {
        base = quant::dequantize(quant::unpack(codes, spec), params);
        lora.validate(d1(), d2());
    }

    Tensor<T> effective_weight() const
    {
        if (lora.rank() == 0) return base;
        return apiq::add(base, lora.delta(d1(), d2()));
    }
};

// A projection: full-precision weight [d_in x d_out] and, once quantized, its
// frozen replacement. A loaded quantized model may carry no full weight.
template <typename T>
struct Linear {
    Tensor<T> weight;
    std::optional<QuantizedLinear<T>> q;

    bool quantized() const { return q.has_value(); }
};

} // namespace apiq::model
