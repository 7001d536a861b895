#pragma once

#include "apiq/linalg/svd.hpp"
#include "apiq/model/qlinear.hpp"

namespace apiq::calib {

// Q = f(W) with clip factors 1 and a LoRA-default adapter (B = 0). The same
// starting point serves as the RTN baseline and as QLoRA's initialization.
inline model::QuantizedLinear<float> rtn_or_qlora_init(const Tensor<float>& w, const quant::QuantSpec& spec,
                                                       std::size_t rank, RngState& rng, double alpha = -1.0)
{
    const auto clip = quant::ClipParams<float>::uniform(spec, w.rows(), w.cols(), quant::kNoClipLogit);
    return model::QuantizedLinear<float>::freeze(
        w, clip, spec, model::LoraPair<float>::standard(rng, w.rows(), w.cols(), rank, alpha));
}

// Alternates Q <- f(W - (alpha/r) A B^T) and (A, B) <- rank-r SVD of W - Q,
// starting from A = B = 0 and ending on an SVD step. f uses clip factors 1.
// Singular directions with zero singular value get zero columns in A and B.
inline model::QuantizedLinear<float> loftq_init(const Tensor<float>& w, const quant::QuantSpec& spec, std::size_t rank,
                                                std::size_t iters, double alpha = -1.0)
{
    if (iters == 0) throw ConfigError("loftq needs at least one iteration");
    const auto clip = quant::ClipParams<float>::uniform(spec, w.rows(), w.cols(), quant::kNoClipLogit);
    const std::size_t d1 = w.rows(), d2 = w.cols();
    if (rank > std::min(d1, d2)) throw ConfigError("lora rank exceeds min(d1, d2)");
    auto lora = model::LoraPair<float>::zeros(d1, d2, rank, alpha);
    model::QuantizedLinear<float> q;
    for (std::size_t it = 0; it < iters; ++it) {
        q = model::QuantizedLinear<float>::freeze(apiq::sub(w, lora.delta(d1, d2)), clip, spec,
                                                  model::LoraPair<float>::zeros(d1, d2, rank, alpha));
        if (rank == 0) break;
        const auto svd = truncated_svd(apiq::sub(w, q.base).cast<double>(), rank);
        const double inv_scale = 1.0 / static_cast<double>(lora.scaling());
        for (std::size_t k = 0; k < rank; ++k) {
            const bool live = svd.S[k] > 0.0;
            for (std::size_t i = 0; i < d1; ++i)
                lora.A.at(i, k) = live ? static_cast<float>(svd.U.at(i, k) * svd.S[k] * inv_scale) : 0.0f;
            for (std::size_t j = 0; j < d2; ++j) lora.B.at(j, k) = live ? static_cast<float>(svd.V.at(j, k)) : 0.0f;
        }
    }
    q.lora = std::move(lora);
    return q;
}

} // namespace apiq::calib
