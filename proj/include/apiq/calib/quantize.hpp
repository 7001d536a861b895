#pragma once

#include "apiq/calib/apiq.hpp"
#include "apiq/calib/init.hpp"

namespace apiq::calib {

// Quantizes every linear layer of a full-precision model with the plan's
// method. The calibration set is only read by the gradient methods.
inline ModelResult quantize_model(const model::TinyTransformer<float>& fp, const CalibSet& cs, const CalibPlan& plan,
                                  CalibLog* log = nullptr)
{
    plan.validate();
    fp.cfg.validate_for(plan.spec);
    detail::require_full_precision(fp);
    switch (plan.method) {
    case Method::ApiqLw: return apiq_lw_model(fp, cs, plan, log);
    case Method::ApiqBw: return apiq_bw_model(fp, cs, plan, log);
    default: break;
    }
    ModelResult out{fp, {}};
    for (std::size_t b = 0; b < fp.cfg.n_blocks; ++b)
        for (model::Proj p : model::kAllProj) {
            const auto& w = fp.linear(b, p).weight;
            if (plan.rank > std::min(w.rows(), w.cols()))
                throw ConfigError("lora rank exceeds min(d1, d2) for " + model::layer_name(b, p));
            RngState rng(mix_seed(plan.seed, layer_stream(b, p)));
            out.model.linear(b, p).q = plan.method == Method::LoftQ
                                           ? loftq_init(w, plan.spec, plan.rank, plan.loftq_iters, plan.lora_alpha())
                                           : rtn_or_qlora_init(w, plan.spec, plan.rank, rng, plan.lora_alpha());
        }
    return out;
}

// Drops the full-precision copies of quantized layers.
inline void strip_full_weights(model::TinyTransformer<float>& m)
{
    for (auto& blk : m.blocks)
        for (auto& l : blk.lin)
            if (l.quantized()) l.weight = Tensor<float>();
}

} // namespace apiq::calib
