#pragma once

#include <limits>

#include "apiq/calib/adamw.hpp"
#include "apiq/calib/plan.hpp"
#include "apiq/model/transformer.hpp"
#include "apiq/quant/ste.hpp"

namespace apiq::calib {

// Mean squared difference over all elements, in double.
inline double mse64(const Tensor<float>& a, const Tensor<float>& b)
{
    require_same_shape(a.shape(), b.shape(), "mse");
    if (a.numel() == 0) return 0.0;
    const double d = frobenius_distance(a, b);
    return d * d / static_cast<double>(a.numel());
}

struct FitStats {
    double initial_loss = 0.0;
    double best_loss = 0.0;
    std::size_t best_epoch = 0;
};

namespace detail {

// Output of the quantized path on sequences [s0, s1) given the trainable
// tensors as tape variables.
using PathFn = std::function<ad::Var<float>(ad::Tape<float>&, const std::vector<ad::Var<float>>&, std::size_t s0,
                                            std::size_t s1)>;

inline double full_loss(const PathFn& path, const std::vector<Tensor<float>>& params, const Tensor<float>& target,
                        std::size_t n_seq)
{
    ad::Tape<float> tape;
    ad::NoGrad<float> guard(tape);
    std::vector<ad::Var<float>> vars;
    for (const auto& p : params) vars.push_back(tape.leaf(p, false));
    return mse64(path(tape, vars, 0, n_seq).value(), target);
}

// Batch-wise AdamW epochs over fixed-order batches of `batch` sequences.
// The first `n_theta` tensors use lr_theta, the rest lr_lora. After each
// epoch the loss on all sequences is logged and the lowest-loss epoch-end
// state is kept; params hold that state on return.
inline FitStats fit(const std::string& name, std::vector<Tensor<float>>& params, std::size_t n_theta,
                    const PathFn& path, const Tensor<float>& target, std::size_t n_seq, const CalibPlan& plan,
                    CalibLog* log)
{
    const std::size_t rows_per_seq = target.rows() / n_seq;
    FitStats st;
    st.initial_loss = full_loss(path, params, target, n_seq);
    if (log) log->add(name, 0, st.initial_loss);
    if (!std::isfinite(st.initial_loss))
        throw NumericError(name + ": non-finite loss before calibration (epoch 0)");
    st.best_loss = std::numeric_limits<double>::infinity();

    std::vector<AdamWState> opt(params.size());
    const AdamWConfig theta_cfg{plan.lr_theta, plan.weight_decay};
    const AdamWConfig lora_cfg{plan.lr_lora, plan.weight_decay};
    std::vector<Tensor<float>> best = params;
    for (std::size_t epoch = 1; epoch <= plan.epochs; ++epoch) {
        std::size_t bi = 0;
        for (std::size_t s0 = 0; s0 < n_seq; s0 += plan.batch, ++bi) {
            const std::size_t s1 = std::min(n_seq, s0 + plan.batch);
            ad::Tape<float> tape;
            std::vector<ad::Var<float>> vars;
            for (const auto& p : params) vars.push_back(tape.leaf(p, true));
            auto out = path(tape, vars, s0, s1);
            auto loss = ad::mse(out, tape.constant(slice_rows(target, s0 * rows_per_seq, s1 * rows_per_seq)));
            if (!std::isfinite(loss.value().item()))
                throw NumericError(name + ": non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                   std::to_string(bi));
            tape.backward(loss);
            for (std::size_t i = 0; i < params.size(); ++i)
                adamw_step(params[i], tape.grad(vars[i]), opt[i], i < n_theta ? theta_cfg : lora_cfg);
        }
        const double l = full_loss(path, params, target, n_seq);
        if (log) log->add(name, epoch, l);
        if (!std::isfinite(l))
            throw NumericError(name + ": non-finite loss at end of epoch " + std::to_string(epoch));
        if (l < st.best_loss) {
            st.best_loss = l;
            st.best_epoch = epoch;
            best = params;
        }
    }
    params = std::move(best);
    return st;
}

inline ad::Var<float> quantized_path(const ad::Var<float>& x, const ad::Var<float>& w, const ad::Var<float>& gamma,
                                     const ad::Var<float>& beta, const ad::Var<float>* A, const ad::Var<float>* B,
                                     float scaling, const quant::QuantSpec& spec)
{
    return model::adapted_linear(x, quant::fake_quant_ste(w, gamma, beta, spec), A, B, scaling);
}

} // namespace detail

struct LayerResult {
    model::QuantizedLinear<float> layer;
    Tensor<float> Y;  // X W
    Tensor<float> Yq; // Xq (Q + (alpha/r) A B^T) with the retained parameters
    FitStats stats;
};

// Calibrates one linear layer: minimizes mse(X W, Xq (Q + (alpha/r) A B^T))
// over the clip logits and the adapter. X and Xq hold n_seq sequences of
// equal length laid end to end.
inline LayerResult apiq_lw_layer(const Tensor<float>& w, const Tensor<float>& x, const Tensor<float>& xq,
                                 std::size_t n_seq, const CalibPlan& plan, const std::string& name, RngState& rng,
                                 CalibLog* log = nullptr)
{
    require_same_shape(x.shape(), xq.shape(), "apiq_lw_layer activations");
    require_rank(w.shape(), 2, "apiq_lw_layer weight");
    if (x.cols() != w.rows()) throw DimensionError("apiq_lw_layer: activation width does not match weight rows");
    if (n_seq == 0 || x.rows() % n_seq != 0) throw DimensionError("apiq_lw_layer: rows do not split into sequences");
    plan.spec.validate_for(w.rows());
    const std::size_t d1 = w.rows(), d2 = w.cols();
    if (plan.rank > std::min(d1, d2)) throw ConfigError("lora rank exceeds min(d1, d2) for " + name);

    LayerResult res;
    res.Y = matmul(x, w);
    auto clip = quant::ClipParams<float>::uniform(plan.spec, d1, d2, plan.init_logit);
    auto lora = model::LoraPair<float>::standard(rng, d1, d2, plan.rank, plan.lora_alpha());
    const float scaling = lora.scaling();
    const bool has_lora = lora.rank() > 0;

    std::vector<Tensor<float>> params{clip.gamma, clip.beta};
    if (has_lora) {
        params.push_back(lora.A);
        params.push_back(lora.B);
    }
    const std::size_t rows_per_seq = x.rows() / n_seq;
    const auto& spec = plan.spec;
    detail::PathFn path = [&](ad::Tape<float>& t, const std::vector<ad::Var<float>>& v, std::size_t s0, std::size_t s1) {
        auto xb = t.constant(s0 == 0 && s1 == n_seq ? xq : slice_rows(xq, s0 * rows_per_seq, s1 * rows_per_seq));
        auto wv = t.constant(w);
        return detail::quantized_path(xb, wv, v[0], v[1], has_lora ? &v[2] : nullptr, has_lora ? &v[3] : nullptr,
                                      scaling, spec);
    };
    res.stats = detail::fit(name, params, 2, path, res.Y, n_seq, plan, log);

    clip.gamma = params[0];
    clip.beta = params[1];
    if (has_lora) {
        lora.A = params[2];
        lora.B = params[3];
    }
    res.layer = model::QuantizedLinear<float>::freeze(w, clip, spec, std::move(lora));
    ad::Tape<float> tape;
    ad::NoGrad<float> guard(tape);
    model::Linear<float> lin{Tensor<float>(), res.layer};
    res.Yq = model::apply_linear(tape.constant(xq), lin, model::Mode::Quantized).value();
    return res;
}

// Seed stream of layer (b, p).
inline std::uint64_t layer_stream(std::size_t b, model::Proj p)
{
    return static_cast<std::uint64_t>(b) * 7 + static_cast<std::uint64_t>(p);
}

// Per-layer bookkeeping of a model-level calibration.
struct LayerTrace {
    std::string name;
    Tensor<float> Yq;
    FitStats stats;
};

struct ModelResult {
    model::TinyTransformer<float> model;
    std::vector<LayerTrace> layers; // lw: one per linear layer; bw: one per block
};

namespace detail {

inline void require_full_precision(const model::TinyTransformer<float>& m)
{
    for (const auto& blk : m.blocks)
        for (const auto& l : blk.lin)
            if (l.weight.empty() || l.quantized())
                throw ArgumentError("calibration needs a full-precision model without quantized layers");
}

} // namespace detail

// Layer-wise calibration in dataflow order (q, k, v, then o, then gate, up,
// then down, block by block). Each layer's quantized-path input is taken
// from a forward pass of the partially quantized model, so it is exactly what
// its already-calibrated producers emit.
inline ModelResult apiq_lw_model(const model::TinyTransformer<float>& fp, const CalibSet& cs, const CalibPlan& plan,
                                 CalibLog* log = nullptr)
{
    plan.validate();
    fp.cfg.validate_for(plan.spec);
    detail::require_full_precision(fp);
    using model::Proj;
    const std::size_t n = cs.n_samples;
    const auto h_fp = model::hidden_states(fp, cs.tokens, n, model::Mode::Full);
    ModelResult out{fp, {}};
    auto& qm = out.model;
    Tensor<float> xq_block = h_fp[0];
    const std::vector<std::vector<Proj>> stages{{Proj::Q, Proj::K, Proj::V}, {Proj::O}, {Proj::Gate, Proj::Up}, {Proj::Down}};
    for (std::size_t b = 0; b < fp.cfg.n_blocks; ++b) {
        model::Capture<float> cap_fp;
        model::block_output(fp, b, h_fp[b], n, model::Mode::Full, &cap_fp);
        for (const auto& stage : stages) {
            model::Capture<float> cap_q;
            model::block_output(qm, b, xq_block, n, model::Mode::Quantized, &cap_q);
            for (Proj p : stage) {
                const auto name = model::layer_name(b, p);
                RngState rng(mix_seed(plan.seed, layer_stream(b, p)));
                auto r = apiq_lw_layer(fp.linear(b, p).weight, cap_fp.inputs.at(name), cap_q.inputs.at(name), n, plan,
                                       name, rng, log);
                qm.linear(b, p).q = std::move(r.layer);
                out.layers.push_back({name, std::move(r.Yq), r.stats});
            }
        }
        xq_block = model::block_output(qm, b, xq_block, n, model::Mode::Quantized);
    }
    return out;
}

// Quantized-path output of block `blk` on xq, with v laid out as
// [gamma, beta] x 7 followed, if present, by [A, B] x 7 (projection order).
template <typename T>
ad::Var<T> block_quantized_path(const model::ModelConfig& cfg, std::size_t b, const model::Block<T>& blk,
                                const std::vector<ad::Var<T>>& v, const quant::QuantSpec& spec, T scaling,
                                const ad::Var<T>& xq, std::size_t n_seq)
{
    if (v.size() != 14 && v.size() != 28) throw ArgumentError("block path expects 14 or 28 parameter tensors");
    ad::Tape<T>& t = xq.tape();
    const bool has_lora = v.size() == 28;
    std::array<ad::Var<T>, 7> wv;
    for (std::size_t i = 0; i < 7; ++i) wv[i] = t.constant(blk.lin[i].weight);
    model::LayerApply<T> apply = [&](std::size_t, model::Proj p, const ad::Var<T>& in) {
        const std::size_t i = static_cast<std::size_t>(p);
        auto q = quant::fake_quant_ste(wv[i], v[2 * i], v[2 * i + 1], spec);
        return model::adapted_linear(in, q, has_lora ? &v[14 + 2 * i] : nullptr, has_lora ? &v[15 + 2 * i] : nullptr,
                                     scaling);
    };
    return model::forward_block(cfg, b, xq, n_seq, t.constant(blk.attn_norm), t.constant(blk.ffn_norm), apply);
}

struct BlockResult {
    std::array<model::QuantizedLinear<float>, 7> layers;
    Tensor<float> Y, Yq;
    FitStats stats;
};

// Block-wise calibration: all seven layers' clip logits and adapters jointly
// minimize mse(F(W, X), F(Q + (alpha/r) A B^T, Xq)) through the block forward.
inline BlockResult apiq_bw_block(const model::TinyTransformer<float>& fp, std::size_t b, const Tensor<float>& x,
                                 const Tensor<float>& xq, std::size_t n_seq, const CalibPlan& plan,
                                 CalibLog* log = nullptr)
{
    using model::Proj;
    require_same_shape(x.shape(), xq.shape(), "apiq_bw_block activations");
    const auto& cfg = fp.cfg;
    const auto& blk = fp.blocks.at(b);
    const auto& spec = plan.spec;
    BlockResult res;
    res.Y = model::block_output(fp, b, x, n_seq, model::Mode::Full);

    // Layout: [gamma, beta] x 7, then [A, B] x 7 when rank > 0.
    std::vector<Tensor<float>> params;
    std::vector<model::LoraPair<float>> loras;
    for (Proj p : model::kAllProj) {
        const auto& w = blk[p].weight;
        const auto clip = quant::ClipParams<float>::uniform(spec, w.rows(), w.cols(), plan.init_logit);
        params.push_back(clip.gamma);
        params.push_back(clip.beta);
        if (plan.rank > std::min(w.rows(), w.cols()))
            throw ConfigError("lora rank exceeds min(d1, d2) for " + model::layer_name(b, p));
        RngState rng(mix_seed(plan.seed, layer_stream(b, p)));
        loras.push_back(model::LoraPair<float>::standard(rng, w.rows(), w.cols(), plan.rank, plan.lora_alpha()));
    }
    const bool has_lora = plan.rank > 0;
    if (has_lora)
        for (const auto& l : loras) {
            params.push_back(l.A);
            params.push_back(l.B);
        }
    const float scaling = loras[0].scaling();
    const std::size_t rows_per_seq = x.rows() / n_seq;
    detail::PathFn path = [&](ad::Tape<float>& t, const std::vector<ad::Var<float>>& v, std::size_t s0, std::size_t s1) {
        auto xb = t.constant(s0 == 0 && s1 == n_seq ? xq : slice_rows(xq, s0 * rows_per_seq, s1 * rows_per_seq));
        return block_quantized_path(cfg, b, blk, v, spec, scaling, xb, s1 - s0);
    };
    res.stats = detail::fit(model::block_prefix(b), params, 14, path, res.Y, n_seq, plan, log);

    model::TinyTransformer<float> tmp{cfg, {}, {}, {}};
    tmp.blocks.resize(b + 1);
    tmp.blocks[b].attn_norm = blk.attn_norm;
    tmp.blocks[b].ffn_norm = blk.ffn_norm;
    for (std::size_t i = 0; i < 7; ++i) {
        const auto& w = blk.lin[i].weight;
        quant::ClipParams<float> clip{params[2 * i], params[2 * i + 1]};
        auto lora = loras[i];
        if (has_lora) {
            lora.A = params[14 + 2 * i];
            lora.B = params[15 + 2 * i];
        }
        res.layers[i] = model::QuantizedLinear<float>::freeze(w, clip, spec, std::move(lora));
        tmp.blocks[b].lin[i].q = res.layers[i];
    }
    res.Yq = model::block_output(tmp, b, xq, n_seq, model::Mode::Quantized);
    return res;
}

// Block-by-block calibration; block b's quantized input is block b-1's
// quantized output.
inline ModelResult apiq_bw_model(const model::TinyTransformer<float>& fp, const CalibSet& cs, const CalibPlan& plan,
                                 CalibLog* log = nullptr)
{
    plan.validate();
    fp.cfg.validate_for(plan.spec);
    detail::require_full_precision(fp);
    const std::size_t n = cs.n_samples;
    const auto h_fp = model::hidden_states(fp, cs.tokens, n, model::Mode::Full);
    ModelResult out{fp, {}};
    Tensor<float> xq = h_fp[0];
    for (std::size_t b = 0; b < fp.cfg.n_blocks; ++b) {
        auto r = apiq_bw_block(fp, b, h_fp[b], xq, n, plan, log);
        for (std::size_t i = 0; i < 7; ++i) out.model.blocks[b].lin[i].q = std::move(r.layers[i]);
        out.layers.push_back({model::block_prefix(b), r.Yq, r.stats});
        xq = std::move(r.Yq);
    }
    return out;
}

} // namespace apiq::calib
