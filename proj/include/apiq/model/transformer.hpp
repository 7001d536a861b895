#pragma once

#include <array>
#include <functional>
#include <map>
#include <span>
#include <vector>

#include "apiq/autodiff/ops.hpp"
#include "apiq/model/config.hpp"
#include "apiq/model/qlinear.hpp"

namespace apiq::model {

template <typename T>
struct Block {
    Tensor<T> attn_norm;
    Tensor<T> ffn_norm;
    std::array<Linear<T>, 7> lin;

    Linear<T>& operator[](Proj p) { return lin[static_cast<std::size_t>(p)]; }
    const Linear<T>& operator[](Proj p) const { return lin[static_cast<std::size_t>(p)]; }
};

template <typename T>
struct TinyTransformer {
    ModelConfig cfg;
    Tensor<T> tok_embedding; // [vocab x d_model], also the output head
    std::vector<Block<T>> blocks;
    Tensor<T> final_norm;

    Linear<T>& linear(std::size_t b, Proj p) { return blocks.at(b)[p]; }
    const Linear<T>& linear(std::size_t b, Proj p) const { return blocks.at(b)[p]; }

    bool any_quantized() const
    {
        for (const auto& blk : blocks)
            for (const auto& l : blk.lin)
                if (l.quantized()) return true;
        return false;
    }

    template <typename U>
    TinyTransformer<U> cast() const
    {
        TinyTransformer<U> m{cfg, tok_embedding.template cast<U>(), {}, final_norm.template cast<U>()};
        for (const auto& blk : blocks) {
            Block<U> nb{blk.attn_norm.template cast<U>(), blk.ffn_norm.template cast<U>(), {}};
            for (std::size_t i = 0; i < 7; ++i) {
                if (blk.lin[i].quantized()) throw StateError("cast: quantized layers cannot change precision");
                nb.lin[i].weight = blk.lin[i].weight.template cast<U>();
            }
            m.blocks.push_back(std::move(nb));
        }
        return m;
    }
};

// Embedding N(0, 0.02); projections N(0, 1/sqrt(d_in)) with the two residual
// writers (o_proj, down_proj) further scaled by 1/sqrt(2 * n_blocks); norm
// gains 1. Each tensor draws from its own stream of the seed.
template <typename T>
TinyTransformer<T> init_model(const ModelConfig& cfg, std::uint64_t seed)
{
    cfg.validate();
    TinyTransformer<T> m;
    m.cfg = cfg;
    std::uint64_t stream = 0;
    RngState er(mix_seed(seed, stream++));
    m.tok_embedding = randn<T>(er, {cfg.vocab, cfg.d_model}, T{0}, static_cast<T>(0.02));
    const double resid = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.n_blocks));
    for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
        Block<T> blk{Tensor<T>({cfg.d_model}, T{1}), Tensor<T>({cfg.d_model}, T{1}), {}};
        for (Proj p : kAllProj) {
            const std::size_t d1 = proj_in(cfg, p), d2 = proj_out(cfg, p);
            double std = 1.0 / std::sqrt(static_cast<double>(d1));
            if (p == Proj::O || p == Proj::Down) std *= resid;
            RngState r(mix_seed(seed, stream++));
            blk[p].weight = randn<T>(r, {d1, d2}, T{0}, static_cast<T>(std));
        }
        m.blocks.push_back(std::move(blk));
    }
    m.final_norm = Tensor<T>({cfg.d_model}, T{1});
    return m;
}

// Which weights a forward pass uses.
enum class Mode { Full, Quantized };

// Applies projection p of block b to x on the tape.
template <typename T>
using LayerApply = std::function<ad::Var<T>(std::size_t b, Proj p, const ad::Var<T>& x)>;

// x * base + (alpha/r) * (x * A) * B^T. The adapter is applied as its own
// low-rank path, never folded into the base weight.
template <typename T>
ad::Var<T> adapted_linear(const ad::Var<T>& x, const ad::Var<T>& base, const ad::Var<T>* A, const ad::Var<T>* B,
                          T scaling)
{
    auto y = ad::matmul(x, base);
    if (A == nullptr || B == nullptr) return y;
    return ad::add(y, ad::scale(ad::matmul(ad::matmul(x, *A), *B, ad::Trans::Yes), scaling));
}

// Inference-time projection with all weights as tape constants.
template <typename T>
ad::Var<T> apply_linear(const ad::Var<T>& x, const Linear<T>& l, Mode mode)
{
    ad::Tape<T>& t = x.tape();
    if (mode == Mode::Quantized && l.quantized()) {
        const auto& q = *l.q;
        if (q.lora.rank() == 0) return ad::matmul(x, t.constant(q.base));
        auto A = t.constant(q.lora.A), B = t.constant(q.lora.B);
        return adapted_linear(x, t.constant(q.base), &A, &B, q.lora.scaling());
    }
    if (l.weight.empty()) throw StateError("full-precision weight not available for a quantized-only layer");
    return ad::matmul(x, t.constant(l.weight));
}

template <typename T>
LayerApply<T> constant_apply(const TinyTransformer<T>& m, Mode mode)
{
    return [&m, mode](std::size_t b, Proj p, const ad::Var<T>& x) { return apply_linear(x, m.linear(b, p), mode); };
}

// One decoder block on x [n_seq * t, d_model]:
//   h = x + o(attn(rope(q(n1 x)), rope(k(n1 x)), v(n1 x)))
//   y = h + down(silu(gate(n2 h)) * up(n2 h))
template <typename T>
ad::Var<T> forward_block(const ModelConfig& cfg, std::size_t b, const ad::Var<T>& x, std::size_t n_seq,
                         const ad::Var<T>& attn_gain, const ad::Var<T>& ffn_gain, const LayerApply<T>& apply)
{
    if (x.shape().size() != 2 || x.shape()[1] != cfg.d_model || n_seq == 0 || x.shape()[0] % n_seq != 0)
        throw DimensionError("forward_block: input " + shape_str(x.shape()) + " is not [n*t, " +
                             std::to_string(cfg.d_model) + "] for n=" + std::to_string(n_seq));
    const std::size_t t = x.shape()[0] / n_seq;
    if (t > cfg.max_seq)
        throw InputError("sequence length " + std::to_string(t) + " exceeds max_seq " + std::to_string(cfg.max_seq));
    const std::size_t H = cfg.n_heads;

    auto h = ad::rmsnorm(x, attn_gain);
    auto q = apply(b, Proj::Q, h);
    auto k = apply(b, Proj::K, h);
    auto v = apply(b, Proj::V, h);
    auto qh = ad::rope(ad::split_heads(q, n_seq, H), cfg.rope_theta);
    auto kh = ad::rope(ad::split_heads(k, n_seq, H), cfg.rope_theta);
    auto vh = ad::split_heads(v, n_seq, H);
    const T inv = static_cast<T>(1.0 / std::sqrt(static_cast<double>(cfg.head_dim())));
    auto probs = ad::softmax(ad::scale(ad::matmul(qh, kh, ad::Trans::Yes), inv), true);
    auto ctx = ad::merge_heads(ad::matmul(probs, vh), n_seq, H);
    auto x2 = ad::add(x, apply(b, Proj::O, ctx));

    auto h2 = ad::rmsnorm(x2, ffn_gain);
    auto gate = apply(b, Proj::Gate, h2);
    auto up = apply(b, Proj::Up, h2);
    return ad::add(x2, apply(b, Proj::Down, ad::mul(ad::silu(gate), up)));
}

// Norm gains and embedding as tape variables.
template <typename T>
struct NormVars {
    ad::Var<T> tok_embedding;
    std::vector<ad::Var<T>> attn_norm, ffn_norm;
    ad::Var<T> final_norm;
};

template <typename T>
NormVars<T> bind_norms(ad::Tape<T>& t, const TinyTransformer<T>& m, bool trainable)
{
    NormVars<T> v;
    v.tok_embedding = t.leaf(m.tok_embedding, trainable);
    for (const auto& blk : m.blocks) {
        v.attn_norm.push_back(t.leaf(blk.attn_norm, trainable));
        v.ffn_norm.push_back(t.leaf(blk.ffn_norm, trainable));
    }
    v.final_norm = t.leaf(m.final_norm, trainable);
    return v;
}

inline void check_tokens(const ModelConfig& cfg, std::span<const std::int32_t> tokens, std::size_t n_seq)
{
    if (n_seq == 0 || tokens.empty() || tokens.size() % n_seq != 0)
        throw DimensionError(std::to_string(tokens.size()) + " tokens do not split into " + std::to_string(n_seq) +
                             " equal sequences");
    if (tokens.size() / n_seq > cfg.max_seq)
        throw InputError("sequence length " + std::to_string(tokens.size() / n_seq) + " exceeds max_seq " +
                         std::to_string(cfg.max_seq));
    for (std::size_t i = 0; i < tokens.size(); ++i)
        if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= cfg.vocab)
            throw InputError("token " + std::to_string(tokens[i]) + " at position " + std::to_string(i) +
                             " outside vocabulary of size " + std::to_string(cfg.vocab));
}

// Logits [n_seq * t, vocab] for n_seq equal-length sequences laid end to end.
template <typename T>
ad::Var<T> forward_logits(const TinyTransformer<T>& m, const NormVars<T>& nv, std::span<const std::int32_t> tokens,
                          std::size_t n_seq, const LayerApply<T>& apply)
{
    check_tokens(m.cfg, tokens, n_seq);
    auto x = ad::embedding(nv.tok_embedding, tokens);
    for (std::size_t b = 0; b < m.cfg.n_blocks; ++b)
        x = forward_block(m.cfg, b, x, n_seq, nv.attn_norm[b], nv.ffn_norm[b], apply);
    return ad::matmul(ad::rmsnorm(x, nv.final_norm), nv.tok_embedding, ad::Trans::Yes);
}

// Recorded input and output of every projection, keyed by layer name, in the
// order the layers ran.
template <typename T>
struct Capture {
    std::vector<std::string> order;
    std::map<std::string, Tensor<T>> inputs, outputs;
};

template <typename T>
LayerApply<T> capturing(LayerApply<T> inner, Capture<T>& cap)
{
    return [inner = std::move(inner), &cap](std::size_t b, Proj p, const ad::Var<T>& x) {
        auto y = inner(b, p, x);
        const auto name = layer_name(b, p);
        cap.order.push_back(name);
        cap.inputs[name] = x.value();
        cap.outputs[name] = y.value();
        return y;
    };
}

template <typename T>
Tensor<T> logits(const TinyTransformer<T>& m, std::span<const std::int32_t> tokens, std::size_t n_seq, Mode mode,
                 Capture<T>* cap = nullptr)
{
    ad::Tape<T> tape;
    ad::NoGrad<T> guard(tape);
    const auto nv = bind_norms(tape, m, false);
    auto apply = constant_apply(m, mode);
    if (cap) apply = capturing(apply, *cap);
    return forward_logits(m, nv, tokens, n_seq, apply).value();
}

// Residual stream entering each block plus the final one: n_blocks + 1 tensors.
template <typename T>
std::vector<Tensor<T>> hidden_states(const TinyTransformer<T>& m, std::span<const std::int32_t> tokens,
                                     std::size_t n_seq, Mode mode)
{
    check_tokens(m.cfg, tokens, n_seq);
    ad::Tape<T> tape;
    ad::NoGrad<T> guard(tape);
    const auto nv = bind_norms(tape, m, false);
    const auto apply = constant_apply(m, mode);
    std::vector<Tensor<T>> hs;
    auto x = ad::embedding(nv.tok_embedding, tokens);
    hs.push_back(x.value());
    for (std::size_t b = 0; b < m.cfg.n_blocks; ++b) {
        x = forward_block(m.cfg, b, x, n_seq, nv.attn_norm[b], nv.ffn_norm[b], apply);
        hs.push_back(x.value());
    }
    return hs;
}

// One block applied to a given residual input, without gradients.
template <typename T>
Tensor<T> block_output(const TinyTransformer<T>& m, std::size_t b, const Tensor<T>& x, std::size_t n_seq, Mode mode,
                       Capture<T>* cap = nullptr)
{
    ad::Tape<T> tape;
    ad::NoGrad<T> guard(tape);
    auto apply = constant_apply(m, mode);
    if (cap) apply = capturing(apply, *cap);
    const auto& blk = m.blocks.at(b);
    return forward_block(m.cfg, b, tape.constant(x), n_seq, tape.constant(blk.attn_norm), tape.constant(blk.ffn_norm),
                         apply)
        .value();
}

} // namespace apiq::model
