#pragma once

#include <numbers>

#include "apiq/calib/adamw.hpp"
#include "apiq/model/transformer.hpp"

namespace apiq::train {

enum class Schedule { Static, Cosine };

inline Schedule parse_schedule(const std::string& s)
{
    if (s == "static") return Schedule::Static;
    if (s == "cosine") return Schedule::Cosine;
    throw ConfigError("unknown lr schedule '" + s + "' (expected static or cosine)");
}

inline std::string to_string(Schedule s) { return s == Schedule::Static ? "static" : "cosine"; }

// Cosine decay to 0 after a linear warmup over the first warmup_ratio of steps.
inline double learning_rate(Schedule s, double base, std::size_t step, std::size_t total, double warmup_ratio)
{
    if (s == Schedule::Static || total == 0) return base;
    const auto warm = static_cast<std::size_t>(std::ceil(warmup_ratio * static_cast<double>(total)));
    if (step < warm) return base * static_cast<double>(step + 1) / static_cast<double>(warm);
    const double span = static_cast<double>(std::max<std::size_t>(1, total - warm));
    return base * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step - warm) / span));
}

enum class LoraPosition { All, Attn, Ffn };

inline LoraPosition parse_position(const std::string& s)
{
    if (s == "all") return LoraPosition::All;
    if (s == "attn") return LoraPosition::Attn;
    if (s == "ffn") return LoraPosition::Ffn;
    throw ConfigError("unknown lora position '" + s + "' (expected all, attn or ffn)");
}

inline std::string to_string(LoraPosition p)
{
    switch (p) {
    case LoraPosition::All: return "all";
    case LoraPosition::Attn: return "attn";
    case LoraPosition::Ffn: return "ffn";
    }
    return "?";
}

inline bool selected(LoraPosition pos, model::Proj p)
{
    if (pos == LoraPosition::All) return true;
    return model::is_attention(p) == (pos == LoraPosition::Attn);
}

// Random windows of seq_len + 1 tokens: inputs are the first seq_len tokens
// of each window, targets the last seq_len.
struct Batch {
    std::vector<std::int32_t> inputs, targets;
    std::size_t n_seq = 0;
};

inline Batch random_batch(std::span<const std::int32_t> data, std::size_t n_seq, std::size_t seq_len, RngState& rng)
{
    if (data.size() < seq_len + 1) throw InputError("training data shorter than one window");
    Batch b{{}, {}, n_seq};
    for (std::size_t i = 0; i < n_seq; ++i) {
        const std::size_t s = rng.below(data.size() - seq_len);
        b.inputs.insert(b.inputs.end(), data.begin() + static_cast<std::ptrdiff_t>(s),
                        data.begin() + static_cast<std::ptrdiff_t>(s + seq_len));
        b.targets.insert(b.targets.end(), data.begin() + static_cast<std::ptrdiff_t>(s + 1),
                         data.begin() + static_cast<std::ptrdiff_t>(s + seq_len + 1));
    }
    return b;
}

struct PretrainConfig {
    std::size_t steps = 2000;
    std::size_t batch = 8;
    std::size_t seq_len = 128;
    double lr = 3e-3;
    double weight_decay = 0.1;
    Schedule schedule = Schedule::Cosine;
    double warmup_ratio = 0.03;
    std::uint64_t seed = 0;
};

struct StepLog {
    std::size_t step;
    double lr;
    double loss;
};

// Full-parameter training with next-token cross-entropy. Returns the mean
// loss over the last min(steps, 50) steps (NaN when steps == 0).
inline double pretrain(model::TinyTransformer<float>& m, std::span<const std::int32_t> data, const PretrainConfig& cfg,
                       const std::function<void(const StepLog&)>& on_step = {})
{
    if (m.any_quantized()) throw ArgumentError("pretraining needs a full-precision model");
    if (cfg.seq_len == 0 || cfg.seq_len > m.cfg.max_seq) throw ConfigError("train seq_len must be in [1, max_seq]");
    if (cfg.batch == 0) throw ConfigError("train batch must be positive");
    if (cfg.steps > 0 && data.size() < cfg.seq_len + 1) throw InputError("training corpus shorter than one window");
    RngState rng(mix_seed(cfg.seed, 0x7EA1));

    std::vector<Tensor<float>*> params{&m.tok_embedding, &m.final_norm};
    for (auto& blk : m.blocks) {
        params.push_back(&blk.attn_norm);
        params.push_back(&blk.ffn_norm);
        for (auto& l : blk.lin) params.push_back(&l.weight);
    }
    std::vector<calib::AdamWState> opt(params.size());
    double tail = 0.0;
    std::size_t tail_n = 0;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        const auto batch = random_batch(data, cfg.batch, cfg.seq_len, rng);
        ad::Tape<float> tape;
        const auto nv = model::bind_norms(tape, m, true);
        std::vector<std::array<ad::Var<float>, 7>> wv(m.cfg.n_blocks);
        for (std::size_t b = 0; b < m.cfg.n_blocks; ++b)
            for (std::size_t i = 0; i < 7; ++i) wv[b][i] = tape.leaf(m.blocks[b].lin[i].weight, true);
        model::LayerApply<float> apply = [&](std::size_t b, model::Proj p, const ad::Var<float>& x) {
            return ad::matmul(x, wv[b][static_cast<std::size_t>(p)]);
        };
        auto loss = ad::cross_entropy(model::forward_logits(m, nv, batch.inputs, batch.n_seq, apply), batch.targets);
        const double lv = loss.value().item();
        if (!std::isfinite(lv)) throw NumericError("pretraining loss is not finite at step " + std::to_string(step));
        tape.backward(loss);

        std::vector<Tensor<float>> grads{tape.grad(nv.tok_embedding), tape.grad(nv.final_norm)};
        for (std::size_t b = 0; b < m.cfg.n_blocks; ++b) {
            grads.push_back(tape.grad(nv.attn_norm[b]));
            grads.push_back(tape.grad(nv.ffn_norm[b]));
            for (std::size_t i = 0; i < 7; ++i) grads.push_back(tape.grad(wv[b][i]));
        }
        const double lr = learning_rate(cfg.schedule, cfg.lr, step, cfg.steps, cfg.warmup_ratio);
        for (std::size_t i = 0; i < params.size(); ++i)
            calib::adamw_step(*params[i], grads[i], opt[i], {lr, cfg.weight_decay});
        if (on_step) on_step({step, lr, lv});
        if (step + 50 >= cfg.steps) {
            tail += lv;
            ++tail_n;
        }
    }
    return tail_n ? tail / static_cast<double>(tail_n) : std::numeric_limits<double>::quiet_NaN();
}

struct FinetuneConfig {
    std::size_t epochs = 3;
    std::size_t batch = 8;
    std::size_t seq_len = 128;
    double lr = 1e-3;
    double weight_decay = 0.1;
    Schedule schedule = Schedule::Static;
    double warmup_ratio = 0.03;
    LoraPosition position = LoraPosition::All;
    std::uint64_t seed = 0;
};

// Windows of one epoch: non-overlapping seq_len + 1 spans starting every
// seq_len tokens, visited in a seeded shuffled order.
inline std::vector<std::size_t> epoch_windows(std::size_t n_tokens, std::size_t seq_len, RngState& rng)
{
    std::vector<std::size_t> starts;
    for (std::size_t s = 0; s + seq_len + 1 <= n_tokens; s += seq_len) starts.push_back(s);
    for (std::size_t i = starts.size(); i > 1; --i) std::swap(starts[i - 1], starts[rng.below(i)]);
    return starts;
}

struct EpochLog {
    std::size_t epoch;
    double train_loss;
};

// Trains only the adapters (A, B) of the selected positions; codes, scales,
// zero-points, norms and embeddings stay fixed.
inline void finetune(model::TinyTransformer<float>& m, std::span<const std::int32_t> data, const FinetuneConfig& cfg,
                     const std::function<void(const EpochLog&)>& on_epoch = {})
{
    if (cfg.seq_len == 0 || cfg.seq_len > m.cfg.max_seq) throw ConfigError("finetune seq_len must be in [1, max_seq]");
    if (cfg.batch == 0) throw ConfigError("finetune batch must be positive");
    std::vector<std::pair<std::size_t, model::Proj>> trainable;
    for (std::size_t b = 0; b < m.cfg.n_blocks; ++b)
        for (model::Proj p : model::kAllProj) {
            const auto& l = m.linear(b, p);
            if (!l.quantized()) throw ArgumentError("finetuning needs a quantized model (" + model::layer_name(b, p) + ")");
            if (selected(cfg.position, p) && l.q->lora.rank() > 0) trainable.emplace_back(b, p);
        }
    if (trainable.empty()) throw ConfigError("no adapters to finetune (rank 0 or empty position)");
    RngState rng(mix_seed(cfg.seed, 0xF17E));
    if (cfg.epochs > 0 && data.size() < cfg.seq_len + 1) throw InputError("finetuning corpus shorter than one window");
    const std::size_t windows = data.size() > cfg.seq_len ? (data.size() - 1) / cfg.seq_len : 0;
    const std::size_t per_epoch = (windows + cfg.batch - 1) / cfg.batch;
    const std::size_t total = per_epoch * cfg.epochs;
    std::vector<calib::AdamWState> opt(2 * trainable.size());
    std::size_t step = 0;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto starts = epoch_windows(data.size(), cfg.seq_len, rng);
        double sum = 0.0;
        std::size_t n = 0;
        for (std::size_t w0 = 0; w0 < starts.size(); w0 += cfg.batch, ++step) {
            const std::size_t w1 = std::min(starts.size(), w0 + cfg.batch);
            std::vector<std::int32_t> in, tgt;
            for (std::size_t w = w0; w < w1; ++w) {
                const auto s = data.subspan(starts[w], cfg.seq_len + 1);
                in.insert(in.end(), s.begin(), s.end() - 1);
                tgt.insert(tgt.end(), s.begin() + 1, s.end());
            }
            ad::Tape<float> tape;
            const auto nv = model::bind_norms(tape, m, false);
            std::map<std::string, std::pair<ad::Var<float>, ad::Var<float>>> ab;
            for (const auto& [b, p] : trainable) {
                const auto& lora = m.linear(b, p).q->lora;
                ab.emplace(model::layer_name(b, p), std::make_pair(tape.leaf(lora.A, true), tape.leaf(lora.B, true)));
            }
            model::LayerApply<float> apply = [&](std::size_t b, model::Proj p, const ad::Var<float>& x) {
                const auto it = ab.find(model::layer_name(b, p));
                if (it == ab.end()) return model::apply_linear(x, m.linear(b, p), model::Mode::Quantized);
                const auto& q = *m.linear(b, p).q;
                return model::adapted_linear(x, tape.constant(q.base), &it->second.first, &it->second.second,
                                             q.lora.scaling());
            };
            auto loss = ad::cross_entropy(model::forward_logits(m, nv, in, w1 - w0, apply), tgt);
            const double lv = loss.value().item();
            if (!std::isfinite(lv))
                throw NumericError("finetuning loss is not finite at epoch " + std::to_string(epoch) + ", step " +
                                   std::to_string(step));
            tape.backward(loss);
            const double lr = learning_rate(cfg.schedule, cfg.lr, step, total, cfg.warmup_ratio);
            for (std::size_t i = 0; i < trainable.size(); ++i) {
                const auto& [b, p] = trainable[i];
                auto& lora = m.linear(b, p).q->lora;
                const auto& vars = ab.at(model::layer_name(b, p));
                calib::adamw_step(lora.A, tape.grad(vars.first), opt[2 * i], {lr, cfg.weight_decay});
                calib::adamw_step(lora.B, tape.grad(vars.second), opt[2 * i + 1], {lr, cfg.weight_decay});
            }
            sum += lv;
            ++n;
        }
        if (on_epoch) on_epoch({epoch, n ? sum / static_cast<double>(n) : 0.0});
    }
}

} // namespace apiq::train
