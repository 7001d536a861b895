#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "apiq/linalg/rng.hpp"
#include "apiq/quant/quant.hpp"

namespace apiq::calib {

enum class Method { ApiqLw, ApiqBw, LoftQ, Rtn, QloraInit };

inline std::string to_string(Method m)
{
    switch (m) {
    case Method::ApiqLw: return "apiq-lw";
    case Method::ApiqBw: return "apiq-bw";
    case Method::LoftQ: return "loftq";
    case Method::Rtn: return "rtn";
    case Method::QloraInit: return "qlora-init";
    }
    return "?";
}

inline Method parse_method(const std::string& s)
{
    for (Method m : {Method::ApiqLw, Method::ApiqBw, Method::LoftQ, Method::Rtn, Method::QloraInit})
        if (s == to_string(m)) return m;
    if (s == "qlora") return Method::QloraInit;
    throw ConfigError("unknown method '" + s + "' (expected apiq-lw, apiq-bw, loftq, rtn or qlora-init)");
}

inline bool is_gradient_method(Method m) { return m == Method::ApiqLw || m == Method::ApiqBw; }

struct CalibPlan {
    Method method = Method::ApiqLw;
    quant::QuantSpec spec;
    std::size_t rank = 8;
    double alpha = -1.0; // negative: alpha = rank
    std::size_t epochs = 20;
    std::size_t batch = 4; // sequences per batch
    double lr_theta = 0.005;
    double lr_lora = 0.001;
    double weight_decay = 0.1;
    std::size_t loftq_iters = 5;
    double init_logit = quant::kInitClipLogit; // starting gamma and beta
    std::uint64_t seed = 0;

    double lora_alpha() const { return alpha < 0 ? static_cast<double>(rank) : alpha; }

    void validate() const
    {
        spec.validate();
        if (is_gradient_method(method)) {
            if (epochs == 0) throw ConfigError("calib.epochs must be >= 1 for " + to_string(method));
            if (!(lr_theta > 0) || !(lr_lora > 0)) throw ConfigError("learning rates must be positive");
        }
        if (batch == 0) throw ConfigError("calib.batch must be >= 1");
        if (!(weight_decay >= 0)) throw ConfigError("weight decay must be >= 0");
        if (!std::isfinite(init_logit)) throw ConfigError("initial clip logit must be finite");
        if (method == Method::LoftQ && loftq_iters == 0) throw ConfigError("loftq iterations must be >= 1");
    }
};

// n_samples windows of seq_len tokens, laid end to end.
struct CalibSet {
    std::vector<std::int32_t> tokens;
    std::size_t n_samples = 0;
    std::size_t seq_len = 0;
};

// Windows start at uniformly drawn offsets of the token stream.
inline CalibSet sample_calib(std::span<const std::int32_t> corpus, std::size_t n_samples, std::size_t seq_len,
                             std::uint64_t seed)
{
    if (n_samples == 0 || seq_len == 0) throw ConfigError("calibration needs at least one sample of length >= 1");
    if (corpus.size() < seq_len)
        throw InputError("corpus has " + std::to_string(corpus.size()) + " tokens, fewer than one calibration window of " +
                         std::to_string(seq_len));
    RngState rng(mix_seed(seed, 0xCA11B));
    CalibSet cs{{}, n_samples, seq_len};
    cs.tokens.reserve(n_samples * seq_len);
    for (std::size_t i = 0; i < n_samples; ++i) {
        const std::size_t start = rng.below(corpus.size() - seq_len + 1);
        cs.tokens.insert(cs.tokens.end(), corpus.begin() + static_cast<std::ptrdiff_t>(start),
                         corpus.begin() + static_cast<std::ptrdiff_t>(start + seq_len));
    }
    return cs;
}

// Per-layer (or per-block) loss trace; epoch 0 is the loss before any step.
struct CalibLog {
    struct Row {
        std::string layer;
        std::size_t epoch;
        double loss;
    };
    std::vector<Row> rows;
    std::function<void(const Row&)> sink;

    void add(const std::string& layer, std::size_t epoch, double loss)
    {
        rows.push_back({layer, epoch, loss});
        if (sink) sink(rows.back());
    }
};

} // namespace apiq::calib
