#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "apiq/calib/plan.hpp"
#include "apiq/model/config.hpp"
#include "apiq/train/train.hpp"

namespace apiq::cli {

enum class Kind { Count, Real, Text };

struct KeySpec {
    const char* key;
    const char* fallback;
    Kind kind;
};

// Every accepted key with its default. Count keys are non-negative integers.
inline const std::vector<KeySpec>& key_specs()
{
    static const std::vector<KeySpec> specs{
        {"model.d_model", "64", Kind::Count},
        {"model.n_heads", "4", Kind::Count},
        {"model.d_ff", "128", Kind::Count},
        {"model.n_blocks", "2", Kind::Count},
        {"model.max_seq", "128", Kind::Count},
        {"model.rope_theta", "10000", Kind::Real},
        {"quant.bits", "2", Kind::Count},
        {"quant.group", "64", Kind::Count},
        {"quant.clip_granularity", "per-matrix", Kind::Text},
        {"lora.rank", "8", Kind::Count},
        {"lora.alpha", "auto", Kind::Text},
        {"calib.method", "apiq-bw", Kind::Text},
        {"calib.epochs", "20", Kind::Count},
        {"calib.batch", "4", Kind::Count},
        {"calib.lr_theta", "0.005", Kind::Real},
        {"calib.lr_lora", "0.001", Kind::Real},
        {"calib.weight_decay", "0.1", Kind::Real},
        {"calib.samples", "16", Kind::Count},
        {"calib.seq_len", "128", Kind::Count},
        {"calib.loftq_iters", "5", Kind::Count},
        {"pretrain.steps", "2000", Kind::Count},
        {"pretrain.batch", "8", Kind::Count},
        {"pretrain.seq_len", "128", Kind::Count},
        {"pretrain.lr", "0.003", Kind::Real},
        {"pretrain.weight_decay", "0.1", Kind::Real},
        {"pretrain.schedule", "cosine", Kind::Text},
        {"pretrain.warmup_ratio", "0.03", Kind::Real},
        {"pretrain.log_every", "100", Kind::Count},
        {"finetune.lr", "0.001", Kind::Real},
        {"finetune.epochs", "3", Kind::Count},
        {"finetune.batch", "8", Kind::Count},
        {"finetune.seq_len", "128", Kind::Count},
        {"finetune.weight_decay", "0.1", Kind::Real},
        {"finetune.schedule", "static", Kind::Text},
        {"finetune.warmup_ratio", "0.03", Kind::Real},
        {"finetune.lora_position", "all", Kind::Text},
        {"eval.chunk_len", "128", Kind::Count},
        {"eval.samples", "16", Kind::Count},
        {"eval.hist_bins", "50", Kind::Count},
        {"seed", "0", Kind::Count},
    };
    return specs;
}

inline const KeySpec* find_key(const std::string& key)
{
    for (const auto& s : key_specs())
        if (key == s.key) return &s;
    return nullptr;
}

inline std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::string canonical_real(double v)
{
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

// Validates `value` for `spec` and returns its canonical spelling.
inline std::string normalize(const KeySpec& spec, const std::string& value)
{
    const auto bad = [&](const char* what) {
        return ConfigError(std::string(spec.key) + ": '" + value + "' is not " + what);
    };
    const char* b = value.data();
    const char* e = b + value.size();
    switch (spec.kind) {
    case Kind::Count: {
        std::uint64_t v = 0;
        const auto r = std::from_chars(b, e, v);
        if (value.empty() || r.ec != std::errc() || r.ptr != e) throw bad("a non-negative integer");
        return std::to_string(v);
    }
    case Kind::Real: {
        double v = 0;
        const auto r = std::from_chars(b, e, v);
        if (value.empty() || r.ec != std::errc() || r.ptr != e || !std::isfinite(v)) throw bad("a finite number");
        return canonical_real(v);
    }
    case Kind::Text:
        if (value.empty()) throw bad("a non-empty value");
        return value;
    }
    return value;
}

// Flat key=value settings. Lines may carry '#' comments; blank lines are
// skipped; unknown and repeated keys are rejected.
class RunConfig {
public:
    RunConfig()
    {
        for (const auto& s : key_specs()) values_[s.key] = s.fallback;
    }

    static RunConfig parse(const std::string& text, const std::string& origin = "config")
    {
        RunConfig rc;
        std::istringstream in(text);
        std::string line;
        std::set<std::string> seen;
        for (std::size_t ln = 1; std::getline(in, line); ++ln) {
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.resize(hash);
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            const std::string where = origin + ":" + std::to_string(ln) + ": ";
            if (eq == std::string::npos) throw ConfigError(where + "expected key=value");
            const auto key = trim(line.substr(0, eq));
            if (!find_key(key)) throw ConfigError(where + "unknown key '" + key + "'");
            if (!seen.insert(key).second) throw ConfigError(where + "key '" + key + "' given twice");
            try {
                rc.set(key, trim(line.substr(eq + 1)));
            } catch (const ConfigError& err) {
                throw ConfigError(where + err.what());
            }
        }
        return rc;
    }

    static RunConfig load(const std::string& path)
    {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file " + path);
        std::stringstream ss;
        ss << in.rdbuf();
        return parse(ss.str(), path);
    }

    void set(const std::string& key, const std::string& value)
    {
        const auto* spec = find_key(key);
        if (!spec) throw ConfigError("unknown key '" + key + "'");
        values_[key] = normalize(*spec, value);
    }

    const std::string& text(const std::string& key) const
    {
        const auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("unknown key '" + key + "'");
        return it->second;
    }

    std::size_t count(const std::string& key) const { return static_cast<std::size_t>(std::stoull(text(key))); }
    double real(const std::string& key) const { return std::stod(text(key)); }

    // All keys in sorted order, "k=v" joined by ';'.
    std::string canonical() const
    {
        std::string out;
        for (const auto& [k, v] : values_) {
            if (!out.empty()) out += ';';
            out += k + "=" + v;
        }
        return out;
    }

    model::ModelConfig model_config() const
    {
        model::ModelConfig c;
        c.d_model = count("model.d_model");
        c.n_heads = count("model.n_heads");
        c.d_ff = count("model.d_ff");
        c.n_blocks = count("model.n_blocks");
        c.max_seq = count("model.max_seq");
        c.rope_theta = real("model.rope_theta");
        c.validate();
        return c;
    }

    quant::QuantSpec quant_spec() const
    {
        const auto bits = count("quant.bits");
        if (bits > 8) throw ConfigError("quant.bits must be one of 2, 3, 4, 8");
        quant::QuantSpec s{static_cast<int>(bits), count("quant.group"), quant::parse_granularity(text("quant.clip_granularity"))};
        s.validate();
        return s;
    }

    calib::CalibPlan calib_plan() const
    {
        calib::CalibPlan p;
        p.method = calib::parse_method(text("calib.method"));
        p.spec = quant_spec();
        p.rank = count("lora.rank");
        const auto& a = text("lora.alpha");
        if (a != "auto") {
            const double v = std::stod(normalize(KeySpec{"lora.alpha", "", Kind::Real}, a));
            if (!(v > 0)) throw ConfigError("lora.alpha must be positive or 'auto'");
            p.alpha = v;
        }
        p.epochs = count("calib.epochs");
        p.batch = count("calib.batch");
        p.lr_theta = real("calib.lr_theta");
        p.lr_lora = real("calib.lr_lora");
        p.weight_decay = real("calib.weight_decay");
        p.loftq_iters = count("calib.loftq_iters");
        p.seed = count("seed");
        p.validate();
        return p;
    }

    train::PretrainConfig pretrain_config() const
    {
        train::PretrainConfig c;
        c.steps = count("pretrain.steps");
        c.batch = count("pretrain.batch");
        c.seq_len = count("pretrain.seq_len");
        c.lr = real("pretrain.lr");
        c.weight_decay = real("pretrain.weight_decay");
        c.schedule = train::parse_schedule(text("pretrain.schedule"));
        c.warmup_ratio = real("pretrain.warmup_ratio");
        c.seed = count("seed");
        if (!(c.lr > 0)) throw ConfigError("pretrain.lr must be positive");
        return c;
    }

    train::FinetuneConfig finetune_config() const
    {
        train::FinetuneConfig c;
        c.epochs = count("finetune.epochs");
        c.batch = count("finetune.batch");
        c.seq_len = count("finetune.seq_len");
        c.lr = real("finetune.lr");
        c.weight_decay = real("finetune.weight_decay");
        c.schedule = train::parse_schedule(text("finetune.schedule"));
        c.warmup_ratio = real("finetune.warmup_ratio");
        c.position = train::parse_position(text("finetune.lora_position"));
        c.seed = count("seed");
        if (!(c.lr > 0)) throw ConfigError("finetune.lr must be positive");
        return c;
    }

private:
    std::map<std::string, std::string> values_;
};

} // namespace apiq::cli
