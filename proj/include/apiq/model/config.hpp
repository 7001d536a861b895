#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "apiq/error.hpp"
#include "apiq/quant/quant.hpp"

namespace apiq::model {

struct ModelConfig {
    std::size_t vocab = 256;
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t d_ff = 128;
    std::size_t n_blocks = 2;
    std::size_t max_seq = 128;
    double rope_theta = 10000.0;

    std::size_t head_dim() const { return d_model / n_heads; }

    void validate() const
    {
        if (vocab == 0 || d_model == 0 || n_heads == 0 || d_ff == 0 || n_blocks == 0 || max_seq == 0)
            throw ConfigError("model dimensions must be positive");
        if (d_model % n_heads != 0)
            throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                              std::to_string(n_heads));
        if (head_dim() % 2 != 0) throw ConfigError("head dimension must be even for rotary embeddings");
        if (!(rope_theta > 1.0)) throw ConfigError("rope_theta must be > 1");
    }

    // Every quantized layer has input dimension d_model or d_ff.
    void validate_for(const quant::QuantSpec& spec) const
    {
        validate();
        spec.validate();
        for (std::size_t d : {d_model, d_ff})
            if (d % spec.group != 0)
                throw ConfigError("group size " + std::to_string(spec.group) + " does not divide layer input dimension " +
                                  std::to_string(d));
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// The seven linear layers of a block, in dataflow order.
enum class Proj : std::uint8_t { Q, K, V, O, Gate, Up, Down };

inline constexpr std::array<Proj, 7> kAllProj{Proj::Q, Proj::K, Proj::V, Proj::O, Proj::Gate, Proj::Up, Proj::Down};

inline const char* proj_name(Proj p)
{
    static constexpr const char* names[] = {"q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj"};
    return names[static_cast<int>(p)];
}

inline bool is_attention(Proj p) { return p == Proj::Q || p == Proj::K || p == Proj::V || p == Proj::O; }

inline std::string block_prefix(std::size_t b) { return "blocks." + std::to_string(b); }

inline std::string layer_name(std::size_t b, Proj p) { return block_prefix(b) + "." + proj_name(p); }

// Input and output widths of a projection.
inline std::size_t proj_in(const ModelConfig& c, Proj p) { return p == Proj::Down ? c.d_ff : c.d_model; }
inline std::size_t proj_out(const ModelConfig& c, Proj p)
{
    return p == Proj::Gate || p == Proj::Up ? c.d_ff : c.d_model;
}

} // namespace apiq::model
