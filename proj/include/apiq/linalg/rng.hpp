#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

#include "apiq/linalg/tensor.hpp"

namespace apiq {

inline std::uint64_t splitmix64(std::uint64_t x) noexcept
{
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

// Derives an independent seed for a sub-stream (e.g. one per layer).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) noexcept
{
    return splitmix64(seed ^ splitmix64(stream + 0x632BE59BD9B4E019ull));
}

// Counter-based generator: output i is splitmix64(seed + i * golden). The
// stream depends only on integer arithmetic and is identical on every
// platform.
class RngState {
public:
    explicit RngState(std::uint64_t seed = 0) noexcept : seed_(seed) {}

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t counter() const noexcept { return counter_; }

    std::uint64_t next_u64() noexcept
    {
        ++counter_;
        return splitmix64(seed_ + counter_ * 0x9E3779B97F4A7C15ull);
    }

    // Uniform on [0, 1) with 53 bits of resolution.
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    // Uniform integer on [0, n).
    std::uint64_t below(std::uint64_t n) noexcept
    {
        // Lemire's multiply-shift; bias is below 2^-64 * n, irrelevant here.
        return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    // Box-Muller pair from two uniforms.
    std::pair<double, double> normal_pair() noexcept
    {
        const double u1 = 1.0 - uniform(); // (0, 1]
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double th = 2.0 * std::numbers::pi * u2;
        return {r * std::cos(th), r * std::sin(th)};
    }

private:
    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
};

template <typename T = float>
Tensor<T> randn(RngState& rng, Shape shape, double mean = 0.0, double stddev = 1.0)
{
    Tensor<T> out(std::move(shape));
    auto d = out.data();
    for (std::size_t i = 0; i < d.size(); i += 2) {
        const auto [a, b] = rng.normal_pair();
        d[i] = static_cast<T>(mean + stddev * a);
        if (i + 1 < d.size()) d[i + 1] = static_cast<T>(mean + stddev * b);
    }
    return out;
}

template <typename T = float>
Tensor<T> rand_uniform(RngState& rng, Shape shape, double lo, double hi)
{
    Tensor<T> out(std::move(shape));
    for (auto& v : out.data()) v = static_cast<T>(rng.uniform(lo, hi));
    return out;
}

} // namespace apiq
