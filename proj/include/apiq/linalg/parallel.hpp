#pragma once

#include <algorithm>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

#include "apiq/error.hpp"

namespace apiq {

// Worker-thread cap. APIQ_THREADS (positive int) lowers it; the default is
// the hardware concurrency. Only independent output elements are ever
// split across workers, so results do not depend on this value.
inline std::size_t thread_count()
{
    static const std::size_t count = [] {
        std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
        if (const char* env = std::getenv("APIQ_THREADS")) {
            char* end = nullptr;
            const long v = std::strtol(env, &end, 10);
            if (end == env || *end != '\0' || v <= 0)
                throw ConfigError(std::string("APIQ_THREADS must be a positive integer, got '") + env + "'");
            return std::min<std::size_t>(hw, static_cast<std::size_t>(v));
        }
        return hw;
    }();
    return count;
}

// Runs body(begin, end) over [0, n) in contiguous chunks. Falls back to a
// plain call when the work estimate is small or only one thread is allowed.
template <typename Body>
void parallel_for(std::size_t n, std::size_t work_per_item, Body&& body)
{
    constexpr std::size_t kMinWork = 1u << 18;
    const std::size_t threads = std::min(thread_count(), n);
    if (threads <= 1 || n * work_per_item < kMinWork) {
        body(std::size_t{0}, n);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(threads - 1);
    const std::size_t chunk = (n + threads - 1) / threads;
    for (std::size_t t = 1; t < threads; ++t) {
        const std::size_t b = t * chunk;
        const std::size_t e = std::min(n, b + chunk);
        if (b >= e) break;
        pool.emplace_back([&body, b, e] { body(b, e); });
    }
    body(std::size_t{0}, std::min(n, chunk));
    for (auto& th : pool) th.join();
}

} // namespace apiq
