#pragma once

#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace mddet {

// Worker cap: MDDET_THREADS env var, else hardware concurrency.
inline int max_threads() {
    static int cached = [] {
        if (const char* env = std::getenv("MDDET_THREADS")) {
            int k = std::atoi(env);
            if (k >= 1) return k;
        }
        unsigned hc = std::thread::hardware_concurrency();
        return hc == 0 ? 1 : static_cast<int>(hc);
    }();
    return cached;
}

// Runs fn(begin, end) over disjoint contiguous chunks of [0, n).
// Each index is processed by exactly one worker and every per-index
// computation keeps its own fixed accumulation order, so results do not
// depend on the number of threads.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn,
                         std::size_t grain = 1) {
    if (n == 0) return;
    int nt = max_threads();
    std::size_t max_chunks = (n + grain - 1) / grain;
    std::size_t chunks = std::min<std::size_t>(nt, max_chunks);
    if (chunks <= 1) {
        fn(0, n);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(chunks);
    std::size_t per = (n + chunks - 1) / chunks;
    for (std::size_t t = 0; t < chunks; ++t) {
        std::size_t b = t * per;
        std::size_t e = std::min(n, b + per);
        if (b >= e) break;
        pool.emplace_back([&fn, b, e] { fn(b, e); });
    }
    for (auto& th : pool) th.join();
}

}  // namespace mddet
