#pragma once

#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace dzsi {

// Worker count: DZSI_THREADS env var, else hardware concurrency.
inline int thread_count() {
    if (const char* env = std::getenv("DZSI_THREADS")) {
        int n = std::atoi(env);
        if (n >= 1) return n;
    }
    unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : static_cast<int>(hc);
}

// Static block partition of [0, n). Results must be written to disjoint,
// index-addressed slots by the body; any cross-index reduction is done by
// the caller in index order so the outcome does not depend on the number
// of workers.
inline void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& body) {
    int workers = thread_count();
    if (n <= 0) return;
    if (workers <= 1 || n == 1) {
        body(0, n);
        return;
    }
    if (workers > n) workers = static_cast<int>(n);
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    int64_t chunk = (n + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
        int64_t lo = w * chunk;
        int64_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&body, lo, hi] { body(lo, hi); });
    }
    for (auto& th : pool) th.join();
}

}  // namespace dzsi
