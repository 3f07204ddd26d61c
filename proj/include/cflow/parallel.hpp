#pragma once

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

namespace cflow {

// Worker count: hardware concurrency, optionally capped by CFLOW_THREADS.
inline int worker_count() {
    int n = static_cast<int>(std::thread::hardware_concurrency());
    if (n < 1) n = 1;
    if (const char* env = std::getenv("CFLOW_THREADS")) {
        int cap = std::atoi(env);
        if (cap >= 1) n = std::min(n, cap);
    }
    return n;
}

// Index-sharded parallel loop. Work item i writes only to slot i of its
// output, so results are identical for any worker count.
template <typename Fn>
void parallel_for(std::ptrdiff_t n, Fn&& fn) {
    const int workers = worker_count();
    if (workers == 1 || n <= 1) {
        for (std::ptrdiff_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    const std::ptrdiff_t chunk = (n + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
        const std::ptrdiff_t lo = w * chunk;
        const std::ptrdiff_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &fn] {
            for (std::ptrdiff_t i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace cflow
