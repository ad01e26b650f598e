#pragma once

#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace ntklab {

// Worker cap: hardware concurrency, overridable by NTKLAB_THREADS (>= 1).
inline unsigned worker_count() {
    static const unsigned cached = [] {
        unsigned n = std::thread::hardware_concurrency();
        if (n == 0) n = 1;
        if (const char* env = std::getenv("NTKLAB_THREADS")) {
            const long v = std::strtol(env, nullptr, 10);
            if (v >= 1) n = static_cast<unsigned>(v);
        }
        return n;
    }();
    return cached;
}

// Runs f(i) for i in [0, n). Each index owns its output slot, so results are
// identical for every worker count; the split is static to keep it that way.
template <class F>
inline void parallel_for(std::size_t n, F&& f) {
    const unsigned workers = worker_count();
    if (n == 0) return;
    if (workers <= 1 || n == 1) {
        for (std::size_t i = 0; i < n; ++i) f(i);
        return;
    }
    const std::size_t nthreads = std::min<std::size_t>(workers, n);
    std::vector<std::thread> pool;
    pool.reserve(nthreads);
    std::exception_ptr error;
    std::mutex error_mutex;
    for (std::size_t t = 0; t < nthreads; ++t) {
        pool.emplace_back([&, t] {
            try {
                for (std::size_t i = t; i < n; i += nthreads) f(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!error) error = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

}  // namespace ntklab
