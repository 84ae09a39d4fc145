#pragma once

#include <atomic>
#include <cstddef>
#include <thread>
#include <utility>
#include <vector>

namespace anchoral {

namespace detail {
inline thread_local bool in_parallel_region = false;
}

inline unsigned worker_count() {
    const unsigned n = std::thread::hardware_concurrency();
    return n == 0 ? 1 : n;
}

// Runs fn(chunk_index, begin, end) over [0, n) split into nchunks contiguous
// chunks. Chunk boundaries depend only on n and nchunks, never on the worker
// count, so a reduction that merges per-chunk results in chunk order is
// deterministic on any machine. Nested calls run serially.
template <typename Fn>
inline void parallel_chunks(std::size_t n, std::size_t nchunks, Fn&& fn) {
    if (n == 0) return;
    if (nchunks == 0) nchunks = 1;
    if (nchunks > n) nchunks = n;
    const std::size_t base = n / nchunks;
    const std::size_t rem = n % nchunks;
    auto bounds = [&](std::size_t c) {
        const std::size_t b = c * base + (c < rem ? c : rem);
        const std::size_t e = b + base + (c < rem ? 1 : 0);
        return std::pair<std::size_t, std::size_t>(b, e);
    };

    const unsigned workers = worker_count();
    if (workers <= 1 || nchunks == 1 || detail::in_parallel_region) {
        for (std::size_t c = 0; c < nchunks; ++c) {
            auto [b, e] = bounds(c);
            fn(c, b, e);
        }
        return;
    }

    std::atomic<std::size_t> next{0};
    auto work = [&] {
        detail::in_parallel_region = true;
        for (;;) {
            const std::size_t c = next.fetch_add(1);
            if (c >= nchunks) break;
            auto [b, e] = bounds(c);
            fn(c, b, e);
        }
        detail::in_parallel_region = false;
    };

    const std::size_t nthreads = std::min<std::size_t>(workers, nchunks);
    std::vector<std::thread> pool;
    pool.reserve(nthreads - 1);
    for (std::size_t t = 1; t < nthreads; ++t) pool.emplace_back(work);
    work();
    for (auto& th : pool) th.join();
}

// Element-wise parallel map with no reduction.
template <typename Fn>
inline void parallel_for(std::size_t n, Fn&& fn) {
    const std::size_t nchunks = std::max<std::size_t>(1, worker_count() * 4);
    parallel_chunks(n, nchunks, [&](std::size_t, std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i) fn(i);
    });
}

}  // namespace anchoral
