#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <thread>
#include <vector>

namespace pcseg {

namespace detail {
inline std::atomic<int>& thread_count_slot() {
    static std::atomic<int> n{0};  // 0 = use hardware_concurrency
    return n;
}
}  // namespace detail

inline int max_threads() {
    int n = detail::thread_count_slot().load(std::memory_order_relaxed);
    if (n > 0) return n;
    unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : static_cast<int>(hc);
}

inline void set_max_threads(int n) {
    detail::thread_count_slot().store(n > 0 ? n : 0, std::memory_order_relaxed);
}

// Restores the previous global thread count on scope exit.
class ThreadCountGuard {
public:
    explicit ThreadCountGuard(int n) : prev_(detail::thread_count_slot().load()) { set_max_threads(n); }
    ~ThreadCountGuard() { detail::thread_count_slot().store(prev_); }
    ThreadCountGuard(const ThreadCountGuard&) = delete;
    ThreadCountGuard& operator=(const ThreadCountGuard&) = delete;

private:
    int prev_;
};

// Runs fn(begin, end) over contiguous blocks of [0, n). Blocks are disjoint, so
// callers writing only to their block get results independent of the partition.
template <class Fn>
void parallel_for(std::int64_t n, Fn&& fn, std::int64_t grain = 2048) {
    if (n <= 0) return;
    int workers = max_threads();
    std::int64_t blocks = (n + grain - 1) / grain;
    workers = static_cast<int>(std::min<std::int64_t>(workers, blocks));
    if (workers <= 1) {
        fn(std::int64_t{0}, n);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers) - 1);
    std::int64_t chunk = (n + workers - 1) / workers;
    for (int w = 1; w < workers; ++w) {
        std::int64_t b = w * chunk;
        std::int64_t e = std::min(n, b + chunk);
        if (b >= e) break;
        pool.emplace_back([&fn, b, e] { fn(b, e); });
    }
    fn(std::int64_t{0}, std::min(n, chunk));
    for (auto& t : pool) t.join();
}

}  // namespace pcseg
