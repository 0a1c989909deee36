#pragma once

// Deterministic work distribution: callers pre-derive per-task seeds and
// write into preallocated slots, so results never depend on the job count.

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace gmparse {

template <class F>
void parallel_for(int n, int jobs, F&& fn) {
    jobs = std::max(1, std::min(jobs, n));
    if (jobs <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
    std::vector<std::thread> workers;
    workers.reserve(std::size_t(jobs));
    for (int j = 0; j < jobs; ++j)
        workers.emplace_back([&] {
            for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
                try {
                    fn(i);
                } catch (...) {
                    errors[std::size_t(i)] = std::current_exception();
                }
            }
        });
    for (auto& w : workers) w.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace gmparse
