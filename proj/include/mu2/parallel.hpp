// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace mu2 {

/// Applies `f` to every item with at most `max_inflight` concurrent calls.
/// Results keep input order. The first exception (by index) is rethrown after
/// all workers finish.
template <class In, class F>
auto parallel_map(const std::vector<In>& items, std::size_t max_inflight, F&& f)
    -> std::vector<decltype(f(items.front()))> {
    using Out = decltype(f(items.front()));
    std::vector<Out> out(items.size());
    const std::size_t workers = std::min<std::size_t>(std::max<std::size_t>(max_inflight, 1), items.size());
    if (workers <= 1) {
        for (std::size_t i = 0; i < items.size(); ++i) out[i] = f(items[i]);
        return out;
    }
    std::vector<std::exception_ptr> errors(items.size());
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < items.size(); i = next++) {
                try {
                    out[i] = f(items[i]);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);
    return out;
}

}  // namespace mu2
