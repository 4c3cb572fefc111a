// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

#include "lopt/tensor.hpp"

namespace lopt {

/// Splits `range` into `parts` contiguous pieces whose sizes differ by at
/// most one; earlier pieces get the extra elements.
std::vector<ElementRange> split_range(ElementRange range, std::size_t parts);

/// Runs fn(p) for every partition p in [0, parts). Results must depend only on
/// p, never on which thread ran it; at most hardware_concurrency threads are
/// used. The first exception (lowest partition index) is rethrown.
template <typename Fn>
void run_partitions(std::size_t parts, Fn&& fn) {
    if (parts == 0) return;
    const std::size_t hw = std::max<std::size_t>(1, std::thread::hardware_concurrency());
    const std::size_t threads = std::min(parts, hw);
    std::vector<std::exception_ptr> errors(parts);
    auto body = [&](std::size_t t) {
        for (std::size_t p = t; p < parts; p += threads) {
            try {
                fn(p);
            } catch (...) {
                errors[p] = std::current_exception();
            }
        }
    };
    if (threads == 1) {
        body(0);
    } else {
        std::vector<std::thread> pool;
        pool.reserve(threads - 1);
        for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(body, t);
        body(0);
        for (auto& th : pool) th.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

} // namespace lopt
