// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include "pgdpo/errors.hpp"

namespace pgdpo {

/// Worker count: explicit request if positive, else PGDPO_THREADS, else 1.
inline int resolve_threads(int requested) {
    if (requested > 0) return requested;
    if (const char* env = std::getenv("PGDPO_THREADS")) {
        try {
            const int n = std::stoi(env);
            if (n > 0) return n;
        } catch (const std::exception&) {
        }
        throw UsageError(std::string("PGDPO_THREADS must be a positive integer, got '") + env + "'");
    }
    return 1;
}

/// Runs task(i) for i in [0, n) on up to `threads` workers. Tasks must write
/// only to their own slot; the first failure in index order is rethrown.
inline void parallel_tasks(int n, int threads, const std::function<void(int)>& task) {
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
    auto run = [&](int i) {
        try {
            task(i);
        } catch (...) {
            errors[static_cast<std::size_t>(i)] = std::current_exception();
        }
    };
    const int workers = std::min(threads, n);
    if (workers <= 1) {
        for (int i = 0; i < n; ++i) run(i);
    } else {
        std::atomic<int> next{0};
        std::vector<std::thread> pool;
        pool.reserve(static_cast<std::size_t>(workers));
        for (int w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                for (int i = next++; i < n; i = next++) run(i);
            });
        }
        for (auto& th : pool) th.join();
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

}  // namespace pgdpo
