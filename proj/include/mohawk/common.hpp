#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>
#include <functional>
#include <atomic>
#include <cmath>

namespace mohawk {

using i64 = std::int64_t;
using u64 = std::uint64_t;
using u32 = std::uint32_t;

// Error taxonomy. Contract errors are caller bugs (bad shapes, out-of-range
// arguments); the others map to CLI exit codes.
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};
struct InvalidInputError : std::runtime_error {
    explicit InvalidInputError(const std::string& msg) : std::runtime_error(msg) {}
};
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};
struct ParseError : std::runtime_error {
    ParseError(const std::string& msg, int line)
        : std::runtime_error(msg + " (line " + std::to_string(line) + ")"), line(line) {}
    int line;
};
struct TrainingFailureError : std::runtime_error {
    explicit TrainingFailureError(const std::string& msg) : std::runtime_error(msg) {}
};
struct OptimizationFailureError : std::runtime_error {
    explicit OptimizationFailureError(const std::string& msg) : std::runtime_error(msg) {}
};

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw ContractError(msg);
}
inline void check_input(bool cond, const std::string& msg) {
    if (!cond) throw InvalidInputError(msg);
}

// Runs fn(i) for i in [0, n). Work items are dispatched to at most `jobs`
// worker threads; each item must write only to its own output slot so the
// result is identical for every jobs value.
inline void parallel_for(i64 n, int jobs, const std::function<void(i64)>& fn) {
    if (n <= 0) return;
    int workers = jobs < 1 ? 1 : jobs;
    if (workers > n) workers = static_cast<int>(n);
    if (workers == 1) {
        for (i64 i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<i64> next{0};
    std::vector<std::thread> pool;
    std::exception_ptr err;
    std::atomic<bool> failed{false};
    pool.reserve(static_cast<size_t>(workers));
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&]() {
            for (;;) {
                i64 i = next.fetch_add(1);
                if (i >= n || failed.load()) return;
                try {
                    fn(i);
                } catch (...) {
                    if (!failed.exchange(true)) err = std::current_exception();
                    return;
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (failed.load()) std::rethrow_exception(err);
}

inline bool is_finite(double v) { return std::isfinite(v); }

}  // namespace mohawk
