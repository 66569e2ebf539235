#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace dvd {

inline void require(bool cond, const std::string& msg) {
    if (!cond)
        throw std::invalid_argument(msg);
}

inline void require_domain(bool cond, const std::string& msg) {
    if (!cond)
        throw std::domain_error(msg);
}

/// Deterministic RNG: mt19937_64 plus an explicit Box-Muller transform, so
/// draw sequences do not depend on libstdc++ distribution internals.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // uniform in (0, 1)
    double uniform() {
        const uint64_t x = engine_() >> 11;  // 53 bits
        return (static_cast<double>(x) + 0.5) * 0x1p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    int64_t uniform_int(int64_t n) {
        require(n > 0, "uniform_int: n must be positive");
        const uint64_t un = static_cast<uint64_t>(n);
        const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return static_cast<int64_t>(x % un);
    }

    double normal() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        const double u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * 3.14159265358979323846 * u2;
        cached_ = r * std::sin(a);
        have_cached_ = true;
        return r * std::cos(a);
    }

    uint64_t fork() { return engine_(); }

private:
    std::mt19937_64 engine_;
    double cached_ = 0.0;
    bool have_cached_ = false;
};

/// Runs fn(i) for i in [0, n). Work is split into contiguous chunks, one per
/// thread; every index is owned by exactly one thread, so results do not
/// depend on scheduling.
template <typename Fn>
void parallel_for(int64_t n, Fn&& fn, int max_threads = 0) {
    if (n <= 0)
        return;
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw <= 0)
        hw = 1;
    if (max_threads > 0 && max_threads < hw)
        hw = max_threads;
    const int threads = static_cast<int>(std::min<int64_t>(hw, n));
    if (threads <= 1) {
        for (int64_t i = 0; i < n; ++i)
            fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(threads);
    const int64_t chunk = (n + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) {
        const int64_t lo = t * chunk;
        const int64_t hi = std::min<int64_t>(n, lo + chunk);
        if (lo >= hi)
            break;
        pool.emplace_back([lo, hi, &fn] {
            for (int64_t i = lo; i < hi; ++i)
                fn(i);
        });
    }
    for (auto& th : pool)
        th.join();
}

inline std::string shape_to_string(const std::vector<int>& shape) {
    std::string s = "(";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i)
            s += ", ";
        s += std::to_string(shape[i]);
    }
    s += ")";
    return s;
}

}  // namespace dvd
