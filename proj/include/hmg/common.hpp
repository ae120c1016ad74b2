#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace hmg {

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent input data (files, argument combinations).
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Well-formed problem without a solution (diverged power flow,
/// infeasible dispatch, empty feasible set).
class InfeasibleError : public Error {
public:
    using Error::Error;
};

inline constexpr double pi = 3.14159265358979323846;

/// Capital recovery factor r / (1 - (1+r)^-n) for rate r and n periods.
inline double annuity_factor(double r, int n) {
    if (n <= 0)
        throw ValidationError("annuity_factor: lifetime must be positive");
    if (r < 0.0)
        throw ValidationError("annuity_factor: negative discount rate");
    if (r == 0.0)
        return 1.0 / n;
    return r / (1.0 - std::pow(1.0 + r, -n));
}

inline uint64_t splitmix64(uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Deterministic RNG for a (seed, stream, substream) triple. Used so that
/// parallel evaluation order can never change the random sequence an
/// individual sees.
inline std::mt19937_64 make_rng(uint64_t seed, uint64_t stream, uint64_t substream = 0) {
    uint64_t s = splitmix64(seed ^ splitmix64(stream ^ splitmix64(substream)));
    return std::mt19937_64(s);
}

/// Runs fn(i) for i in [0, n) on up to `jobs` threads. Results must be
/// written to pre-sized slots indexed by i; the function itself returns only
/// when every index is done, so the caller observes a jobs-independent state.
inline void parallel_for(int n, int jobs, const std::function<void(int)>& fn) {
    if (n <= 0)
        return;
    jobs = std::max(1, std::min(jobs, n));
    if (jobs == 1) {
        for (int i = 0; i < n; ++i)
            fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(jobs);
    std::atomic<int> next{0};
    for (int t = 0; t < jobs; ++t) {
        pool.emplace_back([&] {
            for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1))
                fn(i);
        });
    }
    for (auto& th : pool)
        th.join();
}

/// Default worker count: HMGPLAN_JOBS if set, else hardware concurrency.
inline int default_jobs() {
    if (const char* env = std::getenv("HMGPLAN_JOBS")) {
        int j = std::atoi(env);
        if (j > 0)
            return j;
    }
    unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : static_cast<int>(hc);
}

} // namespace hmg
