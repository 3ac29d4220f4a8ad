#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace factformer {

// Contract violations: shape mismatches, bad axis indices, invalid arguments.
struct ContractViolation : std::runtime_error {
    explicit ContractViolation(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed files (bad magic, truncation, extent overflow).
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad run configuration (unknown keys, odd head dims, invalid ranges).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Degenerate numerical input (zero reference norm, single-position instance).
struct DegenerateInput : std::runtime_error {
    explicit DegenerateInput(const std::string& msg) : std::runtime_error(msg) {}
};

// Work refused because it exceeds a stated budget (oracle grid size, memory).
struct ResourceError : std::runtime_error {
    explicit ResourceError(const std::string& msg) : std::runtime_error(msg) {}
};

// NaN loss/gradient during training.
struct DivergenceError : std::runtime_error {
    explicit DivergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

// Iterative numerical routine failed to converge.
struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

// Multiply-add counters, incremented once per op call by the analytic count.
// Orchestration is single-threaded, so plain integers suffice; inner loops may
// still run under OpenMP.
struct OpCounters {
    std::uint64_t total = 0;       // every matmul / mode product
    std::uint64_t kernel = 0;      // axial kernel construction (Q~ K~^T)
    std::uint64_t mode_chain = 0;  // value-tensor mode-product chain

    void reset() { total = kernel = mode_chain = 0; }
};

inline OpCounters& op_counters() {
    static OpCounters c;
    return c;
}

// Deterministic RNG. Normals use Box-Muller on top of mt19937_64 so the
// stream does not depend on the standard library's distribution internals.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    double uniform() {  // in [0, 1)
        return (gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    std::uint64_t next_u64() { return gen_(); }

private:
    std::mt19937_64 gen_;
};

}  // namespace factformer
