#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace wrn {

// Error taxonomy. The CLI maps these onto stable exit codes.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape/dimension violations (structural errors).
class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Bad configuration (notation, flags, hyperparameters).
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Bad or missing input data (files, labels, degenerate statistics).
class DataError : public Error {
public:
    explicit DataError(const std::string& msg) : Error(msg) {}
};

// Numerical failure (non-convergent decomposition etc.).
class NumericError : public Error {
public:
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& msg) : Error(msg) {}
};

// Non-finite loss during training; carries the position of the failure.
class DivergenceError : public Error {
public:
    DivergenceError(const std::string& msg, int epoch, int batch)
        : Error(msg), epoch(epoch), batch(batch) {}
    int epoch;
    int batch;
};

class CheckpointError : public Error {
public:
    explicit CheckpointError(const std::string& msg) : Error(msg) {}
};

enum class Precision { f32, f64 };

inline const char* precision_name(Precision p) {
    return p == Precision::f32 ? "single" : "double";
}

inline Precision precision_from_name(const std::string& s) {
    if (s == "single" || s == "f32" || s == "float") return Precision::f32;
    if (s == "double" || s == "f64") return Precision::f64;
    throw ConfigError("unknown precision mode '" + s + "' (expected single or double)");
}

inline std::size_t shape_product(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           std::multiplies<>());
}

// Shapes render as "3x32x32" so they stay comma-free inside CSV fields.
inline std::string format_shape(const std::vector<std::size_t>& shape) {
    if (shape.empty()) return "scalar";
    std::ostringstream os;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Seed derivation. All randomness in the artifact flows from a master seed
// through splitmix64 so that streams are independent of thread count and
// stdlib distribution internals.

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag) {
    return splitmix64(base ^ splitmix64(tag));
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag1,
                                 std::uint64_t tag2) {
    return derive_seed(derive_seed(base, tag1), tag2);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag1,
                                 std::uint64_t tag2, std::uint64_t tag3) {
    return derive_seed(derive_seed(base, tag1, tag2), tag3);
}

// Stream tags for the independent RNG lanes of a run.
namespace seed_tag {
constexpr std::uint64_t init = 0x494E4954;      // parameter initialization
constexpr std::uint64_t shuffle = 0x53485546;   // per-epoch shuffle
constexpr std::uint64_t augment = 0x4155474D;   // per-batch augmentation
constexpr std::uint64_t dropout = 0x44524F50;   // per-site dropout masks
constexpr std::uint64_t synth = 0x53594E54;     // synthetic dataset
constexpr std::uint64_t bench = 0x42454E43;     // benchmark inputs
}  // namespace seed_tag

// Minimal counter RNG. Stateless and portable: the n-th draw of a stream
// depends only on (seed, n), never on stdlib internals or thread count.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), counter_(0) {}

    std::uint64_t next_u64() { return splitmix64(seed_ + 0x632BE59BD9B4E019ull * ++counter_); }

    // Uniform in [0, 1) with 53-bit resolution.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n). Modulo bias is < n / 2^64.
    std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

    bool next_bool() { return (next_u64() & 1ull) != 0; }

    // Box-Muller; one value per call (the sibling is discarded for
    // stream-position stability).
    double next_normal() {
        double u1 = next_double();
        double u2 = next_double();
        while (u1 <= 0.0) u1 = next_double();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    std::uint64_t seed() const { return seed_; }
    std::uint64_t counter() const { return counter_; }
    void set_counter(std::uint64_t c) { counter_ = c; }

private:
    std::uint64_t seed_;
    std::uint64_t counter_;
};

}  // namespace wrn
