#pragma once

// Shared plumbing: error types, deterministic RNG, content hashing.
//
// The RNG is hand-rolled (splitmix64 core + Box-Muller) so corpora and
// checkpoints are bit-stable across standard-library versions;
// std::uniform_int_distribution is implementation-defined.

#include <cstdint>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace unierase {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Caller passed something malformed (shape mismatch, id out of range, ...).
struct InputError : Error {
    explicit InputError(const std::string& msg) : Error(msg) {}
};

// Linear system not numerically invertible; carries the offending eigenvalue.
struct SingularSystemError : Error {
    double smallest_eigenvalue;
    SingularSystemError(const std::string& msg, double eig)
        : Error(msg), smallest_eigenvalue(eig) {}
};

// Misuse of a stateful facility (e.g. foreign tape handle).
struct UsageError : Error {
    explicit UsageError(const std::string& msg) : Error(msg) {}
};

// Optimization diverged (NaN loss); carries the last finite loss seen.
struct TrainingError : Error {
    double last_finite_loss;
    TrainingError(const std::string& msg, double last)
        : Error(msg), last_finite_loss(last) {}
};

struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg) {}
};

#define UE_CHECK(cond, ExcType, msg)                   \
    do {                                               \
        if (!(cond)) throw ExcType(std::string(msg));  \
    } while (0)

// ---------------------------------------------------------------------------
// RNG
// ---------------------------------------------------------------------------

class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ull) {}

    uint64_t next_u64() {
        // splitmix64
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, n); n > 0. Modulo bias is negligible for n << 2^64 but we
    // reject the tail anyway so draws are exactly uniform.
    uint64_t next_below(uint64_t n) {
        if (n == 0) throw InputError("Rng::next_below: n must be positive");
        uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x;
        do { x = next_u64(); } while (x >= limit);
        return x % n;
    }

    int next_int(int lo, int hi) {  // inclusive range
        if (hi < lo) throw InputError("Rng::next_int: empty range");
        return lo + static_cast<int>(next_below(static_cast<uint64_t>(hi - lo + 1)));
    }

    double next_double() {  // [0,1)
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double next_gauss() {
        if (have_spare_) { have_spare_ = false; return spare_; }
        double u, v, s;
        do {
            u = 2.0 * next_double() - 1.0;
            v = 2.0 * next_double() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        double m = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * m;
        have_spare_ = true;
        return u * m;
    }

    // Fisher-Yates over indices [0, n).
    std::vector<int> permutation(int n) {
        std::vector<int> p(n);
        for (int i = 0; i < n; ++i) p[i] = i;
        for (int i = n - 1; i > 0; --i) {
            int j = static_cast<int>(next_below(static_cast<uint64_t>(i) + 1));
            std::swap(p[i], p[j]);
        }
        return p;
    }

private:
    uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Hashing (FNV-1a 64) — content fingerprints for checkpoints and reports.
// ---------------------------------------------------------------------------

class Fnv1a {
public:
    void update(const void* data, size_t len) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (size_t i = 0; i < len; ++i) {
            hash_ ^= p[i];
            hash_ *= 0x100000001b3ull;
        }
    }
    void update(const std::string& s) { update(s.data(), s.size()); }
    void update(double v) { update(&v, sizeof v); }
    void update(uint64_t v) { update(&v, sizeof v); }
    uint64_t digest() const { return hash_; }
    std::string hex() const;

private:
    uint64_t hash_ = 0xcbf29ce484222325ull;
};

std::string to_hex(uint64_t v);

}  // namespace unierase
