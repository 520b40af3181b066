#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace headlab {

// Error hierarchy. CLI maps these onto exit codes (see tools/headlab.cpp).
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor shape / dimension mismatches.
struct ShapeError : Error {
    using Error::Error;
};

// Violated API precondition (non-scalar loss, empty inputs, bad ranges).
struct ContractError : Error {
    using Error::Error;
};

// Invalid or unknown configuration.
struct ConfigError : Error {
    using Error::Error;
};

// Bad runtime input (out-of-range token ids, malformed files).
struct InputError : Error {
    using Error::Error;
};

// Training diverged (NaN/Inf loss).
struct TrainingError : Error {
    using Error::Error;
};

// Checkpoint container problems (bad magic, version mismatch).
struct CheckpointError : Error {
    using Error::Error;
};

// Two models/checkpoints that must share geometry do not.
struct GeometryError : Error {
    using Error::Error;
};

// Deterministic random source. All sampling in the project goes through
// this wrapper so that results are pinned to the seed, not to
// implementation-defined distribution internals.
class RandomSource {
public:
    explicit RandomSource(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [lo, hi] inclusive.
    int uniform_int(int lo, int hi) {
        if (hi < lo) throw ContractError("uniform_int: empty range");
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(gen_() % span);
    }

    // Box-Muller; second value cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = gen_() % i;
            std::swap(v[i - 1], v[j]);
        }
    }

    // Derives an independent stream, e.g. per (seed, purpose, index).
    static uint64_t derive(uint64_t seed, uint64_t stream, uint64_t index = 0) {
        uint64_t h = seed;
        h ^= 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2) + stream;
        h *= 0xff51afd7ed558ccdULL;
        h ^= h >> 33;
        h += index * 0xc4ceb9fe1a85ec53ULL;
        h ^= h >> 29;
        return h;
    }

private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// FNV-1a 64-bit, used for artifact provenance hashes in run manifests.
inline uint64_t fnv1a64(const void* data, size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    uint64_t h = 0xcbf29ce484222325ULL;
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

// Fixed-format float printing so emitted artifacts are byte-stable.
inline std::string format_real(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return std::string(buf);
}

inline std::string hex_u64(uint64_t v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

}  // namespace headlab
