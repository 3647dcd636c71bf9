#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace unfoldir {

// Bad user-supplied parameter (degradation params, shapes, label sets, ...).
class ValueError : public std::runtime_error {
public:
    explicit ValueError(const std::string& what_arg) : std::runtime_error(what_arg) {}
};

// Bad configuration file / CLI configuration. Mapped to exit code 2.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what_arg) : std::runtime_error(what_arg) {}
};

// Filesystem / file-format failure. Mapped to exit code 1.
class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& what_arg) : std::runtime_error(what_arg) {}
};

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Combine a seed with a record/stream index into an independent sub-seed.
inline uint64_t mix_seed(uint64_t seed, uint64_t index) {
    return splitmix64(seed ^ splitmix64(index + 0x51a2b3c4d5e6f708ULL));
}

// Deterministic RNG wrapper. mt19937_64 output is bit-specified by the
// standard; the distributions here are our own so streams are stable
// across standard-library versions.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(splitmix64(seed)) {}

    uint64_t next_u64() { return eng_(); }

    // uniform in (0,1]
    double uniform() {
        return static_cast<double>((eng_() >> 11) + 1) * (1.0 / 9007199254740992.0);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    int64_t next_below(int64_t n) {
        return static_cast<int64_t>(eng_() % static_cast<uint64_t>(n));
    }

    // standard normal via Box-Muller
    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    double gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(next_below(static_cast<int64_t>(i)));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 eng_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Runs f(lo, hi) over fixed-size chunks of [0, n). Chunk boundaries depend
// only on `grain`, never on the thread count, so any reduction done inside
// one chunk is bit-reproducible for any number of workers.
void parallel_chunks(int64_t n, int64_t grain, const std::function<void(int64_t, int64_t)>& f);

// FNV-1a, used for config hashes embedded in checkpoints.
inline uint64_t fnv1a(const std::string& s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string to_hex(uint64_t v);

}  // namespace unfoldir
