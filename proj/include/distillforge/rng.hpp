// Counter-based splittable RNG. Every random draw in the toolkit is a pure
// function of (seed, stream ids..., counter), so runs are exactly
// reproducible and generation parallelizes without shared state.
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace distillforge {

inline uint64_t mix64(uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// A keyed counter generator: key identifies the stream, the counter indexes
// draws within it. Stateless apart from the running counter.
class CounterRng {
public:
    CounterRng() = default;
    explicit CounterRng(uint64_t key) : key_(key) {}

    static CounterRng from(uint64_t seed) { return CounterRng(mix64(seed)); }

    // Derive an independent substream.
    CounterRng split(uint64_t stream) const {
        return CounterRng(mix64(key_ ^ mix64(stream + 0x632be59bd9b4e019ULL)));
    }
    CounterRng split(uint64_t a, uint64_t b) const { return split(a).split(b); }
    CounterRng split(uint64_t a, uint64_t b, uint64_t c) const {
        return split(a).split(b).split(c);
    }

    uint64_t at(uint64_t counter) const { return mix64(key_ ^ mix64(counter * 0xda942042e4dd58b5ULL + 1)); }

    uint64_t next_u64() { return at(counter_++); }

    // Uniform in [0,1).
    double next_uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in [lo,hi).
    double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_uniform(); }

    // Uniform integer in [0,n).
    uint64_t next_below(uint64_t n) { return n ? next_u64() % n : 0; }

    // Box-Muller; consumes two draws per call.
    double next_gauss() {
        double u1 = next_uniform();
        double u2 = next_uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = size_t(next_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    uint64_t key() const { return key_; }

private:
    uint64_t key_ = 0x853c49e6748fea9bULL;
    uint64_t counter_ = 0;
};

} // namespace distillforge
