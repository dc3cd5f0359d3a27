#pragma once
// Seeded random source. Every run funnels its sampling through one of
// these so that a (seed, config) pair pins down all outputs.

#include <cstdint>
#include <random>
#include <vector>

#include "mosaic/tensor.hpp"

namespace mosaic {

class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : eng_(seed ^ 0x9e3779b97f4a7c15ull) {}

    double uniform(double lo = 0.0, double hi = 1.0) {
        return std::uniform_real_distribution<double>(lo, hi)(eng_);
    }

    // inclusive bounds
    int uniform_int(int lo, int hi) {
        return std::uniform_int_distribution<int>(lo, hi)(eng_);
    }

    double normal(double mean = 0.0, double std = 1.0) {
        return std::normal_distribution<double>(mean, std)(eng_);
    }

    // normal(0, std) resampled until |z| <= 2 std
    double trunc_normal(double std) {
        for (;;) {
            double z = normal(0.0, std);
            if (z >= -2.0 * std && z <= 2.0 * std) return z;
        }
    }

    Tensor normal_tensor(std::vector<int> shape, double std) {
        Tensor t(std::move(shape));
        for (std::int64_t i = 0; i < t.numel(); ++i) t.mut()[i] = normal(0.0, std);
        return t;
    }

    Tensor trunc_normal_tensor(std::vector<int> shape, double std) {
        Tensor t(std::move(shape));
        for (std::int64_t i = 0; i < t.numel(); ++i) t.mut()[i] = trunc_normal(std);
        return t;
    }

    template <typename T>
    const T& pick(const std::vector<T>& items) {
        return items[static_cast<std::size_t>(uniform_int(0, static_cast<int>(items.size()) - 1))];
    }

    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_int(0, static_cast<int>(i) - 1));
            std::swap(items[i - 1], items[j]);
        }
    }

    // Independent child stream; deterministic in (parent seed chain, salt).
    Rng fork(std::uint64_t salt) {
        std::uint64_t s = eng_() ^ (salt * 0xbf58476d1ce4e5b9ull + 0x94d049bb133111ebull);
        return Rng(s);
    }

    std::mt19937_64& engine() { return eng_; }

private:
    std::mt19937_64 eng_;
};

}  // namespace mosaic
