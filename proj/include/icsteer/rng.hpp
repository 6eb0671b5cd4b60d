#pragma once
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace icsteer {

// Seeded RNG wrapper. The engine is std::mt19937_64; the value transforms
// (uniform, normal, integer range) are written out explicitly so every draw
// is pinned by this file alone and reproducible for a given seed.
class Rng {
  public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    // Uniform in [0, 1): 53 random mantissa bits.
    double uniform() {
        return double(eng_() >> 11) * (1.0 / 9007199254740992.0);
    }

    // Uniform integer in [0, n). n must be > 0. Modulo bias is negligible for
    // the small ranges used here and keeps the draw count per call fixed.
    int uniform_int(int n) { return int(eng_() % uint64_t(n)); }

    // Standard normal via Box-Muller (one draw consumed per pair; cached).
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // k distinct indices from [0, n), in draw order (k <= n).
    std::vector<int> sample_without_replacement(int n, int k) {
        std::vector<int> pool(n);
        for (int i = 0; i < n; ++i) pool[i] = i;
        std::vector<int> out;
        out.reserve(k);
        for (int i = 0; i < k; ++i) {
            int j = i + uniform_int(n - i);
            std::swap(pool[i], pool[j]);
            out.push_back(pool[i]);
        }
        return out;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (int i = int(v.size()) - 1; i > 0; --i) {
            int j = uniform_int(i + 1);
            std::swap(v[size_t(i)], v[size_t(j)]);
        }
    }

  private:
    std::mt19937_64 eng_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

} // namespace icsteer
