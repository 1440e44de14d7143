#pragma once

#include <cmath>
#include <cstdint>

#include "dzsi/tensor.hpp"

namespace dzsi {

// Counter-free splittable RNG built on the splitmix64 finalizer. Every
// consumer receives its own explicitly seeded stream; there is no global
// generator anywhere in the library. fork(k) derives stream k without
// touching the parent, so chain i's draws do not depend on how many other
// chains exist.
class Rng {
  public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    static uint64_t mix(uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    Rng fork(uint64_t stream) const { return Rng(mix(state_ ^ mix(stream + 0x51ed2700a1b4cf47ULL))); }

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // inclusive bounds
    int uniform_int(int lo, int hi) {
        return lo + static_cast<int>(next_u64() % static_cast<uint64_t>(hi - lo + 1));
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        if (u1 <= 0) u1 = 0x1.0p-53;
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    template <typename S>
    void fill_normal(Tensor<S>& t) {
        for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<S>(normal());
    }

    template <typename S>
    void fill_normal(Tensor<S>& t, S stddev) {
        for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<S>(normal()) * stddev;
    }

    uint64_t state() const { return state_; }

  private:
    uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace dzsi
