#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace refrag {

// Dense row-major tensor of doubles. Shapes are small (toy models), so we
// favor clarity over stride tricks: every view is an explicit copy.
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> s);

    int64_t numel() const;
    int64_t rows() const { return shape.empty() ? 0 : shape[0]; }
    int64_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    double* ptr() { return data.data(); }
    const double* ptr() const { return data.data(); }

    double& at(int64_t r, int64_t c) { return data[static_cast<size_t>(r * cols() + c)]; }
    double at(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * cols() + c)]; }

    void fill(double v);
    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    static Tensor zeros(std::vector<int64_t> s);
    static Tensor full(std::vector<int64_t> s, double v);
};

// Deterministic RNG (xoshiro256**, splitmix64 seeding). Hand-rolled so that
// streams are bit-identical across standard libraries and platforms.
struct Rng {
    explicit Rng(uint64_t seed);

    uint64_t next_u64();
    double uniform();                 // [0, 1)
    double gaussian();                // N(0, 1), Box-Muller
    int64_t below(int64_t n);         // uniform in [0, n)
    Rng fork(const std::string& tag); // independent named substream

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
            std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(below(i + 1))]);
        }
    }

    uint64_t s[4];

  private:
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// 64-bit FNV-1a over the raw bytes of a list of tensors; used to detect
// parameter drift (e.g. the frozen-decoder guarantee).
uint64_t fingerprint(const std::vector<const Tensor*>& tensors);

// FNV-1a over an arbitrary byte buffer (manifest content hashes).
uint64_t fnv1a(const void* bytes, size_t n, uint64_t seed = 1469598103934665603ull);

} // namespace refrag
