#include "refrag/tensor.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace refrag {

static int64_t shape_numel(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t d : s) {
        if (d < 0) throw std::invalid_argument("tensor: negative dimension");
        n *= d;
    }
    return n;
}

Tensor::Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
}

int64_t Tensor::numel() const {
    return static_cast<int64_t>(data.size());
}

void Tensor::fill(double v) {
    std::fill(data.begin(), data.end(), v);
}

Tensor Tensor::zeros(std::vector<int64_t> s) {
    return Tensor(std::move(s));
}

Tensor Tensor::full(std::vector<int64_t> s, double v) {
    Tensor t(std::move(s));
    t.fill(v);
    return t;
}

static uint64_t splitmix64(uint64_t& x) {
    x += 0x9E3779B97F4A7C15ull;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

Rng::Rng(uint64_t seed) {
    uint64_t x = seed;
    for (auto& w : s) w = splitmix64(x);
}

static inline uint64_t rotl(uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
}

uint64_t Rng::next_u64() {
    const uint64_t result = rotl(s[1] * 5, 7) * 9;
    const uint64_t t = s[1] << 17;
    s[2] ^= s[0];
    s[3] ^= s[1];
    s[1] ^= s[2];
    s[0] ^= s[3];
    s[2] ^= t;
    s[3] = rotl(s[3], 45);
    return result;
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::gaussian() {
    if (have_spare_) {
        have_spare_ = false;
        return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
}

int64_t Rng::below(int64_t n) {
    if (n <= 0) throw std::invalid_argument("Rng::below: n must be positive");
    // Rejection-free modulo; bias is < 2^-63 * n, irrelevant at toy scale.
    return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
}

Rng Rng::fork(const std::string& tag) {
    uint64_t h = fnv1a(tag.data(), tag.size());
    uint64_t mix = next_u64() ^ h;
    return Rng(mix);
}

uint64_t fnv1a(const void* bytes, size_t n, uint64_t seed) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    uint64_t h = seed;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

uint64_t fingerprint(const std::vector<const Tensor*>& tensors) {
    uint64_t h = 1469598103934665603ull;
    for (const Tensor* t : tensors) {
        h = fnv1a(t->data.data(), t->data.size() * sizeof(double), h);
    }
    return h;
}

} // namespace refrag
