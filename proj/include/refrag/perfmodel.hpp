#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "refrag/model.hpp"

namespace refrag::perf {

// Exact rational over 128-bit integers; throws on overflow. Used so the
// closed-form ratios are reproduced to the last digit, not approximately.
struct Rational {
    __int128 num = 0;
    __int128 den = 1;

    static Rational of(long long n, long long d = 1);
    Rational operator+(const Rational& o) const;
    Rational operator-(const Rational& o) const;
    Rational operator*(const Rational& o) const;
    Rational operator/(const Rational& o) const;
    bool operator==(const Rational& o) const { return num == o.num && den == o.den; }
    bool operator<(const Rational& o) const;
    double to_double() const;
    std::string str() const;

  private:
    void normalize();
    friend Rational make_rational(__int128 n, __int128 d);
};

struct HardwareProfile {
    double flops_per_s = 0.0;     // f
    double hbm_bytes_per_s = 0.0; // m
    void validate() const;
};

struct ShapeProfile {
    int64_t d = 4096;  // hidden width
    int64_t l = 32;    // decoder layers
    int64_t n = 0;     // parameter count
    int64_t b = 1;     // batch size
    int64_t s = 2048;  // context tokens
    int64_t o = 2048;  // output tokens
    int64_t k = 16;    // compression rate
    void validate() const;
};

// ceil(s/k): compressed slot count (padding convention shared with chunking).
int64_t compressed_context(int64_t s, int64_t k);

// (24 d^2 + 4 d s) * l * b * s, exact. Throws on non-positive input/overflow.
unsigned long long prefill_flops(int64_t b, int64_t s, int64_t d, int64_t l);

// 4 d l b (s + o) bytes of KV cache (bf16, key+value copies).
unsigned long long kv_bytes(int64_t d, int64_t l, int64_t b, int64_t s, int64_t o);

double ttft_seconds(const HardwareProfile& hw, int64_t b, int64_t s, int64_t d, int64_t l);
// (2n + kv) / m.
double ttit_seconds(const HardwareProfile& hw, int64_t n, int64_t d, int64_t l, int64_t b,
                    int64_t s, int64_t o);
// b*o / (TTFT + TTIT).
double throughput_tps(const HardwareProfile& hw, const ShapeProfile& shape, bool compressed);

struct LatencyReport {
    double ttft_base = 0.0, ttft_comp = 0.0;
    double ttit_base = 0.0, ttit_comp = 0.0;
    unsigned long long kv_base = 0, kv_comp = 0;
    double throughput_base = 0.0, throughput_comp = 0.0;
    double ttft_ratio = 0.0, ttit_ratio = 0.0, kv_ratio = 0.0, throughput_ratio = 0.0;
};

LatencyReport latency_report(const HardwareProfile& hw, const ShapeProfile& shape);

// Closed-form acceleration/savings ratios (baseline over compressed):
//   kv:   (k s + k o) / (s + k o)
//   ttft: k^2 (6 d s + s^2) / (6 d s k + s^2)
//   ttit: (2 d l b s k + n k + 2 d l b o k) / (2 d l b s + n k + 2 d l b o k)
// Throughput needs the hardware profile and is reported as a double.
struct AccelerationRatios {
    Rational kv;
    Rational ttft;
    Rational ttit;
    double throughput = 0.0;
};

Rational kv_ratio(int64_t k, int64_t s, int64_t o);
Rational ttft_ratio(int64_t k, int64_t d, int64_t s);
Rational ttit_ratio(int64_t k, int64_t d, int64_t l, int64_t b, int64_t s, int64_t o, int64_t n);

AccelerationRatios acceleration_report(const ShapeProfile& shape, const HardwareProfile& hw);

// --- toy-model wall-clock microbenchmark -----------------------------------

struct MicrobenchRow {
    int64_t s = 0;
    int64_t k = 0;        // 0 marks the uncompressed baseline row
    bool cached = true;   // chunk embeddings precomputed outside the timer
    double ttft_median_s = 0.0;
    double per_token_median_s = 0.0;
    double ttft_speedup = 1.0; // baseline ttft / this row's ttft
};

struct MicrobenchConfig {
    std::vector<int64_t> s_values{2048};
    std::vector<int64_t> k_values{2, 4, 8};
    int trials = 20;
    int warmup = 3;
    bool include_uncached = true;
};

// Medians over `trials` timed runs, warmup excluded. Throws when the timer
// resolution is too coarse for the configured shape.
std::vector<MicrobenchRow> microbench(model::RefragModel& m, const corpus::Vocab& vocab,
                                      const MicrobenchConfig& cfg);

} // namespace refrag::perf
