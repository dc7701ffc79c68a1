#include "refrag/perfmodel.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace refrag::perf {

namespace {

__int128 gcd128(__int128 a, __int128 b) {
    if (a < 0) a = -a;
    if (b < 0) b = -b;
    while (b != 0) {
        __int128 t = a % b;
        a = b;
        b = t;
    }
    return a;
}

__int128 mul_checked(__int128 a, __int128 b) {
    __int128 out;
    if (__builtin_mul_overflow(a, b, &out))
        throw std::overflow_error("perf: 128-bit rational overflow");
    return out;
}

__int128 add_checked(__int128 a, __int128 b) {
    __int128 out;
    if (__builtin_add_overflow(a, b, &out))
        throw std::overflow_error("perf: 128-bit rational overflow");
    return out;
}

} // namespace

Rational make_rational(__int128 n, __int128 d) {
    Rational r;
    r.num = n;
    r.den = d;
    r.normalize();
    return r;
}

void Rational::normalize() {
    if (den == 0) throw std::invalid_argument("perf: zero denominator");
    if (den < 0) {
        num = -num;
        den = -den;
    }
    const __int128 g = gcd128(num, den);
    if (g > 1) {
        num /= g;
        den /= g;
    }
}

Rational Rational::of(long long n, long long d) {
    return make_rational(n, d);
}

Rational Rational::operator+(const Rational& o) const {
    return make_rational(add_checked(mul_checked(num, o.den), mul_checked(o.num, den)),
                         mul_checked(den, o.den));
}

Rational Rational::operator-(const Rational& o) const {
    return make_rational(add_checked(mul_checked(num, o.den), -mul_checked(o.num, den)),
                         mul_checked(den, o.den));
}

Rational Rational::operator*(const Rational& o) const {
    return make_rational(mul_checked(num, o.num), mul_checked(den, o.den));
}

Rational Rational::operator/(const Rational& o) const {
    if (o.num == 0) throw std::invalid_argument("perf: rational division by zero");
    return make_rational(mul_checked(num, o.den), mul_checked(den, o.num));
}

bool Rational::operator<(const Rational& o) const {
    return mul_checked(num, o.den) < mul_checked(o.num, den);
}

double Rational::to_double() const {
    return static_cast<double>(num) / static_cast<double>(den);
}

std::string Rational::str() const {
    auto i128_str = [](__int128 v) {
        if (v == 0) return std::string("0");
        const bool neg = v < 0;
        if (neg) v = -v;
        std::string s;
        while (v > 0) {
            s.push_back(static_cast<char>('0' + static_cast<int>(v % 10)));
            v /= 10;
        }
        if (neg) s.push_back('-');
        std::reverse(s.begin(), s.end());
        return s;
    };
    return den == 1 ? i128_str(num) : i128_str(num) + "/" + i128_str(den);
}

void HardwareProfile::validate() const {
    if (flops_per_s <= 0.0 || hbm_bytes_per_s <= 0.0)
        throw std::invalid_argument("perf: hardware rates must be positive");
}

void ShapeProfile::validate() const {
    if (d <= 0 || l <= 0 || n <= 0 || b <= 0 || s <= 0 || o <= 0)
        throw std::invalid_argument("perf: shape fields must be positive");
    if (k < 1) throw std::invalid_argument("perf: k must be >= 1");
}

int64_t compressed_context(int64_t s, int64_t k) {
    if (s <= 0 || k < 1) throw std::invalid_argument("perf: s must be positive, k >= 1");
    return (s + k - 1) / k;
}

unsigned long long prefill_flops(int64_t b, int64_t s, int64_t d, int64_t l) {
    if (b <= 0 || s <= 0 || d <= 0 || l <= 0)
        throw std::invalid_argument("prefill_flops: inputs must be positive");
    const __int128 per_token =
        add_checked(mul_checked(mul_checked(24, d), d), mul_checked(mul_checked(4, d), s));
    const __int128 total = mul_checked(mul_checked(per_token, l), mul_checked(b, s));
    if (total > static_cast<__int128>(std::numeric_limits<unsigned long long>::max()))
        throw std::overflow_error("prefill_flops: result exceeds 64 bits");
    return static_cast<unsigned long long>(total);
}

unsigned long long kv_bytes(int64_t d, int64_t l, int64_t b, int64_t s, int64_t o) {
    if (d <= 0 || l <= 0 || b <= 0 || s <= 0 || o <= 0)
        throw std::invalid_argument("kv_bytes: inputs must be positive");
    const __int128 total = mul_checked(mul_checked(mul_checked(4, d), mul_checked(l, b)),
                                       add_checked(s, o));
    if (total > static_cast<__int128>(std::numeric_limits<unsigned long long>::max()))
        throw std::overflow_error("kv_bytes: result exceeds 64 bits");
    return static_cast<unsigned long long>(total);
}

double ttft_seconds(const HardwareProfile& hw, int64_t b, int64_t s, int64_t d, int64_t l) {
    hw.validate();
    return static_cast<double>(prefill_flops(b, s, d, l)) / hw.flops_per_s;
}

double ttit_seconds(const HardwareProfile& hw, int64_t n, int64_t d, int64_t l, int64_t b,
                    int64_t s, int64_t o) {
    hw.validate();
    if (n <= 0) throw std::invalid_argument("ttit_seconds: n must be positive");
    return (2.0 * static_cast<double>(n) + static_cast<double>(kv_bytes(d, l, b, s, o))) /
           hw.hbm_bytes_per_s;
}

double throughput_tps(const HardwareProfile& hw, const ShapeProfile& shape, bool compressed) {
    shape.validate();
    const int64_t s_eff = compressed ? compressed_context(shape.s, shape.k) : shape.s;
    const double ttft = ttft_seconds(hw, shape.b, s_eff, shape.d, shape.l);
    const double dl = ttit_seconds(hw, shape.n, shape.d, shape.l, shape.b, s_eff, shape.o);
    return static_cast<double>(shape.b) * static_cast<double>(shape.o) / (ttft + dl);
}

LatencyReport latency_report(const HardwareProfile& hw, const ShapeProfile& shape) {
    hw.validate();
    shape.validate();
    const int64_t sc = compressed_context(shape.s, shape.k);
    LatencyReport r;
    r.ttft_base = ttft_seconds(hw, shape.b, shape.s, shape.d, shape.l);
    r.ttft_comp = ttft_seconds(hw, shape.b, sc, shape.d, shape.l);
    r.ttit_base = ttit_seconds(hw, shape.n, shape.d, shape.l, shape.b, shape.s, shape.o);
    r.ttit_comp = ttit_seconds(hw, shape.n, shape.d, shape.l, shape.b, sc, shape.o);
    r.kv_base = kv_bytes(shape.d, shape.l, shape.b, shape.s, shape.o);
    r.kv_comp = kv_bytes(shape.d, shape.l, shape.b, sc, shape.o);
    r.throughput_base = throughput_tps(hw, shape, false);
    r.throughput_comp = throughput_tps(hw, shape, true);
    r.ttft_ratio = r.ttft_base / r.ttft_comp;
    r.ttit_ratio = r.ttit_base / r.ttit_comp;
    r.kv_ratio = static_cast<double>(r.kv_base) / static_cast<double>(r.kv_comp);
    r.throughput_ratio = r.throughput_comp / r.throughput_base;
    return r;
}

Rational kv_ratio(int64_t k, int64_t s, int64_t o) {
    if (k < 1 || s <= 0 || o <= 0) throw std::invalid_argument("kv_ratio: bad inputs");
    return make_rational(mul_checked(k, add_checked(s, o)), add_checked(s, mul_checked(k, o)));
}

Rational ttft_ratio(int64_t k, int64_t d, int64_t s) {
    if (k < 1 || d <= 0 || s <= 0) throw std::invalid_argument("ttft_ratio: bad inputs");
    const __int128 six_ds = mul_checked(mul_checked(6, d), s);
    const __int128 s2 = mul_checked(s, s);
    const __int128 num = mul_checked(mul_checked(k, k), add_checked(six_ds, s2));
    const __int128 den = add_checked(mul_checked(six_ds, k), s2);
    return make_rational(num, den);
}

Rational ttit_ratio(int64_t k, int64_t d, int64_t l, int64_t b, int64_t s, int64_t o, int64_t n) {
    if (k < 1 || d <= 0 || l <= 0 || b <= 0 || s <= 0 || o <= 0 || n <= 0)
        throw std::invalid_argument("ttit_ratio: bad inputs");
    const __int128 dlb2 = mul_checked(mul_checked(2, d), mul_checked(l, b));
    const __int128 nk = mul_checked(n, k);
    const __int128 dlbok = mul_checked(dlb2, mul_checked(o, k));
    const __int128 num = add_checked(add_checked(mul_checked(dlb2, mul_checked(s, k)), nk), dlbok);
    const __int128 den = add_checked(add_checked(mul_checked(dlb2, s), nk), dlbok);
    return make_rational(num, den);
}

AccelerationRatios acceleration_report(const ShapeProfile& shape, const HardwareProfile& hw) {
    shape.validate();
    AccelerationRatios r;
    r.kv = kv_ratio(shape.k, shape.s, shape.o);
    r.ttft = ttft_ratio(shape.k, shape.d, shape.s);
    r.ttit = ttit_ratio(shape.k, shape.d, shape.l, shape.b, shape.s, shape.o, shape.n);
    r.throughput = throughput_tps(hw, shape, true) / throughput_tps(hw, shape, false);
    return r;
}

namespace {

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// One prefill: logits at the final input position (greedy path, no sampling).
void prefill_once(model::RefragModel& m, const model::InputArrangement& arr, int bos_id) {
    model::Tape t;
    std::vector<int> dummy_target{bos_id};
    model::decoder_forward(m, t, arr, dummy_target, bos_id, /*pad_id=*/-1);
}

} // namespace

std::vector<MicrobenchRow> microbench(model::RefragModel& m, const corpus::Vocab& vocab,
                                      const MicrobenchConfig& cfg) {
    using clock = std::chrono::steady_clock;
    if (cfg.trials < 3) throw std::invalid_argument("microbench: need at least 3 trials");
    Rng rng(123);

    auto time_arrangement = [&](const model::InputArrangement& arr) {
        std::vector<double> ttfts, steps;
        for (int i = 0; i < cfg.warmup; ++i) prefill_once(m, arr, vocab.bos_id);
        for (int i = 0; i < cfg.trials; ++i) {
            const auto t0 = clock::now();
            prefill_once(m, arr, vocab.bos_id);
            const auto t1 = clock::now();
            ttfts.push_back(std::chrono::duration<double>(t1 - t0).count());
        }
        // Per-token latency: one further decode step over prefix+1 tokens.
        for (int i = 0; i < cfg.trials; ++i) {
            model::Tape t;
            std::vector<int> two{vocab.bos_id, vocab.bos_id};
            const auto t0 = clock::now();
            model::decoder_forward(m, t, arr, two, vocab.bos_id, -1);
            const auto t1 = clock::now();
            steps.push_back(std::chrono::duration<double>(t1 - t0).count());
        }
        const double med = median(ttfts);
        if (med < 1e-6)
            throw std::runtime_error(
                "microbench: median below 1us; the steady-clock resolution is too coarse for "
                "this shape. Increase s or the model width.");
        return std::make_pair(med, std::max(0.0, median(steps) - med));
    };

    std::vector<MicrobenchRow> rows;
    for (int64_t s : cfg.s_values) {
        // Random token context (content does not affect timing; keep it fixed).
        std::vector<int> context(static_cast<size_t>(s));
        const int64_t n_sym = static_cast<int64_t>(vocab.symbols.size());
        for (auto& c : context) c = static_cast<int>(rng.below(n_sym));

        model::InputArrangement base;
        base.k = 1;
        base.question = context;
        auto [base_ttft, base_step] = time_arrangement(base);
        MicrobenchRow base_row;
        base_row.s = s;
        base_row.k = 0;
        base_row.cached = true;
        base_row.ttft_median_s = base_ttft;
        base_row.per_token_median_s = base_step;
        base_row.ttft_speedup = 1.0;
        rows.push_back(base_row);

        for (int64_t k : cfg.k_values) {
            auto chunks = corpus::chunk_context(context, k, vocab.pad_id);
            auto arr = model::assemble_input({}, chunks, {}, k, m.cfg.question_first);

            // Cached: chunk embeddings precomputed outside the timed region.
            std::vector<Tensor> cache;
            for (const auto& e : m.encode_chunks(chunks)) cache.push_back(e.projected);
            model::InputArrangement cached_arr = arr;
            cached_arr.cached_projected = cache;
            auto [c_ttft, c_step] = time_arrangement(cached_arr);
            MicrobenchRow crow;
            crow.s = s;
            crow.k = k;
            crow.cached = true;
            crow.ttft_median_s = c_ttft;
            crow.per_token_median_s = c_step;
            crow.ttft_speedup = base_ttft / c_ttft;
            rows.push_back(crow);

            if (cfg.include_uncached) {
                // Uncached: the encoder runs inside the timed region.
                auto [u_ttft, u_step] = time_arrangement(arr);
                MicrobenchRow urow = crow;
                urow.cached = false;
                urow.ttft_median_s = u_ttft;
                urow.per_token_median_s = u_step;
                urow.ttft_speedup = base_ttft / u_ttft;
                rows.push_back(urow);
            }
        }
    }
    return rows;
}

} // namespace refrag::perf
