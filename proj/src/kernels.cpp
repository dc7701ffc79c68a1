#include "refrag/kernels.hpp"

#include <cmath>
#include <cstdlib>
#include <vector>
#include <omp.h>

namespace refrag::kern {

// ---------------------------------------------------------------------------
// Shared per-element helpers. Both backends call these with identical
// argument order, which is what makes the backends bit-identical.
// ---------------------------------------------------------------------------
namespace {

inline double sigmoid(double x) {
    return 1.0 / (1.0 + std::exp(-x));
}

// Softmax over row[0..n) in place, numerically stable.
inline void softmax_row(double* row, int64_t n) {
    double mx = row[0];
    for (int64_t i = 1; i < n; ++i) mx = row[i] > mx ? row[i] : mx;
    double sum = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        row[i] = std::exp(row[i] - mx);
        sum += row[i];
    }
    const double inv = 1.0 / sum;
    for (int64_t i = 0; i < n; ++i) row[i] *= inv;
}

inline void rmsnorm_row(const double* x, const double* g, double* y, double* inv_rms, int64_t d) {
    double ms = 0.0;
    for (int64_t j = 0; j < d; ++j) ms += x[j] * x[j];
    const double r = 1.0 / std::sqrt(ms / static_cast<double>(d) + kRmsEps);
    *inv_rms = r;
    for (int64_t j = 0; j < d; ++j) y[j] = x[j] * r * g[j];
}

inline void rmsnorm_row_dx(const double* x, const double* g, double r, const double* dy,
                           double* dx, int64_t d) {
    double dot = 0.0;
    for (int64_t j = 0; j < d; ++j) dot += dy[j] * g[j] * x[j];
    const double c = r * r * r * dot / static_cast<double>(d);
    for (int64_t j = 0; j < d; ++j) dx[j] += r * g[j] * dy[j] - x[j] * c;
}

// One attention query position: scores -> softmax -> weighted value sum.
inline void attn_one_query(const double* q, const double* k, const double* v,
                           double* att_row, double* out, int64_t t, int64_t span,
                           int64_t d, int64_t hd, int64_t hoff, double scale) {
    const double* qt = q + t * d + hoff;
    for (int64_t u = 0; u < span; ++u) {
        const double* ku = k + u * d + hoff;
        double dot = 0.0;
        for (int64_t j = 0; j < hd; ++j) dot += qt[j] * ku[j];
        att_row[u] = dot * scale;
    }
    softmax_row(att_row, span);
    double* ot = out + t * d + hoff;
    for (int64_t j = 0; j < hd; ++j) {
        double acc = 0.0;
        for (int64_t u = 0; u < span; ++u) acc += att_row[u] * v[u * d + hoff + j];
        ot[j] = acc;
    }
}

inline void xent_row(const double* logits, int target, double* probs, double* nll, int64_t V) {
    double mx = logits[0];
    for (int64_t i = 1; i < V; ++i) mx = logits[i] > mx ? logits[i] : mx;
    double sum = 0.0;
    for (int64_t i = 0; i < V; ++i) {
        probs[i] = std::exp(logits[i] - mx);
        sum += probs[i];
    }
    const double inv = 1.0 / sum;
    for (int64_t i = 0; i < V; ++i) probs[i] *= inv;
    *nll = std::log(sum) + mx - logits[target];
}

} // namespace

// ---------------------------------------------------------------------------
// Parallel backend. Parallelism is always across independent output elements
// (rows, columns, or query/key positions); each reduction stays serial.
// ---------------------------------------------------------------------------

void matmul(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < m; ++i) {
        double* __restrict ci = c + i * n;
        for (int64_t j = 0; j < n; ++j) ci[j] = 0.0;
        const double* __restrict ai = a + i * k;
        for (int64_t kk = 0; kk < k; ++kk) {
            const double av = ai[kk];
            const double* __restrict bk = b + kk * n;
            for (int64_t j = 0; j < n; ++j) ci[j] += av * bk[j];
        }
    }
}

void matmul_tn_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    // c[i][j] += sum_kk a[kk][i] * b[kk][j]; parallel across output rows i.
    // Each row reduces into a zeroed scratch first so the accumulation order
    // per element matches the serial reference exactly.
#pragma omp parallel
    {
        std::vector<double> tmp(static_cast<size_t>(n));
#pragma omp for schedule(static)
        for (int64_t i = 0; i < m; ++i) {
            for (int64_t j = 0; j < n; ++j) tmp[static_cast<size_t>(j)] = 0.0;
            for (int64_t kk = 0; kk < k; ++kk) {
                const double av = a[kk * m + i];
                const double* __restrict bk = b + kk * n;
                for (int64_t j = 0; j < n; ++j) tmp[static_cast<size_t>(j)] += av * bk[j];
            }
            double* __restrict ci = c + i * n;
            for (int64_t j = 0; j < n; ++j) ci[j] += tmp[static_cast<size_t>(j)];
        }
    }
}

void matmul_nt_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < m; ++i) {
        const double* __restrict ai = a + i * k;
        double* __restrict ci = c + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const double* __restrict bj = b + j * k;
            double acc = 0.0;
            for (int64_t kk = 0; kk < k; ++kk) acc += ai[kk] * bj[kk];
            ci[j] += acc;
        }
    }
}

void add_bias(double* y, const double* b, int64_t m, int64_t n) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < m; ++i) {
        double* yi = y + i * n;
        for (int64_t j = 0; j < n; ++j) yi[j] += b[j];
    }
}

void bias_grad_acc(const double* dy, double* db, int64_t m, int64_t n) {
#pragma omp parallel for schedule(static)
    for (int64_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (int64_t i = 0; i < m; ++i) acc += dy[i * n + j];
        db[j] += acc;
    }
}

void silu(const double* x, double* y, int64_t n) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) y[i] = x[i] * sigmoid(x[i]);
}

void silu_backward_acc(const double* x, const double* dy, double* dx, int64_t n) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) {
        const double s = sigmoid(x[i]);
        dx[i] += dy[i] * s * (1.0 + x[i] * (1.0 - s));
    }
}

void rmsnorm(const double* x, const double* g, double* y, double* inv_rms, int64_t rows, int64_t d) {
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < rows; ++r) {
        rmsnorm_row(x + r * d, g, y + r * d, inv_rms + r, d);
    }
}

void rmsnorm_backward_acc(const double* x, const double* g, const double* inv_rms,
                          const double* dy, double* dx, double* dg, int64_t rows, int64_t d) {
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < rows; ++r) {
        rmsnorm_row_dx(x + r * d, g, inv_rms[r], dy + r * d, dx + r * d, d);
    }
#pragma omp parallel for schedule(static)
    for (int64_t j = 0; j < d; ++j) {
        double acc = 0.0;
        for (int64_t r = 0; r < rows; ++r) acc += dy[r * d + j] * x[r * d + j] * inv_rms[r];
        dg[j] += acc;
    }
}

void attention(const double* q, const double* k, const double* v,
               double* att, double* out, int64_t T, int64_t d, int heads, bool causal) {
    const int64_t hd = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t h = 0; h < heads; ++h) {
        for (int64_t t = 0; t < T; ++t) {
            const int64_t span = causal ? t + 1 : T;
            double* att_row = att + (h * T + t) * T;
            for (int64_t u = span; u < T; ++u) att_row[u] = 0.0;
            attn_one_query(q, k, v, att_row, out, t, span, d, hd, h * hd, scale);
        }
    }
}

void attention_backward_acc(const double* q, const double* k, const double* v,
                            const double* att, const double* dout,
                            double* dq, double* dk, double* dv,
                            int64_t T, int64_t d, int heads, bool causal) {
    const int64_t hd = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    // ds[h,t,u]: gradient w.r.t. the pre-softmax scaled scores.
    std::vector<double> ds(static_cast<size_t>(heads) * T * T, 0.0);

#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t h = 0; h < heads; ++h) {
        for (int64_t t = 0; t < T; ++t) {
            const int64_t span = causal ? t + 1 : T;
            const int64_t hoff = h * hd;
            const double* att_row = att + (h * T + t) * T;
            const double* dot_ = dout + t * d + hoff;
            double* ds_row = ds.data() + (h * T + t) * T;
            double inner = 0.0;
            for (int64_t u = 0; u < span; ++u) {
                double da = 0.0;
                for (int64_t j = 0; j < hd; ++j) da += dot_[j] * v[u * d + hoff + j];
                ds_row[u] = da;
                inner += att_row[u] * da;
            }
            for (int64_t u = 0; u < span; ++u) {
                ds_row[u] = att_row[u] * (ds_row[u] - inner) * scale;
            }
        }
    }

#pragma omp parallel
    {
        // dq: parallel over query positions.
#pragma omp for collapse(2) schedule(static) nowait
        for (int64_t h = 0; h < heads; ++h) {
            for (int64_t t = 0; t < T; ++t) {
                const int64_t span = causal ? t + 1 : T;
                const int64_t hoff = h * hd;
                const double* ds_row = ds.data() + (h * T + t) * T;
                double* dqt = dq + t * d + hoff;
                for (int64_t u = 0; u < span; ++u) {
                    const double* ku = k + u * d + hoff;
                    for (int64_t j = 0; j < hd; ++j) dqt[j] += ds_row[u] * ku[j];
                }
            }
        }
        // dk, dv: parallel over key positions.
#pragma omp for collapse(2) schedule(static)
        for (int64_t h = 0; h < heads; ++h) {
            for (int64_t u = 0; u < T; ++u) {
                const int64_t hoff = h * hd;
                double* dku = dk + u * d + hoff;
                double* dvu = dv + u * d + hoff;
                for (int64_t t = causal ? u : 0; t < T; ++t) {
                    const double s = ds[(h * T + t) * T + u];
                    const double a = att[(h * T + t) * T + u];
                    const double* qt = q + t * d + hoff;
                    const double* dot_ = dout + t * d + hoff;
                    for (int64_t j = 0; j < hd; ++j) {
                        dku[j] += s * qt[j];
                        dvu[j] += a * dot_[j];
                    }
                }
            }
        }
    }
}

void softmax_xent(const double* logits, const int* targets, double* probs, double* nll,
                  int64_t rows, int64_t V) {
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < rows; ++r) {
        xent_row(logits + r * V, targets[r], probs + r * V, nll + r, V);
    }
}

void softmax_xent_backward_acc(const double* probs, const int* targets, const double* dnll,
                               double* dlogits, int64_t rows, int64_t V) {
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < rows; ++r) {
        const double g = dnll[r];
        const double* pr = probs + r * V;
        double* dl = dlogits + r * V;
        for (int64_t i = 0; i < V; ++i) dl[i] += g * pr[i];
        dl[targets[r]] -= g;
    }
}

int apply_thread_cap() {
    if (const char* env = std::getenv("REFRAG_LAB_THREADS")) {
        const int cap = std::atoi(env);
        if (cap > 0) omp_set_num_threads(cap);
    }
    return omp_get_max_threads();
}

// ---------------------------------------------------------------------------
// Serial reference backend: the textbook loop nests, no pragmas. Kept for
// tests (bit-equality against the parallel backend) and the kernel benchmark.
// ---------------------------------------------------------------------------
namespace serial {

void matmul(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int64_t kk = 0; kk < k; ++kk) acc += a[i * k + kk] * b[kk * n + j];
            c[i * n + j] = acc;
        }
    }
}

void matmul_tn_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int64_t kk = 0; kk < k; ++kk) acc += a[kk * m + i] * b[kk * n + j];
            c[i * n + j] += acc;
        }
    }
}

void matmul_nt_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int64_t kk = 0; kk < k; ++kk) acc += a[i * k + kk] * b[j * k + kk];
            c[i * n + j] += acc;
        }
    }
}

void add_bias(double* y, const double* b, int64_t m, int64_t n) {
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) y[i * n + j] += b[j];
}

void bias_grad_acc(const double* dy, double* db, int64_t m, int64_t n) {
    for (int64_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (int64_t i = 0; i < m; ++i) acc += dy[i * n + j];
        db[j] += acc;
    }
}

void silu(const double* x, double* y, int64_t n) {
    for (int64_t i = 0; i < n; ++i) y[i] = x[i] * sigmoid(x[i]);
}

void silu_backward_acc(const double* x, const double* dy, double* dx, int64_t n) {
    for (int64_t i = 0; i < n; ++i) {
        const double s = sigmoid(x[i]);
        dx[i] += dy[i] * s * (1.0 + x[i] * (1.0 - s));
    }
}

void rmsnorm(const double* x, const double* g, double* y, double* inv_rms, int64_t rows, int64_t d) {
    for (int64_t r = 0; r < rows; ++r) rmsnorm_row(x + r * d, g, y + r * d, inv_rms + r, d);
}

void rmsnorm_backward_acc(const double* x, const double* g, const double* inv_rms,
                          const double* dy, double* dx, double* dg, int64_t rows, int64_t d) {
    for (int64_t r = 0; r < rows; ++r) rmsnorm_row_dx(x + r * d, g, inv_rms[r], dy + r * d, dx + r * d, d);
    for (int64_t j = 0; j < d; ++j) {
        double acc = 0.0;
        for (int64_t r = 0; r < rows; ++r) acc += dy[r * d + j] * x[r * d + j] * inv_rms[r];
        dg[j] += acc;
    }
}

void attention(const double* q, const double* k, const double* v,
               double* att, double* out, int64_t T, int64_t d, int heads, bool causal) {
    const int64_t hd = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    for (int64_t h = 0; h < heads; ++h) {
        for (int64_t t = 0; t < T; ++t) {
            const int64_t span = causal ? t + 1 : T;
            double* att_row = att + (h * T + t) * T;
            for (int64_t u = span; u < T; ++u) att_row[u] = 0.0;
            attn_one_query(q, k, v, att_row, out, t, span, d, hd, h * hd, scale);
        }
    }
}

void attention_backward_acc(const double* q, const double* k, const double* v,
                            const double* att, const double* dout,
                            double* dq, double* dk, double* dv,
                            int64_t T, int64_t d, int heads, bool causal) {
    const int64_t hd = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<double> ds(static_cast<size_t>(heads) * T * T, 0.0);
    for (int64_t h = 0; h < heads; ++h) {
        for (int64_t t = 0; t < T; ++t) {
            const int64_t span = causal ? t + 1 : T;
            const int64_t hoff = h * hd;
            const double* att_row = att + (h * T + t) * T;
            const double* dot_ = dout + t * d + hoff;
            double* ds_row = ds.data() + (h * T + t) * T;
            double inner = 0.0;
            for (int64_t u = 0; u < span; ++u) {
                double da = 0.0;
                for (int64_t j = 0; j < hd; ++j) da += dot_[j] * v[u * d + hoff + j];
                ds_row[u] = da;
                inner += att_row[u] * da;
            }
            for (int64_t u = 0; u < span; ++u) {
                ds_row[u] = att_row[u] * (ds_row[u] - inner) * scale;
            }
        }
    }
    for (int64_t h = 0; h < heads; ++h) {
        for (int64_t t = 0; t < T; ++t) {
            const int64_t span = causal ? t + 1 : T;
            const int64_t hoff = h * hd;
            const double* ds_row = ds.data() + (h * T + t) * T;
            double* dqt = dq + t * d + hoff;
            for (int64_t u = 0; u < span; ++u) {
                const double* ku = k + u * d + hoff;
                for (int64_t j = 0; j < hd; ++j) dqt[j] += ds_row[u] * ku[j];
            }
        }
    }
    for (int64_t h = 0; h < heads; ++h) {
        for (int64_t u = 0; u < T; ++u) {
            const int64_t hoff = h * hd;
            double* dku = dk + u * d + hoff;
            double* dvu = dv + u * d + hoff;
            for (int64_t t = causal ? u : 0; t < T; ++t) {
                const double s = ds[(h * T + t) * T + u];
                const double a = att[(h * T + t) * T + u];
                const double* qt = q + t * d + hoff;
                const double* dot_ = dout + t * d + hoff;
                for (int64_t j = 0; j < hd; ++j) {
                    dku[j] += s * qt[j];
                    dvu[j] += a * dot_[j];
                }
            }
        }
    }
}

void softmax_xent(const double* logits, const int* targets, double* probs, double* nll,
                  int64_t rows, int64_t V) {
    for (int64_t r = 0; r < rows; ++r) xent_row(logits + r * V, targets[r], probs + r * V, nll + r, V);
}

void softmax_xent_backward_acc(const double* probs, const int* targets, const double* dnll,
                               double* dlogits, int64_t rows, int64_t V) {
    for (int64_t r = 0; r < rows; ++r) {
        const double g = dnll[r];
        const double* pr = probs + r * V;
        double* dl = dlogits + r * V;
        for (int64_t i = 0; i < V; ++i) dl[i] += g * pr[i];
        dl[targets[r]] -= g;
    }
}

} // namespace serial
} // namespace refrag::kern
