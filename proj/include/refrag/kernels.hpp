#pragma once

#include <cstdint>

// Hot numeric kernels. The default entry points are OpenMP-parallel; the
// kern::serial namespace holds plain-loop reference implementations used by
// tests and the kernel benchmark. Both backends perform the per-output
// reductions in the same order, so results are bit-identical regardless of
// backend or thread count.
//
// Convention: forward kernels overwrite their outputs, backward kernels
// accumulate (+=) into caller-zeroed gradient buffers.

namespace refrag::kern {

// c[m,n] = a[m,k] * b[k,n]
void matmul(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
// c[m,n] += a[k,m]^T * b[k,n]
void matmul_tn_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
// c[m,n] += a[m,k] * b[n,k]^T
void matmul_nt_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);

void add_bias(double* y, const double* b, int64_t m, int64_t n);
void bias_grad_acc(const double* dy, double* db, int64_t m, int64_t n);

void silu(const double* x, double* y, int64_t n);
void silu_backward_acc(const double* x, const double* dy, double* dx, int64_t n);

// y[r] = x[r] / rms(x[r]) * g, inv_rms[r] saved for backward.
void rmsnorm(const double* x, const double* g, double* y, double* inv_rms, int64_t rows, int64_t d);
void rmsnorm_backward_acc(const double* x, const double* g, const double* inv_rms,
                          const double* dy, double* dx, double* dg, int64_t rows, int64_t d);

// Multi-head scaled dot-product attention over one sequence.
// q,k,v,out: [T, d]; att: [heads, T, T] (softmax weights, saved for backward).
void attention(const double* q, const double* k, const double* v,
               double* att, double* out, int64_t T, int64_t d, int heads, bool causal);
void attention_backward_acc(const double* q, const double* k, const double* v,
                            const double* att, const double* dout,
                            double* dq, double* dk, double* dv,
                            int64_t T, int64_t d, int heads, bool causal);

// Fused stable softmax + cross entropy. probs: [rows, V] saved; nll: [rows].
void softmax_xent(const double* logits, const int* targets, double* probs, double* nll,
                  int64_t rows, int64_t V);
void softmax_xent_backward_acc(const double* probs, const int* targets, const double* dnll,
                               double* dlogits, int64_t rows, int64_t V);

constexpr double kRmsEps = 1e-5;

namespace serial {
void matmul(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
void matmul_tn_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
void matmul_nt_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
void add_bias(double* y, const double* b, int64_t m, int64_t n);
void bias_grad_acc(const double* dy, double* db, int64_t m, int64_t n);
void silu(const double* x, double* y, int64_t n);
void silu_backward_acc(const double* x, const double* dy, double* dx, int64_t n);
void rmsnorm(const double* x, const double* g, double* y, double* inv_rms, int64_t rows, int64_t d);
void rmsnorm_backward_acc(const double* x, const double* g, const double* inv_rms,
                          const double* dy, double* dx, double* dg, int64_t rows, int64_t d);
void attention(const double* q, const double* k, const double* v,
               double* att, double* out, int64_t T, int64_t d, int heads, bool causal);
void attention_backward_acc(const double* q, const double* k, const double* v,
                            const double* att, const double* dout,
                            double* dq, double* dk, double* dv,
                            int64_t T, int64_t d, int heads, bool causal);
void softmax_xent(const double* logits, const int* targets, double* probs, double* nll,
                  int64_t rows, int64_t V);
void softmax_xent_backward_acc(const double* probs, const int* targets, const double* dnll,
                               double* dlogits, int64_t rows, int64_t V);
} // namespace serial

// Caps OpenMP worker count from the REFRAG_LAB_THREADS environment variable
// (no-op when unset). Returns the active cap.
int apply_thread_cap();

} // namespace refrag::kern
