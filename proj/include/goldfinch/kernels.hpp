#pragma once

// Low-level compute kernels. The goldfinch::kernels namespace holds the
// OpenMP-parallel implementations used by the tensor layer; the nested
// serial namespace holds plain single-loop references with identical
// per-element operation order, kept for testing and benchmarking.
//
// All buffers are dense row-major. Parallel loops only split work across
// independent output elements, so results are bit-identical to the serial
// references for any thread count.

#include <cstdint>

namespace goldfinch::kernels {

// c[m x n] = a[m x k] * b[k x n], or += when accumulate is set
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate);

// c[m x n] = a[m x k] * bt[n x k]^T
template <typename T>
void gemm_nt(const T* a, const T* bt, T* c, int64_t m, int64_t k, int64_t n, bool accumulate);

// c[p x n] = a[m x p]^T * b[m x n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, int64_t m, int64_t p, int64_t n, bool accumulate);

// y = x normalized per row of width d; save_mean/save_rstd optional [rows]
template <typename T>
void layernorm_rows(const T* x, const T* gamma, const T* beta, T* y,
                    int64_t rows, int64_t d, T eps, T* save_mean, T* save_rstd);

template <typename T>
void rmsnorm_rows(const T* x, const T* gain, T* y,
                  int64_t rows, int64_t d, T eps, T* save_rms);

// Causal multi-head attention over head-contiguous rows of width nh*h.
// Query row i of a sequence attends to key rows 0..i+offset of the same
// sequence. probs, when non-null, receives softmax weights [b*nh*tq*tk].
template <typename T>
void attn_fwd(const T* q, const T* k, const T* v, T* out, T* probs,
              int64_t b, int64_t tq, int64_t tk, int64_t nh, int64_t h,
              int64_t offset, T scale);

// wkv linear-attention scan. r/w/k/v/out are [b*t x nh*h] row-major,
// state is [b*nh x h x h] and is updated in place. The output row at time
// step t is r_t * S_t per head, where S excludes the current token:
//   out_t = r_t S_t,  S_{t+1} = diag(w_t) S_t + k_t^T v_t
// states_save, when non-null, receives S_t for every t, laid out
// [b*nh x t x h x h] (head-major).
template <typename T>
void wkv_fwd(const T* r, const T* w, const T* k, const T* v, T* out, T* state,
             int64_t b, int64_t t, int64_t nh, int64_t h, T* states_save);

// Chunked-parallel form of the same recurrence: per-chunk cumulative decay
// plus an intra-chunk lower-triangular score matrix, with the chunk state
// carried between chunks. Matches wkv_fwd within fp tolerance.
template <typename T>
void wkv_chunked_fwd(const T* r, const T* w, const T* k, const T* v, T* out, T* state,
                     int64_t b, int64_t t, int64_t nh, int64_t h, int64_t chunk);

// Chunked-parallel materialization of the per-step state matrices S_t
// (the same values states_save receives from wkv_fwd), one head at a time.
// r is not consumed; exposed for scan-equivalence checks.
template <typename T>
void wkv_chunked_states_head(const T* w, const T* k, const T* v, const T* state0,
                             T* states_out, T* state_final,
                             int64_t t, int64_t h, int64_t row_stride, int64_t chunk);

namespace serial {

template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate);

template <typename T>
void layernorm_rows(const T* x, const T* gamma, const T* beta, T* y,
                    int64_t rows, int64_t d, T eps, T* save_mean, T* save_rstd);

template <typename T>
void attn_fwd(const T* q, const T* k, const T* v, T* out, T* probs,
              int64_t b, int64_t tq, int64_t tk, int64_t nh, int64_t h,
              int64_t offset, T scale);

// Reference scan, one head: r/w/k/v rows are strided by row_stride.
template <typename T>
void wkv_head(const T* r, const T* w, const T* k, const T* v, T* out, T* state,
              int64_t t, int64_t h, int64_t row_stride, T* states_save);

} // namespace serial

} // namespace goldfinch::kernels
