#include "goldfinch/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace goldfinch::kernels {

template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < m; ++i) {
        T* ci = c + i * n;
        if (!accumulate) {
            std::fill(ci, ci + n, T(0));
        }
        const T* ai = a + i * k;
        for (int64_t l = 0; l < k; ++l) {
            const T ail = ai[l];
            const T* bl = b + l * n;
#pragma omp simd
            for (int64_t j = 0; j < n; ++j) {
                ci[j] += ail * bl[j];
            }
        }
    }
}

template <typename T>
void gemm_nt(const T* a, const T* bt, T* c, int64_t m, int64_t k, int64_t n, bool accumulate) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < m; ++i) {
        const T* ai = a + i * k;
        T* ci = c + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const T* bj = bt + j * k;
            T acc = 0;
#pragma omp simd reduction(+ : acc)
            for (int64_t l = 0; l < k; ++l) {
                acc += ai[l] * bj[l];
            }
            ci[j] = accumulate ? ci[j] + acc : acc;
        }
    }
}

template <typename T>
void gemm_tn(const T* a, const T* b, T* c, int64_t m, int64_t p, int64_t n, bool accumulate) {
    // c[p x n] += a[m x p]^T b[m x n]; parallel over rows of c, each thread
    // streams the full a/b once so per-element accumulation order is fixed.
#pragma omp parallel for schedule(static)
    for (int64_t l = 0; l < p; ++l) {
        T* cl = c + l * n;
        if (!accumulate) {
            std::fill(cl, cl + n, T(0));
        }
        for (int64_t i = 0; i < m; ++i) {
            const T ail = a[i * p + l];
            if (ail == T(0)) continue;
            const T* bi = b + i * n;
#pragma omp simd
            for (int64_t j = 0; j < n; ++j) {
                cl[j] += ail * bi[j];
            }
        }
    }
}

template <typename T>
void layernorm_rows(const T* x, const T* gamma, const T* beta, T* y,
                    int64_t rows, int64_t d, T eps, T* save_mean, T* save_rstd) {
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = x + r * d;
        T* yr = y + r * d;
        T mean = 0;
        for (int64_t j = 0; j < d; ++j) mean += xr[j];
        mean /= T(d);
        T var = 0;
        for (int64_t j = 0; j < d; ++j) {
            const T dx = xr[j] - mean;
            var += dx * dx;
        }
        var /= T(d);
        const T rstd = T(1) / std::sqrt(var + eps);
#pragma omp simd
        for (int64_t j = 0; j < d; ++j) {
            yr[j] = (xr[j] - mean) * rstd * gamma[j] + beta[j];
        }
        if (save_mean) save_mean[r] = mean;
        if (save_rstd) save_rstd[r] = rstd;
    }
}

template <typename T>
void rmsnorm_rows(const T* x, const T* gain, T* y,
                  int64_t rows, int64_t d, T eps, T* save_rms) {
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = x + r * d;
        T* yr = y + r * d;
        T ms = 0;
        for (int64_t j = 0; j < d; ++j) ms += xr[j] * xr[j];
        ms /= T(d);
        const T rrms = T(1) / std::sqrt(ms + eps);
#pragma omp simd
        for (int64_t j = 0; j < d; ++j) {
            yr[j] = xr[j] * rrms * gain[j];
        }
        if (save_rms) save_rms[r] = rrms;
    }
}

template <typename T>
void attn_fwd(const T* q, const T* k, const T* v, T* out, T* probs,
              int64_t b, int64_t tq, int64_t tk, int64_t nh, int64_t h,
              int64_t offset, T scale) {
    const int64_t d = nh * h;
#pragma omp parallel
    {
        std::vector<T> logits(static_cast<size_t>(tk));
#pragma omp for schedule(static) collapse(2)
        for (int64_t bi = 0; bi < b; ++bi) {
            for (int64_t hi = 0; hi < nh; ++hi) {
                const T* qh = q + bi * tq * d + hi * h;
                const T* kh = k + bi * tk * d + hi * h;
                const T* vh = v + bi * tk * d + hi * h;
                T* oh = out + bi * tq * d + hi * h;
                for (int64_t i = 0; i < tq; ++i) {
                    const int64_t lim = std::min<int64_t>(tk, i + offset + 1);
                    const T* qi = qh + i * d;
                    T mx = -std::numeric_limits<T>::infinity();
                    for (int64_t j = 0; j < lim; ++j) {
                        const T* kj = kh + j * d;
                        T acc = 0;
#pragma omp simd reduction(+ : acc)
                        for (int64_t c = 0; c < h; ++c) acc += qi[c] * kj[c];
                        logits[j] = acc * scale;
                        mx = std::max(mx, logits[j]);
                    }
                    T denom = 0;
                    for (int64_t j = 0; j < lim; ++j) {
                        logits[j] = std::exp(logits[j] - mx);
                        denom += logits[j];
                    }
                    const T inv = T(1) / denom;
                    T* oi = oh + i * d;
                    std::fill(oi, oi + h, T(0));
                    for (int64_t j = 0; j < lim; ++j) {
                        const T p = logits[j] * inv;
                        if (probs) probs[((bi * nh + hi) * tq + i) * tk + j] = p;
                        const T* vj = vh + j * d;
#pragma omp simd
                        for (int64_t c = 0; c < h; ++c) oi[c] += p * vj[c];
                    }
                    if (probs) {
                        for (int64_t j = lim; j < tk; ++j) {
                            probs[((bi * nh + hi) * tq + i) * tk + j] = T(0);
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void wkv_fwd(const T* r, const T* w, const T* k, const T* v, T* out, T* state,
             int64_t b, int64_t t, int64_t nh, int64_t h, T* states_save) {
    const int64_t d = nh * h;
#pragma omp parallel for schedule(static) collapse(2)
    for (int64_t bi = 0; bi < b; ++bi) {
        for (int64_t hi = 0; hi < nh; ++hi) {
            const int64_t base = bi * t * d + hi * h;
            T* save = states_save ? states_save + (bi * nh + hi) * t * h * h : nullptr;
            serial::wkv_head(r + base, w + base, k + base, v + base, out + base,
                             state + (bi * nh + hi) * h * h, t, h, d, save);
        }
    }
}

template <typename T>
void wkv_chunked_fwd(const T* r, const T* w, const T* k, const T* v, T* out, T* state,
                     int64_t b, int64_t t, int64_t nh, int64_t h, int64_t chunk) {
    const int64_t d = nh * h;
#pragma omp parallel
    {
        std::vector<T> acum(static_cast<size_t>(chunk * h));
        std::vector<T> scratch(static_cast<size_t>(chunk * h));
        std::vector<T> scores(static_cast<size_t>(chunk * chunk));
        std::vector<T> prod(static_cast<size_t>(h));
#pragma omp for schedule(static) collapse(2)
        for (int64_t bi = 0; bi < b; ++bi) {
            for (int64_t hi = 0; hi < nh; ++hi) {
                const int64_t base = bi * t * d + hi * h;
                const T* rh = r + base;
                const T* wh = w + base;
                const T* kh = k + base;
                const T* vh = v + base;
                T* oh = out + base;
                T* S = state + (bi * nh + hi) * h * h;
                for (int64_t a = 0; a < t; a += chunk) {
                    const int64_t c = std::min(chunk, t - a);
                    // cumulative decay from chunk start: acum row i = prod of w rows a..a+i-1
                    for (int64_t j = 0; j < h; ++j) acum[j] = T(1);
                    for (int64_t i = 1; i < c; ++i) {
                        const T* wp = wh + (a + i - 1) * d;
#pragma omp simd
                        for (int64_t j = 0; j < h; ++j) {
                            acum[i * h + j] = acum[(i - 1) * h + j] * wp[j];
                        }
                    }
                    // inter-chunk: out rows = (r ⊙ acum) * S
                    for (int64_t i = 0; i < c; ++i) {
                        const T* ri = rh + (a + i) * d;
#pragma omp simd
                        for (int64_t j = 0; j < h; ++j) scratch[i * h + j] = ri[j] * acum[i * h + j];
                    }
                    for (int64_t i = 0; i < c; ++i) {
                        T* oi = oh + (a + i) * d;
                        std::fill(oi, oi + h, T(0));
                        const T* si = scratch.data() + i * h;
                        for (int64_t l = 0; l < h; ++l) {
                            const T sl = si[l];
                            const T* Sl = S + l * h;
#pragma omp simd
                            for (int64_t j = 0; j < h; ++j) oi[j] += sl * Sl[j];
                        }
                    }
                    // intra-chunk scores: scores[i][m] = r_{a+i} · diag(∏ w) · k_{a+m}, m < i
                    for (int64_t i = 0; i < c; ++i) {
                        const T* ri = rh + (a + i) * d;
                        for (int64_t j = 0; j < h; ++j) prod[j] = T(1);
                        for (int64_t m = i - 1; m >= 0; --m) {
                            if (m != i - 1) {
                                const T* wp = wh + (a + m + 1) * d;
#pragma omp simd
                                for (int64_t j = 0; j < h; ++j) prod[j] *= wp[j];
                            }
                            const T* km = kh + (a + m) * d;
                            T acc = 0;
#pragma omp simd reduction(+ : acc)
                            for (int64_t j = 0; j < h; ++j) acc += ri[j] * prod[j] * km[j];
                            scores[i * chunk + m] = acc;
                        }
                    }
                    for (int64_t i = 0; i < c; ++i) {
                        T* oi = oh + (a + i) * d;
                        for (int64_t m = 0; m < i; ++m) {
                            const T s = scores[i * chunk + m];
                            const T* vm = vh + (a + m) * d;
#pragma omp simd
                            for (int64_t j = 0; j < h; ++j) oi[j] += s * vm[j];
                        }
                    }
                    // carry state to chunk end: S = diag(A_end) S + Σ (k_i ⊙ decay-to-end)^T v_i
                    const T* wlast = wh + (a + c - 1) * d;
#pragma omp simd
                    for (int64_t j = 0; j < h; ++j) prod[j] = acum[(c - 1) * h + j] * wlast[j];
                    for (int64_t l = 0; l < h; ++l) {
                        T* Sl = S + l * h;
                        const T pl = prod[l];
#pragma omp simd
                        for (int64_t j = 0; j < h; ++j) Sl[j] *= pl;
                    }
                    for (int64_t j = 0; j < h; ++j) prod[j] = T(1);
                    for (int64_t i = c - 1; i >= 0; --i) {
                        if (i != c - 1) {
                            const T* wp = wh + (a + i + 1) * d;
#pragma omp simd
                            for (int64_t j = 0; j < h; ++j) prod[j] *= wp[j];
                        }
                        const T* ki = kh + (a + i) * d;
                        const T* vi = vh + (a + i) * d;
                        for (int64_t l = 0; l < h; ++l) {
                            const T kl = ki[l] * prod[l];
                            if (kl == T(0)) continue;
                            T* Sl = S + l * h;
#pragma omp simd
                            for (int64_t j = 0; j < h; ++j) Sl[j] += kl * vi[j];
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void wkv_chunked_states_head(const T* w, const T* k, const T* v, const T* state0,
                             T* states_out, T* state_final,
                             int64_t t, int64_t h, int64_t row_stride, int64_t chunk) {
    std::vector<T> S(state0, state0 + h * h);
    std::vector<T> decay(static_cast<size_t>(h));
    for (int64_t a = 0; a < t; a += chunk) {
        const int64_t c = std::min(chunk, t - a);
        // S_t for each position in the chunk, built from the chunk-start state
        // in closed form rather than step by step.
        for (int64_t i = 0; i < c; ++i) {
            T* out = states_out + (a + i) * h * h;
            // decay of the carried state from chunk start to position a+i
            for (int64_t j = 0; j < h; ++j) decay[j] = T(1);
            for (int64_t m = 0; m < i; ++m) {
                const T* wm = w + (a + m) * row_stride;
                for (int64_t j = 0; j < h; ++j) decay[j] *= wm[j];
            }
            for (int64_t l = 0; l < h; ++l) {
                const T dl = decay[l];
                const T* Sl = S.data() + l * h;
                T* ol = out + l * h;
                for (int64_t j = 0; j < h; ++j) ol[j] = dl * Sl[j];
            }
            // intra-chunk contributions k_m^T v_m decayed to position a+i
            for (int64_t m = 0; m < i; ++m) {
                for (int64_t j = 0; j < h; ++j) decay[j] = T(1);
                for (int64_t p = m + 1; p < i; ++p) {
                    const T* wp = w + (a + p) * row_stride;
                    for (int64_t j = 0; j < h; ++j) decay[j] *= wp[j];
                }
                const T* km = k + (a + m) * row_stride;
                const T* vm = v + (a + m) * row_stride;
                for (int64_t l = 0; l < h; ++l) {
                    const T kl = km[l] * decay[l];
                    T* ol = out + l * h;
                    for (int64_t j = 0; j < h; ++j) ol[j] += kl * vm[j];
                }
            }
        }
        // carry to the state at the start of the next chunk
        const T* last = states_out + (a + c - 1) * h * h;
        const T* wl = w + (a + c - 1) * row_stride;
        const T* kl = k + (a + c - 1) * row_stride;
        const T* vl = v + (a + c - 1) * row_stride;
        for (int64_t l = 0; l < h; ++l) {
            for (int64_t j = 0; j < h; ++j) {
                S[l * h + j] = wl[l] * last[l * h + j] + kl[l] * vl[j];
            }
        }
    }
    if (state_final) {
        std::copy(S.begin(), S.end(), state_final);
    }
}



template void gemm_nn<float>(const float*, const float*, float*, int64_t, int64_t, int64_t, bool);
template void gemm_nn<double>(const double*, const double*, double*, int64_t, int64_t, int64_t, bool);
template void gemm_nt<float>(const float*, const float*, float*, int64_t, int64_t, int64_t, bool);
template void gemm_nt<double>(const double*, const double*, double*, int64_t, int64_t, int64_t, bool);
template void gemm_tn<float>(const float*, const float*, float*, int64_t, int64_t, int64_t, bool);
template void gemm_tn<double>(const double*, const double*, double*, int64_t, int64_t, int64_t, bool);
template void layernorm_rows<float>(const float*, const float*, const float*, float*, int64_t, int64_t, float, float*, float*);
template void layernorm_rows<double>(const double*, const double*, const double*, double*, int64_t, int64_t, double, double*, double*);
template void rmsnorm_rows<float>(const float*, const float*, float*, int64_t, int64_t, float, float*);
template void rmsnorm_rows<double>(const double*, const double*, double*, int64_t, int64_t, double, double*);
template void attn_fwd<float>(const float*, const float*, const float*, float*, float*, int64_t, int64_t, int64_t, int64_t, int64_t, int64_t, float);
template void attn_fwd<double>(const double*, const double*, const double*, double*, double*, int64_t, int64_t, int64_t, int64_t, int64_t, int64_t, double);
template void wkv_fwd<float>(const float*, const float*, const float*, const float*, float*, float*, int64_t, int64_t, int64_t, int64_t, float*);
template void wkv_fwd<double>(const double*, const double*, const double*, const double*, double*, double*, int64_t, int64_t, int64_t, int64_t, double*);
template void wkv_chunked_fwd<float>(const float*, const float*, const float*, const float*, float*, float*, int64_t, int64_t, int64_t, int64_t, int64_t);
template void wkv_chunked_fwd<double>(const double*, const double*, const double*, const double*, double*, double*, int64_t, int64_t, int64_t, int64_t, int64_t);
template void wkv_chunked_states_head<float>(const float*, const float*, const float*, const float*, float*, float*, int64_t, int64_t, int64_t, int64_t);
template void wkv_chunked_states_head<double>(const double*, const double*, const double*, const double*, double*, double*, int64_t, int64_t, int64_t, int64_t);

} // namespace goldfinch::kernels
