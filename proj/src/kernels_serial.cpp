#include "goldfinch/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace goldfinch::kernels {

namespace serial {

template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate) {
    for (int64_t i = 0; i < m; ++i) {
        T* ci = c + i * n;
        if (!accumulate) {
            std::fill(ci, ci + n, T(0));
        }
        const T* ai = a + i * k;
        for (int64_t l = 0; l < k; ++l) {
            const T ail = ai[l];
            const T* bl = b + l * n;
            for (int64_t j = 0; j < n; ++j) {
                ci[j] += ail * bl[j];
            }
        }
    }
}

template <typename T>
void layernorm_rows(const T* x, const T* gamma, const T* beta, T* y,
                    int64_t rows, int64_t d, T eps, T* save_mean, T* save_rstd) {
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
        for (int64_t j = 0; j < d; ++j) {
            yr[j] = (xr[j] - mean) * rstd * gamma[j] + beta[j];
        }
        if (save_mean) save_mean[r] = mean;
        if (save_rstd) save_rstd[r] = rstd;
    }
}

template <typename T>
void attn_fwd(const T* q, const T* k, const T* v, T* out, T* probs,
              int64_t b, int64_t tq, int64_t tk, int64_t nh, int64_t h,
              int64_t offset, T scale) {
    const int64_t d = nh * h;
    std::vector<T> logits(static_cast<size_t>(tk));
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

template <typename T>
void wkv_head(const T* r, const T* w, const T* k, const T* v, T* out, T* state,
              int64_t t, int64_t h, int64_t row_stride, T* states_save) {
    for (int64_t i = 0; i < t; ++i) {
        const T* ri = r + i * row_stride;
        const T* wi = w + i * row_stride;
        const T* ki = k + i * row_stride;
        const T* vi = v + i * row_stride;
        T* oi = out + i * row_stride;
        if (states_save) {
            std::copy(state, state + h * h, states_save + i * h * h);
        }
        for (int64_t j = 0; j < h; ++j) oi[j] = T(0);
        for (int64_t l = 0; l < h; ++l) {
            T* Sl = state + l * h;
            const T rl = ri[l];
            for (int64_t j = 0; j < h; ++j) oi[j] += rl * Sl[j];
            // decay then insert the current token's contribution
            const T wl = wi[l];
            const T kl = ki[l];
            for (int64_t j = 0; j < h; ++j) Sl[j] = wl * Sl[j] + kl * vi[j];
        }
    }
}

template void gemm_nn<float>(const float*, const float*, float*, int64_t, int64_t, int64_t, bool);
template void gemm_nn<double>(const double*, const double*, double*, int64_t, int64_t, int64_t, bool);
template void layernorm_rows<float>(const float*, const float*, const float*, float*, int64_t, int64_t, float, float*, float*);
template void layernorm_rows<double>(const double*, const double*, const double*, double*, int64_t, int64_t, double, double*, double*);
template void attn_fwd<float>(const float*, const float*, const float*, float*, float*, int64_t, int64_t, int64_t, int64_t, int64_t, int64_t, float);
template void attn_fwd<double>(const double*, const double*, const double*, double*, double*, int64_t, int64_t, int64_t, int64_t, int64_t, int64_t, double);
template void wkv_head<float>(const float*, const float*, const float*, const float*, float*, float*, int64_t, int64_t, int64_t, float*);
template void wkv_head<double>(const double*, const double*, const double*, const double*, double*, double*, int64_t, int64_t, int64_t, double*);

} // namespace serial

} // namespace goldfinch::kernels
