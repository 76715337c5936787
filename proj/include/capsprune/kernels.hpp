#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace capsprune::kernels {

// Plain numeric kernels over raw buffers, templated so the float runtime and
// the 64-bit gradient-check replay run the exact same arithmetic. All loops
// are sequential with a fixed order; accumulation order never varies.

// Valid (no padding) convolution. in [N,C,H,W], ker [F,C,kh,kw],
// out [N,F,OH,OW] with OH = (H-kh)/stride + 1.
template <typename T>
void conv2d(const T* in, const T* ker, T* out, int N, int C, int H, int W, int F, int kh, int kw,
            int stride) {
    const int OH = (H - kh) / stride + 1;
    const int OW = (W - kw) / stride + 1;
    for (int n = 0; n < N; ++n) {
        const T* in_n = in + static_cast<int64_t>(n) * C * H * W;
        for (int f = 0; f < F; ++f) {
            const T* ker_f = ker + static_cast<int64_t>(f) * C * kh * kw;
            for (int oh = 0; oh < OH; ++oh) {
                for (int ow = 0; ow < OW; ++ow) {
                    T acc = T(0);
                    for (int c = 0; c < C; ++c) {
                        const T* in_c = in_n + static_cast<int64_t>(c) * H * W;
                        const T* ker_c = ker_f + static_cast<int64_t>(c) * kh * kw;
                        for (int i = 0; i < kh; ++i) {
                            const T* row = in_c + static_cast<int64_t>(oh * stride + i) * W +
                                           ow * stride;
                            const T* krow = ker_c + static_cast<int64_t>(i) * kw;
                            for (int j = 0; j < kw; ++j) acc += row[j] * krow[j];
                        }
                    }
                    *out++ = acc;
                }
            }
        }
    }
}

// out = x + b broadcast over channels. x [N,F,HW].
template <typename T>
void bias_channel(const T* x, const T* b, T* out, int N, int F, int HW) {
    for (int n = 0; n < N; ++n)
        for (int f = 0; f < F; ++f) {
            const T bf = b[f];
            for (int i = 0; i < HW; ++i) *out++ = *x++ + bf;
        }
}

template <typename T>
void relu(const T* x, T* out, int64_t n) {
    for (int64_t i = 0; i < n; ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
}

// Softmax along the middle extent of a (outer, axis_n, inner) decomposition,
// with max subtraction.
template <typename T>
void softmax(const T* x, T* out, int64_t outer, int64_t axis_n, int64_t inner) {
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
            const T* lane = x + o * axis_n * inner + in;
            T* olane = out + o * axis_n * inner + in;
            T mx = lane[0];
            for (int64_t k = 1; k < axis_n; ++k) mx = std::max(mx, lane[k * inner]);
            T sum = T(0);
            for (int64_t k = 0; k < axis_n; ++k) {
                T e = std::exp(lane[k * inner] - mx);
                olane[k * inner] = e;
                sum += e;
            }
            for (int64_t k = 0; k < axis_n; ++k) olane[k * inner] /= sum;
        }
    }
}

// Per-capsule matrix bank: out[n,i,j,:] = w[i,j,:,:] . vec[n,i,:].
// w [I,J,dout,din], vec [N,I,din], out [N,I,J,dout].
template <typename T>
void matvec_bank(const T* w, const T* vec, T* out, int N, int I, int J, int dout, int din) {
    for (int n = 0; n < N; ++n) {
        for (int i = 0; i < I; ++i) {
            const T* v = vec + (static_cast<int64_t>(n) * I + i) * din;
            const T* wi = w + static_cast<int64_t>(i) * J * dout * din;
            for (int j = 0; j < J; ++j) {
                const T* wij = wi + static_cast<int64_t>(j) * dout * din;
                for (int o = 0; o < dout; ++o) {
                    T acc = T(0);
                    const T* row = wij + static_cast<int64_t>(o) * din;
                    for (int k = 0; k < din; ++k) acc += row[k] * v[k];
                    *out++ = acc;
                }
            }
        }
    }
}

// v = (|s|^2 / (1 + |s|^2)) * s / sqrt(|s|^2 + eps), rowwise over the last
// extent d. Returns squared norms per row if sq_out != nullptr.
template <typename T>
void squash(const T* s, T* v, int64_t rows, int d, T eps, T* sq_out = nullptr) {
    for (int64_t r = 0; r < rows; ++r) {
        const T* srow = s + r * d;
        T sq = T(0);
        for (int k = 0; k < d; ++k) sq += srow[k] * srow[k];
        if (sq_out) sq_out[r] = sq;
        const T norm = std::sqrt(sq + eps);
        const T factor = sq / ((T(1) + sq) * norm);
        T* vrow = v + r * d;
        for (int k = 0; k < d; ++k) vrow[k] = factor * srow[k];
    }
}

// [N, types*d, g, g] -> [N, g*g*types, d]; capsule p = (h*g + w)*types + t
// takes dims from channels t*d .. t*d+d-1 at spatial (h, w).
template <typename T>
void capsule_reshape(const T* x, T* out, int N, int types, int d, int g) {
    const int64_t chw = static_cast<int64_t>(types) * d * g * g;
    for (int n = 0; n < N; ++n) {
        const T* xn = x + n * chw;
        for (int h = 0; h < g; ++h)
            for (int w = 0; w < g; ++w)
                for (int t = 0; t < types; ++t)
                    for (int k = 0; k < d; ++k)
                        *out++ = xn[(static_cast<int64_t>(t * d + k) * g + h) * g + w];
    }
}

// out[n,j,:] = x[n,idx[j],:]; x [N,R,d].
template <typename T>
void gather_rows(const T* x, T* out, int N, int R, int d, const int* idx, int n_idx) {
    for (int n = 0; n < N; ++n) {
        const T* xn = x + static_cast<int64_t>(n) * R * d;
        for (int j = 0; j < n_idx; ++j) {
            const T* src = xn + static_cast<int64_t>(idx[j]) * d;
            for (int k = 0; k < d; ++k) *out++ = src[k];
        }
    }
}

// Fused pc-conv + capsule_reshape + gather: computes, for each surviving
// capsule, only the d convolution outputs that feed it. Bit-identical to the
// dense conv2d -> bias -> capsule_reshape -> gather_rows chain.
// features [N,C,H,W], ker [types*d, C, kh, kw], bias [types*d],
// out [N, n_surv, d].
template <typename T>
void pc_conv_gather(const T* features, const T* ker, const T* bias, T* out, int N, int C, int H,
                    int W, int types, int d, int kh, int kw, int stride, const int* survivors,
                    int n_surv, int g) {
    for (int n = 0; n < N; ++n) {
        const T* in_n = features + static_cast<int64_t>(n) * C * H * W;
        for (int j = 0; j < n_surv; ++j) {
            const int pc = survivors[j];
            const int t = pc % types;
            const int cell = pc / types;
            const int oh = cell / g;
            const int ow = cell % g;
            for (int k = 0; k < d; ++k) {
                const int f = t * d + k;
                const T* ker_f = ker + static_cast<int64_t>(f) * C * kh * kw;
                T acc = T(0);
                for (int c = 0; c < C; ++c) {
                    const T* in_c = in_n + static_cast<int64_t>(c) * H * W;
                    const T* ker_c = ker_f + static_cast<int64_t>(c) * kh * kw;
                    for (int i = 0; i < kh; ++i) {
                        const T* row = in_c + static_cast<int64_t>(oh * stride + i) * W +
                                       ow * stride;
                        const T* krow = ker_c + static_cast<int64_t>(i) * kw;
                        for (int q = 0; q < kw; ++q) acc += row[q] * krow[q];
                    }
                }
                *out++ = acc + bias[f];
            }
        }
    }
}

// Routing weighted sum: s[n,k,:] = sum_i c[n,i,k] * uhat[n,i,k,:].
// uhat [N,I,K,d], c [N,I,K], s [N,K,d].
template <typename T>
void routing_weighted_sum(const T* uhat, const T* c, T* s, int N, int I, int K, int d) {
    const int64_t skd = static_cast<int64_t>(K) * d;
    for (int n = 0; n < N; ++n) {
        T* sn = s + n * skd;
        for (int64_t x = 0; x < skd; ++x) sn[x] = T(0);
        const T* un = uhat + n * static_cast<int64_t>(I) * K * d;
        const T* cn = c + n * static_cast<int64_t>(I) * K;
        for (int i = 0; i < I; ++i) {
            const T* ui = un + static_cast<int64_t>(i) * K * d;
            const T* ci = cn + static_cast<int64_t>(i) * K;
            for (int k = 0; k < K; ++k) {
                const T cik = ci[k];
                const T* u = ui + static_cast<int64_t>(k) * d;
                T* sk = sn + static_cast<int64_t>(k) * d;
                for (int q = 0; q < d; ++q) sk[q] += cik * u[q];
            }
        }
    }
}

// Agreement update: b[n,i,k] += uhat[n,i,k,:] . v[n,k,:].
template <typename T>
void routing_agreement(const T* uhat, const T* v, T* b, int N, int I, int K, int d) {
    for (int n = 0; n < N; ++n) {
        const T* un = uhat + n * static_cast<int64_t>(I) * K * d;
        const T* vn = v + n * static_cast<int64_t>(K) * d;
        T* bn = b + n * static_cast<int64_t>(I) * K;
        for (int i = 0; i < I; ++i) {
            for (int k = 0; k < K; ++k) {
                const T* u = un + (static_cast<int64_t>(i) * K + k) * d;
                const T* vk = vn + static_cast<int64_t>(k) * d;
                T acc = T(0);
                for (int q = 0; q < d; ++q) acc += u[q] * vk[q];
                bn[static_cast<int64_t>(i) * K + k] += acc;
            }
        }
    }
}

// Rowwise L2 norms with the eps guard inside the sqrt. x [rows, d].
template <typename T>
void row_norms(const T* x, T* out, int64_t rows, int d, T eps) {
    for (int64_t r = 0; r < rows; ++r) {
        T sq = T(0);
        const T* row = x + r * d;
        for (int k = 0; k < d; ++k) sq += row[k] * row[k];
        out[r] = std::sqrt(sq + eps);
    }
}

// Margin loss, mean over the batch. v [N,K,d], onehot [N,K]. Writes per-row
// norms into norms_out [N*K] when provided (backward reuses them).
template <typename T>
T margin_loss(const T* v, const T* onehot, int N, int K, int d, T m_plus, T m_minus, T lambda,
              T eps, T* norms_out = nullptr) {
    T total = T(0);
    for (int n = 0; n < N; ++n) {
        for (int k = 0; k < K; ++k) {
            const T* row = v + (static_cast<int64_t>(n) * K + k) * d;
            T sq = T(0);
            for (int q = 0; q < d; ++q) sq += row[q] * row[q];
            const T norm = std::sqrt(sq + eps);
            if (norms_out) norms_out[static_cast<int64_t>(n) * K + k] = norm;
            const T t = onehot[static_cast<int64_t>(n) * K + k];
            const T present = std::max(T(0), m_plus - norm);
            const T absent = std::max(T(0), norm - m_minus);
            total += t * present * present + lambda * (T(1) - t) * absent * absent;
        }
    }
    return total / static_cast<T>(N);
}

// Fully connected: out[n,:] = W x[n,:] + b. W [out_dim, in_dim].
template <typename T>
void linear(const T* x, const T* w, const T* b, T* out, int N, int in_dim, int out_dim) {
    for (int n = 0; n < N; ++n) {
        const T* xn = x + static_cast<int64_t>(n) * in_dim;
        for (int o = 0; o < out_dim; ++o) {
            const T* row = w + static_cast<int64_t>(o) * in_dim;
            T acc = b[o];
            for (int i = 0; i < in_dim; ++i) acc += row[i] * xn[i];
            *out++ = acc;
        }
    }
}

template <typename T>
void sigmoid(const T* x, T* out, int64_t n) {
    for (int64_t i = 0; i < n; ++i) {
        const T v = x[i];
        if (v >= T(0)) {
            out[i] = T(1) / (T(1) + std::exp(-v));
        } else {
            const T e = std::exp(v);
            out[i] = e / (T(1) + e);
        }
    }
}

// Sum of squared differences averaged over the batch. a, b [N,P].
template <typename T>
T sse_mean(const T* a, const T* b, int N, int P) {
    T total = T(0);
    for (int64_t i = 0; i < static_cast<int64_t>(N) * P; ++i) {
        const T diff = a[i] - b[i];
        total += diff * diff;
    }
    return total / static_cast<T>(N);
}

// Keep only the capsule of class cls[n] per sample and flatten:
// out [N, K*d] with out[n, k*d+q] = (k == cls[n]) ? v[n,k,q] : 0.
template <typename T>
void mask_flatten(const T* v, const int* cls, T* out, int N, int K, int d) {
    for (int n = 0; n < N; ++n) {
        const T* vn = v + static_cast<int64_t>(n) * K * d;
        T* on = out + static_cast<int64_t>(n) * K * d;
        for (int k = 0; k < K; ++k)
            for (int q = 0; q < d; ++q)
                on[static_cast<int64_t>(k) * d + q] =
                    (k == cls[n]) ? vn[static_cast<int64_t>(k) * d + q] : T(0);
    }
}

}  // namespace capsprune::kernels
