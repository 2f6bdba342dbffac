#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace wrn::kernels {

// Every parallel kernel in this file computes each output element with a
// fixed, serial reduction order. Results are bit-identical for any thread
// count; threads only partition disjoint output ranges.

inline int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

inline void set_threads(int n) {
#ifdef _OPENMP
    if (n > 0) omp_set_num_threads(n);
#else
    (void)n;
#endif
}

// ---------------------------------------------------------------------------
// Serial reference kernels. Written in the most literal loop order; the
// parallel kernels are tested against these and the benchmark target
// compares their throughput.

namespace serial {

// C[m,n] (+)= A[m,k] * B[k,n]
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b,
             T* c, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            T acc = accumulate ? c[i * n + j] : T(0);
            for (std::size_t l = 0; l < k; ++l) acc += a[i * k + l] * b[l * n + j];
            c[i * n + j] = acc;
        }
    }
}

// C[m,n] (+)= A[m,k] * B^T, with B stored [n,k]
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b,
             T* c, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            T acc = accumulate ? c[i * n + j] : T(0);
            for (std::size_t l = 0; l < k; ++l) acc += a[i * k + l] * b[j * k + l];
            c[i * n + j] = acc;
        }
    }
}

// C[m,n] (+)= A^T * B, with A stored [k,m], B stored [k,n]
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b,
             T* c, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            T acc = accumulate ? c[i * n + j] : T(0);
            for (std::size_t l = 0; l < k; ++l) acc += a[l * m + i] * b[l * n + j];
            c[i * n + j] = acc;
        }
    }
}

// Direct sliding-window cross-correlation for one image.
// x[C,H,W], w[C_out,C,k,k] -> y[C_out,out_h,out_w]
template <typename T>
void conv2d_naive(const T* x, const T* w, T* y, std::size_t c_in, std::size_t h,
                  std::size_t width, std::size_t c_out, std::size_t ksize,
                  std::size_t stride, std::size_t pad, std::size_t out_h,
                  std::size_t out_w) {
    for (std::size_t co = 0; co < c_out; ++co) {
        for (std::size_t oh = 0; oh < out_h; ++oh) {
            for (std::size_t ow = 0; ow < out_w; ++ow) {
                T acc = T(0);
                for (std::size_t ci = 0; ci < c_in; ++ci) {
                    for (std::size_t kh = 0; kh < ksize; ++kh) {
                        for (std::size_t kw = 0; kw < ksize; ++kw) {
                            std::ptrdiff_t ih =
                                static_cast<std::ptrdiff_t>(oh * stride + kh) -
                                static_cast<std::ptrdiff_t>(pad);
                            std::ptrdiff_t iw =
                                static_cast<std::ptrdiff_t>(ow * stride + kw) -
                                static_cast<std::ptrdiff_t>(pad);
                            if (ih < 0 || iw < 0 ||
                                ih >= static_cast<std::ptrdiff_t>(h) ||
                                iw >= static_cast<std::ptrdiff_t>(width))
                                continue;
                            acc += x[(ci * h + ih) * width + iw] *
                                   w[((co * c_in + ci) * ksize + kh) * ksize + kw];
                        }
                    }
                }
                y[(co * out_h + oh) * out_w + ow] = acc;
            }
        }
    }
}

template <typename T>
T sum(const T* x, std::size_t n) {
    T acc = T(0);
    for (std::size_t i = 0; i < n; ++i) acc += x[i];
    return acc;
}

}  // namespace serial

// ---------------------------------------------------------------------------
// Parallel kernels.

// Rows of C are partitioned across threads; the k loop is blocked so the
// active slice of B stays cache resident. Setting parallel = false runs the
// identical arithmetic single-threaded (used when an outer loop already
// owns the threads), so both paths agree bitwise.
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b,
             T* c, bool accumulate, bool parallel = true) {
    constexpr std::size_t kc = 64;
    if (!accumulate) {
#pragma omp parallel for schedule(static) if (parallel)
        for (std::size_t i = 0; i < m; ++i) std::fill(c + i * n, c + (i + 1) * n, T(0));
    }
    for (std::size_t l0 = 0; l0 < k; l0 += kc) {
        const std::size_t l1 = std::min(l0 + kc, k);
#pragma omp parallel for schedule(static) if (parallel)
        for (std::size_t i = 0; i < m; ++i) {
            T* crow = c + i * n;
            const T* arow = a + i * k;
            std::size_t l = l0;
            for (; l + 4 <= l1; l += 4) {
                const T a0 = arow[l], a1 = arow[l + 1], a2 = arow[l + 2], a3 = arow[l + 3];
                const T* b0 = b + l * n;
                const T* b1 = b0 + n;
                const T* b2 = b1 + n;
                const T* b3 = b2 + n;
#pragma omp simd
                for (std::size_t j = 0; j < n; ++j)
                    crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            for (; l < l1; ++l) {
                const T av = arow[l];
                const T* brow = b + l * n;
#pragma omp simd
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    }
}

// Dot-product form; four interleaved accumulators per output element.
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b,
             T* c, bool accumulate, bool parallel = true) {
#pragma omp parallel for schedule(static) if (parallel)
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const T* brow = b + j * k;
            T s0 = T(0), s1 = T(0), s2 = T(0), s3 = T(0);
            std::size_t l = 0;
            for (; l + 4 <= k; l += 4) {
                s0 += arow[l] * brow[l];
                s1 += arow[l + 1] * brow[l + 1];
                s2 += arow[l + 2] * brow[l + 2];
                s3 += arow[l + 3] * brow[l + 3];
            }
            T acc = (s0 + s1) + (s2 + s3);
            for (; l < k; ++l) acc += arow[l] * brow[l];
            c[i * n + j] = accumulate ? c[i * n + j] + acc : acc;
        }
    }
}

template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b,
             T* c, bool accumulate, bool parallel = true) {
    constexpr std::size_t kc = 64;
    if (!accumulate) {
#pragma omp parallel for schedule(static) if (parallel)
        for (std::size_t i = 0; i < m; ++i) std::fill(c + i * n, c + (i + 1) * n, T(0));
    }
    for (std::size_t l0 = 0; l0 < k; l0 += kc) {
        const std::size_t l1 = std::min(l0 + kc, k);
#pragma omp parallel for schedule(static) if (parallel)
        for (std::size_t i = 0; i < m; ++i) {
            T* crow = c + i * n;
            for (std::size_t l = l0; l < l1; ++l) {
                const T av = a[l * m + i];
                const T* brow = b + l * n;
#pragma omp simd
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    }
}

template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst,
               bool parallel = true) {
#pragma omp parallel for schedule(static) if (parallel)
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
}

// im2col for one image: x[C,H,W] -> cols[(C*k*k), (out_h*out_w)].
// Row index is ci*k*k + kh*k + kw so a gemm against it accumulates in the
// same (ci,kh,kw) order as the naive reference.
template <typename T>
void im2col(const T* x, std::size_t c_in, std::size_t h, std::size_t w,
            std::size_t ksize, std::size_t stride, std::size_t pad, T* cols,
            std::size_t out_h, std::size_t out_w, bool parallel = true) {
    const std::size_t rows = c_in * ksize * ksize;
    const std::size_t cells = out_h * out_w;
#pragma omp parallel for schedule(static) if (parallel)
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t ci = r / (ksize * ksize);
        const std::size_t kh = (r / ksize) % ksize;
        const std::size_t kw = r % ksize;
        T* out = cols + r * cells;
        for (std::size_t oh = 0; oh < out_h; ++oh) {
            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + kh) -
                                      static_cast<std::ptrdiff_t>(pad);
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) {
                std::fill(out + oh * out_w, out + (oh + 1) * out_w, T(0));
                continue;
            }
            const T* xrow = x + (ci * h + ih) * w;
            for (std::size_t ow = 0; ow < out_w; ++ow) {
                const std::ptrdiff_t iw =
                    static_cast<std::ptrdiff_t>(ow * stride + kw) -
                    static_cast<std::ptrdiff_t>(pad);
                out[oh * out_w + ow] =
                    (iw < 0 || iw >= static_cast<std::ptrdiff_t>(w)) ? T(0) : xrow[iw];
            }
        }
    }
}

// Gather-form col2im: each input element sums the column entries that
// touched it, so the scatter-free loop is race-free and order-stable.
template <typename T>
void col2im_add(const T* cols, std::size_t c_in, std::size_t h, std::size_t w,
                std::size_t ksize, std::size_t stride, std::size_t pad, T* x,
                std::size_t out_h, std::size_t out_w, bool parallel = true) {
    const std::size_t cells = out_h * out_w;
#pragma omp parallel for schedule(static) if (parallel)
    for (std::size_t ci = 0; ci < c_in; ++ci) {
        for (std::size_t ih = 0; ih < h; ++ih) {
            for (std::size_t iw = 0; iw < w; ++iw) {
                T acc = T(0);
                for (std::size_t kh = 0; kh < ksize; ++kh) {
                    const std::ptrdiff_t ohs =
                        static_cast<std::ptrdiff_t>(ih + pad) -
                        static_cast<std::ptrdiff_t>(kh);
                    if (ohs < 0 || ohs % static_cast<std::ptrdiff_t>(stride)) continue;
                    const std::size_t oh = static_cast<std::size_t>(ohs) / stride;
                    if (oh >= out_h) continue;
                    for (std::size_t kw = 0; kw < ksize; ++kw) {
                        const std::ptrdiff_t ows =
                            static_cast<std::ptrdiff_t>(iw + pad) -
                            static_cast<std::ptrdiff_t>(kw);
                        if (ows < 0 || ows % static_cast<std::ptrdiff_t>(stride))
                            continue;
                        const std::size_t ow = static_cast<std::size_t>(ows) / stride;
                        if (ow >= out_w) continue;
                        acc += cols[((ci * ksize + kh) * ksize + kw) * cells +
                                    oh * out_w + ow];
                    }
                }
                x[(ci * h + ih) * w + iw] += acc;
            }
        }
    }
}

// Deterministic full reduction: fixed-size blocks summed in index order, so
// the result does not depend on the thread count.
template <typename T>
T sum(const T* x, std::size_t n) {
    constexpr std::size_t block = 4096;
    const std::size_t nblocks = (n + block - 1) / block;
    if (nblocks <= 1) return serial::sum(x, n);
    std::vector<T> partial(nblocks);
#pragma omp parallel for schedule(static)
    for (std::size_t b = 0; b < nblocks; ++b)
        partial[b] = serial::sum(x + b * block, std::min(block, n - b * block));
    return serial::sum(partial.data(), nblocks);
}

template <typename T, typename F>
void apply_elementwise(T* out, std::size_t n, F&& f) {
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < n; ++i) out[i] = f(i);
}

}  // namespace wrn::kernels
