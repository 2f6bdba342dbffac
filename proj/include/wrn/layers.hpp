#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "wrn/common.hpp"
#include "wrn/kernels.hpp"
#include "wrn/tensor.hpp"

namespace wrn::layers {

enum class Mode { train, eval };

// ---------------------------------------------------------------------------
// Parameter/state records.

template <typename T>
struct Conv2dParams {
    Tensor<T> weight;  // [C_out, C_in, k, k], square kernels only
    Tensor<T> bias;    // optional [C_out]; undefined handle = no bias
    std::size_t stride = 1;
    std::size_t padding = 0;

    std::size_t c_out() const { return weight.dim(0); }
    std::size_t c_in() const { return weight.dim(1); }
    std::size_t ksize() const { return weight.dim(2); }
};

template <typename T>
struct BatchNormParams {
    Tensor<T> gamma;         // [C]
    Tensor<T> beta;          // [C]
    Tensor<T> running_mean;  // [C], not trainable
    Tensor<T> running_var;   // [C], strictly positive
    T epsilon = static_cast<T>(1e-5);
    T momentum = static_cast<T>(0.1);  // new = (1-m)*old + m*batch
    Mode mode = Mode::train;

    std::size_t channels() const { return gamma.dim(0); }
};

struct DropoutState {
    double p = 0.0;              // drop probability, must be < 1
    std::uint64_t rng_seed = 0;  // stream identity
    std::uint64_t calls = 0;     // forward-call counter; part of the rng state
    Mode mode = Mode::train;
    double last_keep = 1.0;      // kept fraction of the most recent train mask
};

namespace detail {

inline std::size_t conv_out_dim(std::size_t in, std::size_t k, std::size_t stride,
                                std::size_t pad) {
    return (in + 2 * pad - k) / stride + 1;
}

// Per-element dropout decision; depends only on (call_seed, index).
inline bool dropout_keep(std::uint64_t call_seed, std::size_t i, double p) {
    const std::uint64_t h = splitmix64(call_seed + 0x9E3779B97F4A7C15ull * (i + 1));
    return static_cast<double>(h >> 11) * 0x1.0p-53 >= p;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d: cross-correlation via im2col + gemm. The naive sliding-window
// kernel in kernels::serial is the reference this path is tested against.

template <typename T>
Tensor<T> conv2d(Tape<T>* tape, const Tensor<T>& x, Conv2dParams<T>& p) {
    if (x.rank() != 4)
        throw ShapeError("conv2d input must be NCHW, got " + format_shape(x.shape()));
    const std::size_t n = x.dim(0), c_in = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (c_in != p.c_in())
        throw ShapeError("conv2d: input channels " + format_shape(x.shape()) +
                         " do not match weight " + format_shape(p.weight.shape()));
    const std::size_t k = p.ksize(), stride = p.stride, pad = p.padding;
    if (h + 2 * pad < k || w + 2 * pad < k)
        throw ShapeError("conv2d: kernel " + std::to_string(k) +
                         " exceeds padded input " + format_shape(x.shape()));
    const std::size_t out_h = detail::conv_out_dim(h, k, stride, pad);
    const std::size_t out_w = detail::conv_out_dim(w, k, stride, pad);
    const std::size_t c_out = p.c_out();
    const std::size_t cells = out_h * out_w;
    const std::size_t crows = c_in * k * k;

    Tensor<T> out({n, c_out, out_h, out_w});
    const bool has_bias = p.bias.defined();
    const T* xd = x.data();
    const T* wd = p.weight.data();
    T* yd = out.data();

    if (n > 1) {
        // One image per thread; inner kernels serial. The per-element
        // accumulation order matches the single-image path exactly.
        const int nthreads = kernels::max_threads();
        std::vector<std::vector<T>> scratch(static_cast<std::size_t>(nthreads));
#pragma omp parallel for schedule(static)
        for (std::size_t i = 0; i < n; ++i) {
#ifdef _OPENMP
            auto& cols = scratch[static_cast<std::size_t>(omp_get_thread_num())];
#else
            auto& cols = scratch[0];
#endif
            cols.resize(crows * cells);
            kernels::im2col(xd + i * c_in * h * w, c_in, h, w, k, stride, pad,
                            cols.data(), out_h, out_w, false);
            kernels::gemm_nn(c_out, cells, crows, wd, cols.data(),
                             yd + i * c_out * cells, false, false);
        }
    } else {
        std::vector<T> cols(crows * cells);
        kernels::im2col(xd, c_in, h, w, k, stride, pad, cols.data(), out_h, out_w);
        kernels::gemm_nn(c_out, cells, crows, wd, cols.data(), yd, false);
    }
    if (has_bias) {
        const T* bd = p.bias.data();
#pragma omp parallel for schedule(static)
        for (std::size_t ic = 0; ic < n * c_out; ++ic) {
            const T bv = bd[ic % c_out];
            T* row = yd + ic * cells;
            for (std::size_t j = 0; j < cells; ++j) row[j] += bv;
        }
    }

    const bool rg =
        x.requires_grad() || p.weight.requires_grad() || (has_bias && p.bias.requires_grad());
    if (tape && rg) {
        out.set_requires_grad(true);
        auto xi = x.impl(), wi = p.weight.impl(), oi = out.impl();
        auto bi = has_bias ? p.bias.impl() : nullptr;
        tape->record({x, p.weight}, out, [xi, wi, bi, oi, n, c_in, h, w, k, stride, pad,
                                          out_h, out_w, c_out, cells, crows] {
            if (oi->grad.empty()) return;
            const T* g = oi->grad.data();
            const T* xd = xi->data.data();
            const T* wd = wi->data.data();
            const bool need_gx = xi->requires_grad;
            const bool need_gw = wi->requires_grad;
            const bool need_gb = bi && bi->requires_grad;
            if (need_gx && xi->grad.empty()) xi->grad.assign(xi->data.size(), T(0));
            if (need_gw && wi->grad.empty()) wi->grad.assign(wi->data.size(), T(0));

            // Images are processed in fixed-size chunks: each image in a
            // chunk works on its own buffers in parallel, then per-image
            // weight-gradient partials reduce in image order. The chunk
            // size is a constant, so results do not depend on thread count.
            constexpr std::size_t chunk = 8;
            const std::size_t lanes = std::min(chunk, n);
            std::vector<std::vector<T>> cols(lanes), cols_t(lanes), gcols(lanes),
                gw_part(lanes);
            for (std::size_t s = 0; s < lanes; ++s) {
                if (need_gx || need_gw) cols[s].resize(crows * cells);
                if (need_gw) {
                    cols_t[s].resize(cells * crows);
                    gw_part[s].resize(c_out * crows);
                }
                if (need_gx) gcols[s].resize(crows * cells);
            }
            T* gw = need_gw ? wi->grad.data() : nullptr;
            for (std::size_t c0 = 0; c0 < n; c0 += chunk) {
                const std::size_t c1 = std::min(c0 + chunk, n);
#pragma omp parallel for schedule(static)
                for (std::size_t i = c0; i < c1; ++i) {
                    const std::size_t s = i - c0;
                    const T* gi = g + i * c_out * cells;
                    if (need_gx || need_gw)
                        kernels::im2col(xd + i * c_in * h * w, c_in, h, w, k, stride,
                                        pad, cols[s].data(), out_h, out_w, false);
                    if (need_gw) {
                        kernels::transpose(crows, cells, cols[s].data(),
                                           cols_t[s].data(), false);
                        kernels::gemm_nn(c_out, crows, cells, gi, cols_t[s].data(),
                                         gw_part[s].data(), false, false);
                    }
                    if (need_gx) {
                        kernels::gemm_tn(crows, cells, c_out, wd, gi, gcols[s].data(),
                                         false, false);
                        kernels::col2im_add(gcols[s].data(), c_in, h, w, k, stride, pad,
                                            xi->grad.data() + i * c_in * h * w, out_h,
                                            out_w, false);
                    }
                }
                if (need_gw) {
                    const std::size_t wcount = c_out * crows;
                    for (std::size_t s = 0; s < c1 - c0; ++s) {
                        const T* part = gw_part[s].data();
#pragma omp parallel for schedule(static)
                        for (std::size_t j = 0; j < wcount; ++j) gw[j] += part[j];
                    }
                }
            }
            if (need_gb) {
                if (bi->grad.empty()) bi->grad.assign(bi->data.size(), T(0));
                T* gb = bi->grad.data();
#pragma omp parallel for schedule(static)
                for (std::size_t co = 0; co < c_out; ++co) {
                    T acc = T(0);
                    for (std::size_t i = 0; i < n; ++i) {
                        const T* row = g + (i * c_out + co) * cells;
                        for (std::size_t j = 0; j < cells; ++j) acc += row[j];
                    }
                    gb[co] += acc;
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Batch normalization over NCHW channels. Train mode uses biased batch
// variance and folds it into the running statistics; eval mode applies the
// running statistics.

template <typename T>
Tensor<T> batchnorm(Tape<T>* tape, const Tensor<T>& x, BatchNormParams<T>& p) {
    if (x.rank() != 4)
        throw ShapeError("batchnorm input must be NCHW, got " + format_shape(x.shape()));
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (c != p.channels())
        throw ShapeError("batchnorm: channels " + std::to_string(c) +
                         " do not match parameters of " + std::to_string(p.channels()));
    const std::size_t plane = h * w;
    const std::size_t m = n * plane;
    const bool train = p.mode == Mode::train;
    if (train && m < 2)
        throw DataError("batchnorm: train mode needs at least 2 elements per channel, got " +
                        std::to_string(m));

    Tensor<T> out(x.shape());
    const T* xd = x.data();
    T* yd = out.data();
    const T* gamma = p.gamma.data();
    const T* beta = p.beta.data();

    std::vector<T> mean(c), inv_std(c);
    if (train) {
        T* rm = p.running_mean.data();
        T* rv = p.running_var.data();
        const T mom = p.momentum;
#pragma omp parallel for schedule(static)
        for (std::size_t ch = 0; ch < c; ++ch) {
            double s = 0.0, s2 = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const T* px = xd + (i * c + ch) * plane;
                for (std::size_t j = 0; j < plane; ++j) {
                    s += px[j];
                    s2 += static_cast<double>(px[j]) * px[j];
                }
            }
            const double mu = s / static_cast<double>(m);
            double var = s2 / static_cast<double>(m) - mu * mu;
            if (var < 0.0) var = 0.0;  // rounding guard
            mean[ch] = static_cast<T>(mu);
            inv_std[ch] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(p.epsilon)));
            rm[ch] = (T(1) - mom) * rm[ch] + mom * static_cast<T>(mu);
            rv[ch] = (T(1) - mom) * rv[ch] + mom * static_cast<T>(var);
        }
    } else {
        const T* rm = p.running_mean.data();
        const T* rv = p.running_var.data();
        for (std::size_t ch = 0; ch < c; ++ch) {
            mean[ch] = rm[ch];
            inv_std[ch] = static_cast<T>(
                1.0 / std::sqrt(static_cast<double>(rv[ch]) + static_cast<double>(p.epsilon)));
        }
    }

#pragma omp parallel for schedule(static)
    for (std::size_t ic = 0; ic < n * c; ++ic) {
        const std::size_t ch = ic % c;
        const T mu = mean[ch], is = inv_std[ch], ga = gamma[ch], be = beta[ch];
        const T* px = xd + ic * plane;
        T* py = yd + ic * plane;
#pragma omp simd
        for (std::size_t j = 0; j < plane; ++j) py[j] = (px[j] - mu) * is * ga + be;
    }

    const bool rg = x.requires_grad() || p.gamma.requires_grad() || p.beta.requires_grad();
    if (tape && rg) {
        out.set_requires_grad(true);
        auto xi = x.impl(), gi = p.gamma.impl(), bi = p.beta.impl(), oi = out.impl();
        tape->record({x, p.gamma, p.beta}, out,
                     [xi, gi, bi, oi, mean, inv_std, n, c, plane, m, train] {
            if (oi->grad.empty()) return;
            const T* g = oi->grad.data();
            const T* xd = xi->data.data();
            const T* gamma = gi->data.data();
            const bool need_gx = xi->requires_grad;
            if (need_gx && xi->grad.empty()) xi->grad.assign(xi->data.size(), T(0));
            if (gi->requires_grad && gi->grad.empty()) gi->grad.assign(c, T(0));
            if (bi->requires_grad && bi->grad.empty()) bi->grad.assign(c, T(0));
#pragma omp parallel for schedule(static)
            for (std::size_t ch = 0; ch < c; ++ch) {
                const T mu = mean[ch], is = inv_std[ch];
                double s1 = 0.0, s2 = 0.0;  // sum(dy), sum(dy * xhat)
                for (std::size_t i = 0; i < n; ++i) {
                    const T* pg = g + (i * c + ch) * plane;
                    const T* px = xd + (i * c + ch) * plane;
                    for (std::size_t j = 0; j < plane; ++j) {
                        s1 += pg[j];
                        s2 += static_cast<double>(pg[j]) * ((px[j] - mu) * is);
                    }
                }
                if (gi->requires_grad) gi->grad[ch] += static_cast<T>(s2);
                if (bi->requires_grad) bi->grad[ch] += static_cast<T>(s1);
                if (!need_gx) continue;
                if (train) {
                    const double inv_m = 1.0 / static_cast<double>(m);
                    const double ga_is = static_cast<double>(gamma[ch]) * is;
                    for (std::size_t i = 0; i < n; ++i) {
                        const T* pg = g + (i * c + ch) * plane;
                        const T* px = xd + (i * c + ch) * plane;
                        T* gx = xi->grad.data() + (i * c + ch) * plane;
                        for (std::size_t j = 0; j < plane; ++j) {
                            const double xhat = (px[j] - mu) * is;
                            gx[j] += static_cast<T>(
                                ga_is * (pg[j] - inv_m * (s1 + xhat * s2)));
                        }
                    }
                } else {
                    const T ga_is = gamma[ch] * is;
                    for (std::size_t i = 0; i < n; ++i) {
                        const T* pg = g + (i * c + ch) * plane;
                        T* gx = xi->grad.data() + (i * c + ch) * plane;
                        for (std::size_t j = 0; j < plane; ++j) gx[j] += ga_is * pg[j];
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu(Tape<T>* tape, const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    const T* px = x.data();
    kernels::apply_elementwise(out.data(), out.size(), [&](std::size_t i) {
        return px[i] > T(0) ? px[i] : T(0);
    });
    if (tape && x.requires_grad()) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        tape->record({x}, out, [xi, oi] {
            if (oi->grad.empty() || !xi->requires_grad) return;
            const T* g = oi->grad.data();
            const T* px = xi->data.data();
            const std::size_t n = oi->data.size();
            auto& gx = xi->grad;
            if (gx.empty()) gx.assign(n, T(0));
#pragma omp parallel for schedule(static)
            for (std::size_t i = 0; i < n; ++i)
                if (px[i] > T(0)) gx[i] += g[i];
        });
    }
    return out;
}

// Inverted dropout: train mode zeroes with probability p and scales
// survivors by 1/(1-p); eval mode is the identity (same handle).
template <typename T>
Tensor<T> dropout(Tape<T>* tape, const Tensor<T>& x, DropoutState& s) {
    if (s.p >= 1.0)
        throw ConfigError("dropout probability must be < 1, got " + std::to_string(s.p));
    if (s.mode == Mode::eval || s.p <= 0.0) return x;
    const std::uint64_t call_seed = derive_seed(s.rng_seed, seed_tag::dropout, s.calls++);
    const double p = s.p;
    const T scale = static_cast<T>(1.0 / (1.0 - p));
    Tensor<T> out(x.shape());
    const T* px = x.data();
    T* py = out.data();
    const std::size_t total = out.size();
    std::size_t kept = 0;
#pragma omp parallel for schedule(static) reduction(+ : kept)
    for (std::size_t i = 0; i < total; ++i) {
        const bool keep = detail::dropout_keep(call_seed, i, p);
        py[i] = keep ? px[i] * scale : T(0);
        kept += keep ? 1u : 0u;
    }
    s.last_keep = static_cast<double>(kept) / static_cast<double>(total);
    if (tape && x.requires_grad()) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        tape->record({x}, out, [xi, oi, call_seed, p, scale] {
            if (oi->grad.empty() || !xi->requires_grad) return;
            const T* g = oi->grad.data();
            const std::size_t n = oi->data.size();
            auto& gx = xi->grad;
            if (gx.empty()) gx.assign(n, T(0));
#pragma omp parallel for schedule(static)
            for (std::size_t i = 0; i < n; ++i)
                if (detail::dropout_keep(call_seed, i, p)) gx[i] += g[i] * scale;
        });
    }
    return out;
}

// Global average pooling; the window must equal the spatial extent.
template <typename T>
Tensor<T> avgpool_global(Tape<T>* tape, const Tensor<T>& x, std::size_t window) {
    if (x.rank() != 4)
        throw ShapeError("avgpool input must be NCHW, got " + format_shape(x.shape()));
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h != window || w != window)
        throw ShapeError("avgpool: window " + std::to_string(window) +
                         " does not cover input " + format_shape(x.shape()));
    const std::size_t plane = h * w;
    Tensor<T> out({n, c, 1, 1});
    const T* px = x.data();
    T* py = out.data();
    const T inv = T(1) / static_cast<T>(plane);
#pragma omp parallel for schedule(static)
    for (std::size_t ic = 0; ic < n * c; ++ic) {
        T acc = T(0);
        const T* row = px + ic * plane;
        for (std::size_t j = 0; j < plane; ++j) acc += row[j];
        py[ic] = acc * inv;
    }
    if (tape && x.requires_grad()) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        tape->record({x}, out, [xi, oi, plane, inv] {
            if (oi->grad.empty() || !xi->requires_grad) return;
            const T* g = oi->grad.data();
            const std::size_t nc = oi->data.size();
            auto& gx = xi->grad;
            if (gx.empty()) gx.assign(xi->data.size(), T(0));
#pragma omp parallel for schedule(static)
            for (std::size_t ic = 0; ic < nc; ++ic) {
                const T gv = g[ic] * inv;
                T* row = gx.data() + ic * plane;
                for (std::size_t j = 0; j < plane; ++j) row[j] += gv;
            }
        });
    }
    return out;
}

// Max pooling (used only by the bottleneck family's stem).
template <typename T>
Tensor<T> maxpool2d(Tape<T>* tape, const Tensor<T>& x, std::size_t window,
                    std::size_t stride, std::size_t pad) {
    if (x.rank() != 4)
        throw ShapeError("maxpool input must be NCHW, got " + format_shape(x.shape()));
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h + 2 * pad < window || w + 2 * pad < window)
        throw ShapeError("maxpool: window exceeds padded input");
    const std::size_t out_h = detail::conv_out_dim(h, window, stride, pad);
    const std::size_t out_w = detail::conv_out_dim(w, window, stride, pad);
    Tensor<T> out({n, c, out_h, out_w});
    auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.size());
    const T* px = x.data();
    T* py = out.data();
    std::uint32_t* am = argmax->data();
#pragma omp parallel for schedule(static)
    for (std::size_t ic = 0; ic < n * c; ++ic) {
        const T* plane_in = px + ic * h * w;
        for (std::size_t oh = 0; oh < out_h; ++oh) {
            for (std::size_t ow = 0; ow < out_w; ++ow) {
                T best = -std::numeric_limits<T>::infinity();
                std::uint32_t best_idx = 0;
                for (std::size_t kh = 0; kh < window; ++kh) {
                    const std::ptrdiff_t ih =
                        static_cast<std::ptrdiff_t>(oh * stride + kh) -
                        static_cast<std::ptrdiff_t>(pad);
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) continue;
                    for (std::size_t kw = 0; kw < window; ++kw) {
                        const std::ptrdiff_t iw =
                            static_cast<std::ptrdiff_t>(ow * stride + kw) -
                            static_cast<std::ptrdiff_t>(pad);
                        if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(w)) continue;
                        const T v = plane_in[ih * static_cast<std::ptrdiff_t>(w) + iw];
                        if (v > best) {
                            best = v;
                            best_idx = static_cast<std::uint32_t>(ih * w + iw);
                        }
                    }
                }
                const std::size_t oidx = (ic * out_h + oh) * out_w + ow;
                py[oidx] = best;
                am[oidx] = best_idx;
            }
        }
    }
    if (tape && x.requires_grad()) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        const std::size_t cells = out_h * out_w, plane = h * w;
        tape->record({x}, out, [xi, oi, argmax, cells, plane] {
            if (oi->grad.empty() || !xi->requires_grad) return;
            const T* g = oi->grad.data();
            auto& gx = xi->grad;
            if (gx.empty()) gx.assign(xi->data.size(), T(0));
            const std::uint32_t* am = argmax->data();
            const std::size_t nc = oi->data.size() / cells;
#pragma omp parallel for schedule(static)
            for (std::size_t ic = 0; ic < nc; ++ic)
                for (std::size_t j = 0; j < cells; ++j)
                    gx[ic * plane + am[ic * cells + j]] += g[ic * cells + j];
        });
    }
    return out;
}

// Fully connected: y = x W^T + b with W stored [K, D].
template <typename T>
Tensor<T> linear(Tape<T>* tape, const Tensor<T>& x, Tensor<T>& weight, Tensor<T>& bias) {
    if (x.rank() != 2)
        throw ShapeError("linear input must be [N,D], got " + format_shape(x.shape()));
    const std::size_t n = x.dim(0), d = x.dim(1);
    if (weight.rank() != 2 || weight.dim(1) != d)
        throw ShapeError("linear: input " + format_shape(x.shape()) +
                         " does not match weight " + format_shape(weight.shape()));
    const std::size_t kdim = weight.dim(0);
    const bool has_bias = bias.defined();
    if (has_bias && (bias.rank() != 1 || bias.dim(0) != kdim))
        throw ShapeError("linear: bias " + format_shape(bias.shape()) +
                         " does not match weight " + format_shape(weight.shape()));
    Tensor<T> out({n, kdim});
    kernels::gemm_nt(n, kdim, d, x.data(), weight.data(), out.data(), false);
    if (has_bias) {
        const T* bd = bias.data();
        T* yd = out.data();
#pragma omp parallel for schedule(static)
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < kdim; ++j) yd[i * kdim + j] += bd[j];
    }
    const bool rg = x.requires_grad() || weight.requires_grad() ||
                    (has_bias && bias.requires_grad());
    if (tape && rg) {
        out.set_requires_grad(true);
        auto xi = x.impl(), wi = weight.impl(), oi = out.impl();
        auto bi = has_bias ? bias.impl() : nullptr;
        tape->record({x, weight}, out, [xi, wi, bi, oi, n, d, kdim] {
            if (oi->grad.empty()) return;
            const T* g = oi->grad.data();
            if (xi->requires_grad) {
                if (xi->grad.empty()) xi->grad.assign(xi->data.size(), T(0));
                kernels::gemm_nn(n, d, kdim, g, wi->data.data(), xi->grad.data(), true);
            }
            if (wi->requires_grad) {
                if (wi->grad.empty()) wi->grad.assign(wi->data.size(), T(0));
                kernels::gemm_tn(kdim, d, n, g, xi->data.data(), wi->grad.data(), true);
            }
            if (bi && bi->requires_grad) {
                if (bi->grad.empty()) bi->grad.assign(bi->data.size(), T(0));
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < kdim; ++j) bi->grad[j] += g[i * kdim + j];
            }
        });
    }
    return out;
}

// Mean softmax cross-entropy with max-subtraction stabilization.
// Backward: (softmax - onehot) / N.
template <typename T>
Tensor<T> softmax_cross_entropy(Tape<T>* tape, const Tensor<T>& logits,
                                const std::vector<int>& labels) {
    if (logits.rank() != 2)
        throw ShapeError("softmax_cross_entropy expects [N,K] logits, got " +
                         format_shape(logits.shape()));
    const std::size_t n = logits.dim(0), kdim = logits.dim(1);
    if (labels.size() != n)
        throw DataError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                        " labels for " + std::to_string(n) + " rows");
    for (std::size_t i = 0; i < n; ++i)
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= kdim)
            throw DataError("label " + std::to_string(labels[i]) + " at row " +
                            std::to_string(i) + " outside [0," + std::to_string(kdim) + ")");

    auto probs = std::make_shared<std::vector<T>>(n * kdim);
    const T* ld = logits.data();
    std::vector<double> row_loss(n);
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < n; ++i) {
        const T* row = ld + i * kdim;
        T mx = row[0];
        for (std::size_t j = 1; j < kdim; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (std::size_t j = 0; j < kdim; ++j)
            denom += std::exp(static_cast<double>(row[j] - mx));
        T* prow = probs->data() + i * kdim;
        for (std::size_t j = 0; j < kdim; ++j)
            prow[j] = static_cast<T>(std::exp(static_cast<double>(row[j] - mx)) / denom);
        row_loss[i] = std::log(denom) -
                      static_cast<double>(row[static_cast<std::size_t>(labels[i])] - mx);
    }
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += row_loss[i];
    Tensor<T> out({1});
    out.data()[0] = static_cast<T>(total / static_cast<double>(n));

    if (tape && logits.requires_grad()) {
        out.set_requires_grad(true);
        auto li = logits.impl(), oi = out.impl();
        tape->record({logits}, out, [li, oi, probs, labels, n, kdim] {
            if (oi->grad.empty() || !li->requires_grad) return;
            const T g = oi->grad[0];
            auto& gl = li->grad;
            if (gl.empty()) gl.assign(li->data.size(), T(0));
            const T inv_n = T(1) / static_cast<T>(n);
            const T* pd = probs->data();
#pragma omp parallel for schedule(static)
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t lbl = static_cast<std::size_t>(labels[i]);
                for (std::size_t j = 0; j < kdim; ++j) {
                    const T onehot = (j == lbl) ? T(1) : T(0);
                    gl[i * kdim + j] += g * (pd[i * kdim + j] - onehot) * inv_n;
                }
            }
        });
    }
    return out;
}

}  // namespace wrn::layers
