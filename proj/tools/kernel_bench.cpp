// Compares the OpenMP kernels against their serial reference
// implementations: same inputs, wall-clock medians, and a correctness
// column (max absolute difference).

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "wrn/bench.hpp"
#include "wrn/common.hpp"
#include "wrn/kernels.hpp"

namespace {

using wrn::Rng;
namespace kernels = wrn::kernels;

std::vector<float> random_vec(std::size_t n, Rng& rng) {
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(rng.next_double() - 0.5);
    return v;
}

void report(const char* name, double serial_ms, double parallel_ms, double max_diff) {
    std::printf("%-26s %10.3f ms %10.3f ms %8.2fx   max|diff| %.3e\n", name, serial_ms,
                parallel_ms, serial_ms / parallel_ms, max_diff);
}

double max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
    return m;
}

}  // namespace

int main() {
    if (const char* threads = std::getenv("WRN_THREADS"))
        kernels::set_threads(std::atoi(threads));
    Rng rng(20240517);
    const int warmup = 2, iters = 7;
    std::printf("threads: %d\n", kernels::max_threads());
    std::printf("%-26s %13s %13s %9s\n", "kernel", "serial", "openmp", "speedup");

    {  // gemm_nn 384x384x384
        const std::size_t n = 384;
        auto a = random_vec(n * n, rng), b = random_vec(n * n, rng);
        std::vector<float> c_serial(n * n), c_par(n * n);
        const double ts = wrn::bench::timed_median_ms(
            [&] { kernels::serial::gemm_nn(n, n, n, a.data(), b.data(), c_serial.data(), false); },
            warmup, iters);
        const double tp = wrn::bench::timed_median_ms(
            [&] { kernels::gemm_nn(n, n, n, a.data(), b.data(), c_par.data(), false); },
            warmup, iters);
        report("gemm_nn 384^3", ts, tp, max_abs_diff(c_serial, c_par));
    }

    {  // gemm_nt 256x256 dot over 1024
        const std::size_t m = 256, n = 256, k = 1024;
        auto a = random_vec(m * k, rng), b = random_vec(n * k, rng);
        std::vector<float> c_serial(m * n), c_par(m * n);
        const double ts = wrn::bench::timed_median_ms(
            [&] { kernels::serial::gemm_nt(m, n, k, a.data(), b.data(), c_serial.data(), false); },
            warmup, iters);
        const double tp = wrn::bench::timed_median_ms(
            [&] { kernels::gemm_nt(m, n, k, a.data(), b.data(), c_par.data(), false); },
            warmup, iters);
        report("gemm_nt 256x256x1024", ts, tp, max_abs_diff(c_serial, c_par));
    }

    {  // conv2d 32ch 32x32, 3x3: naive loops vs im2col+gemm
        const std::size_t c_in = 32, c_out = 32, h = 32, k = 3, pad = 1, stride = 1;
        const std::size_t out_h = (h + 2 * pad - k) / stride + 1;
        auto x = random_vec(c_in * h * h, rng);
        auto w = random_vec(c_out * c_in * k * k, rng);
        std::vector<float> y_naive(c_out * out_h * out_h), y_gemm(y_naive.size());
        const double ts = wrn::bench::timed_median_ms(
            [&] {
                kernels::serial::conv2d_naive(x.data(), w.data(), y_naive.data(), c_in, h,
                                              h, c_out, k, stride, pad, out_h, out_h);
            },
            warmup, iters);
        std::vector<float> cols(c_in * k * k * out_h * out_h);
        const double tp = wrn::bench::timed_median_ms(
            [&] {
                kernels::im2col(x.data(), c_in, h, h, k, stride, pad, cols.data(), out_h,
                                out_h);
                kernels::gemm_nn(c_out, out_h * out_h, c_in * k * k, w.data(), cols.data(),
                                 y_gemm.data(), false);
            },
            warmup, iters);
        report("conv 32x32x32 3x3", ts, tp, max_abs_diff(y_naive, y_gemm));
    }

    {  // reduction over 16M elements
        auto v = random_vec(std::size_t{1} << 24, rng);
        volatile float sink = 0;
        const double ts = wrn::bench::timed_median_ms(
            [&] { sink = kernels::serial::sum(v.data(), v.size()); }, warmup, iters);
        const double tp = wrn::bench::timed_median_ms(
            [&] { sink = kernels::sum(v.data(), v.size()); }, warmup, iters);
        const double diff = std::abs(static_cast<double>(kernels::serial::sum(v.data(), v.size())) -
                                     kernels::sum(v.data(), v.size()));
        report("sum 16M", ts, tp, diff);
        (void)sink;
    }

    std::printf("host: %s\n", wrn::bench::host_fingerprint().c_str());
    return 0;
}
