#include <doctest.h>

#include <cmath>
#include <vector>

#include "wrn/common.hpp"
#include "wrn/kernels.hpp"

using namespace wrn;

namespace {

template <typename T>
std::vector<T> random_vec(std::size_t n, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<T> v(n);
    for (auto& x : v) x = static_cast<T>(lo + (hi - lo) * rng.next_double());
    return v;
}

template <typename T>
double max_abs_diff(const std::vector<T>& a, const std::vector<T>& b) {
    REQUIRE(a.size() == b.size());
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    return m;
}

}  // namespace

TEST_CASE("gemm variants match the serial reference") {
    Rng rng(101);
    for (int round = 0; round < 8; ++round) {
        const std::size_t m = 1 + rng.next_below(40), n = 1 + rng.next_below(40),
                          k = 1 + rng.next_below(90);
        auto a = random_vec<double>(m * k, rng);
        auto bt = random_vec<double>(n * k, rng);
        auto b = random_vec<double>(k * n, rng);
        auto at = random_vec<double>(k * m, rng);
        const bool accumulate = rng.next_bool();
        std::vector<double> c0 = random_vec<double>(m * n, rng);
        std::vector<double> c1 = c0;

        kernels::serial::gemm_nn(m, n, k, a.data(), b.data(), c0.data(), accumulate);
        kernels::gemm_nn(m, n, k, a.data(), b.data(), c1.data(), accumulate);
        CHECK(max_abs_diff(c0, c1) < 1e-13);

        c1 = c0 = random_vec<double>(m * n, rng);
        kernels::serial::gemm_nt(m, n, k, a.data(), bt.data(), c0.data(), accumulate);
        kernels::gemm_nt(m, n, k, a.data(), bt.data(), c1.data(), accumulate);
        CHECK(max_abs_diff(c0, c1) < 1e-13);

        c1 = c0 = random_vec<double>(m * n, rng);
        kernels::serial::gemm_tn(m, n, k, at.data(), b.data(), c0.data(), accumulate);
        kernels::gemm_tn(m, n, k, at.data(), b.data(), c1.data(), accumulate);
        CHECK(max_abs_diff(c0, c1) < 1e-13);
    }
}

TEST_CASE("im2col+gemm convolution equals the naive sliding window") {
    Rng rng(202);
    for (int round = 0; round < 12; ++round) {
        const std::size_t c_in = 1 + rng.next_below(4), c_out = 1 + rng.next_below(5);
        const std::size_t k = rng.next_bool() ? 3 : 1;
        const std::size_t stride = 1 + rng.next_below(2);
        const std::size_t pad = k == 3 ? rng.next_below(2) : 0;
        const std::size_t h = k + 1 + rng.next_below(8);
        const std::size_t out_h = (h + 2 * pad - k) / stride + 1;
        auto x = random_vec<double>(c_in * h * h, rng);
        auto w = random_vec<double>(c_out * c_in * k * k, rng);
        std::vector<double> y_naive(c_out * out_h * out_h);
        kernels::serial::conv2d_naive(x.data(), w.data(), y_naive.data(), c_in, h, h,
                                      c_out, k, stride, pad, out_h, out_h);
        std::vector<double> cols(c_in * k * k * out_h * out_h);
        kernels::im2col(x.data(), c_in, h, h, k, stride, pad, cols.data(), out_h, out_h);
        std::vector<double> y_gemm(y_naive.size());
        kernels::gemm_nn(c_out, out_h * out_h, c_in * k * k, w.data(), cols.data(),
                         y_gemm.data(), false);
        CHECK(max_abs_diff(y_naive, y_gemm) < 1e-10);
    }
}

TEST_CASE("col2im gather counts every im2col contribution") {
    const std::size_t c = 2, h = 6, k = 3, stride = 2, pad = 1;
    const std::size_t out_h = (h + 2 * pad - k) / stride + 1;
    std::vector<double> cols(c * k * k * out_h * out_h, 1.0);
    std::vector<double> back(c * h * h, 0.0);
    kernels::col2im_add(cols.data(), c, h, h, k, stride, pad, back.data(), out_h, out_h);
    for (std::size_t idx = 0; idx < c * h * h; ++idx) {
        std::vector<double> x(c * h * h, 0.0);
        x[idx] = 1.0;
        std::vector<double> cc(cols.size());
        kernels::im2col(x.data(), c, h, h, k, stride, pad, cc.data(), out_h, out_h);
        double count = 0;
        for (double v : cc) count += v;
        CHECK(back[idx] == doctest::Approx(count).epsilon(1e-12));
    }
}

TEST_CASE("parallel results are identical for any thread count") {
    const int saved = kernels::max_threads();
    Rng rng(404);
    const std::size_t m = 33, n = 47, k = 129;
    auto a = random_vec<float>(m * k, rng);
    auto b = random_vec<float>(k * n, rng);
    auto big = random_vec<float>(1 << 18, rng);

    std::vector<std::vector<float>> results;
    std::vector<float> sums;
    for (int threads : {1, 2, 4}) {
        kernels::set_threads(threads);
        std::vector<float> c(m * n);
        kernels::gemm_nn(m, n, k, a.data(), b.data(), c.data(), false);
        results.push_back(std::move(c));
        sums.push_back(kernels::sum(big.data(), big.size()));
    }
    kernels::set_threads(saved);
    for (std::size_t i = 1; i < results.size(); ++i) {
        CHECK(results[i] == results[0]);  // bitwise
        CHECK(sums[i] == sums[0]);
    }
}

TEST_CASE("blocked sum matches serial sum closely") {
    Rng rng(505);
    auto v = random_vec<double>(100001, rng);
    const double a = kernels::sum(v.data(), v.size());
    const double b = kernels::serial::sum(v.data(), v.size());
    CHECK(a == doctest::Approx(b).epsilon(1e-12));
}

TEST_CASE("transpose round trip") {
    Rng rng(606);
    const std::size_t r = 13, c = 29;
    auto m = random_vec<double>(r * c, rng);
    std::vector<double> t(r * c), back(r * c);
    kernels::transpose(r, c, m.data(), t.data());
    kernels::transpose(c, r, t.data(), back.data());
    CHECK(back == m);
}
