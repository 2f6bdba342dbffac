#include <doctest.h>

#include <cmath>
#include <vector>

#include "wrn/layers.hpp"
#include "wrn/net.hpp"
#include "wrn/verify.hpp"

using namespace wrn;
using namespace wrn::layers;
using Td = Tensor<double>;

TEST_CASE("conv2d with a unit 1x1 kernel is the identity map") {
    Conv2dParams<double> p;
    p.weight = Td::from({1, 1, 1, 1}, {1.0});
    auto x = Td::from({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    auto y = conv2d<double>(nullptr, x, p);
    CHECK(y.shape() == x.shape());
    CHECK(y.vec() == x.vec());
}

TEST_CASE("conv2d ramp input against the sliding-window reference") {
    Conv2dParams<double> p;
    p.weight = Td::ones({1, 1, 3, 3});
    p.stride = 1;
    p.padding = 1;
    std::vector<double> ramp(16);
    for (int i = 0; i < 16; ++i) ramp[static_cast<std::size_t>(i)] = i;
    auto x = Td::from({1, 1, 4, 4}, ramp);
    auto y = conv2d<double>(nullptr, x, p);
    std::vector<double> expect(16);
    kernels::serial::conv2d_naive(ramp.data(), p.weight.data(), expect.data(), 1, 4, 4, 1,
                                  3, 1, 1, 4, 4);
    for (std::size_t i = 0; i < 16; ++i)
        CHECK(y.vec()[i] == doctest::Approx(expect[i]).epsilon(1e-12));
    // Spot value: interior cell (1,1) covers the 3x3 block around index 5.
    CHECK(y.vec()[5] == doctest::Approx(0 + 1 + 2 + 4 + 5 + 6 + 8 + 9 + 10));
}

TEST_CASE("conv2d stride 2 pad 1 halves a 32x32 input") {
    Conv2dParams<float> p;
    p.weight = Tensor<float>::ones({4, 3, 3, 3});
    p.stride = 2;
    p.padding = 1;
    Tensor<float> x({2, 3, 32, 32});
    auto y = conv2d<float>(nullptr, x, p);
    CHECK(y.shape() == std::vector<std::size_t>{2, 4, 16, 16});
}

TEST_CASE("conv2d rejects channel mismatches naming both shapes") {
    Conv2dParams<float> p;
    p.weight = Tensor<float>::ones({4, 3, 3, 3});
    Tensor<float> x({1, 2, 8, 8});
    CHECK_THROWS_WITH_AS(conv2d<float>(nullptr, x, p), doctest::Contains("4x3x3x3"),
                         ShapeError);
}

TEST_CASE("conv2d batched path equals the single-image path bitwise") {
    Rng rng(11);
    Conv2dParams<double> p;
    p.weight = verify::detail::random_tensor({5, 3, 3, 3}, rng, false);
    p.stride = 1;
    p.padding = 1;
    auto batch = verify::detail::random_tensor({4, 3, 10, 10}, rng, false);
    auto y_batch = conv2d<double>(nullptr, batch, p);
    for (std::size_t i = 0; i < 4; ++i) {
        Td one = Td::from({1, 3, 10, 10},
                          std::vector<double>(batch.data() + i * 300,
                                              batch.data() + (i + 1) * 300));
        auto y_one = conv2d<double>(nullptr, one, p);
        for (std::size_t j = 0; j < y_one.size(); ++j)
            CHECK(y_one.vec()[j] == y_batch.vec()[i * y_one.size() + j]);
    }
}

TEST_CASE("batchnorm normalizes constant channels to zero") {
    BatchNormParams<double> p;
    p.gamma = Td::ones({2});
    p.beta = Td::zeros({2});
    p.running_mean = Td::zeros({2});
    p.running_var = Td::ones({2});
    Td x({2, 2, 3, 3});
    for (std::size_t i = 0; i < x.size(); ++i)
        x.data()[i] = (i / 9) % 2 == 0 ? 4.0 : -1.5;  // constant per channel
    auto y = batchnorm<double>(nullptr, x, p);
    for (double v : y.vec()) CHECK(std::abs(v) < 1e-3);  // 0 up to eps-regularized scale
}

TEST_CASE("batchnorm train-mode output statistics") {
    Rng rng(5);
    BatchNormParams<double> p;
    p.gamma = Td::ones({3});
    p.beta = Td::zeros({3});
    p.running_mean = Td::zeros({3});
    p.running_var = Td::ones({3});
    auto x = verify::detail::random_tensor({4, 3, 5, 5}, rng, false, 0.0, 2.0);
    auto y = batchnorm<double>(nullptr, x, p);
    const std::size_t plane = 25;
    for (std::size_t ch = 0; ch < 3; ++ch) {
        double mean = 0.0, var = 0.0;
        for (std::size_t n = 0; n < 4; ++n)
            for (std::size_t j = 0; j < plane; ++j)
                mean += y.vec()[(n * 3 + ch) * plane + j];
        mean /= 100.0;
        for (std::size_t n = 0; n < 4; ++n)
            for (std::size_t j = 0; j < plane; ++j) {
                const double d = y.vec()[(n * 3 + ch) * plane + j] - mean;
                var += d * d;
            }
        var /= 100.0;
        CHECK(std::abs(mean) < 1e-6);
        CHECK(std::abs(var - 1.0) < 1e-4);
    }
}

TEST_CASE("batchnorm rejects degenerate train statistics") {
    BatchNormParams<double> p;
    p.gamma = Td::ones({2});
    p.beta = Td::zeros({2});
    p.running_mean = Td::zeros({2});
    p.running_var = Td::ones({2});
    Td x({1, 2, 1, 1});  // one element per channel
    CHECK_THROWS_AS(batchnorm<double>(nullptr, x, p), DataError);
    p.mode = Mode::eval;
    CHECK_NOTHROW(batchnorm<double>(nullptr, x, p));
}

TEST_CASE("batchnorm updates running statistics with the 0.9/0.1 blend") {
    BatchNormParams<double> p;
    p.gamma = Td::ones({1});
    p.beta = Td::zeros({1});
    p.running_mean = Td::zeros({1});
    p.running_var = Td::ones({1});
    auto x = Td::from({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
    batchnorm<double>(nullptr, x, p);
    const double mu = 2.5;
    const double var = (1 + 4 + 9 + 16) / 4.0 - mu * mu;  // biased
    CHECK(p.running_mean.vec()[0] == doctest::Approx(0.9 * 0.0 + 0.1 * mu));
    CHECK(p.running_var.vec()[0] == doctest::Approx(0.9 * 1.0 + 0.1 * var));
}

TEST_CASE("eval-mode batchnorm applies running statistics") {
    BatchNormParams<double> p;
    p.gamma = Td::from({1}, {2.0});
    p.beta = Td::from({1}, {1.0});
    p.running_mean = Td::from({1}, {3.0});
    p.running_var = Td::from({1}, {4.0});
    p.mode = Mode::eval;
    auto x = Td::from({1, 1, 1, 2}, {3.0, 7.0});
    auto y = batchnorm<double>(nullptr, x, p);
    CHECK(y.vec()[0] == doctest::Approx(1.0));  // (3-3)/2*2+1
    CHECK(y.vec()[1] == doctest::Approx(2.0 * 4.0 / std::sqrt(4.0 + 1e-5) + 1.0));
}

TEST_CASE("relu and global average pooling basics") {
    auto x = Td::from({1, 1, 1, 3}, {-1.0, 0.0, 2.0});
    auto y = relu<double>(nullptr, x);
    CHECK(y.vec() == std::vector<double>{0.0, 0.0, 2.0});

    Td plane = Td::full({1, 1, 8, 8}, 3.25);
    auto pooled = avgpool_global<double>(nullptr, plane, 8);
    CHECK(pooled.shape() == std::vector<std::size_t>{1, 1, 1, 1});
    CHECK(pooled.vec()[0] == doctest::Approx(3.25));
    CHECK_THROWS_AS(avgpool_global<double>(nullptr, plane, 4), ShapeError);
}

TEST_CASE("avgpool backward spreads gradient uniformly") {
    Td x({1, 1, 8, 8}, true);
    for (std::size_t i = 0; i < 64; ++i) x.data()[i] = static_cast<double>(i);
    Tape<double> tape;
    auto pooled = avgpool_global(&tape, x, 8);
    auto loss = scale(&tape, reshape(&tape, pooled, {1}), 5.0);
    tape.backward(loss);
    for (double g : x.grad()) CHECK(g == doctest::Approx(5.0 / 64.0));
}

TEST_CASE("dropout identity cases") {
    DropoutState s;
    s.p = 0.0;
    s.rng_seed = 9;
    auto x = Td::from({4}, {1, 2, 3, 4});
    CHECK(dropout<double>(nullptr, x, s).vec() == x.vec());

    s.p = 0.5;
    s.mode = Mode::eval;
    CHECK(dropout<double>(nullptr, x, s).vec() == x.vec());

    s.p = 1.0;
    s.mode = Mode::train;
    CHECK_THROWS_AS(dropout<double>(nullptr, x, s), ConfigError);
}

TEST_CASE("dropout zero fraction and inverted scaling at p=0.3") {
    DropoutState s;
    s.p = 0.3;
    s.rng_seed = 77;
    const std::size_t n = 200000;
    auto x = Td::ones({n});
    auto y = dropout<double>(nullptr, x, s);
    std::size_t zeros = 0;
    double mean = 0.0;
    for (double v : y.vec()) {
        if (v == 0.0) ++zeros;
        mean += v;
    }
    mean /= static_cast<double>(n);
    CHECK(std::abs(static_cast<double>(zeros) / n - 0.3) < 0.005);
    CHECK(std::abs(mean - 1.0) < 0.01);
    CHECK(s.last_keep == doctest::Approx(1.0 - static_cast<double>(zeros) / n));
}

TEST_CASE("dropout backward applies the identical mask") {
    DropoutState s;
    s.p = 0.4;
    s.rng_seed = 31;
    Td x({64}, true);
    for (auto& v : x.vec()) v = 1.0;
    Tape<double> tape;
    auto y = dropout(&tape, x, s);
    auto loss = sum(&tape, y);
    tape.backward(loss);
    const double scale_factor = 1.0 / 0.6;
    for (std::size_t i = 0; i < 64; ++i) {
        if (y.vec()[i] == 0.0)
            CHECK(x.grad()[i] == 0.0);
        else
            CHECK(x.grad()[i] == doctest::Approx(scale_factor));
    }
}

TEST_CASE("dropout masks differ call to call but derive from the seed") {
    DropoutState s1{0.5, 123, 0, Mode::train, 1.0};
    DropoutState s2{0.5, 123, 0, Mode::train, 1.0};
    auto x = Td::ones({256});
    auto a1 = dropout<double>(nullptr, x, s1);
    auto a2 = dropout<double>(nullptr, x, s1);
    CHECK(a1.vec() != a2.vec());  // fresh mask per call
    auto b1 = dropout<double>(nullptr, x, s2);
    CHECK(a1.vec() == b1.vec());  // same stream position, same mask
}

TEST_CASE("linear layer against explicit arithmetic") {
    auto x = Td::from({2, 3}, {1, 2, 3, 4, 5, 6});
    auto w = Td::from({2, 3}, {1, 0, -1, 0.5, 0.5, 0.5});
    auto b = Td::from({2}, {10, 20});
    auto y = linear<double>(nullptr, x, w, b);
    CHECK(y.vec()[0] == doctest::Approx(1 - 3 + 10));
    CHECK(y.vec()[1] == doctest::Approx(0.5 * (1 + 2 + 3) + 20));
    CHECK(y.vec()[2] == doctest::Approx(4 - 6 + 10));
    CHECK(y.vec()[3] == doctest::Approx(0.5 * (4 + 5 + 6) + 20));
}

TEST_CASE("softmax cross-entropy reference values") {
    auto uniform = Td::zeros({2, 10});
    auto loss = softmax_cross_entropy<double>(nullptr, uniform, {3, 7});
    CHECK(loss.item() == doctest::Approx(std::log(10.0)).epsilon(1e-12));

    Td saturated({1, 4});
    saturated.data()[2] = 30.0;
    auto tiny = softmax_cross_entropy<double>(nullptr, saturated, {2});
    CHECK(tiny.item() < 1e-9);

    CHECK_THROWS_AS(softmax_cross_entropy<double>(nullptr, uniform, {3, 10}), DataError);
    CHECK_THROWS_AS(softmax_cross_entropy<double>(nullptr, uniform, {-1, 0}), DataError);
}

TEST_CASE("softmax cross-entropy equals the direct formula") {
    Rng rng(17);
    auto logits = verify::detail::random_tensor({3, 4}, rng, false, -2.0, 2.0);
    std::vector<int> labels{1, 3, 0};
    auto loss = softmax_cross_entropy<double>(nullptr, logits, labels);
    double expect = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
        double denom = 0.0;
        for (std::size_t j = 0; j < 4; ++j) denom += std::exp(logits.vec()[i * 4 + j]);
        const double p = std::exp(logits.vec()[i * 4 + static_cast<std::size_t>(labels[i])]) / denom;
        expect -= std::log(p);
    }
    expect /= 3.0;
    CHECK(loss.item() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("layer gradients match finite differences across 20 seeds") {
    auto results = verify::gradient_checks(20);
    for (const auto& r : results) {
        INFO(r.name, ": ", r.detail);
        CHECK(r.pass);
    }
}

TEST_CASE("eval-mode forward is deterministic and mask-free") {
    auto cfg = arch::parse_notation("WRN-10-1");
    cfg.block.dropout_p = 0.4;
    net::Network<float> network(arch::build(cfg), 55);
    network.set_mode(net::Mode::eval);
    Tensor<float> x({2, 3, 32, 32});
    Rng rng(8);
    for (auto& v : x.vec()) v = static_cast<float>(rng.next_double());
    auto a = network.forward(nullptr, x);
    auto b = network.forward(nullptr, x);
    CHECK(a.vec() == b.vec());  // bit-identical
}
