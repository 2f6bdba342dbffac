#include "wrn/verify.hpp"

#include <cmath>

namespace wrn::verify {

namespace detail {

using Td = Tensor<double>;

struct OpAccum {
    FdReport report;
    void merge(const FdReport& r) {
        report.max_rel_err = std::max(report.max_rel_err, r.max_rel_err);
        report.checked += r.checked;
        report.skipped += r.skipped;
    }
    CheckResult result(const std::string& name, double tolerance) const {
        std::ostringstream os;
        os << "max rel err " << std::scientific << std::setprecision(2)
           << report.max_rel_err << " over " << report.checked << " elements";
        if (report.skipped) os << ", " << report.skipped << " kink-skipped";
        return {name, report.checked > 0 && report.max_rel_err < tolerance, os.str()};
    }
};

}  // namespace detail

std::vector<CheckResult> gradient_checks(int seeds, double tolerance) {
    using namespace detail;
    const double tensor_tol = 1e-6;
    OpAccum acc_add, acc_mul, acc_scale, acc_sum, acc_mean, acc_matmul, acc_conv,
        acc_bn, acc_relu, acc_drop, acc_avg, acc_max, acc_lin, acc_ce;

    for (int seed = 0; seed < seeds; ++seed) {
        Rng rng(derive_seed(0xFDC0DE, 1, static_cast<std::uint64_t>(seed)));

        {  // add + mul + scale on a shared shape
            const std::vector<std::size_t> shape{2, 3, 4};
            Td a = random_tensor(shape, rng, true);
            Td b = random_tensor(shape, rng, true);
            auto r = probe_weights(shape_product(shape), rng);
            {
                Tape<double> tape;
                Td out = add(&tape, a, b);
                Td rt = Td::from(shape, r);
                Td loss = sum(&tape, mul(&tape, out, rt));
                tape.backward(loss);
                auto fwd = [&] { return probe_loss(add<double>(nullptr, a, b), r); };
                FdReport rep;
                fd_check_tensor(a, fwd, tensor_tol, rep);
                fd_check_tensor(b, fwd, tensor_tol, rep);
                acc_add.merge(rep);
            }
            a.zero_grad();
            b.zero_grad();
            {
                Tape<double> tape;
                Td out = mul(&tape, a, b);
                Td rt = Td::from(shape, r);
                Td loss = sum(&tape, mul(&tape, out, rt));
                tape.backward(loss);
                auto fwd = [&] { return probe_loss(mul<double>(nullptr, a, b), r); };
                FdReport rep;
                fd_check_tensor(a, fwd, tensor_tol, rep);
                fd_check_tensor(b, fwd, tensor_tol, rep);
                acc_mul.merge(rep);
            }
            a.zero_grad();
            {
                const double factor = -0.7 + 2.0 * rng.next_double();
                Tape<double> tape;
                Td out = scale(&tape, a, factor);
                Td rt = Td::from(shape, r);
                Td loss = sum(&tape, mul(&tape, out, rt));
                tape.backward(loss);
                auto fwd = [&] { return probe_loss(scale<double>(nullptr, a, factor), r); };
                FdReport rep;
                fd_check_tensor(a, fwd, tensor_tol, rep);
                acc_scale.merge(rep);
            }
            a.zero_grad();
            {
                Tape<double> tape;
                Td loss = sum(&tape, a);
                tape.backward(loss);
                auto fwd = [&] { return sum<double>(nullptr, a).item(); };
                FdReport rep;
                fd_check_tensor(a, fwd, tensor_tol, rep);
                acc_sum.merge(rep);
            }
            a.zero_grad();
            {
                const std::vector<int> axes = (seed % 2) ? std::vector<int>{0, 2}
                                                         : std::vector<int>{1};
                Tape<double> tape;
                Td out = mean_over(&tape, a, axes);
                auto rw = probe_weights(out.size(), rng);
                Td rt = Td::from(out.shape(), rw);
                Td loss = sum(&tape, mul(&tape, out, rt));
                tape.backward(loss);
                auto fwd = [&] { return probe_loss(mean_over<double>(nullptr, a, axes), rw); };
                FdReport rep;
                fd_check_tensor(a, fwd, tensor_tol, rep);
                acc_mean.merge(rep);
            }
        }

        {  // matmul, rectangular
            const std::size_t m = 2 + rng.next_below(4), k = 2 + rng.next_below(4),
                              n = 2 + rng.next_below(4);
            Td a = random_tensor({m, k}, rng, true);
            Td b = random_tensor({k, n}, rng, true);
            auto r = probe_weights(m * n, rng);
            Tape<double> tape;
            Td out = matmul(&tape, a, b);
            Td rt = Td::from({m, n}, r);
            Td loss = sum(&tape, mul(&tape, out, rt));
            tape.backward(loss);
            auto fwd = [&] { return probe_loss(matmul<double>(nullptr, a, b), r); };
            FdReport rep;
            fd_check_tensor(a, fwd, tensor_tol, rep);
            fd_check_tensor(b, fwd, tensor_tol, rep);
            acc_matmul.merge(rep);
        }

        {  // conv2d over random geometry
            const std::size_t n = 1 + rng.next_below(2), ci = 1 + rng.next_below(3),
                              co = 1 + rng.next_below(4);
            const std::size_t k = (rng.next_bool() ? 3 : 1);
            const std::size_t stride = 1 + rng.next_below(2);
            const std::size_t pad = (k == 3) ? rng.next_below(2) : 0;
            const std::size_t h = k + 2 + rng.next_below(4);
            layers::Conv2dParams<double> p;
            p.weight = random_tensor({co, ci, k, k}, rng, true);
            if (rng.next_bool()) p.bias = random_tensor({co}, rng, true);
            p.stride = stride;
            p.padding = pad;
            Td x = random_tensor({n, ci, h, h}, rng, true);
            Tape<double> tape;
            Td out = layers::conv2d(&tape, x, p);
            auto r = probe_weights(out.size(), rng);
            Td rt = Td::from(out.shape(), r);
            Td loss = sum(&tape, mul(&tape, out, rt));
            tape.backward(loss);
            auto fwd = [&] { return probe_loss(layers::conv2d<double>(nullptr, x, p), r); };
            FdReport rep;
            fd_check_tensor(x, fwd, tolerance, rep);
            fd_check_tensor(p.weight, fwd, tolerance, rep);
            if (p.bias.defined()) fd_check_tensor(p.bias, fwd, tolerance, rep);
            acc_conv.merge(rep);
        }

        {  // batchnorm, train mode
            const std::size_t n = 2 + rng.next_below(3), c = 1 + rng.next_below(3),
                              h = 2 + rng.next_below(4);
            layers::BatchNormParams<double> p;
            p.gamma = random_tensor({c}, rng, true, 0.5, 1.5);
            p.beta = random_tensor({c}, rng, true);
            p.running_mean = Td::zeros({c});
            p.running_var = Td::ones({c});
            p.mode = layers::Mode::train;
            Td x = random_tensor({n, c, h, h}, rng, true);
            Tape<double> tape;
            Td out = layers::batchnorm(&tape, x, p);
            auto r = probe_weights(out.size(), rng);
            Td rt = Td::from(out.shape(), r);
            Td loss = sum(&tape, mul(&tape, out, rt));
            tape.backward(loss);
            auto fwd = [&] { return probe_loss(layers::batchnorm<double>(nullptr, x, p), r); };
            FdReport rep;
            fd_check_tensor(x, fwd, tolerance, rep);
            fd_check_tensor(p.gamma, fwd, tolerance, rep);
            fd_check_tensor(p.beta, fwd, tolerance, rep);
            acc_bn.merge(rep);
        }

        {  // relu; inputs within FD reach of the kink are excluded
            Td x = random_tensor({3, 7}, rng, true);
            Tape<double> tape;
            Td out = layers::relu(&tape, x);
            auto r = probe_weights(out.size(), rng);
            Td rt = Td::from(out.shape(), r);
            Td loss = sum(&tape, mul(&tape, out, rt));
            tape.backward(loss);
            auto fwd = [&] { return probe_loss(layers::relu<double>(nullptr, x), r); };
            auto near_kink = [&](std::size_t i) { return std::abs(x.data()[i]) < 1e-3; };
            FdReport rep;
            fd_check_tensor(x, fwd, tolerance, rep, 0, nullptr, near_kink);
            acc_relu.merge(rep);
        }

        {  // dropout with a pinned mask
            layers::DropoutState s;
            s.p = 0.3;
            s.rng_seed = derive_seed(7, 7, static_cast<std::uint64_t>(seed));
            s.mode = layers::Mode::train;
            Td x = random_tensor({4, 9}, rng, true);
            const std::uint64_t call0 = s.calls;
            Tape<double> tape;
            Td out = layers::dropout(&tape, x, s);
            auto r = probe_weights(out.size(), rng);
            Td rt = Td::from(out.shape(), r);
            Td loss = sum(&tape, mul(&tape, out, rt));
            tape.backward(loss);
            auto fwd = [&] {
                s.calls = call0;  // regenerate the identical mask
                return probe_loss(layers::dropout<double>(nullptr, x, s), r);
            };
            FdReport rep;
            fd_check_tensor(x, fwd, tolerance, rep);
            acc_drop.merge(rep);
        }

        {  // global average pooling
            const std::size_t win = 2 + rng.next_below(4);
            Td x = random_tensor({2, 3, win, win}, rng, true);
            Tape<double> tape;
            Td out = layers::avgpool_global(&tape, x, win);
            auto r = probe_weights(out.size(), rng);
            Td rt = Td::from(out.shape(), r);
            Td loss = sum(&tape, mul(&tape, out, rt));
            tape.backward(loss);
            auto fwd = [&] {
                return probe_loss(layers::avgpool_global<double>(nullptr, x, win), r);
            };
            FdReport rep;
            fd_check_tensor(x, fwd, tolerance, rep);
            acc_avg.merge(rep);
        }

        {  // max pooling; elements contending for a window max are excluded
            const std::size_t side = 6, win = 3, stride = 2, pad = 1;
            Td x = random_tensor({2, 2, side, side}, rng, true);
            Tape<double> tape;
            Td out = layers::maxpool2d(&tape, x, win, stride, pad);
            auto r = probe_weights(out.size(), rng);
            Td rt = Td::from(out.shape(), r);
            Td loss = sum(&tape, mul(&tape, out, rt));
            tape.backward(loss);
            auto fwd = [&] {
                return probe_loss(layers::maxpool2d<double>(nullptr, x, win, stride, pad), r);
            };
            const std::size_t out_side = (side + 2 * pad - win) / stride + 1;
            auto near_kink = [&](std::size_t idx) {
                const std::size_t plane = side * side;
                const std::size_t ic = idx / plane;
                const std::size_t h = (idx % plane) / side, w = idx % side;
                // Any window containing idx whose max is within 1e-3 of it.
                for (std::size_t oh = 0; oh < out_side; ++oh) {
                    for (std::size_t ow = 0; ow < out_side; ++ow) {
                        double best = -1e300;
                        bool contains = false;
                        for (std::size_t kh = 0; kh < win; ++kh) {
                            const std::ptrdiff_t ih =
                                static_cast<std::ptrdiff_t>(oh * stride + kh) -
                                static_cast<std::ptrdiff_t>(pad);
                            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(side)) continue;
                            for (std::size_t kw = 0; kw < win; ++kw) {
                                const std::ptrdiff_t iw =
                                    static_cast<std::ptrdiff_t>(ow * stride + kw) -
                                    static_cast<std::ptrdiff_t>(pad);
                                if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(side))
                                    continue;
                                const double v = x.data()[ic * plane +
                                                          static_cast<std::size_t>(ih) * side +
                                                          static_cast<std::size_t>(iw)];
                                best = std::max(best, v);
                                if (static_cast<std::size_t>(ih) == h &&
                                    static_cast<std::size_t>(iw) == w)
                                    contains = true;
                            }
                        }
                        if (contains && std::abs(best - x.data()[idx]) < 1e-3 &&
                            best != x.data()[idx])
                            return true;
                        if (contains && best == x.data()[idx]) {
                            // The max itself: ambiguous if a runner-up is close.
                            // Re-scan for the gap.
                            double second = -1e300;
                            for (std::size_t kh = 0; kh < win; ++kh) {
                                const std::ptrdiff_t ih =
                                    static_cast<std::ptrdiff_t>(oh * stride + kh) -
                                    static_cast<std::ptrdiff_t>(pad);
                                if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(side))
                                    continue;
                                for (std::size_t kw = 0; kw < win; ++kw) {
                                    const std::ptrdiff_t iw =
                                        static_cast<std::ptrdiff_t>(ow * stride + kw) -
                                        static_cast<std::ptrdiff_t>(pad);
                                    if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(side))
                                        continue;
                                    const std::size_t lin =
                                        ic * plane + static_cast<std::size_t>(ih) * side +
                                        static_cast<std::size_t>(iw);
                                    if (lin != idx)
                                        second = std::max(second, x.data()[lin]);
                                }
                            }
                            if (best - second < 1e-3) return true;
                        }
                    }
                }
                return false;
            };
            FdReport rep;
            fd_check_tensor(x, fwd, tolerance, rep, 0, nullptr, near_kink);
            acc_max.merge(rep);
        }

        {  // linear
            const std::size_t n = 2 + rng.next_below(3), d = 3 + rng.next_below(4),
                              k = 2 + rng.next_below(3);
            Td x = random_tensor({n, d}, rng, true);
            Td w = random_tensor({k, d}, rng, true);
            Td b = random_tensor({k}, rng, true);
            Tape<double> tape;
            Td out = layers::linear(&tape, x, w, b);
            auto r = probe_weights(out.size(), rng);
            Td rt = Td::from(out.shape(), r);
            Td loss = sum(&tape, mul(&tape, out, rt));
            tape.backward(loss);
            auto fwd = [&] { return probe_loss(layers::linear<double>(nullptr, x, w, b), r); };
            FdReport rep;
            fd_check_tensor(x, fwd, tolerance, rep);
            fd_check_tensor(w, fwd, tolerance, rep);
            fd_check_tensor(b, fwd, tolerance, rep);
            acc_lin.merge(rep);
        }

        {  // softmax cross-entropy
            const std::size_t n = 2 + rng.next_below(3), k = 3 + rng.next_below(3);
            Td logits = random_tensor({n, k}, rng, true, -2.0, 2.0);
            std::vector<int> labels(n);
            for (auto& l : labels) l = static_cast<int>(rng.next_below(k));
            Tape<double> tape;
            Td loss = layers::softmax_cross_entropy(&tape, logits, labels);
            tape.backward(loss);
            auto fwd = [&] {
                return layers::softmax_cross_entropy<double>(nullptr, logits, labels).item();
            };
            FdReport rep;
            fd_check_tensor(logits, fwd, tolerance, rep);
            acc_ce.merge(rep);
        }
    }

    return {
        acc_add.result("grad add", 1e-6),
        acc_mul.result("grad mul", 1e-6),
        acc_scale.result("grad scale", 1e-6),
        acc_sum.result("grad sum", 1e-6),
        acc_mean.result("grad mean_over", 1e-6),
        acc_matmul.result("grad matmul", 1e-6),
        acc_conv.result("grad conv2d", tolerance),
        acc_bn.result("grad batchnorm", tolerance),
        acc_relu.result("grad relu", tolerance),
        acc_drop.result("grad dropout", tolerance),
        acc_avg.result("grad avgpool", tolerance),
        acc_max.result("grad maxpool", tolerance),
        acc_lin.result("grad linear", tolerance),
        acc_ce.result("grad softmax_cross_entropy", tolerance),
    };
}

CheckResult end_to_end_gradient_check(int seeds, int probes_per_tensor,
                                      double tolerance) {
    using namespace detail;
    OpAccum acc;
    for (int seed = 0; seed < seeds; ++seed) {
        const std::uint64_t s = derive_seed(0xE2E, 3, static_cast<std::uint64_t>(seed));
        auto cfg = arch::parse_notation("WRN-10-1");
        net::Network<double> network(arch::build(cfg), s);
        network.set_mode(net::Mode::train);
        auto ds = data::synth_dataset<double>(10, 10, s);
        const std::size_t batch = 2;
        Td x = Td::from({batch, 3, 32, 32},
                        std::vector<double>(ds.images.data(),
                                            ds.images.data() + batch * data::kImageDim));
        std::vector<int> labels(ds.labels.begin(), ds.labels.begin() + batch);

        auto fwd = [&] {
            return layers::softmax_cross_entropy<double>(
                       nullptr, network.forward(nullptr, x), labels)
                .item();
        };
        Tape<double> tape;
        Td loss = layers::softmax_cross_entropy(&tape, network.forward(&tape, x), labels);
        network.zero_grad();
        tape.backward(loss);

        Rng picker(derive_seed(s, 0xE1EA, 0));
        for (auto& p : network.params()) {
            for (int probe = 0; probe < probes_per_tensor; ++probe) {
                FdReport rep;
                fd_check_direction(p.tensor, fwd, tolerance, rep, picker);
                acc.merge(rep);
            }
        }
    }
    return acc.result("grad end-to-end WRN-10-1", tolerance);
}

// ---------------------------------------------------------------------------

namespace {

CheckResult count_check(const std::string& name, const arch::Graph& g,
                        double expect_millions, double tolerance_frac, bool round_first) {
    const double raw = static_cast<double>(g.param_count()) / 1e6;
    const double value = round_first ? std::round(raw * 10.0) / 10.0 : raw;
    const double err = std::abs(value - expect_millions) / expect_millions;
    std::ostringstream os;
    os << std::fixed << std::setprecision(4) << raw << "M vs " << expect_millions
       << "M (" << std::setprecision(2) << err * 100.0 << "% off)";
    return {name, err <= tolerance_frac + 1e-12, os.str()};
}

}  // namespace

std::vector<CheckResult> parameter_count_checks() {
    std::vector<CheckResult> out;

    struct Row {
        int depth, widen;
        double millions;
    };
    const Row table4[] = {{40, 1, 0.6},  {40, 2, 2.2},  {40, 4, 8.9},  {40, 8, 35.7},
                          {28, 10, 36.5}, {28, 12, 52.5}, {22, 8, 17.2}, {22, 10, 26.8},
                          {16, 8, 11.0}, {16, 10, 17.1}};
    for (const auto& row : table4) {
        auto cfg = arch::parse_notation("WRN-" + std::to_string(row.depth) + "-" +
                                        std::to_string(row.widen));
        out.push_back(count_check("params " + cfg.notation, arch::build(cfg),
                                  row.millions, 0.01, true));
    }

    // Block-variant table. The paper constructed these fixed-budget variant
    // nets with the two-conv depth formula (N = (n-4)/6) and a nominal depth
    // label, so the configs here pin N explicitly.
    struct VariantRow {
        std::vector<int> kernels;
        int depth;
        double millions;
    };
    const VariantRow table2[] = {{{1, 3, 1}, 40, 1.4}, {{3, 1}, 40, 1.2},
                                 {{1, 3}, 40, 1.3},    {{3, 1, 1}, 40, 1.3},
                                 {{3, 3}, 28, 1.5},    {{3, 1, 3}, 22, 1.1}};
    for (const auto& row : table2) {
        arch::NetConfig cfg;
        cfg.depth = row.depth;
        cfg.widen = 2;
        cfg.block.kernels = row.kernels;
        cfg.blocks_per_group = (row.depth - 4) / 6;
        std::ostringstream name;
        name << "params B(";
        for (std::size_t i = 0; i < row.kernels.size(); ++i)
            name << (i ? "," : "") << row.kernels[i];
        name << ") depth " << row.depth;
        cfg.notation = cfg.render_notation();
        out.push_back(count_check(name.str(), arch::build(cfg), row.millions, 0.05, false));
    }

    arch::NetConfig b50;
    b50.depth = 50;
    b50.num_classes = 1000;
    b50.input_size = 224;
    b50.block.family = arch::BlockFamily::bottleneck;
    b50.inner_widen = 2.0;
    out.push_back(count_check("params WRN-50-2-bottleneck", arch::build_bottleneck(b50),
                              68.9, 0.02, false));
    b50.inner_widen = 1.0;
    out.push_back(count_check("params ResNet-50", arch::build_bottleneck(b50), 25.6,
                              0.02, false));
    return out;
}

std::vector<CheckResult> depth_grammar_checks() {
    std::vector<CheckResult> out;
    for (int l = 1; l <= 4; ++l) {
        bool ok = true;
        std::string detail;
        for (int n_blocks = 1; n_blocks <= 6 && ok; ++n_blocks) {
            const int depth = 3 * l * n_blocks + 4;
            arch::NetConfig ref;
            ref.depth = depth;
            ref.widen = 2;
            ref.block.kernels.assign(static_cast<std::size_t>(l), 3);
            ref.notation = ref.render_notation();
            try {
                auto parsed = arch::parse_notation(ref.notation);
                if (parsed.blocks_per_group != n_blocks) {
                    ok = false;
                    detail = ref.notation + " parsed N=" +
                             std::to_string(parsed.blocks_per_group) + ", expected " +
                             std::to_string(n_blocks);
                    break;
                }
                arch::Graph g = arch::build(parsed);  // shape-checks every join
                if (g.cfg.blocks_per_group != n_blocks) {
                    ok = false;
                    detail = ref.notation + " built wrong group size";
                }
            } catch (const Error& e) {
                ok = false;
                detail = ref.notation + ": " + e.what();
            }
        }
        out.push_back({"depth grammar l=" + std::to_string(l), ok,
                       ok ? "N=1..6 round-trip and shape-check" : detail});
    }
    return out;
}

std::vector<CheckResult> schedule_checks() {
    std::vector<CheckResult> out;
    const auto cifar = train::cifar_preset();
    const double cifar_expect[][2] = {{0, 0.1}, {60, 0.02}, {120, 0.004}, {160, 0.0008}};
    bool ok = true;
    std::ostringstream detail;
    for (const auto& [epoch, lr] : cifar_expect) {
        const double got = train::lr_at(cifar, static_cast<int>(epoch));
        if (std::abs(got - lr) > 1e-12) {
            ok = false;
            detail << "epoch " << epoch << " got " << got << " expected " << lr << "; ";
        }
    }
    out.push_back({"schedule cifar 0.1/0.02/0.004/0.0008", ok, detail.str()});

    const auto svhn = train::svhn_preset();
    const double svhn_expect[][2] = {{0, 0.01}, {80, 0.001}, {120, 0.0001}};
    ok = true;
    std::ostringstream d2;
    for (const auto& [epoch, lr] : svhn_expect) {
        const double got = train::lr_at(svhn, static_cast<int>(epoch));
        if (std::abs(got - lr) > 1e-12) {
            ok = false;
            d2 << "epoch " << epoch << " got " << got << " expected " << lr << "; ";
        }
    }
    out.push_back({"schedule svhn 0.01/0.001/0.0001", ok, d2.str()});
    return out;
}

}  // namespace wrn::verify
