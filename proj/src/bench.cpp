#include "wrn/bench.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

#include "wrn/kernels.hpp"
#include "wrn/layers.hpp"
#include "wrn/net.hpp"
#include "wrn/tensor.hpp"

namespace wrn::bench {

namespace {

double now_ms() {
    return std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

}  // namespace

double median(std::vector<double> samples) {
    if (samples.empty()) throw ConfigError("median of an empty sample set");
    std::sort(samples.begin(), samples.end());
    const std::size_t n = samples.size();
    return n % 2 ? samples[n / 2] : 0.5 * (samples[n / 2 - 1] + samples[n / 2]);
}

double timed_median_ms(const std::function<void()>& fn, int warmup, int timed) {
    if (timed < 1) throw ConfigError("timed iteration count must be >= 1");
    for (int i = 0; i < warmup; ++i) fn();
    std::vector<double> samples;
    samples.reserve(static_cast<std::size_t>(timed));
    for (int i = 0; i < timed; ++i) {
        const double t0 = now_ms();
        fn();
        samples.push_back(now_ms() - t0);
    }
    return median(samples);
}

std::string host_fingerprint() {
    const int threads = kernels::max_threads();
    // Fixed-size matmul probe: 256^3 single-precision multiply-accumulate.
    constexpr std::size_t n = 256;
    std::vector<float> a(n * n), b(n * n), c(n * n);
    Rng rng(12345);
    for (auto& v : a) v = static_cast<float>(rng.next_double());
    for (auto& v : b) v = static_cast<float>(rng.next_double());
    kernels::gemm_nn(n, n, n, a.data(), b.data(), c.data(), false);  // warm
    const double t0 = now_ms();
    kernels::gemm_nn(n, n, n, a.data(), b.data(), c.data(), false);
    const double ms = std::max(now_ms() - t0, 1e-3);
    const double gflops = 2.0 * static_cast<double>(n) * n * n / (ms * 1e6);
    std::ostringstream os;
    os << threads << "t" << std::fixed << std::setprecision(1) << gflops << "gf";
    return os.str();
}

std::vector<BenchRow> run_bench(const BenchSpec& spec) {
    if (spec.timed_iters < 3) throw ConfigError("timed_iters must be >= 3");
    const std::string host = host_fingerprint();
    std::vector<BenchRow> rows;
    for (std::size_t ci = 0; ci < spec.configs.size(); ++ci) {
        const auto& cfg = spec.configs[ci];
        BenchRow row;
        row.notation = cfg.notation.empty() ? cfg.render_notation() : cfg.notation;
        row.host = host;
        try {
            arch::Graph g = cfg.block.family == arch::BlockFamily::bottleneck
                                ? arch::build_bottleneck(cfg)
                                : arch::build(cfg);
            row.params = g.param_count();
            row.macs = g.mac_count();
            net::Network<float> network(std::move(g), spec.seed);
            network.set_mode(net::Mode::train);

            const auto bsz = static_cast<std::size_t>(spec.batch_size);
            Tensor<float> x({bsz, static_cast<std::size_t>(spec.input_channels),
                             static_cast<std::size_t>(spec.input_side),
                             static_cast<std::size_t>(spec.input_side)});
            Rng rng(derive_seed(spec.seed, seed_tag::bench, ci));
            for (auto& v : x.vec()) v = static_cast<float>(rng.next_double());
            std::vector<int> labels(bsz);
            for (std::size_t i = 0; i < bsz; ++i)
                labels[i] = static_cast<int>(rng.next_below(
                    static_cast<std::uint64_t>(cfg.num_classes)));

            // Forward and backward phases measured inside one iteration so
            // fwd_bwd dominates fwd sample-by-sample.
            std::vector<double> fwd_samples, total_samples;
            auto iteration = [&](bool record) {
                Tape<float> tape;
                const double t0 = now_ms();
                Tensor<float> logits = network.forward(&tape, x);
                Tensor<float> loss = layers::softmax_cross_entropy(&tape, logits, labels);
                const double t1 = now_ms();
                network.zero_grad();
                tape.backward(loss);
                const double t2 = now_ms();
                if (record) {
                    fwd_samples.push_back(t1 - t0);
                    total_samples.push_back(t2 - t0);
                }
            };
            for (int i = 0; i < spec.warmup_iters; ++i) iteration(false);
            for (int i = 0; i < spec.timed_iters; ++i) iteration(true);
            row.fwd_ms = median(fwd_samples);
            row.fwd_bwd_ms = median(total_samples);
        } catch (const Error& e) {
            row.error = e.what();
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

void emit_csv(const std::vector<BenchRow>& rows, const std::string& path) {
    if (rows.empty()) throw ConfigError("emit_csv: no rows");
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << "notation,params,macs,fwd_ms,fwd_bwd_ms,host,error\n";
    for (const auto& r : rows) {
        out << r.notation << ',';
        if (r.error.empty()) {
            out << r.params << ',' << r.macs << ',' << std::fixed << std::setprecision(3)
                << r.fwd_ms << ',' << r.fwd_bwd_ms << ',' << r.host << ",\n";
            out.unsetf(std::ios::fixed);
        } else {
            std::string msg = r.error;
            for (auto& ch : msg)
                if (ch == ',' || ch == '\n') ch = ';';
            out << ",,,," << r.host << ',' << msg << '\n';
        }
    }
    if (!out) throw IoError("write failed for " + path);
}

std::vector<std::vector<std::string>> read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path);
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::vector<std::string> fields;
        std::string field;
        std::istringstream ls(line);
        while (std::getline(ls, field, ',')) fields.push_back(field);
        if (!line.empty() && line.back() == ',') fields.push_back("");
        rows.push_back(std::move(fields));
    }
    return rows;
}

std::vector<BenchRow> rows_from_csv(const std::string& path) {
    auto table = read_csv(path);
    if (table.empty() || table.front().empty() || table.front()[0] != "notation")
        throw DataError(path + ": not a bench CSV");
    std::vector<BenchRow> rows;
    for (std::size_t i = 1; i < table.size(); ++i) {
        const auto& f = table[i];
        if (f.size() < 7) throw DataError(path + ": short row " + std::to_string(i));
        BenchRow r;
        r.notation = f[0];
        r.error = f[6];
        r.host = f[5];
        if (r.error.empty()) {
            r.params = std::stoll(f[1]);
            r.macs = std::stoll(f[2]);
            r.fwd_ms = std::stod(f[3]);
            r.fwd_bwd_ms = std::stod(f[4]);
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

}  // namespace wrn::bench
