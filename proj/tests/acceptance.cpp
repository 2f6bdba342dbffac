// Acceptance suite: one line per criterion, nonzero exit on any failure.
// Criteria are pinned to the quantities and tolerances the library is
// specified against; each prints PASS/FAIL with the measured values.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "wrn/arch.hpp"
#include "wrn/bench.hpp"
#include "wrn/checkpoint.hpp"
#include "wrn/data.hpp"
#include "wrn/layers.hpp"
#include "wrn/net.hpp"
#include "wrn/train.hpp"
#include "wrn/verify.hpp"

using namespace wrn;

namespace {

int failures = 0;

double now_s() {
    return std::chrono::duration<double>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

void report(int criterion, bool pass, const std::string& what, double seconds) {
    std::printf("%s  criterion %d  %s  [%.1fs]\n", pass ? "PASS" : "FAIL", criterion,
                what.c_str(), seconds);
    std::fflush(stdout);
    if (!pass) ++failures;
}

bool all_pass(const std::vector<verify::CheckResult>& rs, std::string& detail) {
    bool ok = true;
    for (const auto& r : rs) {
        if (!r.pass) {
            ok = false;
            detail += " [" + r.name + ": " + r.detail + "]";
        }
    }
    return ok;
}

// --------------------------------------------------------------------------

void criterion_1_parameter_counts() {
    const double t0 = now_s();
    std::string detail;
    const bool ok = all_pass(verify::parameter_count_checks(), detail);
    report(1, ok,
           "parameter counts: ten depth/width rows within 1%, six block variants "
           "within 5%, bottleneck pair within 2%" + detail,
           now_s() - t0);
}

void criterion_2_depth_grammar() {
    const double t0 = now_s();
    std::string detail;
    const bool ok = all_pass(verify::depth_grammar_checks(), detail);
    report(2, ok, "depth grammar: n=3lN+4 round-trips and all residual joins shape-check" +
                      detail,
           now_s() - t0);
}

void criterion_3_gradients() {
    const double t0 = now_s();
    std::string detail;
    auto results = verify::gradient_checks(20, 1e-5);
    results.push_back(verify::end_to_end_gradient_check(20, 2, 1e-4));
    const bool ok = all_pass(results, detail);
    report(3, ok,
           "gradient verification: every layer op at 1e-5 and WRN-10-1 end-to-end at "
           "1e-4 over 20 seeds" + detail,
           now_s() - t0);
}

void criterion_4_quadratic_width() {
    const double t0 = now_s();
    std::ostringstream detail;
    bool ok = true;
    auto graph_at = [](int widen) {
        return arch::build(arch::parse_notation("WRN-16-" + std::to_string(widen)));
    };
    for (int k : {1, 2, 4}) {
        const auto lo = graph_at(k), hi = graph_at(2 * k);
        const double mac_ratio =
            static_cast<double>(hi.mac_count()) / static_cast<double>(lo.mac_count());
        ok = ok && mac_ratio >= 3.5 && mac_ratio <= 4.0;
        // Per-group trainable parameters (conv2..conv4 prefixes).
        for (int group = 2; group <= 4; ++group) {
            const std::string prefix = "conv" + std::to_string(group) + ".";
            auto group_params = [&](const arch::Graph& g) {
                std::int64_t total = 0;
                for (const auto& n : g.nodes)
                    if (n.name.rfind(prefix, 0) == 0) total += n.params;
                return total;
            };
            const double ratio = static_cast<double>(group_params(hi)) /
                                 static_cast<double>(group_params(lo));
            ok = ok && ratio >= 3.5 && ratio <= 4.0;
        }
        detail << " k=" << k << "->" << 2 * k << " macs x" << std::fixed
               << std::setprecision(3) << mac_ratio;
    }
    report(4, ok, "quadratic width scaling at depth 16:" + detail.str(), now_s() - t0);
}

template <typename T>
train::EpochRecord run_desk_scale(const std::string& notation, double dropout,
                                  int epochs, std::uint64_t seed) {
    auto net_cfg = arch::parse_notation(notation);
    net_cfg.block.dropout_p = dropout;
    net::Network<T> network(arch::build(net_cfg), seed);

    auto train_ds = data::synth_dataset<T>(2000, 10, derive_seed(seed, seed_tag::synth, 1));
    auto test_ds = data::synth_dataset<T>(400, 10, derive_seed(seed, seed_tag::synth, 2));
    test_ds.split = data::Split::test;
    auto preproc = data::fit_meanstd(train_ds);
    train_ds = data::apply(preproc, train_ds);
    test_ds = data::apply(preproc, test_ds);

    train::TrainConfig cfg = train::cifar_preset();  // lr 0.1, m 0.9, wd 5e-4, batch 128
    cfg.schedule.clear();                            // constant lr
    cfg.epochs = epochs;
    cfg.seed = seed;
    cfg.dropout_p = dropout;
    train::Trainer<T> trainer(network, cfg);
    data::AugmentPolicy policy;
    policy.enabled = false;
    trainer.run(train_ds, test_ds, policy);
    return trainer.records().back();
}

void criterion_5_desk_scale_learning() {
    {
        const double t0 = now_s();
        const auto rec = run_desk_scale<float>("WRN-10-1", 0.0, 30, 414);
        std::ostringstream detail;
        detail << "WRN-10-1 on synth(2000,10), 30 epochs, batch 128, lr 0.1: train err "
               << rec.train_err << "% (< 5%)";
        report(5, rec.train_err < 5.0, detail.str(), now_s() - t0);
    }
    {
        const double t0 = now_s();
        const auto rec = run_desk_scale<float>("WRN-16-2", 0.3, 10, 515);
        std::ostringstream detail;
        detail << "WRN-16-2 dropout 0.3 on synth(2000,10): eval-mode train err "
               << rec.train_err << "% (< 10%), mask keep " << std::setprecision(3)
               << rec.dropout_keep;
        report(5, rec.train_err < 10.0 && std::abs(rec.dropout_keep - 0.7) < 0.02,
               detail.str(), now_s() - t0);
    }
}

void criterion_6_full_scale_note() {
    const double t0 = now_s();
    // Full-scale accuracy reproduction is out of scope for the automated
    // suite; the long-run recipe must nevertheless be wired: the cifar10
    // preset must carry the published schedule.
    const auto cfg = train::cifar_preset();
    const bool ok = cfg.lr0 == 0.1 && cfg.epochs == 200 && cfg.batch_size == 128 &&
                    cfg.weight_decay == 0.0005 && cfg.momentum == 0.9 &&
                    cfg.schedule.size() == 3 && cfg.schedule[0].epoch == 60 &&
                    cfg.schedule[1].epoch == 120 && cfg.schedule[2].epoch == 160 &&
                    cfg.schedule[0].multiplier == 0.2;
    report(6, ok,
           "paper accuracy columns not reproduced at desk scale (out of scope); "
           "long-run preset (train --preset cifar10) carries the published recipe",
           now_s() - t0);
}

void criterion_7_statistical_invariants() {
    const double t0 = now_s();
    bool ok = true;
    std::ostringstream detail;

    {  // dropout zero fraction over 1e6 elements
        layers::DropoutState s;
        s.p = 0.3;
        s.rng_seed = 2024;
        auto x = Tensor<double>::ones({1000000});
        auto y = layers::dropout<double>(nullptr, x, s);
        std::size_t zeros = 0;
        double mean = 0.0;
        for (double v : y.vec()) {
            if (v == 0.0) ++zeros;
            mean += v;
        }
        mean /= 1e6;
        const double frac = static_cast<double>(zeros) / 1e6;
        ok = ok && std::abs(frac - 0.3) < 0.005 && std::abs(mean - 1.0) < 0.01;
        detail << " dropout zero-frac " << std::setprecision(4) << frac << " mean "
               << mean << ";";
    }

    {  // batch-norm train-mode statistics
        Rng rng(31337);
        layers::BatchNormParams<double> p;
        p.gamma = Tensor<double>::ones({4});
        p.beta = Tensor<double>::zeros({4});
        p.running_mean = Tensor<double>::zeros({4});
        p.running_var = Tensor<double>::ones({4});
        Tensor<double> x({8, 4, 8, 8});
        for (auto& v : x.vec()) v = 2.0 * rng.next_double() + 0.5;
        auto y = layers::batchnorm<double>(nullptr, x, p);
        double worst_mean = 0.0, worst_var = 0.0;
        for (std::size_t ch = 0; ch < 4; ++ch) {
            double mean = 0.0, var = 0.0;
            const std::size_t m = 8 * 64;
            for (std::size_t n = 0; n < 8; ++n)
                for (std::size_t j = 0; j < 64; ++j)
                    mean += y.vec()[(n * 4 + ch) * 64 + j];
            mean /= static_cast<double>(m);
            for (std::size_t n = 0; n < 8; ++n)
                for (std::size_t j = 0; j < 64; ++j) {
                    const double d = y.vec()[(n * 4 + ch) * 64 + j] - mean;
                    var += d * d;
                }
            var /= static_cast<double>(m);
            worst_mean = std::max(worst_mean, std::abs(mean));
            worst_var = std::max(worst_var, std::abs(var - 1.0));
        }
        ok = ok && worst_mean < 1e-6 && worst_var < 1e-4;
        detail << " bn |mean| " << std::scientific << std::setprecision(1) << worst_mean
               << " |var-1| " << worst_var << ";" << std::defaultfloat;
    }

    {  // ZCA: whitened covariance of the fitting sample is near identity.
        // The fit needs more images than pixel dimensions for a full-rank
        // covariance; 3600 > 3072 with a small epsilon gives off-diagonals
        // bounded by the eigensolver's residual.
        auto ds = data::synth_dataset<float>(3600, 10, 9090);
        auto st = data::fit_zca(ds, 1e-4, 3600);
        auto white = data::apply(st, ds);
        const std::size_t n = 3600, d = data::kImageDim;
        // Covariance of 512 dimensions sampled across the full matrix keeps
        // the recomputation inside the time budget.
        std::vector<std::size_t> dims;
        for (std::size_t j = 0; j < 512; ++j) dims.push_back((j * 6007) % d);
        std::vector<double> mean(dims.size(), 0.0);
        const float* px = white.images.data();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < dims.size(); ++j) mean[j] += px[i * d + dims[j]];
        for (auto& m : mean) m /= static_cast<double>(n);
        double max_off = 0.0, max_diag_err = 0.0;
        std::vector<double> centered(n);
        std::vector<std::vector<double>> cols(dims.size(), std::vector<double>(n));
        for (std::size_t j = 0; j < dims.size(); ++j)
            for (std::size_t i = 0; i < n; ++i)
                cols[j][i] = px[i * d + dims[j]] - mean[j];
        for (std::size_t a = 0; a < dims.size(); ++a) {
            for (std::size_t b = a; b < dims.size(); ++b) {
                double cov = 0.0;
                for (std::size_t i = 0; i < n; ++i) cov += cols[a][i] * cols[b][i];
                cov /= static_cast<double>(n);
                if (a == b)
                    max_diag_err = std::max(max_diag_err, std::abs(cov - 1.0));
                else
                    max_off = std::max(max_off, std::abs(cov));
            }
        }
        ok = ok && max_off < 1e-3;
        detail << " zca off-diag " << std::scientific << std::setprecision(1) << max_off
               << " diag err " << max_diag_err << ";" << std::defaultfloat;
    }

    {  // augmentation flip rate over 1e4 draws
        Rng rng(515151);
        std::size_t flips = 0;
        for (int i = 0; i < 10000; ++i) {
            rng.next_below(9);
            rng.next_below(9);
            if (rng.next_double() < 0.5) ++flips;
        }
        const double rate = flips / 1e4;
        ok = ok && std::abs(rate - 0.5) < 0.02;
        detail << " flip rate " << std::setprecision(4) << rate;
    }

    report(7, ok, "statistical invariants:" + detail.str(), now_s() - t0);
}

void criterion_8_determinism() {
    const double t0 = now_s();
    bool ok = true;
    std::string detail;

    auto make = [](std::uint64_t seed) {
        auto cfg = arch::parse_notation("WRN-10-1");
        return net::Network<float>(arch::build(cfg), seed);
    };
    auto train_ds = data::synth_dataset<float>(256, 10, 881);
    auto test_ds = data::synth_dataset<float>(64, 10, 882);
    test_ds.split = data::Split::test;
    data::AugmentPolicy policy;
    policy.enabled = true;
    train::TrainConfig cfg = train::cifar_preset();
    cfg.schedule.clear();
    cfg.epochs = 4;
    cfg.batch_size = 64;
    cfg.seed = 31;

    auto run_log = [&](int until) {
        auto network = make(31);
        train::Trainer<float> trainer(network, cfg);
        trainer.run(train_ds, test_ds, policy, until);
        return trainer;
    };
    auto a = run_log(4);
    auto b = run_log(4);
    train::RunLog la, lb;
    la.records = a.records();
    lb.records = b.records();
    if (la.csv() != lb.csv()) {
        ok = false;
        detail += " [repeat runs differ]";
    }

    // Checkpoint resume: 2 epochs, save, reload, 2 more; logs must equal the
    // straight run bit-exactly.
    const auto ckpt = std::filesystem::temp_directory_path() / "wrn_acceptance.wrnc";
    {
        auto network = make(31);
        train::Trainer<float> half(network, cfg);
        half.run(train_ds, test_ds, policy, 2);
        checkpoint::DatasetInfo info;
        info.synth_n = 256;
        checkpoint::save(ckpt, half, arch::parse_notation("WRN-10-1"), info);
        auto restored = checkpoint::load<float>(ckpt);
        train::Trainer<float> resumed(restored.network, restored.train_cfg);
        resumed.set_epochs_done(restored.epoch);
        resumed.optimizer_state().velocity = restored.velocity;
        auto tail = resumed.run(train_ds, test_ds, policy);
        if (tail.size() != 2) {
            ok = false;
            detail += " [resume epoch count]";
        } else {
            for (std::size_t i = 0; i < tail.size(); ++i) {
                const auto& x = a.records()[2 + i];
                const auto& y = tail[i];
                if (x.train_loss != y.train_loss || x.train_err != y.train_err ||
                    x.test_err != y.test_err) {
                    ok = false;
                    detail += " [resume diverges at epoch " + std::to_string(y.epoch) + "]";
                }
            }
        }
        std::filesystem::remove(ckpt);
    }
    report(8, ok, "determinism: bit-identical run logs and checkpoint-resume equality" +
                      detail,
           now_s() - t0);
}

void criterion_9_schedule_oracle() {
    const double t0 = now_s();
    std::string detail;
    const bool ok = all_pass(verify::schedule_checks(), detail);
    report(9, ok, "schedule oracle: cifar 0.1/0.02/0.004/0.0008, svhn 0.01/0.001/0.0001" +
                      detail,
           now_s() - t0);
}

}  // namespace

int main() {
    if (const char* threads = std::getenv("WRN_THREADS"))
        kernels::set_threads(std::atoi(threads));
    const double t0 = now_s();
    criterion_1_parameter_counts();
    criterion_2_depth_grammar();
    criterion_3_gradients();
    criterion_4_quadratic_width();
    criterion_5_desk_scale_learning();
    criterion_6_full_scale_note();
    criterion_7_statistical_invariants();
    criterion_8_determinism();
    criterion_9_schedule_oracle();
    std::printf("%s: %d failure(s) in %.1fs\n", failures ? "FAIL" : "OK", failures,
                now_s() - t0);
    return failures ? 1 : 0;
}
