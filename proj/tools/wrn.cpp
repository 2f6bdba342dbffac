#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "wrn/arch.hpp"
#include "wrn/bench.hpp"
#include "wrn/checkpoint.hpp"
#include "wrn/common.hpp"
#include "wrn/data.hpp"
#include "wrn/kernels.hpp"
#include "wrn/net.hpp"
#include "wrn/train.hpp"
#include "wrn/verify.hpp"

namespace {

using wrn::checkpoint::DatasetInfo;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitDivergence = 3;
constexpr int kExitData = 4;
constexpr int kExitCheckpoint = 5;

struct TrainArgs {
    std::string notation = "WRN-16-2";
    std::string preset = "synth";
    std::string data_dir;
    std::string out_log;
    std::string checkpoint_path;
    std::string resume_path;
    std::string precision = "single";
    std::string preproc;  // empty = preset default
    int epochs = -1;
    int batch_size = -1;
    int limit_train = 0;
    int eval_batch = 256;
    int classes = -1;
    double lr = -1.0;
    double momentum = -1.0;
    double weight_decay = -1.0;
    double dropout = 0.0;
    double zca_eps = 0.1;
    std::size_t zca_subsample = 10000;
    std::uint64_t seed = 1;
    std::size_t synth_n = 2000;
    std::size_t synth_test_n = 400;
    bool no_decay_bn = false;
    bool no_augment = false;
    bool deterministic = true;
};

struct HeaderEntry {
    std::string key;
    std::string value;
    bool overridden = false;
};

std::string schedule_string(const wrn::train::TrainConfig& cfg) {
    std::ostringstream os;
    for (std::size_t i = 0; i < cfg.schedule.size(); ++i) {
        if (i) os << '+';
        os << cfg.schedule[i].epoch << 'x' << cfg.schedule[i].multiplier;
    }
    return os.str().empty() ? "none" : os.str();
}

// Loaded datasets plus the preprocessing fit on the train split.
template <typename T>
struct Prepared {
    wrn::data::Dataset<T> train;
    wrn::data::Dataset<T> test;
    wrn::data::PreprocState<T> preproc;
    wrn::data::AugmentPolicy policy;
};

template <typename T>
Prepared<T> prepare_data(const DatasetInfo& info, std::uint64_t seed) {
    Prepared<T> out;
    if (info.preset == "synth") {
        out.train = wrn::data::synth_dataset<T>(info.synth_n, info.synth_classes,
                                                wrn::derive_seed(seed, wrn::seed_tag::synth, 1));
        out.test = wrn::data::synth_dataset<T>(info.synth_test_n, info.synth_classes,
                                               wrn::derive_seed(seed, wrn::seed_tag::synth, 2));
        out.test.split = wrn::data::Split::test;
    } else if (info.preset == "cifar10" || info.preset == "cifar100") {
        auto pair = wrn::data::load_cifar<T>(info.data_dir,
                                             info.preset == "cifar10"
                                                 ? wrn::data::CifarVariant::c10
                                                 : wrn::data::CifarVariant::c100);
        out.train = std::move(pair.first);
        out.test = std::move(pair.second);
    } else if (info.preset == "svhn") {
        out.train = wrn::data::read_raw_tensor<T>(
            std::filesystem::path(info.data_dir) / "train.wrnt", wrn::data::Split::train);
        out.test = wrn::data::read_raw_tensor<T>(
            std::filesystem::path(info.data_dir) / "test.wrnt", wrn::data::Split::test);
    } else {
        throw wrn::ConfigError("unknown preset '" + info.preset + "'");
    }
    if (info.preproc == "meanstd") {
        out.preproc = wrn::data::fit_meanstd(out.train);
    } else if (info.preproc == "zca") {
        out.preproc = wrn::data::fit_zca(out.train, info.zca_epsilon, info.zca_subsample);
    }
    if (out.preproc.kind != wrn::data::PreprocKind::none) {
        out.train = wrn::data::apply(out.preproc, out.train);
        out.test = wrn::data::apply(out.preproc, out.test);
    }
    out.policy.enabled = info.augment;
    return out;
}

template <typename T>
int run_training(const wrn::arch::NetConfig& net_cfg, const wrn::train::TrainConfig& cfg,
                 const DatasetInfo& info, const std::vector<HeaderEntry>& header,
                 const TrainArgs& args) {
    auto prepared = prepare_data<T>(info, cfg.seed);
    wrn::net::Network<T> network(wrn::arch::build(net_cfg), cfg.seed);
    wrn::train::Trainer<T> trainer(network, cfg);

    for (const auto& h : header)
        std::cout << "# " << h.key << '=' << h.value << (h.overridden ? " (overridden)" : "")
                  << '\n';
    auto appended = trainer.run(prepared.train, prepared.test, prepared.policy, -1,
                                &std::cout);

    wrn::train::RunLog log;
    log.deterministic = cfg.deterministic;
    for (const auto& h : header)
        log.header.push_back({h.key, h.value + (h.overridden ? " (overridden)" : "")});
    log.records = trainer.records();
    if (!args.out_log.empty()) {
        std::ofstream out(args.out_log);
        if (!out) throw wrn::IoError("cannot write run log " + args.out_log);
        out << log.csv();
    }
    if (!args.checkpoint_path.empty())
        wrn::checkpoint::save(args.checkpoint_path, trainer, net_cfg, info,
                              &prepared.preproc);
    const auto& last = appended.empty() ? trainer.records().back() : appended.back();
    std::cout << "final train_err " << last.train_err << "%  test_err " << last.test_err
              << "%\n";
    return kExitOk;
}

template <typename T>
int resume_training(const std::string& path, const TrainArgs& args) {
    auto restored = wrn::checkpoint::load<T>(path);
    wrn::train::TrainConfig cfg = restored.train_cfg;
    if (args.epochs > 0) cfg.epochs = args.epochs;
    wrn::train::Trainer<T> trainer(restored.network, cfg);
    trainer.set_epochs_done(restored.epoch);
    trainer.optimizer_state().velocity = restored.velocity;

    auto prepared = prepare_data<T>(restored.dataset, cfg.seed);
    std::cout << "# resumed from " << path << " at epoch " << restored.epoch << '\n';
    trainer.run(prepared.train, prepared.test, prepared.policy, -1, &std::cout);

    wrn::train::RunLog log;
    log.deterministic = cfg.deterministic;
    log.header.push_back({"resumed_from", path});
    log.records = trainer.records();
    if (!args.out_log.empty()) {
        std::ofstream out(args.out_log);
        if (!out) throw wrn::IoError("cannot write run log " + args.out_log);
        out << log.csv();
    }
    if (!args.checkpoint_path.empty())
        wrn::checkpoint::save(args.checkpoint_path, trainer, restored.net_cfg,
                              restored.dataset, &restored.preproc);
    return kExitOk;
}

int cmd_train(const TrainArgs& args) {
    if (!args.resume_path.empty()) {
        auto head = wrn::checkpoint::open(args.resume_path);
        const auto precision = head.manifest.value("precision", "single");
        return precision == "double" ? resume_training<double>(args.resume_path, args)
                                     : resume_training<float>(args.resume_path, args);
    }

    wrn::train::TrainConfig cfg;
    DatasetInfo info;
    if (args.preset == "cifar10" || args.preset == "cifar100") {
        cfg = wrn::train::cifar_preset();
        info.preset = args.preset;
        info.preproc = "meanstd";
        info.augment = true;
    } else if (args.preset == "svhn") {
        cfg = wrn::train::svhn_preset();
        info.preset = "svhn";
        info.preproc = "none";
        info.augment = false;
    } else if (args.preset == "synth") {
        cfg = wrn::train::cifar_preset();
        cfg.schedule.clear();  // constant lr at desk scale
        cfg.epochs = 30;
        info.preset = "synth";
        info.preproc = "meanstd";
        info.augment = false;
    } else {
        throw wrn::ConfigError("unknown preset '" + args.preset + "' (expected cifar10, "
                               "cifar100, svhn or synth)");
    }

    const wrn::train::TrainConfig preset_cfg = cfg;
    const DatasetInfo preset_info = info;
    if (args.epochs > 0) cfg.epochs = args.epochs;
    if (args.batch_size > 0) cfg.batch_size = args.batch_size;
    if (args.lr >= 0) cfg.lr0 = args.lr;
    if (args.momentum >= 0) cfg.momentum = args.momentum;
    if (args.weight_decay >= 0) cfg.weight_decay = args.weight_decay;
    cfg.dropout_p = args.dropout;
    cfg.seed = args.seed;
    cfg.decay_bn = !args.no_decay_bn;
    cfg.limit_train = args.limit_train;
    cfg.deterministic = args.deterministic;
    cfg.eval_batch = args.eval_batch;
    // Drops past a shortened run are unreachable; prune instead of rejecting.
    std::erase_if(cfg.schedule, [&](const wrn::train::LrDrop& d) {
        return d.epoch >= cfg.epochs;
    });

    info.data_dir = args.data_dir;
    info.synth_n = args.synth_n;
    info.synth_test_n = args.synth_test_n;
    if (args.classes > 0) info.synth_classes = args.classes;
    if (!args.preproc.empty()) info.preproc = args.preproc;
    info.zca_epsilon = args.zca_eps;
    info.zca_subsample = args.zca_subsample;
    if (args.no_augment) info.augment = false;

    auto net_cfg = wrn::arch::parse_notation(args.notation);
    net_cfg.block.dropout_p = args.dropout;
    net_cfg.num_classes = args.preset == "cifar100" ? 100
                          : args.classes > 0        ? args.classes
                                                    : info.synth_classes;

    std::vector<HeaderEntry> header;
    auto put = [&](const std::string& key, const std::string& value, bool overridden) {
        header.push_back({key, value, overridden});
    };
    auto fmt = [](double v) {
        std::ostringstream os;
        os << v;
        return os.str();
    };
    put("command", "train", false);
    put("notation", args.notation, false);
    put("preset", args.preset, false);
    put("classes", std::to_string(net_cfg.num_classes), false);
    put("dropout", fmt(cfg.dropout_p), cfg.dropout_p != 0.0);
    put("lr0", fmt(cfg.lr0), cfg.lr0 != preset_cfg.lr0);
    put("schedule", schedule_string(cfg),
        schedule_string(cfg) != schedule_string(preset_cfg));
    put("momentum", fmt(cfg.momentum), cfg.momentum != preset_cfg.momentum);
    put("weight_decay", fmt(cfg.weight_decay),
        cfg.weight_decay != preset_cfg.weight_decay);
    put("batch_size", std::to_string(cfg.batch_size),
        cfg.batch_size != preset_cfg.batch_size);
    put("epochs", std::to_string(cfg.epochs), cfg.epochs != preset_cfg.epochs);
    put("seed", std::to_string(cfg.seed), false);
    put("decay_bn", cfg.decay_bn ? "true" : "false", !cfg.decay_bn);
    put("limit_train", std::to_string(cfg.limit_train), cfg.limit_train != 0);
    put("deterministic", cfg.deterministic ? "true" : "false", !cfg.deterministic);
    put("precision", args.precision, args.precision != "single");
    put("preproc", info.preproc, info.preproc != preset_info.preproc);
    if (info.preproc == "zca") {
        put("zca_epsilon", fmt(info.zca_epsilon), false);
        put("zca_subsample", std::to_string(info.zca_subsample), false);
    }
    put("augment", info.augment ? "true" : "false", info.augment != preset_info.augment);
    if (info.preset == "synth") {
        put("synth_n", std::to_string(info.synth_n), false);
        put("synth_test_n", std::to_string(info.synth_test_n), false);
    } else {
        put("data_dir", info.data_dir, false);
    }
    put("threads", std::to_string(wrn::kernels::max_threads()), false);

    const auto precision = wrn::precision_from_name(args.precision);
    return precision == wrn::Precision::f64
               ? run_training<double>(net_cfg, cfg, info, header, args)
               : run_training<float>(net_cfg, cfg, info, header, args);
}

template <typename T>
int eval_with(const std::string& checkpoint_path, const std::string& split,
              const std::string& data_dir) {
    auto restored = wrn::checkpoint::load<T>(checkpoint_path);
    DatasetInfo info = restored.dataset;
    if (!data_dir.empty()) info.data_dir = data_dir;
    auto pair = [&] {
        Prepared<T> out;
        if (info.preset == "synth") {
            out = prepare_data<T>(info, restored.train_cfg.seed);
        } else {
            // Reuse the checkpointed preprocessing rather than refitting.
            DatasetInfo raw = info;
            raw.preproc = "none";
            out = prepare_data<T>(raw, restored.train_cfg.seed);
            if (restored.preproc.kind != wrn::data::PreprocKind::none) {
                out.train = wrn::data::apply(restored.preproc, out.train);
                out.test = wrn::data::apply(restored.preproc, out.test);
            }
        }
        return out;
    }();
    const auto& ds = split == "train" ? pair.train : pair.test;
    const double err = wrn::train::evaluate(restored.network, ds);
    std::cout << split << " error: " << err << "%\n";
    return kExitOk;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& split,
             const std::string& data_dir) {
    auto head = wrn::checkpoint::open(checkpoint_path);
    const auto precision = head.manifest.value("precision", "single");
    return precision == "double" ? eval_with<double>(checkpoint_path, split, data_dir)
                                 : eval_with<float>(checkpoint_path, split, data_dir);
}

int cmd_describe(const std::string& notation, const std::string& csv_path,
                 bool bottleneck, double inner_widen, int classes, int input_size) {
    wrn::arch::Graph graph;
    if (bottleneck) {
        wrn::arch::NetConfig cfg;
        // Depth and default inner widening come from the notation.
        auto base = wrn::arch::parse_notation(notation);
        cfg.depth = base.depth;
        cfg.block.family = wrn::arch::BlockFamily::bottleneck;
        cfg.inner_widen = inner_widen > 0 ? inner_widen : static_cast<double>(base.widen);
        cfg.num_classes = classes > 0 ? classes : 1000;
        cfg.input_size = input_size > 0 ? input_size : 224;
        cfg.notation = notation + "-bottleneck";
        graph = wrn::arch::build_bottleneck(cfg);
    } else {
        auto cfg = wrn::arch::parse_notation(notation);
        if (classes > 0) cfg.num_classes = classes;
        if (input_size > 0) cfg.input_size = input_size;
        graph = wrn::arch::build(cfg);
    }
    std::cout << wrn::arch::describe_text(graph);
    if (!csv_path.empty()) {
        std::ofstream out(csv_path);
        if (!out) throw wrn::IoError("cannot write " + csv_path);
        out << wrn::arch::describe_csv(graph);
    }
    return kExitOk;
}

int cmd_bench(const std::string& sweep, const std::string& csv_path, int batch,
              int warmup, int iters, std::uint64_t seed) {
    wrn::bench::BenchSpec spec;
    spec.batch_size = batch;
    spec.warmup_iters = warmup;
    spec.timed_iters = iters;
    spec.seed = seed;
    std::istringstream ss(sweep);
    std::string token;
    while (std::getline(ss, token, ','))
        if (!token.empty()) spec.configs.push_back(wrn::arch::parse_notation(token));
    if (spec.configs.empty()) throw wrn::ConfigError("bench sweep is empty");
    auto rows = wrn::bench::run_bench(spec);
    std::cout << "notation,params,macs,fwd_ms,fwd_bwd_ms,host,error\n";
    for (const auto& r : rows) {
        if (r.error.empty())
            std::cout << r.notation << ',' << r.params << ',' << r.macs << ','
                      << r.fwd_ms << ',' << r.fwd_bwd_ms << ',' << r.host << ",\n";
        else
            std::cout << r.notation << ",,,,," << r.host << ',' << r.error << '\n';
    }
    if (!csv_path.empty()) wrn::bench::emit_csv(rows, csv_path);
    return kExitOk;
}

int cmd_verify(bool quick) {
    const int seeds = quick ? 5 : 20;
    std::vector<wrn::verify::CheckResult> all;
    auto extend = [&](std::vector<wrn::verify::CheckResult> v) {
        for (auto& r : v) all.push_back(std::move(r));
    };
    extend(wrn::verify::gradient_checks(seeds));
    all.push_back(wrn::verify::end_to_end_gradient_check(quick ? 3 : 20, 2));
    extend(wrn::verify::parameter_count_checks());
    extend(wrn::verify::depth_grammar_checks());
    extend(wrn::verify::schedule_checks());
    wrn::verify::print_results(std::cout, all);
    const bool ok = wrn::verify::all_pass(all);
    std::cout << (ok ? "all checks passed\n" : "some checks FAILED\n");
    return ok ? kExitOk : 1;
}

}  // namespace

int main(int argc, char** argv) {
    if (const char* threads = std::getenv("WRN_THREADS"))
        wrn::kernels::set_threads(std::atoi(threads));

    CLI::App app{"wide residual network construction, training and analysis"};
    app.require_subcommand(1);

    // describe
    auto* describe = app.add_subcommand("describe", "print the per-layer table of a network");
    std::string notation, csv_path;
    bool bottleneck = false;
    double inner_widen = 0.0;
    int classes = 0, input_size = 0;
    describe->add_option("notation", notation, "network notation, e.g. WRN-28-10")
        ->required();
    describe->add_option("--csv", csv_path, "also write the table as CSV");
    describe->add_flag("--bottleneck", bottleneck, "use the bottleneck family");
    describe->add_option("--inner-widen", inner_widen,
                         "bottleneck inner 3x3 widening factor");
    describe->add_option("--classes", classes, "number of classes");
    describe->add_option("--input-size", input_size, "input spatial extent");

    // train
    auto* tr = app.add_subcommand("train", "train a network and write run log + checkpoint");
    TrainArgs ta;
    tr->add_option("notation", ta.notation, "network notation")->required();
    tr->add_option("--preset", ta.preset, "cifar10, cifar100, svhn or synth")
        ->check(CLI::IsMember({"cifar10", "cifar100", "svhn", "synth"}));
    tr->add_option("--data", ta.data_dir, "dataset directory");
    tr->add_option("--epochs", ta.epochs, "total epochs");
    tr->add_option("--batch", ta.batch_size, "minibatch size");
    tr->add_option("--lr", ta.lr, "initial learning rate");
    tr->add_option("--momentum", ta.momentum, "SGD momentum");
    tr->add_option("--wd", ta.weight_decay, "weight decay");
    tr->add_option("--dropout", ta.dropout, "in-block dropout probability");
    tr->add_option("--seed", ta.seed, "master seed");
    tr->add_option("--limit-train", ta.limit_train,
                   "use only the first k post-shuffle examples per epoch");
    tr->add_option("--eval-batch", ta.eval_batch, "evaluation batch size");
    tr->add_option("--classes", ta.classes, "number of classes");
    tr->add_flag("--no-decay-bn", ta.no_decay_bn,
                 "exclude batch-norm gamma/beta from weight decay");
    tr->add_flag("--no-augment", ta.no_augment, "disable augmentation");
    tr->add_option("--deterministic", ta.deterministic,
                   "reproducible run logs (wall time zeroed in the CSV)");
    tr->add_option("--precision", ta.precision, "single or double")
        ->check(CLI::IsMember({"single", "double"}));
    tr->add_option("--preproc", ta.preproc, "none, meanstd or zca")
        ->check(CLI::IsMember({"none", "meanstd", "zca"}));
    tr->add_option("--zca-eps", ta.zca_eps, "ZCA regularization epsilon");
    tr->add_option("--zca-subsample", ta.zca_subsample, "ZCA fitting subsample size");
    tr->add_option("--synth-n", ta.synth_n, "synthetic train set size");
    tr->add_option("--synth-test-n", ta.synth_test_n, "synthetic test set size");
    tr->add_option("--out-log", ta.out_log, "run log CSV path");
    tr->add_option("--checkpoint", ta.checkpoint_path, "checkpoint output path");
    tr->add_option("--resume", ta.resume_path, "resume from a checkpoint");
    tr->set_config("--config", "", "flat key=value config file (flags win)");
    tr->allow_config_extras(CLI::config_extras_mode::error);

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
    std::string eval_ckpt, eval_split = "test", eval_data;
    ev->add_option("--checkpoint", eval_ckpt, "checkpoint path")->required();
    ev->add_option("--split", eval_split, "train or test")
        ->check(CLI::IsMember({"train", "test"}));
    ev->add_option("--data", eval_data, "dataset directory override");

    // bench
    auto* be = app.add_subcommand("bench", "time forward/backward across configurations");
    std::string sweep, bench_csv;
    int bench_batch = 32, bench_warmup = 3, bench_iters = 10;
    std::uint64_t bench_seed = 1;
    be->add_option("--sweep", sweep, "comma-separated notations")->required();
    be->add_option("--csv", bench_csv, "output CSV path");
    be->add_option("--batch", bench_batch, "minibatch size");
    be->add_option("--warmup", bench_warmup, "warmup iterations");
    be->add_option("--iters", bench_iters, "timed iterations (median reported)");
    be->add_option("--seed", bench_seed, "input seed");

    // verify
    auto* vf = app.add_subcommand("verify", "run gradient checks and analytic oracles");
    bool quick = false;
    vf->add_flag("--quick", quick, "reduced seed count");

    try {
        app.parse(argc, argv);
        if (describe->parsed())
            return cmd_describe(notation, csv_path, bottleneck, inner_widen, classes,
                                input_size);
        if (tr->parsed()) return cmd_train(ta);
        if (ev->parsed()) return cmd_eval(eval_ckpt, eval_split, eval_data);
        if (be->parsed())
            return cmd_bench(sweep, bench_csv, bench_batch, bench_warmup, bench_iters,
                             bench_seed);
        if (vf->parsed()) return cmd_verify(quick);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitConfig;
    } catch (const wrn::ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const wrn::DivergenceError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitDivergence;
    } catch (const wrn::DataError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitData;
    } catch (const wrn::CheckpointError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitCheckpoint;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return kExitOk;
}
