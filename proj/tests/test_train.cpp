#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <unistd.h>

#include "wrn/checkpoint.hpp"
#include "wrn/layers.hpp"
#include "wrn/train.hpp"

using namespace wrn;
using namespace wrn::train;

namespace {

namespace fs = std::filesystem;

fs::path temp_file(const std::string& stem) {
    static int counter = 0;
    return fs::temp_directory_path() /
           (stem + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
}

template <typename T>
Trainer<T> make_trainer(net::Network<T>& network, TrainConfig cfg) {
    return Trainer<T>(network, std::move(cfg));
}

TrainConfig tiny_config(int epochs, std::uint64_t seed) {
    TrainConfig cfg = cifar_preset();
    cfg.schedule.clear();
    cfg.epochs = epochs;
    cfg.batch_size = 32;
    cfg.seed = seed;
    cfg.eval_batch = 64;
    return cfg;
}

}  // namespace

TEST_CASE("lr_at reproduces both presets exactly") {
    const auto cifar = cifar_preset();
    CHECK(lr_at(cifar, 0) == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(lr_at(cifar, 59) == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(lr_at(cifar, 60) == doctest::Approx(0.02).epsilon(1e-12));
    CHECK(lr_at(cifar, 120) == doctest::Approx(0.004).epsilon(1e-12));
    CHECK(lr_at(cifar, 160) == doctest::Approx(0.0008).epsilon(1e-12));
    CHECK(lr_at(cifar, 199) == doctest::Approx(0.0008).epsilon(1e-12));

    const auto svhn = svhn_preset();
    CHECK(lr_at(svhn, 0) == doctest::Approx(0.01).epsilon(1e-12));
    CHECK(lr_at(svhn, 80) == doctest::Approx(0.001).epsilon(1e-12));
    CHECK(lr_at(svhn, 120) == doctest::Approx(0.0001).epsilon(1e-12));

    TrainConfig flat;
    flat.lr0 = 0.05;
    CHECK(lr_at(flat, 0) == 0.05);
    CHECK(lr_at(flat, 150) == 0.05);
}

TEST_CASE("lr_at is non-increasing over epochs for both presets") {
    for (const auto& cfg : {cifar_preset(), svhn_preset()}) {
        double prev = lr_at(cfg, 0);
        for (int e = 1; e < cfg.epochs; ++e) {
            const double lr = lr_at(cfg, e);
            CHECK(lr <= prev);
            prev = lr;
        }
    }
}

TEST_CASE("schedule validation") {
    TrainConfig cfg;
    cfg.epochs = 100;
    cfg.schedule = {{60, 0.2}, {60, 0.2}};
    CHECK_THROWS_AS(validate_schedule(cfg), ConfigError);
    cfg.schedule = {{60, 0.2}, {120, 0.2}};
    CHECK_THROWS_AS(validate_schedule(cfg), ConfigError);
    cfg.schedule = {{20, 0.2}, {60, 0.2}};
    CHECK_NOTHROW(validate_schedule(cfg));
}

TEST_CASE("sgd_step scalar oracle for the Nesterov update") {
    // p=1, g=1, v=0, lr=0.1, momentum=0.9, wd=0:
    //   g' = 1; v = 1; p = 1 - 0.1*(1 + 0.9*1) = 0.81
    std::vector<net::ParamRef<double>> params;
    auto p = Tensor<double>::from({1}, {1.0}, true);
    p.grad()[0] = 1.0;
    params.push_back({"p", p, false});
    SgdState<double> st;
    sgd_step(params, st, 0.1, 0.9, 0.0);
    CHECK(st.velocity[0][0] == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(p.vec()[0] == doctest::Approx(0.81).epsilon(1e-15));
}

TEST_CASE("sgd_step reduces to plain SGD without momentum") {
    std::vector<net::ParamRef<double>> params;
    auto p = Tensor<double>::from({3}, {1.0, -2.0, 0.5}, true);
    p.grad() = {0.2, -0.4, 1.0};
    params.push_back({"p", p, false});
    SgdState<double> st;
    sgd_step(params, st, 0.5, 0.0, 0.0);
    CHECK(p.vec()[0] == doctest::Approx(1.0 - 0.5 * 0.2));
    CHECK(p.vec()[1] == doctest::Approx(-2.0 + 0.5 * 0.4));
    CHECK(p.vec()[2] == doctest::Approx(0.5 - 0.5 * 1.0));
}

TEST_CASE("sgd_step pure weight decay shrinks parameters") {
    std::vector<net::ParamRef<double>> params;
    auto p = Tensor<double>::from({1}, {2.0}, true);
    p.grad()[0] = 0.0;
    params.push_back({"p", p, false});
    SgdState<double> st;
    sgd_step(params, st, 0.1, 0.0, 0.0005);
    CHECK(p.vec()[0] == doctest::Approx(2.0 * (1.0 - 0.1 * 0.0005)).epsilon(1e-15));
}

TEST_CASE("sgd_step honors the batch-norm decay exclusion flag") {
    std::vector<net::ParamRef<double>> params;
    auto w = Tensor<double>::from({1}, {1.0}, true);
    auto gamma = Tensor<double>::from({1}, {1.0}, true);
    w.grad()[0] = 0.0;
    gamma.grad()[0] = 0.0;
    params.push_back({"w", w, false});
    params.push_back({"bn.gamma", gamma, true});
    SgdState<double> st;
    sgd_step(params, st, 0.1, 0.0, 0.01, /*decay_bn=*/false);
    CHECK(w.vec()[0] < 1.0);
    CHECK(gamma.vec()[0] == 1.0);
}

TEST_CASE("sgd_step requires populated gradients") {
    std::vector<net::ParamRef<double>> params;
    auto p = Tensor<double>::from({1}, {1.0}, true);  // no grad buffer
    params.push_back({"p", p, false});
    SgdState<double> st;
    CHECK_THROWS_AS(sgd_step(params, st, 0.1, 0.9, 0.0), Error);
}

TEST_CASE("one step on the quadratic loss moves p by exactly -lr*p") {
    // For loss = 1/2 ||p||^2 the gradient is p itself.
    std::vector<net::ParamRef<double>> params;
    auto p = Tensor<double>::from({4}, {1.0, -3.0, 0.25, 8.0}, true);
    const auto before = p.vec();
    p.grad() = before;
    params.push_back({"p", p, false});
    SgdState<double> st;
    const double lr = 0.01;
    sgd_step(params, st, lr, 0.0, 0.0);
    for (std::size_t i = 0; i < 4; ++i)
        CHECK(p.vec()[i] == doctest::Approx(before[i] - lr * before[i]).epsilon(1e-15));
}

TEST_CASE("misclassification counting matches a confusion-matrix oracle") {
    // Perfect logits.
    std::vector<double> perfect{5, 0, 0, 0, 5, 0};  // labels 0, 1
    std::vector<int> labels{0, 1};
    CHECK(misclassified_count(perfect.data(), 2, 3, labels.data()) == 0);

    // Constant logits on a balanced 10-class set: everything predicts class
    // 0, so error is 90%.
    const std::size_t n = 100;
    std::vector<double> constant(n * 10, 1.0);
    std::vector<int> balanced(n);
    for (std::size_t i = 0; i < n; ++i) balanced[i] = static_cast<int>(i % 10);
    CHECK(misclassified_count(constant.data(), n, 10, balanced.data()) == 90);

    // Random logits against an independent counting oracle.
    Rng rng(314);
    std::vector<double> logits(60 * 7);
    for (auto& v : logits) v = rng.next_double();
    std::vector<int> rand_labels(60);
    for (auto& l : rand_labels) l = static_cast<int>(rng.next_below(7));
    std::size_t oracle = 0;
    for (std::size_t i = 0; i < 60; ++i) {
        // confusion-matrix accumulation: row = truth, col = argmax
        int cm[7][7] = {};
        std::size_t best = 0;
        for (std::size_t j = 1; j < 7; ++j)
            if (logits[i * 7 + j] > logits[i * 7 + best]) best = j;
        cm[rand_labels[i]][best]++;
        for (int t = 0; t < 7; ++t)
            for (int c = 0; c < 7; ++c)
                if (t != c) oracle += static_cast<std::size_t>(cm[t][c]);
    }
    CHECK(misclassified_count(logits.data(), 60, 7, rand_labels.data()) == oracle);
}

TEST_CASE("median_of_runs follows the stated convention") {
    auto run_with_final = [](double loss, double terr, double verr) {
        EpochRecord r;
        r.train_loss = loss;
        r.train_err = terr;
        r.test_err = verr;
        return std::vector<EpochRecord>{r};
    };
    std::vector<std::vector<EpochRecord>> five = {
        run_with_final(0, 0, 4.9), run_with_final(0, 0, 5.1), run_with_final(0, 0, 5.0),
        run_with_final(0, 0, 5.3), run_with_final(0, 0, 4.8)};
    CHECK(median_of_runs(five).test_err == doctest::Approx(5.0));

    std::vector<std::vector<EpochRecord>> one = {run_with_final(1.5, 2.0, 7.0)};
    CHECK(median_of_runs(one).test_err == doctest::Approx(7.0));
    CHECK(median_of_runs(one).train_loss == doctest::Approx(1.5));

    std::vector<std::vector<EpochRecord>> two = {run_with_final(0, 0, 4.0),
                                                 run_with_final(0, 0, 6.0)};
    CHECK(median_of_runs(two).test_err == doctest::Approx(5.0));

    CHECK_THROWS_AS(median_of_runs({}), ConfigError);
    std::vector<std::vector<EpochRecord>> ragged = {one[0], {}};
    CHECK_THROWS_AS(median_of_runs(ragged), ConfigError);
}

TEST_CASE("loss decreases strictly over 50 tiny-lr full-batch steps") {
    for (std::uint64_t seed : {21ull, 22ull, 23ull}) {
        auto cfg = arch::parse_notation("WRN-10-1");
        net::Network<float> network(arch::build(cfg), seed);
        network.set_mode(net::Mode::train);
        auto ds = data::synth_dataset<float>(32, 10, seed);
        Tensor<float> x = ds.images;
        SgdState<float> st;
        double prev = 1e300;
        for (int step = 0; step < 50; ++step) {
            Tape<float> tape;
            auto logits = network.forward(&tape, x);
            auto loss = layers::softmax_cross_entropy(&tape, logits, ds.labels);
            const double value = static_cast<double>(loss.item());
            CHECK(value < prev);
            prev = value;
            network.zero_grad();
            tape.backward(loss);
            sgd_step(network.params(), st, 0.005, 0.0, 0.0);
        }
    }
}

TEST_CASE("two runs with equal seeds produce bit-identical logs") {
    auto run_once = [] {
        auto cfg = arch::parse_notation("WRN-10-1");
        net::Network<float> network(arch::build(cfg), 77);
        auto train_ds = data::synth_dataset<float>(96, 4, 100);
        auto test_ds = data::synth_dataset<float>(32, 4, 101);
        test_ds.split = data::Split::test;
        Trainer<float> trainer(network, tiny_config(2, 77));
        data::AugmentPolicy policy;
        policy.enabled = true;  // exercise the augmentation stream too
        trainer.run(train_ds, test_ds, policy);
        RunLog log;
        log.records = trainer.records();
        return log.csv();
    };
    CHECK(run_once() == run_once());
}

TEST_CASE("divergence raises an error carrying epoch and batch") {
    auto cfg = arch::parse_notation("WRN-10-1");
    net::Network<float> network(arch::build(cfg), 5);
    auto train_ds = data::synth_dataset<float>(64, 4, 50);
    auto test_ds = data::synth_dataset<float>(16, 4, 51);
    test_ds.split = data::Split::test;
    auto cfg_t = tiny_config(3, 5);
    cfg_t.lr0 = 1e18;  // guaranteed blow-up
    Trainer<float> trainer(network, cfg_t);
    data::AugmentPolicy policy;
    policy.enabled = false;
    try {
        trainer.run(train_ds, test_ds, policy);
        FAIL("expected divergence");
    } catch (const DivergenceError& e) {
        CHECK(e.epoch >= 0);
        CHECK(e.batch >= 0);
        CHECK(std::string(e.what()).find("epoch") != std::string::npos);
    }
}

TEST_CASE("mode switching preserves parameters and running statistics") {
    auto cfg = arch::parse_notation("WRN-10-1");
    net::Network<float> network(arch::build(cfg), 9);
    auto ds = data::synth_dataset<float>(32, 4, 60);
    // One training step to move the running stats off their init.
    {
        Tape<float> tape;
        auto loss = layers::softmax_cross_entropy(&tape, network.forward(&tape, ds.images),
                                                  ds.labels);
        network.zero_grad();
        tape.backward(loss);
        SgdState<float> st;
        sgd_step(network.params(), st, 0.1, 0.9, 5e-4);
    }
    auto snapshot_params = [&] {
        std::vector<float> all;
        for (const auto& p : network.params())
            all.insert(all.end(), p.tensor.vec().begin(), p.tensor.vec().end());
        for (const auto& s : network.running_stats())
            all.insert(all.end(), s.tensor.vec().begin(), s.tensor.vec().end());
        return all;
    };
    const auto before = snapshot_params();
    network.set_mode(net::Mode::eval);
    Tensor<float> x({1, 3, 32, 32});
    network.forward(nullptr, x);  // eval pass must not touch anything
    network.set_mode(net::Mode::train);
    network.set_mode(net::Mode::eval);
    CHECK(snapshot_params() == before);
}

TEST_CASE("checkpoint save, load and resume reproduce the straight run") {
    const auto ckpt = temp_file("wrn_ckpt");
    auto make_net = [] {
        auto cfg = arch::parse_notation("WRN-10-1");
        return net::Network<float>(arch::build(cfg), 123);
    };
    auto train_ds = data::synth_dataset<float>(96, 4, 200);
    auto test_ds = data::synth_dataset<float>(32, 4, 201);
    test_ds.split = data::Split::test;
    data::AugmentPolicy policy;
    policy.enabled = false;
    auto net_cfg = arch::parse_notation("WRN-10-1");
    checkpoint::DatasetInfo info;
    info.preset = "synth";
    info.synth_n = 96;
    info.synth_classes = 4;

    // Straight run: 4 epochs.
    auto straight_net = make_net();
    Trainer<float> straight(straight_net, tiny_config(4, 123));
    straight.run(train_ds, test_ds, policy);

    // Interrupted run: 2 epochs, checkpoint, reload, 2 more.
    auto part_net = make_net();
    Trainer<float> part(part_net, tiny_config(4, 123));
    part.run(train_ds, test_ds, policy, 2);
    checkpoint::save(ckpt, part, net_cfg, info);

    auto restored = checkpoint::load<float>(ckpt);
    CHECK(restored.epoch == 2);
    Trainer<float> resumed(restored.network, restored.train_cfg);
    resumed.set_epochs_done(restored.epoch);
    resumed.optimizer_state().velocity = restored.velocity;
    auto tail = resumed.run(train_ds, test_ds, policy);

    REQUIRE(tail.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
        const auto& a = straight.records()[2 + i];
        const auto& b = tail[i];
        CHECK(a.train_loss == b.train_loss);  // bit-exact doubles
        CHECK(a.train_err == b.train_err);
        CHECK(a.test_err == b.test_err);
    }
    // Final parameters identical as well.
    for (std::size_t i = 0; i < straight_net.params().size(); ++i)
        CHECK(straight_net.params()[i].tensor.vec() ==
              restored.network.params()[i].tensor.vec());
    fs::remove(ckpt);
}

TEST_CASE("checkpoint rejects foreign files and version mismatches") {
    const auto path = temp_file("wrn_bad_ckpt");
    {
        std::ofstream out(path, std::ios::binary);
        out << "WRNX1234567890";
    }
    CHECK_THROWS_AS(checkpoint::open(path), CheckpointError);
    {
        std::ofstream out(path, std::ios::binary);
        out << "WRNC";
        out.put(9);  // unsupported version
        for (int i = 0; i < 8; ++i) out.put(0);
    }
    CHECK_THROWS_WITH_AS(checkpoint::open(path), doctest::Contains("version"),
                         CheckpointError);
    fs::remove(path);
}

TEST_CASE("preprocessing state round-trips through a checkpoint bit-exactly") {
    const auto ckpt = temp_file("wrn_preproc_ckpt");
    auto train_ds = data::synth_dataset<float>(64, 4, 300);
    auto st = data::fit_meanstd(train_ds);
    auto transformed = data::apply(st, train_ds);

    auto cfg = arch::parse_notation("WRN-10-1");
    net::Network<float> network(arch::build(cfg), 1);
    Trainer<float> trainer(network, tiny_config(1, 1));
    checkpoint::DatasetInfo info;
    checkpoint::save(ckpt, trainer, cfg, info, &st);

    auto restored = checkpoint::load<float>(ckpt);
    REQUIRE(restored.preproc.kind == data::PreprocKind::meanstd);
    CHECK(restored.preproc.mean.vec() == st.mean.vec());
    CHECK(restored.preproc.stddev.vec() == st.stddev.vec());
    auto again = data::apply(restored.preproc, train_ds);
    CHECK(again.images.vec() == transformed.images.vec());  // bit-exact
    fs::remove(ckpt);
}
