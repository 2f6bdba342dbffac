#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "wrn/common.hpp"
#include "wrn/data.hpp"
#include "wrn/net.hpp"

namespace wrn::train {

struct LrDrop {
    int epoch;
    double multiplier;
};

struct TrainConfig {
    double lr0 = 0.1;
    std::vector<LrDrop> schedule;  // strictly increasing epochs, all < epochs
    double momentum = 0.9;
    double weight_decay = 5e-4;
    int batch_size = 128;
    int epochs = 200;
    double dropout_p = 0.0;
    std::uint64_t seed = 1;
    bool decay_bn = true;       // apply weight decay to gamma/beta as well
    int limit_train = 0;        // keep only the first k post-shuffle examples
    bool deterministic = true;  // reproducible run logs (zeroed wall time)
    int eval_batch = 256;
};

inline void validate_schedule(const TrainConfig& cfg) {
    int prev = -1;
    for (const auto& d : cfg.schedule) {
        if (d.epoch <= prev)
            throw ConfigError("schedule epochs must be strictly increasing");
        if (d.epoch >= cfg.epochs)
            throw ConfigError("schedule epoch " + std::to_string(d.epoch) +
                              " is not below total epochs " + std::to_string(cfg.epochs));
        prev = d.epoch;
    }
}

// lr0 times the product of all multipliers whose drop epoch has passed.
inline double lr_at(const TrainConfig& cfg, int epoch) {
    double lr = cfg.lr0;
    for (const auto& d : cfg.schedule)
        if (d.epoch <= epoch) lr *= d.multiplier;
    return lr;
}

// The two recipes of the paper's experiments.
inline TrainConfig cifar_preset() {
    TrainConfig cfg;
    cfg.lr0 = 0.1;
    cfg.schedule = {{60, 0.2}, {120, 0.2}, {160, 0.2}};
    cfg.epochs = 200;
    cfg.momentum = 0.9;
    cfg.weight_decay = 0.0005;
    cfg.batch_size = 128;
    return cfg;
}

inline TrainConfig svhn_preset() {
    TrainConfig cfg;
    cfg.lr0 = 0.01;
    cfg.schedule = {{80, 0.1}, {120, 0.1}};
    cfg.epochs = 160;
    cfg.momentum = 0.9;
    cfg.weight_decay = 0.0005;
    cfg.batch_size = 128;
    return cfg;
}

// ---------------------------------------------------------------------------
// SGD with Nesterov momentum:
//   g' = g + wd * p
//   v  = momentum * v + g'
//   p  = p - lr * (g' + momentum * v)

template <typename T>
struct SgdState {
    std::vector<std::vector<T>> velocity;  // one buffer per trainable parameter
};

template <typename T>
void sgd_step(std::vector<net::ParamRef<T>>& params, SgdState<T>& state, double lr,
              double momentum, double weight_decay, bool decay_bn = true) {
    if (state.velocity.empty()) {
        state.velocity.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i)
            state.velocity[i].assign(params[i].tensor.size(), T(0));
    }
    if (state.velocity.size() != params.size())
        throw ShapeError("optimizer state does not match parameter list");
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        if (!p.tensor.has_grad())
            throw Error("sgd_step: gradient missing for parameter " + p.name);
        if (state.velocity[i].size() != p.tensor.size())
            throw ShapeError("velocity shape mismatch for parameter " + p.name);
        const T wd = static_cast<T>((p.is_bn && !decay_bn) ? 0.0 : weight_decay);
        const T mom = static_cast<T>(momentum);
        const T step = static_cast<T>(lr);
        T* pd = p.tensor.data();
        const T* gd = p.tensor.grad().data();
        T* vd = state.velocity[i].data();
        const std::size_t n = p.tensor.size();
#pragma omp parallel for schedule(static)
        for (std::size_t j = 0; j < n; ++j) {
            const T g = gd[j] + wd * pd[j];
            vd[j] = mom * vd[j] + g;
            pd[j] -= step * (g + mom * vd[j]);
        }
    }
}

// ---------------------------------------------------------------------------

struct EpochRecord {
    int epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double train_err = 0.0;  // eval-mode error over the full train split
    double test_err = 0.0;
    double seconds = 0.0;
    double dropout_keep = 1.0;  // train-mode mask activity
};

struct RunLog {
    std::vector<std::pair<std::string, std::string>> header;  // effective config
    std::vector<EpochRecord> records;
    bool deterministic = true;

    std::string csv() const {
        std::ostringstream os;
        for (const auto& [k, v] : header) os << "# " << k << '=' << v << '\n';
        os << "epoch,lr,train_loss,train_err,test_err,seconds\n";
        for (const auto& r : records) {
            os << r.epoch << ',' << std::setprecision(10) << r.lr << ','
               << std::setprecision(10) << r.train_loss << ',' << std::setprecision(6)
               << r.train_err << ',' << std::setprecision(6) << r.test_err << ','
               << std::fixed << std::setprecision(3)
               << (deterministic ? 0.0 : r.seconds) << '\n';
            os.unsetf(std::ios::fixed);
        }
        return os.str();
    }
};

// Argmax with ties broken toward the smallest class index.
template <typename T>
std::size_t misclassified_count(const T* logits, std::size_t n, std::size_t k,
                                const int* labels) {
    std::size_t wrong = 0;
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < k; ++j)
            if (logits[i * k + j] > logits[i * k + best]) best = j;
        if (static_cast<int>(best) != labels[i]) ++wrong;
    }
    return wrong;
}

// Error percentage over a dataset in eval mode. Accumulates integer counts,
// so shard order cannot matter.
template <typename T>
double evaluate(net::Network<T>& network, const data::Dataset<T>& ds, int batch = 256) {
    const auto prev_mode = network.mode();
    network.set_mode(net::Mode::eval);
    const std::size_t n = ds.size();
    std::size_t wrong = 0;
    const T* px = ds.images.data();
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(batch)) {
        const std::size_t count = std::min(static_cast<std::size_t>(batch), n - start);
        Tensor<T> x = Tensor<T>::from(
            {count, 3, 32, 32},
            std::vector<T>(px + start * data::kImageDim,
                           px + (start + count) * data::kImageDim));
        Tensor<T> logits = network.forward(nullptr, x);
        wrong += misclassified_count(logits.data(), count, logits.dim(1),
                                     ds.labels.data() + start);
    }
    network.set_mode(prev_mode);
    return 100.0 * static_cast<double>(wrong) / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Training loop. Per epoch: seeded shuffle, optional augmentation, train-mode
// forward/backward, SGD step per batch; then eval-mode passes over train and
// test splits. All randomness derives from (seed, epoch, batch), so a resumed
// run continues the exact stream.

template <typename T>
class Trainer {
public:
    Trainer(net::Network<T>& network, TrainConfig cfg)
        : net_(&network), cfg_(std::move(cfg)) {
        validate_schedule(cfg_);
    }

    net::Network<T>& network() { return *net_; }
    const TrainConfig& config() const { return cfg_; }
    SgdState<T>& optimizer_state() { return opt_; }
    int epochs_done() const { return epochs_done_; }
    void set_epochs_done(int e) { epochs_done_ = e; }
    std::vector<EpochRecord>& records() { return records_; }

    // Runs epochs [epochs_done, until). Returns the records appended.
    std::vector<EpochRecord> run(const data::Dataset<T>& train_ds,
                                 const data::Dataset<T>& test_ds,
                                 const data::AugmentPolicy& policy, int until = -1,
                                 std::ostream* progress = nullptr) {
        if (until < 0) until = cfg_.epochs;
        if (until > cfg_.epochs)
            throw ConfigError("cannot train past configured epoch count");
        std::vector<EpochRecord> out;
        const std::size_t n = train_ds.size();
        std::vector<std::size_t> order(n);
        for (int epoch = epochs_done_; epoch < until; ++epoch) {
            const auto t0 = std::chrono::steady_clock::now();
            const double lr = lr_at(cfg_, epoch);
            for (std::size_t i = 0; i < n; ++i) order[i] = i;
            shuffle_indices(order, derive_seed(cfg_.seed, seed_tag::shuffle,
                                               static_cast<std::uint64_t>(epoch)));
            std::size_t effective = n;
            if (cfg_.limit_train > 0)
                effective = std::min(n, static_cast<std::size_t>(cfg_.limit_train));

            net_->set_mode(net::Mode::train);
            double loss_sum = 0.0;
            double keep_sum = 0.0;
            std::size_t seen = 0, batches = 0;
            const auto bs = static_cast<std::size_t>(cfg_.batch_size);
            for (std::size_t start = 0; start < effective; start += bs) {
                const std::size_t count = std::min(bs, effective - start);
                const int batch_idx = static_cast<int>(start / bs);
                Tensor<T> x({count, 3, 32, 32});
                std::vector<int> labels(count);
                gather(train_ds, order, start, count, x, labels);
                if (policy.enabled) {
                    Rng rng(derive_seed(cfg_.seed, seed_tag::augment,
                                        static_cast<std::uint64_t>(epoch),
                                        static_cast<std::uint64_t>(batch_idx)));
                    x = data::augment(x, policy, rng);
                }
                Tape<T> tape;
                Tensor<T> logits = net_->forward(&tape, x);
                Tensor<T> loss = layers::softmax_cross_entropy(&tape, logits, labels);
                const double loss_value = static_cast<double>(loss.item());
                if (!std::isfinite(loss_value))
                    throw DivergenceError("non-finite loss " + std::to_string(loss_value) +
                                              " at epoch " + std::to_string(epoch) +
                                              ", batch " + std::to_string(batch_idx),
                                          epoch, batch_idx);
                net_->zero_grad();
                tape.backward(loss);
                sgd_step(net_->params(), opt_, lr, cfg_.momentum, cfg_.weight_decay,
                         cfg_.decay_bn);
                loss_sum += loss_value * static_cast<double>(count);
                keep_sum += net_->last_keep_fraction();
                seen += count;
                ++batches;
            }

            EpochRecord rec;
            rec.epoch = epoch;
            rec.lr = lr;
            rec.train_loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
            rec.dropout_keep = batches ? keep_sum / static_cast<double>(batches) : 1.0;
            rec.train_err = evaluate(*net_, train_ds, cfg_.eval_batch);
            rec.test_err = evaluate(*net_, test_ds, cfg_.eval_batch);
            net_->set_mode(net::Mode::train);
            rec.seconds = std::chrono::duration<double>(
                              std::chrono::steady_clock::now() - t0)
                              .count();
            if (progress) {
                (*progress) << "epoch " << rec.epoch << "  lr " << rec.lr
                            << "  train_loss " << rec.train_loss << "  train_err "
                            << rec.train_err << "%  test_err " << rec.test_err << "%  "
                            << std::fixed << std::setprecision(2) << rec.seconds << "s";
                if (cfg_.dropout_p > 0.0)
                    (*progress) << "  dropout_keep " << std::setprecision(4)
                                << rec.dropout_keep;
                (*progress) << std::defaultfloat << '\n';
            }
            records_.push_back(rec);
            out.push_back(rec);
            epochs_done_ = epoch + 1;
        }
        return out;
    }

private:
    // Fisher-Yates on the portable counter RNG.
    static void shuffle_indices(std::vector<std::size_t>& v, std::uint64_t seed) {
        Rng rng(seed);
        for (std::size_t i = v.size(); i > 1; --i)
            std::swap(v[i - 1], v[rng.next_below(i)]);
    }

    static void gather(const data::Dataset<T>& ds, const std::vector<std::size_t>& order,
                       std::size_t start, std::size_t count, Tensor<T>& x,
                       std::vector<int>& labels) {
        const T* src = ds.images.data();
        T* dst = x.data();
        for (std::size_t i = 0; i < count; ++i) {
            const std::size_t idx = order[start + i];
            std::copy(src + idx * data::kImageDim, src + (idx + 1) * data::kImageDim,
                      dst + i * data::kImageDim);
            labels[i] = ds.labels[idx];
        }
    }

    net::Network<T>* net_;
    TrainConfig cfg_;
    SgdState<T> opt_;
    int epochs_done_ = 0;
    std::vector<EpochRecord> records_;
};

// ---------------------------------------------------------------------------

struct RunSummary {
    double train_loss = 0.0;
    double train_err = 0.0;
    double test_err = 0.0;
};

// Median of final-epoch metrics; middle element, or the mean of the two
// middle elements for even run counts.
inline RunSummary median_of_runs(const std::vector<std::vector<EpochRecord>>& runs) {
    if (runs.empty()) throw ConfigError("median_of_runs needs at least one run");
    const std::size_t epochs = runs.front().size();
    for (const auto& r : runs)
        if (r.size() != epochs)
            throw ConfigError("median_of_runs: unequal epoch counts across runs");
    if (epochs == 0) throw ConfigError("median_of_runs: empty runs");
    auto median_of = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        const std::size_t n = v.size();
        return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
    };
    std::vector<double> loss, terr, verr;
    for (const auto& r : runs) {
        loss.push_back(r.back().train_loss);
        terr.push_back(r.back().train_err);
        verr.push_back(r.back().test_err);
    }
    return {median_of(loss), median_of(terr), median_of(verr)};
}

}  // namespace wrn::train
