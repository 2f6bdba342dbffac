#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "wrn/arch.hpp"
#include "wrn/common.hpp"
#include "wrn/layers.hpp"
#include "wrn/tensor.hpp"

namespace wrn::net {

using layers::Mode;

// A named trainable parameter. is_bn marks gamma/beta so weight decay can
// optionally skip them.
template <typename T>
struct ParamRef {
    std::string name;
    Tensor<T> tensor;
    bool is_bn = false;
};

// Executable instantiation of an arch::Graph: owns the parameter tensors,
// batch-norm running statistics and dropout streams.
template <typename T>
class Network {
public:
    Network() = default;

    Network(arch::Graph graph, std::uint64_t seed) : graph_(std::move(graph)) {
        conv_.resize(graph_.nodes.size());
        bn_.resize(graph_.nodes.size());
        drop_.resize(graph_.nodes.size());
        std::size_t param_index = 0;
        for (std::size_t i = 0; i < graph_.nodes.size(); ++i) {
            const auto& node = graph_.nodes[i];
            switch (node.kind) {
                case arch::LayerKind::conv: {
                    auto& p = conv_[i];
                    const auto co = static_cast<std::size_t>(node.c_out);
                    const auto ci = static_cast<std::size_t>(node.c_in);
                    const auto k = static_cast<std::size_t>(node.ksize);
                    p.weight = Tensor<T>({co, ci, k, k}, true);
                    p.stride = static_cast<std::size_t>(node.stride);
                    p.padding = static_cast<std::size_t>(node.pad);
                    // Zero-mean Gaussian, std sqrt(2 / (k^2 * C_out)).
                    const double stddev =
                        std::sqrt(2.0 / (static_cast<double>(k * k) * static_cast<double>(co)));
                    fill_normal(p.weight, seed, param_index++, stddev);
                    params_.push_back({node.name + ".weight", p.weight, false});
                    break;
                }
                case arch::LayerKind::batchnorm: {
                    auto& p = bn_[i];
                    const auto c = static_cast<std::size_t>(node.out_shape.c);
                    p.gamma = Tensor<T>::ones({c}, true);
                    p.beta = Tensor<T>::zeros({c}, true);
                    p.running_mean = Tensor<T>::zeros({c});
                    p.running_var = Tensor<T>::ones({c});
                    params_.push_back({node.name + ".gamma", p.gamma, true});
                    params_.push_back({node.name + ".beta", p.beta, true});
                    ++param_index;
                    break;
                }
                case arch::LayerKind::dropout: {
                    auto& s = drop_[i];
                    s.p = node.dropout_p;
                    s.rng_seed = derive_seed(seed, seed_tag::dropout, i);
                    break;
                }
                case arch::LayerKind::linear: {
                    auto& p = conv_[i];  // reuse the record: weight + bias
                    const auto d_in = static_cast<std::size_t>(node.c_in);
                    const auto d_out = static_cast<std::size_t>(node.c_out);
                    p.weight = Tensor<T>({d_out, d_in}, true);
                    p.bias = Tensor<T>::zeros({d_out}, true);
                    const double stddev = std::sqrt(2.0 / static_cast<double>(d_in));
                    fill_normal(p.weight, seed, param_index++, stddev);
                    params_.push_back({node.name + ".weight", p.weight, false});
                    params_.push_back({node.name + ".bias", p.bias, false});
                    break;
                }
                default:
                    break;
            }
        }
    }

    const arch::Graph& graph() const { return graph_; }

    Mode mode() const { return mode_; }

    void set_mode(Mode m) {
        mode_ = m;
        for (std::size_t i = 0; i < graph_.nodes.size(); ++i) {
            if (graph_.nodes[i].kind == arch::LayerKind::batchnorm) bn_[i].mode = m;
            if (graph_.nodes[i].kind == arch::LayerKind::dropout) drop_[i].mode = m;
        }
    }

    Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x) {
        if (x.rank() != 4)
            throw ShapeError("network input must be NCHW, got " + format_shape(x.shape()));
        const auto& in = graph_.nodes[0].out_shape;
        if (x.dim(1) != static_cast<std::size_t>(in.c) ||
            x.dim(2) != static_cast<std::size_t>(in.h) ||
            x.dim(3) != static_cast<std::size_t>(in.w))
            throw ShapeError("network input " + format_shape(x.shape()) +
                             " does not match graph input " + in.str());
        std::vector<Tensor<T>> values(graph_.nodes.size());
        for (std::size_t i = 0; i < graph_.nodes.size(); ++i) {
            const auto& node = graph_.nodes[i];
            const auto in0 = static_cast<std::size_t>(node.in0);
            switch (node.kind) {
                case arch::LayerKind::input:
                    values[i] = x;
                    break;
                case arch::LayerKind::conv:
                    values[i] = layers::conv2d(tape, values[in0], conv_[i]);
                    break;
                case arch::LayerKind::batchnorm:
                    values[i] = layers::batchnorm(tape, values[in0], bn_[i]);
                    break;
                case arch::LayerKind::relu:
                    values[i] = layers::relu(tape, values[in0]);
                    break;
                case arch::LayerKind::dropout:
                    values[i] = layers::dropout(tape, values[in0], drop_[i]);
                    break;
                case arch::LayerKind::avgpool:
                    values[i] = layers::avgpool_global(
                        tape, values[in0], static_cast<std::size_t>(node.window));
                    break;
                case arch::LayerKind::maxpool:
                    values[i] = layers::maxpool2d(tape, values[in0],
                                                  static_cast<std::size_t>(node.window),
                                                  static_cast<std::size_t>(node.stride),
                                                  static_cast<std::size_t>(node.pad));
                    break;
                case arch::LayerKind::add:
                    values[i] = add(tape, values[in0],
                                    values[static_cast<std::size_t>(node.in1)]);
                    break;
                case arch::LayerKind::linear: {
                    auto flat = reshape(tape, values[in0],
                                        {values[in0].dim(0),
                                         values[in0].size() / values[in0].dim(0)});
                    values[i] = layers::linear(tape, flat, conv_[i].weight, conv_[i].bias);
                    break;
                }
            }
        }
        return values[static_cast<std::size_t>(graph_.output_node)];
    }

    std::vector<ParamRef<T>>& params() { return params_; }
    const std::vector<ParamRef<T>>& params() const { return params_; }

    void zero_grad() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

    // Non-trainable state (running statistics), named for checkpoints.
    std::vector<ParamRef<T>> running_stats() {
        std::vector<ParamRef<T>> out;
        for (std::size_t i = 0; i < graph_.nodes.size(); ++i) {
            if (graph_.nodes[i].kind != arch::LayerKind::batchnorm) continue;
            out.push_back({graph_.nodes[i].name + ".running_mean", bn_[i].running_mean, true});
            out.push_back({graph_.nodes[i].name + ".running_var", bn_[i].running_var, true});
        }
        return out;
    }

    // Dropout stream positions, part of the reproducibility state.
    std::vector<std::pair<std::string, std::uint64_t>> dropout_counters() const {
        std::vector<std::pair<std::string, std::uint64_t>> out;
        for (std::size_t i = 0; i < graph_.nodes.size(); ++i)
            if (graph_.nodes[i].kind == arch::LayerKind::dropout)
                out.push_back({graph_.nodes[i].name, drop_[i].calls});
        return out;
    }

    void set_dropout_counters(const std::vector<std::pair<std::string, std::uint64_t>>& cs) {
        std::size_t idx = 0;
        for (std::size_t i = 0; i < graph_.nodes.size(); ++i)
            if (graph_.nodes[i].kind == arch::LayerKind::dropout && idx < cs.size())
                drop_[i].calls = cs[idx++].second;
    }

    // Fraction of activations kept by the last training forward, averaged
    // over sites; 1 when the net has no dropout.
    double last_keep_fraction() const {
        double sum = 0.0;
        std::size_t sites = 0;
        for (std::size_t i = 0; i < graph_.nodes.size(); ++i) {
            if (graph_.nodes[i].kind != arch::LayerKind::dropout) continue;
            sum += drop_[i].last_keep;
            ++sites;
        }
        return sites ? sum / static_cast<double>(sites) : 1.0;
    }

    layers::BatchNormParams<T>* bn_at(std::size_t node) {
        return graph_.nodes[node].kind == arch::LayerKind::batchnorm ? &bn_[node] : nullptr;
    }
    layers::Conv2dParams<T>* conv_at(std::size_t node) {
        const auto k = graph_.nodes[node].kind;
        return (k == arch::LayerKind::conv || k == arch::LayerKind::linear) ? &conv_[node]
                                                                            : nullptr;
    }
    layers::DropoutState* dropout_at(std::size_t node) {
        return graph_.nodes[node].kind == arch::LayerKind::dropout ? &drop_[node] : nullptr;
    }

private:
    static void fill_normal(Tensor<T>& t, std::uint64_t seed, std::size_t index,
                            double stddev) {
        Rng rng(derive_seed(seed, seed_tag::init, index));
        T* d = t.data();
        for (std::size_t i = 0; i < t.size(); ++i)
            d[i] = static_cast<T>(rng.next_normal() * stddev);
    }

    arch::Graph graph_;
    std::vector<layers::Conv2dParams<T>> conv_;
    std::vector<layers::BatchNormParams<T>> bn_;
    std::vector<layers::DropoutState> drop_;
    std::vector<ParamRef<T>> params_;
    Mode mode_ = Mode::train;
};

}  // namespace wrn::net
