#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "wrn/common.hpp"

namespace wrn::arch {

enum class BlockFamily { basic, bottleneck };

// Residual block descriptor B(M): the list of square kernel sizes.
struct BlockSpec {
    std::vector<int> kernels{3, 3};
    BlockFamily family = BlockFamily::basic;
    double dropout_p = 0.0;
    bool pre_activation = true;  // always true for the basic family

    int deepening() const { return static_cast<int>(kernels.size()); }
};

struct NetConfig {
    int depth = 16;          // total counted convolutional layers n
    int widen = 1;           // widening factor k (basic family)
    BlockSpec block;
    int num_classes = 10;
    std::array<int, 4> base_widths{16, 16, 32, 64};
    int blocks_per_group = 0;   // N; derived from depth unless set explicitly
    double inner_widen = 1.0;   // bottleneck inner 3x3 widening factor
    int input_size = 32;        // square input spatial extent
    std::string notation;       // original string, for reports

    std::string render_notation() const;
};

// N = (n - 4) / (3 l); throws ConfigError when the depth is indivisible.
int blocks_per_group(int depth, int deepening);

// Parses "WRN-<n>-<k>[-B(m1,m2,...)]"; kernels must be 1 or 3.
NetConfig parse_notation(const std::string& text);

enum class LayerKind {
    input,
    conv,
    batchnorm,
    relu,
    dropout,
    avgpool,
    maxpool,
    linear,
    add,
};

const char* layer_kind_name(LayerKind k);

struct Shape3 {
    int c = 0, h = 0, w = 0;
    bool operator==(const Shape3&) const = default;
    std::string str() const;
};

struct LayerNode {
    LayerKind kind = LayerKind::input;
    std::string name;
    int in0 = -1;  // producer node indices; add joins two
    int in1 = -1;
    Shape3 in_shape;
    Shape3 out_shape;
    // conv / linear attributes
    int c_in = 0, c_out = 0, ksize = 0, stride = 1, pad = 0;
    // pooling attributes
    int window = 0;
    double dropout_p = 0.0;
    std::int64_t params = 0;
    std::int64_t macs = 0;
};

// Shape-inferred layer list. Construction validates every residual join.
struct Graph {
    NetConfig cfg;
    std::vector<LayerNode> nodes;
    int output_node = -1;

    std::int64_t param_count() const;
    std::int64_t mac_count() const;
    int conv_layer_rows() const;  // number of conv nodes in the table
};

// Standard WRN: conv1, three groups of N basic blocks, final BN+ReLU,
// global average pooling and the classifier.
Graph build(const NetConfig& cfg);

// Bottleneck family at ImageNet scale (depth 50), original post-activation
// ordering; construction and counting only.
Graph build_bottleneck(const NetConfig& cfg);

// Per-layer table with totals: text and CSV renderings.
std::string describe_text(const Graph& g);
std::string describe_csv(const Graph& g);

}  // namespace wrn::arch
