#include "wrn/arch.hpp"

#include <cctype>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace wrn::arch {

std::string Shape3::str() const {
    std::ostringstream os;
    os << c << 'x' << h << 'x' << w;
    return os.str();
}

const char* layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::input: return "input";
        case LayerKind::conv: return "conv";
        case LayerKind::batchnorm: return "batchnorm";
        case LayerKind::relu: return "relu";
        case LayerKind::dropout: return "dropout";
        case LayerKind::avgpool: return "avgpool";
        case LayerKind::maxpool: return "maxpool";
        case LayerKind::linear: return "linear";
        case LayerKind::add: return "add";
    }
    return "?";
}

int blocks_per_group(int depth, int deepening) {
    if (deepening < 1) throw ConfigError("block deepening factor must be >= 1");
    const int denom = 3 * deepening;
    if (depth <= 4 || (depth - 4) % denom != 0)
        throw ConfigError("depth " + std::to_string(depth) +
                          " is invalid: (n - 4) = " + std::to_string(depth - 4) +
                          " must be a positive multiple of 3*l = " + std::to_string(denom));
    return (depth - 4) / denom;
}

std::string NetConfig::render_notation() const {
    std::ostringstream os;
    os << "WRN-" << depth << '-' << widen;
    if (!(block.kernels.size() == 2 && block.kernels[0] == 3 && block.kernels[1] == 3)) {
        os << "-B(";
        for (std::size_t i = 0; i < block.kernels.size(); ++i) {
            if (i) os << ',';
            os << block.kernels[i];
        }
        os << ')';
    }
    return os.str();
}

NetConfig parse_notation(const std::string& text) {
    auto fail = [&](const std::string& why) {
        throw ConfigError("cannot parse notation '" + text + "': " + why);
    };
    if (text.rfind("WRN-", 0) != 0) fail("expected prefix WRN-");
    std::size_t pos = 4;
    auto read_int = [&](const char* what) {
        std::size_t start = pos;
        while (pos < text.size() && std::isdigit(static_cast<unsigned char>(text[pos]))) ++pos;
        if (pos == start) fail(std::string("expected ") + what);
        return std::stoi(text.substr(start, pos - start));
    };
    NetConfig cfg;
    cfg.depth = read_int("depth after WRN-");
    if (pos >= text.size() || text[pos] != '-') fail("expected '-' before widening factor");
    ++pos;
    cfg.widen = read_int("widening factor");
    if (cfg.widen < 1) fail("widening factor must be >= 1");
    cfg.block.kernels = {3, 3};
    if (pos < text.size()) {
        if (text.compare(pos, 3, "-B(") != 0) fail("expected block suffix -B(...)");
        pos += 3;
        cfg.block.kernels.clear();
        while (true) {
            const int k = read_int("kernel size");
            if (k != 1 && k != 3)
                throw ConfigError("kernel size " + std::to_string(k) +
                                  " not supported: only 1x1 and 3x3 convolutions");
            cfg.block.kernels.push_back(k);
            if (pos < text.size() && text[pos] == ',') {
                ++pos;
                continue;
            }
            break;
        }
        if (pos >= text.size() || text[pos] != ')') fail("expected ')' closing block list");
        ++pos;
        if (pos != text.size()) fail("trailing characters after block list");
    }
    cfg.blocks_per_group = blocks_per_group(cfg.depth, cfg.block.deepening());
    cfg.inner_widen = static_cast<double>(cfg.widen);
    cfg.notation = text;
    return cfg;
}

namespace {

struct Builder {
    Graph g;

    int emit(LayerNode node) {
        node.params = 0;
        node.macs = 0;
        switch (node.kind) {
            case LayerKind::conv:
                node.params = static_cast<std::int64_t>(node.c_out) * node.c_in *
                              node.ksize * node.ksize;
                node.macs = static_cast<std::int64_t>(node.out_shape.h) *
                            node.out_shape.w * node.c_in * node.c_out * node.ksize *
                            node.ksize;
                break;
            case LayerKind::batchnorm:
                node.params = 2 * static_cast<std::int64_t>(node.out_shape.c);
                break;
            case LayerKind::linear:
                node.params = static_cast<std::int64_t>(node.c_in) * node.c_out + node.c_out;
                node.macs = static_cast<std::int64_t>(node.c_in) * node.c_out;
                break;
            default:
                break;
        }
        g.nodes.push_back(std::move(node));
        return static_cast<int>(g.nodes.size()) - 1;
    }

    Shape3 shape_of(int node) const { return g.nodes[static_cast<std::size_t>(node)].out_shape; }

    int input(int c, int h, int w) {
        LayerNode n;
        n.kind = LayerKind::input;
        n.name = "input";
        n.out_shape = {c, h, w};
        n.in_shape = n.out_shape;
        return emit(std::move(n));
    }

    int conv(const std::string& name, int from, int c_out, int k, int stride, int pad) {
        const Shape3 in = shape_of(from);
        LayerNode n;
        n.kind = LayerKind::conv;
        n.name = name;
        n.in0 = from;
        n.in_shape = in;
        n.c_in = in.c;
        n.c_out = c_out;
        n.ksize = k;
        n.stride = stride;
        n.pad = pad;
        if (in.h + 2 * pad < k || in.w + 2 * pad < k)
            throw ShapeError(name + ": kernel exceeds padded input " + in.str());
        n.out_shape = {c_out, (in.h + 2 * pad - k) / stride + 1,
                       (in.w + 2 * pad - k) / stride + 1};
        return emit(std::move(n));
    }

    int bn(const std::string& name, int from) {
        const Shape3 in = shape_of(from);
        LayerNode n;
        n.kind = LayerKind::batchnorm;
        n.name = name;
        n.in0 = from;
        n.in_shape = in;
        n.out_shape = in;
        return emit(std::move(n));
    }

    int relu(const std::string& name, int from) {
        const Shape3 in = shape_of(from);
        LayerNode n;
        n.kind = LayerKind::relu;
        n.name = name;
        n.in0 = from;
        n.in_shape = in;
        n.out_shape = in;
        return emit(std::move(n));
    }

    int dropout(const std::string& name, int from, double p) {
        const Shape3 in = shape_of(from);
        LayerNode n;
        n.kind = LayerKind::dropout;
        n.name = name;
        n.in0 = from;
        n.in_shape = in;
        n.out_shape = in;
        n.dropout_p = p;
        return emit(std::move(n));
    }

    int add(const std::string& name, int a, int b) {
        const Shape3 sa = shape_of(a), sb = shape_of(b);
        if (!(sa == sb))
            throw ShapeError(name + ": residual join of unequal shapes " + sa.str() +
                             " vs " + sb.str());
        LayerNode n;
        n.kind = LayerKind::add;
        n.name = name;
        n.in0 = a;
        n.in1 = b;
        n.in_shape = sa;
        n.out_shape = sa;
        return emit(std::move(n));
    }

    int avgpool(const std::string& name, int from) {
        const Shape3 in = shape_of(from);
        if (in.h != in.w)
            throw ShapeError(name + ": global pool needs square input, got " + in.str());
        LayerNode n;
        n.kind = LayerKind::avgpool;
        n.name = name;
        n.in0 = from;
        n.in_shape = in;
        n.window = in.h;
        n.out_shape = {in.c, 1, 1};
        return emit(std::move(n));
    }

    int maxpool(const std::string& name, int from, int window, int stride, int pad) {
        const Shape3 in = shape_of(from);
        LayerNode n;
        n.kind = LayerKind::maxpool;
        n.name = name;
        n.in0 = from;
        n.in_shape = in;
        n.window = window;
        n.stride = stride;
        n.pad = pad;
        n.out_shape = {in.c, (in.h + 2 * pad - window) / stride + 1,
                       (in.w + 2 * pad - window) / stride + 1};
        return emit(std::move(n));
    }

    int linear(const std::string& name, int from, int classes) {
        const Shape3 in = shape_of(from);
        LayerNode n;
        n.kind = LayerKind::linear;
        n.name = name;
        n.in0 = from;
        n.in_shape = in;
        n.c_in = in.c * in.h * in.w;
        n.c_out = classes;
        n.out_shape = {classes, 1, 1};
        return emit(std::move(n));
    }
};

// Pre-activation basic block: per conv i of M, BN -> ReLU -> (dropout for
// i > 0) -> conv. Identity shortcut when shapes match, else a 1x1
// projection with the block's entry stride.
int basic_block(Builder& b, const std::string& prefix, int entry, int width,
                int entry_stride, const BlockSpec& spec) {
    const Shape3 in = b.shape_of(entry);
    int path = entry;
    for (std::size_t i = 0; i < spec.kernels.size(); ++i) {
        const std::string tag = prefix + ".conv" + std::to_string(i + 1);
        path = b.bn(prefix + ".bn" + std::to_string(i + 1), path);
        path = b.relu(prefix + ".relu" + std::to_string(i + 1), path);
        if (i > 0 && spec.dropout_p > 0.0)
            path = b.dropout(prefix + ".drop" + std::to_string(i), path, spec.dropout_p);
        const int k = spec.kernels[i];
        const int stride = (i == 0) ? entry_stride : 1;
        path = b.conv(tag, path, width, k, stride, k == 3 ? 1 : 0);
    }
    int shortcut = entry;
    const Shape3 out = b.shape_of(path);
    if (!(in == out))
        shortcut = b.conv(prefix + ".proj", entry, width, 1, entry_stride, 0);
    return b.add(prefix + ".add", path, shortcut);
}

}  // namespace

Graph build(const NetConfig& cfg) {
    if (cfg.block.family != BlockFamily::basic)
        return build_bottleneck(cfg);
    if (cfg.widen < 1) throw ConfigError("widening factor must be >= 1");
    if (cfg.num_classes < 1) throw ConfigError("num_classes must be positive");
    for (int k : cfg.block.kernels)
        if (k != 1 && k != 3)
            throw ConfigError("kernel size " + std::to_string(k) +
                              " not supported: only 1x1 and 3x3 convolutions");
    const int n_blocks = cfg.blocks_per_group > 0
                             ? cfg.blocks_per_group
                             : blocks_per_group(cfg.depth, cfg.block.deepening());

    Builder b;
    b.g.cfg = cfg;
    b.g.cfg.blocks_per_group = n_blocks;
    int cur = b.input(3, cfg.input_size, cfg.input_size);
    cur = b.conv("conv1", cur, cfg.base_widths[0], 3, 1, 1);
    for (int group = 0; group < 3; ++group) {
        const int width = cfg.base_widths[static_cast<std::size_t>(group) + 1] * cfg.widen;
        const int entry_stride = group == 0 ? 1 : 2;
        for (int blk = 0; blk < n_blocks; ++blk) {
            const std::string prefix =
                "conv" + std::to_string(group + 2) + ".block" + std::to_string(blk + 1);
            cur = basic_block(b, prefix, cur, width, blk == 0 ? entry_stride : 1,
                              cfg.block);
        }
    }
    cur = b.bn("final.bn", cur);
    cur = b.relu("final.relu", cur);
    cur = b.avgpool("avgpool", cur);
    cur = b.linear("fc", cur, cfg.num_classes);
    b.g.output_node = cur;
    return b.g;
}

namespace {

// Original post-activation bottleneck: conv1x1 reduce, conv3x3 (stride
// here), conv1x1 expand, each followed by BN; ReLU after the residual add.
int bottleneck_block(Builder& b, const std::string& prefix, int entry, int inner,
                     int out_c, int entry_stride) {
    const Shape3 in = b.shape_of(entry);
    int path = entry;
    path = b.conv(prefix + ".conv1", path, inner, 1, 1, 0);
    path = b.bn(prefix + ".bn1", path);
    path = b.relu(prefix + ".relu1", path);
    path = b.conv(prefix + ".conv2", path, inner, 3, entry_stride, 1);
    path = b.bn(prefix + ".bn2", path);
    path = b.relu(prefix + ".relu2", path);
    path = b.conv(prefix + ".conv3", path, out_c, 1, 1, 0);
    path = b.bn(prefix + ".bn3", path);
    int shortcut = entry;
    if (!(in == b.shape_of(path))) {
        shortcut = b.conv(prefix + ".proj", entry, out_c, 1, entry_stride, 0);
        shortcut = b.bn(prefix + ".proj_bn", shortcut);
    }
    const int joined = b.add(prefix + ".add", path, shortcut);
    return b.relu(prefix + ".relu3", joined);
}

}  // namespace

Graph build_bottleneck(const NetConfig& cfg) {
    if (cfg.depth != 50)
        throw ConfigError("bottleneck depth " + std::to_string(cfg.depth) +
                          " not supported; supported depths: 50");
    if (cfg.inner_widen < 1.0)
        throw ConfigError("inner widening factor must be >= 1");
    const std::array<int, 4> blocks{3, 4, 6, 3};
    const std::array<int, 4> base_inner{64, 128, 256, 512};

    Builder b;
    b.g.cfg = cfg;
    b.g.cfg.block.family = BlockFamily::bottleneck;
    b.g.cfg.block.pre_activation = false;
    const int side = cfg.input_size > 0 ? cfg.input_size : 224;
    int cur = b.input(3, side, side);
    cur = b.conv("conv1", cur, 64, 7, 2, 3);
    cur = b.bn("conv1.bn", cur);
    cur = b.relu("conv1.relu", cur);
    cur = b.maxpool("maxpool", cur, 3, 2, 1);
    for (int group = 0; group < 4; ++group) {
        const int inner = static_cast<int>(
            std::lround(base_inner[static_cast<std::size_t>(group)] * cfg.inner_widen));
        const int out_c = base_inner[static_cast<std::size_t>(group)] * 4;
        const int entry_stride = group == 0 ? 1 : 2;
        for (int blk = 0; blk < blocks[static_cast<std::size_t>(group)]; ++blk) {
            const std::string prefix =
                "conv" + std::to_string(group + 2) + ".block" + std::to_string(blk + 1);
            cur = bottleneck_block(b, prefix, cur, inner, out_c,
                                   blk == 0 ? entry_stride : 1);
        }
    }
    cur = b.avgpool("avgpool", cur);
    cur = b.linear("fc", cur, cfg.num_classes);
    b.g.output_node = cur;
    return b.g;
}

std::int64_t Graph::param_count() const {
    std::int64_t total = 0;
    for (const auto& n : nodes) total += n.params;
    return total;
}

std::int64_t Graph::mac_count() const {
    std::int64_t total = 0;
    for (const auto& n : nodes) total += n.macs;
    return total;
}

int Graph::conv_layer_rows() const {
    int count = 0;
    for (const auto& n : nodes)
        if (n.kind == LayerKind::conv) ++count;
    return count;
}

std::string describe_text(const Graph& g) {
    std::ostringstream os;
    os << "network " << (g.cfg.notation.empty() ? g.cfg.render_notation() : g.cfg.notation)
       << "  (blocks/group " << g.cfg.blocks_per_group << ", classes "
       << g.cfg.num_classes << ")\n";
    os << std::left << std::setw(24) << "layer" << std::setw(11) << "kind"
       << std::setw(12) << "in" << std::setw(12) << "out" << std::right
       << std::setw(12) << "params" << std::setw(16) << "macs" << '\n';
    for (const auto& n : g.nodes) {
        if (n.kind == LayerKind::input) continue;
        os << std::left << std::setw(24) << n.name << std::setw(11)
           << layer_kind_name(n.kind) << std::setw(12) << n.in_shape.str()
           << std::setw(12) << n.out_shape.str() << std::right << std::setw(12)
           << n.params << std::setw(16) << n.macs << '\n';
    }
    const double millions = static_cast<double>(g.param_count()) / 1e6;
    os << "total params " << g.param_count() << "  (" << std::fixed
       << std::setprecision(1) << millions << "M)   total macs " << g.mac_count()
       << '\n';
    return os.str();
}

std::string describe_csv(const Graph& g) {
    std::ostringstream os;
    os << "layer,kind,in_shape,out_shape,params,macs\n";
    for (const auto& n : g.nodes) {
        if (n.kind == LayerKind::input) continue;
        os << n.name << ',' << layer_kind_name(n.kind) << ',' << n.in_shape.str()
           << ',' << n.out_shape.str() << ',' << n.params << ',' << n.macs << '\n';
    }
    os << "total,,,," << g.param_count() << ',' << g.mac_count() << '\n';
    return os.str();
}

}  // namespace wrn::arch
