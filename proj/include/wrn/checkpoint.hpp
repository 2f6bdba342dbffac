#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "wrn/arch.hpp"
#include "wrn/common.hpp"
#include "wrn/data.hpp"
#include "wrn/net.hpp"
#include "wrn/train.hpp"

namespace wrn::checkpoint {

// Single-file container: magic "WRNC" + version byte, u64 little-endian
// manifest length, JSON manifest, then raw little-endian tensor sections at
// the offsets the manifest records.

constexpr std::uint8_t kVersion = 1;

using json = nlohmann::json;

// Everything needed to rebuild the run: where the data came from plus the
// preprocessing that was fit on it.
struct DatasetInfo {
    std::string preset = "synth";
    std::string data_dir;
    std::size_t synth_n = 2000;
    int synth_classes = 10;
    std::size_t synth_test_n = 400;
    std::string preproc = "none";  // none | meanstd | zca
    double zca_epsilon = 0.1;
    std::size_t zca_subsample = 10000;
    bool augment = false;
};

inline json dataset_to_json(const DatasetInfo& d) {
    return json{{"preset", d.preset},         {"data_dir", d.data_dir},
                {"synth_n", d.synth_n},       {"synth_classes", d.synth_classes},
                {"synth_test_n", d.synth_test_n}, {"preproc", d.preproc},
                {"zca_epsilon", d.zca_epsilon},   {"zca_subsample", d.zca_subsample},
                {"augment", d.augment}};
}

inline DatasetInfo dataset_from_json(const json& j) {
    DatasetInfo d;
    d.preset = j.value("preset", "synth");
    d.data_dir = j.value("data_dir", "");
    d.synth_n = j.value("synth_n", std::size_t{2000});
    d.synth_classes = j.value("synth_classes", 10);
    d.synth_test_n = j.value("synth_test_n", std::size_t{400});
    d.preproc = j.value("preproc", "none");
    d.zca_epsilon = j.value("zca_epsilon", 0.1);
    d.zca_subsample = j.value("zca_subsample", std::size_t{10000});
    d.augment = j.value("augment", false);
    return d;
}

inline json netconfig_to_json(const arch::NetConfig& c) {
    return json{{"depth", c.depth},
                {"widen", c.widen},
                {"kernels", c.block.kernels},
                {"family", c.block.family == arch::BlockFamily::basic ? "basic" : "bottleneck"},
                {"dropout_p", c.block.dropout_p},
                {"num_classes", c.num_classes},
                {"blocks_per_group", c.blocks_per_group},
                {"inner_widen", c.inner_widen},
                {"input_size", c.input_size},
                {"notation", c.notation}};
}

inline arch::NetConfig netconfig_from_json(const json& j) {
    arch::NetConfig c;
    c.depth = j.at("depth").get<int>();
    c.widen = j.at("widen").get<int>();
    c.block.kernels = j.at("kernels").get<std::vector<int>>();
    c.block.family = j.at("family").get<std::string>() == "bottleneck"
                         ? arch::BlockFamily::bottleneck
                         : arch::BlockFamily::basic;
    c.block.dropout_p = j.at("dropout_p").get<double>();
    c.num_classes = j.at("num_classes").get<int>();
    c.blocks_per_group = j.at("blocks_per_group").get<int>();
    c.inner_widen = j.at("inner_widen").get<double>();
    c.input_size = j.at("input_size").get<int>();
    c.notation = j.value("notation", "");
    return c;
}

inline json trainconfig_to_json(const train::TrainConfig& c) {
    json drops = json::array();
    for (const auto& d : c.schedule) drops.push_back({{"epoch", d.epoch}, {"mult", d.multiplier}});
    return json{{"lr0", c.lr0},
                {"schedule", drops},
                {"momentum", c.momentum},
                {"weight_decay", c.weight_decay},
                {"batch_size", c.batch_size},
                {"epochs", c.epochs},
                {"dropout_p", c.dropout_p},
                {"seed", c.seed},
                {"decay_bn", c.decay_bn},
                {"limit_train", c.limit_train},
                {"deterministic", c.deterministic}};
}

inline train::TrainConfig trainconfig_from_json(const json& j) {
    train::TrainConfig c;
    c.lr0 = j.at("lr0").get<double>();
    for (const auto& d : j.at("schedule"))
        c.schedule.push_back({d.at("epoch").get<int>(), d.at("mult").get<double>()});
    c.momentum = j.at("momentum").get<double>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.batch_size = j.at("batch_size").get<int>();
    c.epochs = j.at("epochs").get<int>();
    c.dropout_p = j.at("dropout_p").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.decay_bn = j.at("decay_bn").get<bool>();
    c.limit_train = j.at("limit_train").get<int>();
    c.deterministic = j.at("deterministic").get<bool>();
    return c;
}

namespace detail {

template <typename T>
struct Section {
    std::string name;
    std::vector<std::size_t> shape;
    const T* data;
    std::size_t count;
};

template <typename T>
constexpr const char* dtype_name() {
    return sizeof(T) == 4 ? "f32" : "f64";
}

}  // namespace detail

template <typename T>
void save(const std::filesystem::path& path, train::Trainer<T>& trainer,
          const arch::NetConfig& net_cfg, const DatasetInfo& dataset,
          const data::PreprocState<T>* preproc = nullptr) {
    auto& network = trainer.network();
    std::vector<detail::Section<T>> sections;
    auto add = [&](const std::string& name, const Tensor<T>& t) {
        sections.push_back({name, t.shape(), t.data(), t.size()});
    };
    for (const auto& p : network.params()) add("param." + p.name, p.tensor);
    for (const auto& s : network.running_stats()) add("stats." + s.name, s.tensor);
    auto& opt = trainer.optimizer_state();
    if (!opt.velocity.empty()) {
        const auto& params = network.params();
        for (std::size_t i = 0; i < params.size(); ++i)
            sections.push_back({"opt." + params[i].name,
                                {opt.velocity[i].size()},
                                opt.velocity[i].data(),
                                opt.velocity[i].size()});
    }
    if (preproc && preproc->kind != data::PreprocKind::none) {
        add("preproc.mean", preproc->mean);
        if (preproc->kind == data::PreprocKind::meanstd) add("preproc.std", preproc->stddev);
        if (preproc->kind == data::PreprocKind::zca) add("preproc.whiten", preproc->whiten);
    }

    json manifest;
    manifest["version"] = kVersion;
    manifest["precision"] = detail::dtype_name<T>() == std::string("f32") ? "single" : "double";
    manifest["net"] = netconfig_to_json(net_cfg);
    manifest["train"] = trainconfig_to_json(trainer.config());
    manifest["dataset"] = dataset_to_json(dataset);
    manifest["epoch"] = trainer.epochs_done();
    if (preproc) {
        manifest["preproc_kind"] = preproc->kind == data::PreprocKind::zca       ? "zca"
                                   : preproc->kind == data::PreprocKind::meanstd ? "meanstd"
                                                                                 : "none";
        manifest["preproc_epsilon"] = preproc->epsilon;
        manifest["preproc_fitted_on"] = preproc->fitted_on;
    }
    json counters = json::array();
    for (const auto& [name, calls] : network.dropout_counters())
        counters.push_back({{"name", name}, {"calls", calls}});
    manifest["dropout_counters"] = counters;

    json tensors = json::array();
    std::size_t offset = 0;
    for (const auto& s : sections) {
        tensors.push_back({{"name", s.name},
                           {"shape", s.shape},
                           {"dtype", detail::dtype_name<T>()},
                           {"offset", offset},
                           {"count", s.count}});
        offset += s.count * sizeof(T);
    }
    manifest["tensors"] = tensors;

    const std::string text = manifest.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    const char magic[4] = {'W', 'R', 'N', 'C'};
    out.write(magic, 4);
    out.put(static_cast<char>(kVersion));
    std::uint64_t len = text.size();
    unsigned char lb[8];
    for (int i = 0; i < 8; ++i) lb[i] = static_cast<unsigned char>(len >> (8 * i));
    out.write(reinterpret_cast<const char*>(lb), 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& s : sections)
        out.write(reinterpret_cast<const char*>(s.data),
                  static_cast<std::streamsize>(s.count * sizeof(T)));
    if (!out) throw IoError("write failed for checkpoint " + path.string());
}

struct LoadedManifest {
    json manifest;
    std::vector<char> blob;  // tensor data section

    template <typename T>
    void read_tensor(const std::string& name, T* dst, std::size_t count) const {
        for (const auto& t : manifest.at("tensors")) {
            if (t.at("name").get<std::string>() != name) continue;
            if (t.at("count").get<std::size_t>() != count)
                throw CheckpointError("tensor " + name + " has " +
                                      std::to_string(t.at("count").get<std::size_t>()) +
                                      " elements, expected " + std::to_string(count));
            const auto dtype = t.at("dtype").get<std::string>();
            if (dtype != detail::dtype_name<T>())
                throw CheckpointError("tensor " + name + " stored as " + dtype);
            const std::size_t off = t.at("offset").get<std::size_t>();
            if (off + count * sizeof(T) > blob.size())
                throw CheckpointError("tensor " + name + " extends past checkpoint end");
            std::memcpy(dst, blob.data() + off, count * sizeof(T));
            return;
        }
        throw CheckpointError("tensor " + name + " missing from checkpoint");
    }

    bool has_tensor(const std::string& name) const {
        for (const auto& t : manifest.at("tensors"))
            if (t.at("name").get<std::string>() == name) return true;
        return false;
    }
};

inline LoadedManifest open(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
    char magic[4];
    if (!in.read(magic, 4) || std::string(magic, 4) != "WRNC")
        throw CheckpointError(path.string() + " is not a WRNC checkpoint");
    const int version = in.get();
    if (version != kVersion)
        throw CheckpointError("checkpoint version " + std::to_string(version) +
                              " does not match supported version " +
                              std::to_string(kVersion));
    unsigned char lb[8];
    if (!in.read(reinterpret_cast<char*>(lb), 8))
        throw CheckpointError("truncated checkpoint header");
    std::uint64_t len = 0;
    for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(lb[i]) << (8 * i);
    std::string text(len, '\0');
    if (!in.read(text.data(), static_cast<std::streamsize>(len)))
        throw CheckpointError("truncated checkpoint manifest");
    LoadedManifest lm;
    try {
        lm.manifest = json::parse(text);
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("bad checkpoint manifest: ") + e.what());
    }
    lm.blob.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    return lm;
}

// Rebuilds network + trainer + preprocessing from a checkpoint.
template <typename T>
struct Restored {
    arch::NetConfig net_cfg;
    train::TrainConfig train_cfg;
    DatasetInfo dataset;
    net::Network<T> network;
    data::PreprocState<T> preproc;
    int epoch = 0;
    std::vector<std::pair<std::string, std::uint64_t>> dropout_counters;
    std::vector<std::vector<T>> velocity;
};

template <typename T>
Restored<T> load(const std::filesystem::path& path) {
    LoadedManifest lm = open(path);
    Restored<T> r;
    const auto precision = lm.manifest.value("precision", "single");
    if ((precision == "single") != (sizeof(T) == 4))
        throw CheckpointError("checkpoint precision " + precision +
                              " does not match requested mode");
    r.net_cfg = netconfig_from_json(lm.manifest.at("net"));
    r.train_cfg = trainconfig_from_json(lm.manifest.at("train"));
    r.dataset = dataset_from_json(lm.manifest.at("dataset"));
    r.epoch = lm.manifest.at("epoch").get<int>();

    arch::Graph g = r.net_cfg.block.family == arch::BlockFamily::bottleneck
                        ? arch::build_bottleneck(r.net_cfg)
                        : arch::build(r.net_cfg);
    r.network = net::Network<T>(std::move(g), r.train_cfg.seed);
    for (auto& p : r.network.params())
        lm.read_tensor("param." + p.name, p.tensor.data(), p.tensor.size());
    for (auto& s : r.network.running_stats())
        lm.read_tensor("stats." + s.name, s.tensor.data(), s.tensor.size());

    const auto& params = r.network.params();
    if (!params.empty() && lm.has_tensor("opt." + params.front().name)) {
        r.velocity.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            r.velocity[i].resize(params[i].tensor.size());
            lm.read_tensor("opt." + params[i].name, r.velocity[i].data(),
                           r.velocity[i].size());
        }
    }

    for (const auto& c : lm.manifest.at("dropout_counters"))
        r.dropout_counters.push_back(
            {c.at("name").get<std::string>(), c.at("calls").get<std::uint64_t>()});
    r.network.set_dropout_counters(r.dropout_counters);

    const auto pk = lm.manifest.value("preproc_kind", "none");
    if (pk == "meanstd") {
        r.preproc.kind = data::PreprocKind::meanstd;
        r.preproc.mean = Tensor<T>({3});
        r.preproc.stddev = Tensor<T>({3});
        lm.read_tensor("preproc.mean", r.preproc.mean.data(), 3);
        lm.read_tensor("preproc.std", r.preproc.stddev.data(), 3);
    } else if (pk == "zca") {
        r.preproc.kind = data::PreprocKind::zca;
        r.preproc.epsilon = lm.manifest.value("preproc_epsilon", 0.1);
        r.preproc.mean = Tensor<T>({data::kImageDim});
        r.preproc.whiten = Tensor<T>({data::kImageDim, data::kImageDim});
        lm.read_tensor("preproc.mean", r.preproc.mean.data(), data::kImageDim);
        lm.read_tensor("preproc.whiten", r.preproc.whiten.data(),
                       data::kImageDim * data::kImageDim);
    }
    if (lm.manifest.contains("preproc_fitted_on"))
        r.preproc.fitted_on = lm.manifest.at("preproc_fitted_on").get<std::size_t>();
    return r;
}

}  // namespace wrn::checkpoint
