#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "wrn/common.hpp"
#include "wrn/kernels.hpp"
#include "wrn/tensor.hpp"

namespace wrn::data {

enum class Split { train, test };

template <typename T>
struct Dataset {
    Tensor<T> images;  // [n, 3, 32, 32], values in [0,1] before normalization
    std::vector<int> labels;
    Split split = Split::train;
    int class_count = 10;

    std::size_t size() const { return labels.size(); }
};

// Pixel dimensionality of one image.
constexpr std::size_t kImageDim = 3 * 32 * 32;

// Defined in zca.cpp; eigendecomposition of the covariance via LAPACK.
std::vector<double> zca_matrix(std::vector<double> cov, std::size_t d, double eps);

// ---------------------------------------------------------------------------
// CIFAR binary ingestion.

namespace detail {

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    in.seekg(0, std::ios::end);
    const auto len = static_cast<std::size_t>(in.tellg());
    in.seekg(0);
    std::vector<unsigned char> buf(len);
    if (len && !in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(len)))
        throw DataError("short read from " + path.string());
    return buf;
}

template <typename T>
void append_cifar_records(const std::filesystem::path& path, std::size_t label_bytes,
                          std::vector<T>& pixels, std::vector<int>& labels,
                          int class_count) {
    const auto buf = read_file(path);
    const std::size_t record = label_bytes + kImageDim;
    if (buf.empty() || buf.size() % record != 0)
        throw DataError(path.string() + ": truncated record at byte offset " +
                        std::to_string(buf.size() - buf.size() % record) +
                        " (record size " + std::to_string(record) + ")");
    const std::size_t count = buf.size() / record;
    pixels.reserve(pixels.size() + count * kImageDim);
    for (std::size_t r = 0; r < count; ++r) {
        const unsigned char* rec = buf.data() + r * record;
        // CIFAR-100 carries a coarse label first; the fine label is last.
        const int label = rec[label_bytes - 1];
        if (label >= class_count)
            throw DataError(path.string() + ": label " + std::to_string(label) +
                            " out of range at byte offset " + std::to_string(r * record));
        labels.push_back(label);
        const unsigned char* px = rec + label_bytes;
        for (std::size_t i = 0; i < kImageDim; ++i)
            pixels.push_back(static_cast<T>(px[i]) / T(255));
    }
}

}  // namespace detail

enum class CifarVariant { c10, c100 };

template <typename T>
std::pair<Dataset<T>, Dataset<T>> load_cifar(const std::filesystem::path& dir,
                                             CifarVariant variant) {
    const int classes = variant == CifarVariant::c10 ? 10 : 100;
    const std::size_t label_bytes = variant == CifarVariant::c10 ? 1 : 2;
    std::vector<std::filesystem::path> train_files, test_files;
    if (variant == CifarVariant::c10) {
        for (int i = 1; i <= 5; ++i)
            train_files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
        test_files.push_back(dir / "test_batch.bin");
    } else {
        train_files.push_back(dir / "train.bin");
        test_files.push_back(dir / "test.bin");
    }
    auto load_split = [&](const std::vector<std::filesystem::path>& files, Split split) {
        std::vector<T> pixels;
        std::vector<int> labels;
        for (const auto& f : files)
            detail::append_cifar_records<T>(f, label_bytes, pixels, labels, classes);
        Dataset<T> ds;
        ds.images = Tensor<T>::from({labels.size(), 3, 32, 32}, std::move(pixels));
        ds.labels = std::move(labels);
        ds.split = split;
        ds.class_count = classes;
        return ds;
    };
    return {load_split(train_files, Split::train), load_split(test_files, Split::test)};
}

// ---------------------------------------------------------------------------
// Preprocessing. Statistics are fit on the training split only and applied
// identically to both splits.

enum class PreprocKind { none, meanstd, zca };

template <typename T>
struct PreprocState {
    PreprocKind kind = PreprocKind::none;
    Tensor<T> mean;    // [3] per channel (meanstd) or [3072] per dimension (zca)
    Tensor<T> stddev;  // [3] (meanstd only)
    Tensor<T> whiten;  // [3072, 3072] (zca only)
    double epsilon = 0.0;
    std::size_t fitted_on = 0;
};

template <typename T>
PreprocState<T> fit_meanstd(const Dataset<T>& train) {
    if (train.split != Split::train)
        throw DataError("preprocessing statistics must be fit on the train split");
    const std::size_t n = train.size();
    const std::size_t plane = 32 * 32;
    PreprocState<T> st;
    st.kind = PreprocKind::meanstd;
    st.mean = Tensor<T>({3});
    st.stddev = Tensor<T>({3});
    st.fitted_on = n;
    const T* px = train.images.data();
    for (std::size_t ch = 0; ch < 3; ++ch) {
        double s = 0.0, s2 = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const T* p = px + (i * 3 + ch) * plane;
            for (std::size_t j = 0; j < plane; ++j) {
                s += p[j];
                s2 += static_cast<double>(p[j]) * p[j];
            }
        }
        const double count = static_cast<double>(n * plane);
        const double mu = s / count;
        const double var = s2 / count - mu * mu;
        if (var < 1e-12)
            throw DataError("channel " + std::to_string(ch) +
                            " has zero variance; mean/std normalization is degenerate");
        st.mean.data()[ch] = static_cast<T>(mu);
        st.stddev.data()[ch] = static_cast<T>(std::sqrt(var));
    }
    return st;
}

template <typename T>
PreprocState<T> fit_zca(const Dataset<T>& train, double epsilon,
                        std::size_t subsample = 10000) {
    if (train.split != Split::train)
        throw DataError("preprocessing statistics must be fit on the train split");
    const std::size_t n = std::min(subsample == 0 ? train.size() : subsample, train.size());
    if (n < 2) throw DataError("ZCA fit needs at least 2 images");
    const std::size_t d = kImageDim;

    // Mean over the fitting subsample, then centered copy.
    std::vector<double> mean(d, 0.0);
    const T* px = train.images.data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) mean[j] += px[i * d + j];
    for (std::size_t j = 0; j < d; ++j) mean[j] /= static_cast<double>(n);

    std::vector<T> centered(n * d);
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j)
            centered[i * d + j] = static_cast<T>(px[i * d + j] - mean[j]);

    // Covariance C = X^T X / n.
    std::vector<T> cov_t(d * d);
    kernels::gemm_tn(d, d, n, centered.data(), centered.data(), cov_t.data(), false);
    std::vector<double> cov(d * d);
    const double inv_n = 1.0 / static_cast<double>(n);
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < d * d; ++i)
        cov[i] = static_cast<double>(cov_t[i]) * inv_n;
    cov_t.clear();
    cov_t.shrink_to_fit();

    const std::vector<double> w = zca_matrix(std::move(cov), d, epsilon);

    PreprocState<T> st;
    st.kind = PreprocKind::zca;
    st.epsilon = epsilon;
    st.fitted_on = n;
    st.mean = Tensor<T>({d});
    for (std::size_t j = 0; j < d; ++j) st.mean.data()[j] = static_cast<T>(mean[j]);
    st.whiten = Tensor<T>({d, d});
    T* wd = st.whiten.data();
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < d * d; ++i) wd[i] = static_cast<T>(w[i]);
    return st;
}

template <typename T>
Dataset<T> apply(const PreprocState<T>& st, const Dataset<T>& ds) {
    Dataset<T> out;
    out.labels = ds.labels;
    out.split = ds.split;
    out.class_count = ds.class_count;
    const std::size_t n = ds.size();
    const std::size_t d = kImageDim;
    switch (st.kind) {
        case PreprocKind::none:
            out.images = ds.images.clone();
            break;
        case PreprocKind::meanstd: {
            out.images = Tensor<T>({n, 3, 32, 32});
            const std::size_t plane = 32 * 32;
            const T* src = ds.images.data();
            T* dst = out.images.data();
            const T* mu = st.mean.data();
            const T* sd = st.stddev.data();
#pragma omp parallel for schedule(static)
            for (std::size_t ic = 0; ic < n * 3; ++ic) {
                const std::size_t ch = ic % 3;
                const T m = mu[ch], inv = T(1) / sd[ch];
                for (std::size_t j = 0; j < plane; ++j)
                    dst[ic * plane + j] = (src[ic * plane + j] - m) * inv;
            }
            break;
        }
        case PreprocKind::zca: {
            // x -> W (x - mean); W is symmetric so the batched form is
            // (X - mean) W with row vectors.
            std::vector<T> centered(n * d);
            const T* src = ds.images.data();
            const T* mu = st.mean.data();
#pragma omp parallel for schedule(static)
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < d; ++j)
                    centered[i * d + j] = src[i * d + j] - mu[j];
            out.images = Tensor<T>({n, 3, 32, 32});
            kernels::gemm_nn(n, d, d, centered.data(), st.whiten.data(),
                             out.images.data(), false);
            break;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Augmentation: reflect-pad to 40x40, uniform random 32x32 crop, horizontal
// flip with probability 1/2. The reflection mirrors about the boundary
// pixel without duplicating it: [a,b,c,d] padded by 2 -> [c,b,a,b,c,d,c,b].

struct AugmentPolicy {
    int pad = 4;
    int crop = 32;
    double flip_prob = 0.5;
    bool enabled = true;
};

namespace detail {

inline std::size_t reflect_index(std::ptrdiff_t j, std::size_t extent) {
    if (j < 0) j = -j;
    const auto last = static_cast<std::ptrdiff_t>(extent) - 1;
    if (j > last) j = 2 * last - j;
    return static_cast<std::size_t>(j);
}

}  // namespace detail

template <typename T>
Tensor<T> augment(const Tensor<T>& batch, const AugmentPolicy& policy, Rng& rng) {
    if (!policy.enabled) return batch;
    if (batch.rank() != 4 || batch.dim(2) != static_cast<std::size_t>(policy.crop) ||
        batch.dim(3) != static_cast<std::size_t>(policy.crop))
        throw ShapeError("augment expects [N,C," + std::to_string(policy.crop) + "," +
                         std::to_string(policy.crop) + "], got " +
                         format_shape(batch.shape()));
    const std::size_t n = batch.dim(0), c = batch.dim(1);
    const std::size_t side = static_cast<std::size_t>(policy.crop);
    const int pad = policy.pad;
    Tensor<T> out(batch.shape());
    const T* src = batch.data();
    T* dst = out.data();
    // Draws happen on the caller's stream in image order: dy, dx, flip.
    std::vector<int> dys(n), dxs(n);
    std::vector<char> flips(n);
    for (std::size_t i = 0; i < n; ++i) {
        dys[i] = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(2 * pad + 1)));
        dxs[i] = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(2 * pad + 1)));
        flips[i] = rng.next_double() < policy.flip_prob ? 1 : 0;
    }
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < n; ++i) {
        const int dy = dys[i], dx = dxs[i];
        const bool flip = flips[i] != 0;
        for (std::size_t ch = 0; ch < c; ++ch) {
            const T* plane = src + (i * c + ch) * side * side;
            T* oplane = dst + (i * c + ch) * side * side;
            for (std::size_t h = 0; h < side; ++h) {
                const std::size_t sh = detail::reflect_index(
                    static_cast<std::ptrdiff_t>(h) + dy - pad, side);
                for (std::size_t w = 0; w < side; ++w) {
                    const std::size_t cw = flip ? side - 1 - w : w;
                    const std::size_t sw = detail::reflect_index(
                        static_cast<std::ptrdiff_t>(cw) + dx - pad, side);
                    oplane[h * side + w] = plane[sh * side + sw];
                }
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic dataset: class-conditional Gaussian blobs over a per-class
// channel-mean signal, linearly separable by channel means.

template <typename T>
Dataset<T> synth_dataset(std::size_t n, int classes, std::uint64_t seed) {
    if (classes < 1) throw ConfigError("synth_dataset needs at least one class");
    if (n < static_cast<std::size_t>(classes))
        throw ConfigError("synth_dataset: n=" + std::to_string(n) + " < classes=" +
                          std::to_string(classes));
    Dataset<T> ds;
    ds.class_count = classes;
    ds.split = Split::train;
    ds.labels.resize(n);
    ds.images = Tensor<T>({n, 3, 32, 32});

    // Channel-mean codebook: lattice points in [0.25, 0.75]^3.
    int lattice = 2;
    while (lattice * lattice * lattice < classes) ++lattice;
    auto channel_mean = [&](int cls, int ch) {
        const int digit = (cls / (ch == 0 ? 1 : ch == 1 ? lattice : lattice * lattice)) % lattice;
        return 0.25 + 0.5 * static_cast<double>(digit) / static_cast<double>(lattice - 1);
    };

    Rng rng(derive_seed(seed, seed_tag::synth, 0));
    T* px = ds.images.data();
    const double noise = 0.05, blob_amp = 0.08, blob_sigma = 3.5;
    for (std::size_t i = 0; i < n; ++i) {
        const int cls = static_cast<int>(i % static_cast<std::size_t>(classes));
        ds.labels[i] = cls;
        const double bx = 8.0 + static_cast<double>(splitmix64(static_cast<std::uint64_t>(cls) + 17) % 16) +
                          (rng.next_double() - 0.5) * 4.0;
        const double by = 8.0 + static_cast<double>(splitmix64(static_cast<std::uint64_t>(cls) + 41) % 16) +
                          (rng.next_double() - 0.5) * 4.0;
        for (int ch = 0; ch < 3; ++ch) {
            const double base = channel_mean(cls, ch);
            T* plane = px + (i * 3 + static_cast<std::size_t>(ch)) * 1024;
            for (int h = 0; h < 32; ++h) {
                for (int w = 0; w < 32; ++w) {
                    const double d2 = (h - by) * (h - by) + (w - bx) * (w - bx);
                    double v = base + blob_amp * std::exp(-d2 / (2.0 * blob_sigma * blob_sigma)) +
                               noise * rng.next_normal();
                    v = std::min(1.0, std::max(0.0, v));
                    plane[h * 32 + w] = static_cast<T>(v);
                }
            }
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Raw tensor file ("WRNT"): 16-byte little-endian header (magic, u32 count,
// u32 class_count, u32 reserved), u16 labels, then f32 image data.

template <typename T>
void write_raw_tensor(const std::filesystem::path& path, const Dataset<T>& ds) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    const char magic[4] = {'W', 'R', 'N', 'T'};
    out.write(magic, 4);
    auto write_u32 = [&](std::uint32_t v) {
        unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 24)};
        out.write(reinterpret_cast<const char*>(b), 4);
    };
    write_u32(static_cast<std::uint32_t>(ds.size()));
    write_u32(static_cast<std::uint32_t>(ds.class_count));
    write_u32(0);
    for (int label : ds.labels) {
        const auto v = static_cast<std::uint16_t>(label);
        unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
        out.write(reinterpret_cast<const char*>(b), 2);
    }
    const T* px = ds.images.data();
    for (std::size_t i = 0; i < ds.size() * kImageDim; ++i) {
        const float f = static_cast<float>(px[i]);
        out.write(reinterpret_cast<const char*>(&f), 4);
    }
    if (!out) throw IoError("write failed for " + path.string());
}

template <typename T>
Dataset<T> read_raw_tensor(const std::filesystem::path& path, Split split) {
    const auto buf = detail::read_file(path);
    if (buf.size() < 16 || std::string(buf.begin(), buf.begin() + 4) != "WRNT")
        throw DataError(path.string() + ": not a WRNT raw tensor file");
    auto read_u32 = [&](std::size_t off) {
        return static_cast<std::uint32_t>(buf[off]) |
               (static_cast<std::uint32_t>(buf[off + 1]) << 8) |
               (static_cast<std::uint32_t>(buf[off + 2]) << 16) |
               (static_cast<std::uint32_t>(buf[off + 3]) << 24);
    };
    const std::size_t count = read_u32(4);
    const int classes = static_cast<int>(read_u32(8));
    const std::size_t need = 16 + count * 2 + count * kImageDim * 4;
    if (buf.size() != need)
        throw DataError(path.string() + ": expected " + std::to_string(need) +
                        " bytes, got " + std::to_string(buf.size()) +
                        " (truncated at byte offset " + std::to_string(buf.size()) + ")");
    Dataset<T> ds;
    ds.split = split;
    ds.class_count = classes;
    ds.labels.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t off = 16 + i * 2;
        ds.labels[i] = static_cast<int>(static_cast<std::uint16_t>(
            buf[off] | (static_cast<std::uint16_t>(buf[off + 1]) << 8)));
        if (ds.labels[i] >= classes)
            throw DataError(path.string() + ": label out of range at record " +
                            std::to_string(i));
    }
    ds.images = Tensor<T>({count, 3, 32, 32});
    T* px = ds.images.data();
    const unsigned char* fp = buf.data() + 16 + count * 2;
    for (std::size_t i = 0; i < count * kImageDim; ++i) {
        float f;
        std::memcpy(&f, fp + i * 4, 4);
        px[i] = static_cast<T>(f);
    }
    return ds;
}

}  // namespace wrn::data
