#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "wrn/arch.hpp"
#include "wrn/common.hpp"

namespace wrn::bench {

struct BenchSpec {
    std::vector<arch::NetConfig> configs;
    int batch_size = 32;
    int warmup_iters = 3;
    int timed_iters = 10;  // must be >= 3; the report is the median
    int input_channels = 3;
    int input_side = 32;
    std::uint64_t seed = 1;
};

struct BenchRow {
    std::string notation;
    std::int64_t params = 0;
    std::int64_t macs = 0;
    double fwd_ms = 0.0;
    double fwd_bwd_ms = 0.0;
    std::string host;
    std::string error;  // non-empty when the config failed to build/run
};

// Logical core count plus a fixed-size matmul throughput probe, so rows
// from different machines are never silently comparable.
std::string host_fingerprint();

double median(std::vector<double> samples);

// Calls fn warmup+timed times; returns the median milliseconds of the
// timed calls only.
double timed_median_ms(const std::function<void()>& fn, int warmup, int timed);

// Builds each config, times forward and forward+backward on a random batch.
// A failing config produces an error row; remaining rows still run.
std::vector<BenchRow> run_bench(const BenchSpec& spec);

void emit_csv(const std::vector<BenchRow>& rows, const std::string& path);

// Minimal CSV reader shared by the bench and describe table formats: no
// quoting, one record per line.
std::vector<std::vector<std::string>> read_csv(const std::string& path);

std::vector<BenchRow> rows_from_csv(const std::string& path);

}  // namespace wrn::bench
