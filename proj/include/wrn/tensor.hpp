#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "wrn/common.hpp"
#include "wrn/kernels.hpp"

namespace wrn {

template <typename T>
class Tape;

// Dense row-major tensor. Handles share storage (shallow copies); clone()
// makes a deep copy. The gradient buffer is allocated lazily on first
// accumulation and cleared, not freed, by zero_grad().
template <typename T>
class Tensor {
public:
    struct Impl {
        std::vector<std::size_t> shape;
        std::vector<T> data;
        std::vector<T> grad;
        bool requires_grad = false;
        int node_id = -1;
    };

    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape, bool requires_grad = false)
        : impl_(std::make_shared<Impl>()) {
        validate_shape(shape);
        impl_->shape = std::move(shape);
        impl_->data.assign(shape_product(impl_->shape), T(0));
        impl_->requires_grad = requires_grad;
    }

    static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false) {
        return Tensor(std::move(shape), requires_grad);
    }

    static Tensor ones(std::vector<std::size_t> shape, bool requires_grad = false) {
        return full(std::move(shape), T(1), requires_grad);
    }

    static Tensor full(std::vector<std::size_t> shape, T value,
                       bool requires_grad = false) {
        Tensor t(std::move(shape), requires_grad);
        std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
        return t;
    }

    static Tensor from(std::vector<std::size_t> shape, std::vector<T> data,
                       bool requires_grad = false) {
        Tensor t;
        t.impl_ = std::make_shared<Impl>();
        validate_shape(shape);
        if (shape_product(shape) != data.size())
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + format_shape(shape));
        t.impl_->shape = std::move(shape);
        t.impl_->data = std::move(data);
        t.impl_->requires_grad = requires_grad;
        return t;
    }

    bool defined() const { return impl_ != nullptr; }
    const std::vector<std::size_t>& shape() const { return impl_->shape; }
    std::size_t size() const { return impl_->data.size(); }
    std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t rank() const { return impl_->shape.size(); }

    T* data() { return impl_->data.data(); }
    const T* data() const { return impl_->data.data(); }
    std::vector<T>& vec() { return impl_->data; }
    const std::vector<T>& vec() const { return impl_->data; }

    T item() const {
        if (size() != 1)
            throw ShapeError("item() requires a single-element tensor, got shape " +
                             format_shape(shape()));
        return impl_->data[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool rg) { impl_->requires_grad = rg; }

    bool has_grad() const { return !impl_->grad.empty(); }

    // Gradient buffer, allocated (zero-filled) on demand.
    std::vector<T>& grad() {
        if (impl_->grad.empty()) impl_->grad.assign(size(), T(0));
        return impl_->grad;
    }
    const std::vector<T>& grad() const { return impl_->grad; }

    void zero_grad() {
        if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
    }

    void accumulate_grad(const T* g, std::size_t n) {
        if (n != size())
            throw ShapeError("gradient length " + std::to_string(n) +
                             " does not match tensor of " + std::to_string(size()));
        auto& dst = grad();
        T* d = dst.data();
#pragma omp parallel for schedule(static)
        for (std::size_t i = 0; i < n; ++i) d[i] += g[i];
    }

    int node_id() const { return impl_->node_id; }
    void set_node_id(int id) { impl_->node_id = id; }

    Tensor clone() const {
        Tensor t;
        t.impl_ = std::make_shared<Impl>(*impl_);
        t.impl_->node_id = -1;
        return t;
    }

    std::shared_ptr<Impl> impl() const { return impl_; }

private:
    static void validate_shape(const std::vector<std::size_t>& shape) {
        for (std::size_t d : shape)
            if (d == 0) throw ShapeError("zero dimension in shape " + format_shape(shape));
    }

    std::shared_ptr<Impl> impl_;
};

// Reverse-mode tape. Operations append nodes in execution order; backward
// sweeps the whole tape once in reverse. Nodes whose output never received
// a gradient are skipped, so a single reverse pass handles any root.
template <typename T>
class Tape {
public:
    struct Node {
        std::vector<int> inputs;
        int output = -1;
        std::function<void()> backward;
    };

    template <typename Fn>
    int record(const std::vector<Tensor<T>>& inputs, Tensor<T>& output, Fn&& rule) {
        Node node;
        for (const auto& in : inputs) node.inputs.push_back(in.node_id());
        const int id = static_cast<int>(nodes_.size());
        output.set_node_id(id);
        node.output = id;
        node.backward = std::forward<Fn>(rule);
        nodes_.push_back(std::move(node));
        return id;
    }

    void backward(Tensor<T>& root) {
        if (root.size() != 1)
            throw ShapeError("backward root must be scalar-shaped, got " +
                             format_shape(root.shape()));
        if (root.node_id() < 0)
            throw ShapeError("backward root was not recorded on this tape");
        root.grad()[0] += T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
            if (it->backward) it->backward();
    }

    std::size_t size() const { return nodes_.size(); }
    const Node& node(std::size_t i) const { return nodes_[i]; }
    void clear() { nodes_.clear(); }

private:
    std::vector<Node> nodes_;
};

namespace detail {

template <typename T>
bool wants_tape(const Tape<T>* tape, std::initializer_list<bool> rg) {
    if (!tape) return false;
    for (bool b : rg)
        if (b) return true;
    return false;
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + format_shape(a.shape()) +
                         " vs " + format_shape(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reduction operations.

template <typename T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "add");
    Tensor<T> out(a.shape());
    const T* pa = a.data();
    const T* pb = b.data();
    kernels::apply_elementwise(out.data(), out.size(),
                               [&](std::size_t i) { return pa[i] + pb[i]; });
    if (detail::wants_tape(tape, {a.requires_grad(), b.requires_grad()})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        tape->record({a, b}, out, [ai, bi, oi] {
            if (oi->grad.empty()) return;
            const T* g = oi->grad.data();
            const std::size_t n = oi->data.size();
            if (ai->requires_grad) {
                auto& ga = ai->grad;
                if (ga.empty()) ga.assign(n, T(0));
#pragma omp parallel for schedule(static)
                for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
            }
            if (bi->requires_grad) {
                auto& gb = bi->grad;
                if (gb.empty()) gb.assign(n, T(0));
#pragma omp parallel for schedule(static)
                for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> sub(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "sub");
    Tensor<T> out(a.shape());
    const T* pa = a.data();
    const T* pb = b.data();
    kernels::apply_elementwise(out.data(), out.size(),
                               [&](std::size_t i) { return pa[i] - pb[i]; });
    if (detail::wants_tape(tape, {a.requires_grad(), b.requires_grad()})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        tape->record({a, b}, out, [ai, bi, oi] {
            if (oi->grad.empty()) return;
            const T* g = oi->grad.data();
            const std::size_t n = oi->data.size();
            if (ai->requires_grad) {
                auto& ga = ai->grad;
                if (ga.empty()) ga.assign(n, T(0));
#pragma omp parallel for schedule(static)
                for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
            }
            if (bi->requires_grad) {
                auto& gb = bi->grad;
                if (gb.empty()) gb.assign(n, T(0));
#pragma omp parallel for schedule(static)
                for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "mul");
    Tensor<T> out(a.shape());
    const T* pa = a.data();
    const T* pb = b.data();
    kernels::apply_elementwise(out.data(), out.size(),
                               [&](std::size_t i) { return pa[i] * pb[i]; });
    if (detail::wants_tape(tape, {a.requires_grad(), b.requires_grad()})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        tape->record({a, b}, out, [ai, bi, oi] {
            if (oi->grad.empty()) return;
            const T* g = oi->grad.data();
            const std::size_t n = oi->data.size();
            if (ai->requires_grad) {
                auto& ga = ai->grad;
                if (ga.empty()) ga.assign(n, T(0));
                const T* xb = bi->data.data();
#pragma omp parallel for schedule(static)
                for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * xb[i];
            }
            if (bi->requires_grad) {
                auto& gb = bi->grad;
                if (gb.empty()) gb.assign(n, T(0));
                const T* xa = ai->data.data();
#pragma omp parallel for schedule(static)
                for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * xa[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> scale(Tape<T>* tape, const Tensor<T>& a, T factor) {
    Tensor<T> out(a.shape());
    const T* pa = a.data();
    kernels::apply_elementwise(out.data(), out.size(),
                               [&](std::size_t i) { return pa[i] * factor; });
    if (detail::wants_tape(tape, {a.requires_grad()})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), oi = out.impl();
        tape->record({a}, out, [ai, oi, factor] {
            if (oi->grad.empty() || !ai->requires_grad) return;
            const T* g = oi->grad.data();
            const std::size_t n = oi->data.size();
            auto& ga = ai->grad;
            if (ga.empty()) ga.assign(n, T(0));
#pragma omp parallel for schedule(static)
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * factor;
        });
    }
    return out;
}

template <typename T>
Tensor<T> sum(Tape<T>* tape, const Tensor<T>& a) {
    Tensor<T> out({1});
    out.data()[0] = kernels::sum(a.data(), a.size());
    if (detail::wants_tape(tape, {a.requires_grad()})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), oi = out.impl();
        tape->record({a}, out, [ai, oi] {
            if (oi->grad.empty() || !ai->requires_grad) return;
            const T g = oi->grad[0];
            auto& ga = ai->grad;
            const std::size_t n = ai->data.size();
            if (ga.empty()) ga.assign(n, T(0));
#pragma omp parallel for schedule(static)
            for (std::size_t i = 0; i < n; ++i) ga[i] += g;
        });
    }
    return out;
}

// Mean over the listed axes; reduced dimensions are kept with size 1.
template <typename T>
Tensor<T> mean_over(Tape<T>* tape, const Tensor<T>& a, const std::vector<int>& axes) {
    const std::size_t rank = a.rank();
    std::vector<bool> reduce(rank, false);
    for (int ax : axes) {
        if (ax < 0 || static_cast<std::size_t>(ax) >= rank)
            throw ShapeError("mean_over: axis " + std::to_string(ax) +
                             " out of range for shape " + format_shape(a.shape()));
        reduce[static_cast<std::size_t>(ax)] = true;
    }
    std::vector<std::size_t> out_shape(rank);
    std::size_t count = 1;
    for (std::size_t d = 0; d < rank; ++d) {
        out_shape[d] = reduce[d] ? 1 : a.dim(d);
        if (reduce[d]) count *= a.dim(d);
    }
    Tensor<T> out(out_shape);

    // Strides of input and of the (collapsed) output.
    std::vector<std::size_t> in_stride(rank, 1), out_stride(rank, 1);
    for (std::size_t d = rank; d-- > 1;) {
        in_stride[d - 1] = in_stride[d] * a.dim(d);
        out_stride[d - 1] = out_stride[d] * out_shape[d];
    }
    const T* pa = a.data();
    T* po = out.data();
    std::fill(po, po + out.size(), T(0));
    // Serial scan in index order keeps the reduction order fixed.
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t rem = i, oidx = 0;
        for (std::size_t d = 0; d < rank; ++d) {
            const std::size_t coord = rem / in_stride[d];
            rem %= in_stride[d];
            if (!reduce[d]) oidx += coord * out_stride[d];
        }
        po[oidx] += pa[i];
    }
    const T inv = T(1) / static_cast<T>(count);
    for (std::size_t i = 0; i < out.size(); ++i) po[i] *= inv;

    if (detail::wants_tape(tape, {a.requires_grad()})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), oi = out.impl();
        tape->record({a}, out, [ai, oi, reduce, in_stride, out_stride, inv, rank] {
            if (oi->grad.empty() || !ai->requires_grad) return;
            const T* g = oi->grad.data();
            auto& ga = ai->grad;
            const std::size_t n = ai->data.size();
            if (ga.empty()) ga.assign(n, T(0));
#pragma omp parallel for schedule(static)
            for (std::size_t i = 0; i < n; ++i) {
                std::size_t rem = i, oidx = 0;
                for (std::size_t d = 0; d < rank; ++d) {
                    const std::size_t coord = rem / in_stride[d];
                    rem %= in_stride[d];
                    if (!reduce[d]) oidx += coord * out_stride[d];
                }
                ga[i] += g[oidx] * inv;
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> matmul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul requires rank-2 tensors, got " +
                         format_shape(a.shape()) + " and " + format_shape(b.shape()));
    if (a.dim(1) != b.dim(0))
        throw ShapeError("matmul: inner dimensions disagree, " +
                         format_shape(a.shape()) + " x " + format_shape(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<T> out({m, n});
    kernels::gemm_nn(m, n, k, a.data(), b.data(), out.data(), false);
    if (detail::wants_tape(tape, {a.requires_grad(), b.requires_grad()})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        tape->record({a, b}, out, [ai, bi, oi, m, n, k] {
            if (oi->grad.empty()) return;
            const T* g = oi->grad.data();
            if (ai->requires_grad) {
                auto& ga = ai->grad;
                if (ga.empty()) ga.assign(m * k, T(0));
                kernels::gemm_nt(m, k, n, g, bi->data.data(), ga.data(), true);
            }
            if (bi->requires_grad) {
                auto& gb = bi->grad;
                if (gb.empty()) gb.assign(k * n, T(0));
                kernels::gemm_tn(k, n, m, ai->data.data(), g, gb.data(), true);
            }
        });
    }
    return out;
}

// Copy-based reshape; equal element counts required.
template <typename T>
Tensor<T> reshape(Tape<T>* tape, const Tensor<T>& a, std::vector<std::size_t> shape) {
    if (shape_product(shape) != a.size())
        throw ShapeError("reshape: cannot view " + format_shape(a.shape()) + " as " +
                         format_shape(shape));
    Tensor<T> out = Tensor<T>::from(std::move(shape), a.vec());
    if (detail::wants_tape(tape, {a.requires_grad()})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), oi = out.impl();
        tape->record({a}, out, [ai, oi] {
            if (oi->grad.empty() || !ai->requires_grad) return;
            const T* g = oi->grad.data();
            const std::size_t n = oi->data.size();
            auto& ga = ai->grad;
            if (ga.empty()) ga.assign(n, T(0));
#pragma omp parallel for schedule(static)
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
        });
    }
    return out;
}

}  // namespace wrn
