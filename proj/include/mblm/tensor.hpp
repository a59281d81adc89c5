#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace mblm {

using TokenId = std::int32_t;
using Shape = std::vector<std::int64_t>;

inline std::int64_t numel_of(const Shape& shape) {
    std::int64_t n = 1;
    for (std::int64_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

/// Contiguous scalar storage without value-initialization. Weight tensors of
/// the full-size presets are allocated through this, so untouched pages cost
/// no physical memory until they are filled.
template <typename S>
class Buffer {
public:
    Buffer() = default;
    explicit Buffer(std::int64_t n)
        : data_(n > 0 ? new S[static_cast<std::size_t>(n)] : nullptr), size_(n) {}

    static Buffer zeros(std::int64_t n) {
        Buffer b(n);
        b.fill(S(0));
        return b;
    }

    S* data() { return data_.get(); }
    const S* data() const { return data_.get(); }
    std::int64_t size() const { return size_; }
    bool empty() const { return size_ == 0; }

    std::span<S> span() { return {data_.get(), static_cast<std::size_t>(size_)}; }
    std::span<const S> span() const { return {data_.get(), static_cast<std::size_t>(size_)}; }

    void fill(S v) { std::fill_n(data_.get(), size_, v); }
    void release() {
        data_.reset();
        size_ = 0;
    }

private:
    std::unique_ptr<S[]> data_;
    std::int64_t size_ = 0;
};

template <typename S>
struct TensorStorage {
    Shape shape;
    Buffer<S> values;
    Buffer<S> grad;  // materialized lazily during backward
    bool requires_grad = false;

    std::int64_t numel() const { return values.size(); }
    bool has_grad() const { return !grad.empty(); }
    void ensure_grad() {
        if (grad.empty()) grad = Buffer<S>::zeros(values.size());
    }
};

/// Dense row-major tensor handle. Copies are shallow (shared storage);
/// use clone() for a deep copy. One tensor and its tape are confined to a
/// single logical thread.
template <typename S>
class Tensor {
public:
    using Scalar = S;

    Tensor() = default;

    /// Allocates without writing; contents are unspecified until filled.
    static Tensor uninit(Shape shape) {
        auto st = std::make_shared<TensorStorage<S>>();
        st->values = Buffer<S>(numel_of(shape));
        st->shape = std::move(shape);
        return Tensor(std::move(st));
    }

    static Tensor zeros(Shape shape) {
        Tensor t = uninit(std::move(shape));
        t.storage_->values.fill(S(0));
        return t;
    }

    static Tensor full(Shape shape, S v) {
        Tensor t = uninit(std::move(shape));
        t.storage_->values.fill(v);
        return t;
    }

    static Tensor from_data(Shape shape, std::initializer_list<S> values) {
        return from_vector(std::move(shape), std::vector<S>(values));
    }

    static Tensor from_vector(Shape shape, const std::vector<S>& values) {
        if (numel_of(shape) != static_cast<std::int64_t>(values.size())) {
            throw std::invalid_argument("from_vector: " + std::to_string(values.size()) +
                                        " values for shape " + shape_str(shape));
        }
        Tensor t = uninit(std::move(shape));
        std::copy(values.begin(), values.end(), t.data().begin());
        return t;
    }

    static Tensor scalar(S v) { return full({}, v); }

    bool defined() const { return storage_ != nullptr; }
    const Shape& shape() const { return storage_->shape; }
    int ndim() const { return static_cast<int>(storage_->shape.size()); }
    std::int64_t dim(int i) const {
        if (i < 0) i += ndim();
        return storage_->shape[static_cast<std::size_t>(i)];
    }
    std::int64_t numel() const { return storage_->numel(); }

    std::span<S> data() { return storage_->values.span(); }
    std::span<const S> data() const { return storage_->values.span(); }

    S& at(std::initializer_list<std::int64_t> idx) {
        return storage_->values.data()[flat_index(idx)];
    }
    S at(std::initializer_list<std::int64_t> idx) const {
        return storage_->values.data()[flat_index(idx)];
    }

    bool requires_grad() const { return storage_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        storage_->requires_grad = v;
        return *this;
    }

    bool has_grad() const { return storage_->has_grad(); }
    void ensure_grad() { storage_->ensure_grad(); }
    std::span<S> grad() { return storage_->grad.span(); }
    std::span<const S> grad() const { return storage_->grad.span(); }
    void zero_grad() {
        if (storage_->has_grad()) storage_->grad.fill(S(0));
    }
    void drop_grad() { storage_->grad.release(); }

    Tensor clone() const {
        Tensor t = uninit(storage_->shape);
        std::copy(data().begin(), data().end(), t.data().begin());
        t.storage_->requires_grad = storage_->requires_grad;
        return t;
    }

    bool all_finite() const {
        for (S v : data()) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }

    const std::shared_ptr<TensorStorage<S>>& storage() const { return storage_; }
    bool same_storage(const Tensor& other) const { return storage_ == other.storage_; }

private:
    explicit Tensor(std::shared_ptr<TensorStorage<S>> st) : storage_(std::move(st)) {}

    std::int64_t flat_index(std::initializer_list<std::int64_t> idx) const {
        const Shape& sh = storage_->shape;
        if (idx.size() != sh.size()) throw std::invalid_argument("at(): rank mismatch");
        std::int64_t flat = 0;
        std::size_t k = 0;
        for (std::int64_t i : idx) {
            flat = flat * sh[k] + i;
            ++k;
        }
        return flat;
    }

    std::shared_ptr<TensorStorage<S>> storage_;
};

// -------------------- tape --------------------

/// Reverse-mode tape. Nodes are appended in execution order, which is a
/// topological order of the computation graph; backward() replays them in
/// reverse exactly once, accumulating (+=) across fan-out. A node whose
/// output never received a gradient (a branch that does not reach the loss)
/// is skipped. Gradients of intermediate activations are released as soon
/// as their producing node has consumed them.
template <typename S>
class Tape {
public:
    bool recording() const { return recording_; }
    void set_recording(bool v) { recording_ = v; }

    void record(std::shared_ptr<TensorStorage<S>> output, std::function<void()> rule) {
        nodes_.push_back(Node{std::move(output), std::move(rule)});
    }

    void backward(const Tensor<S>& loss) {
        if (loss.numel() != 1) {
            throw std::invalid_argument("backward requires a scalar loss, got shape " +
                                        shape_str(loss.shape()));
        }
        loss.storage()->ensure_grad();
        loss.storage()->grad.data()[0] = S(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (it->output->has_grad()) {
                it->rule();
                // leaves are never op outputs, so this gradient has been fully
                // consumed by now; values stay (earlier rules may need them)
                it->output->grad.release();
            }
            it->rule = nullptr;  // frees captured activations progressively
        }
        nodes_.clear();
    }

    void clear() { nodes_.clear(); }
    std::size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        std::shared_ptr<TensorStorage<S>> output;
        std::function<void()> rule;
    };

    std::vector<Node> nodes_;
    bool recording_ = true;
};

}  // namespace mblm
