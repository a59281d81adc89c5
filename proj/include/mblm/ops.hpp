#pragma once

#include <limits>

#include "mblm/errors.hpp"
#include "mblm/tensor.hpp"

namespace mblm {

// Differentiable ops over Tensor<S>. Each op validates shapes, computes its
// output eagerly, and (when the tape is recording and any input requires a
// gradient) records a backward rule that accumulates into input gradients.
// Reductions that affect numerics accumulate in double regardless of S.

namespace detail {

template <typename S>
using MatMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename S>
using ConstMatMap = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename S>
bool tracked(const Tape<S>& tape, std::initializer_list<const Tensor<S>*> inputs) {
    if (!tape.recording()) return false;
    for (const Tensor<S>* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

inline void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

/// Walks `out_shape` in row-major order, calling f(out_flat, in_flat) where
/// in_flat advances by in_strides[axis] per step along each output axis.
/// The odometer avoids per-element div/mod.
template <typename F>
void for_each_permuted(const Shape& out_shape, const std::vector<std::int64_t>& in_strides, F&& f) {
    const int nd = static_cast<int>(out_shape.size());
    std::vector<std::int64_t> coord(static_cast<std::size_t>(nd), 0);
    const std::int64_t total = numel_of(out_shape);
    std::int64_t in_flat = 0;
    for (std::int64_t out_flat = 0; out_flat < total; ++out_flat) {
        f(out_flat, in_flat);
        for (int ax = nd - 1; ax >= 0; --ax) {
            in_flat += in_strides[static_cast<std::size_t>(ax)];
            if (++coord[static_cast<std::size_t>(ax)] < out_shape[static_cast<std::size_t>(ax)]) break;
            coord[static_cast<std::size_t>(ax)] = 0;
            in_flat -= in_strides[static_cast<std::size_t>(ax)] * out_shape[static_cast<std::size_t>(ax)];
        }
    }
}

inline std::vector<std::int64_t> row_major_strides(const Shape& shape) {
    std::vector<std::int64_t> strides(shape.size(), 1);
    for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
        strides[static_cast<std::size_t>(i)] =
            strides[static_cast<std::size_t>(i) + 1] * shape[static_cast<std::size_t>(i) + 1];
    }
    return strides;
}

}  // namespace detail

// -------------------- elementwise --------------------

template <typename S>
Tensor<S> add(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
    detail::require(a.shape() == b.shape(),
                    "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<S> out = Tensor<S>::uninit(a.shape());
    const S* pa = a.data().data();
    const S* pb = b.data().data();
    S* po = out.data().data();
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    if (detail::tracked(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape.record(out.storage(), [a = a, b = b, out]() mutable {
            std::span<const S> g = out.grad();
            if (a.requires_grad()) {
                a.ensure_grad();
                std::span<S> ga = a.grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                b.ensure_grad();
                std::span<S> gb = b.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> mul(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
    detail::require(a.shape() == b.shape(),
                    "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<S> out = Tensor<S>::uninit(a.shape());
    const S* pa = a.data().data();
    const S* pb = b.data().data();
    S* po = out.data().data();
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    if (detail::tracked(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape.record(out.storage(), [a = a, b = b, out]() mutable {
            std::span<const S> g = out.grad();
            if (a.requires_grad()) {
                a.ensure_grad();
                std::span<S> ga = a.grad();
                std::span<const S> vb = b.data();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
            }
            if (b.requires_grad()) {
                b.ensure_grad();
                std::span<S> gb = b.grad();
                std::span<const S> va = a.data();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> scale(Tape<S>& tape, const Tensor<S>& a, double c) {
    Tensor<S> out = Tensor<S>::uninit(a.shape());
    const S sc = static_cast<S>(c);
    const S* pa = a.data().data();
    S* po = out.data().data();
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] * sc;
    if (detail::tracked(tape, {&a})) {
        out.set_requires_grad(true);
        tape.record(out.storage(), [a = a, out, sc]() mutable {
            std::span<const S> g = out.grad();
            a.ensure_grad();
            std::span<S> ga = a.grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * sc;
        });
    }
    return out;
}

template <typename S>
Tensor<S> silu(Tape<S>& tape, const Tensor<S>& x) {
    Tensor<S> out = Tensor<S>::uninit(x.shape());
    const S* px = x.data().data();
    S* po = out.data().data();
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) {
        const double v = static_cast<double>(px[i]);
        po[i] = static_cast<S>(v / (1.0 + std::exp(-v)));
    }
    if (detail::tracked(tape, {&x})) {
        out.set_requires_grad(true);
        tape.record(out.storage(), [x = x, out]() mutable {
            std::span<const S> g = out.grad();
            x.ensure_grad();
            std::span<S> gx = x.grad();
            std::span<const S> vx = x.data();
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double v = static_cast<double>(vx[i]);
                const double sig = 1.0 / (1.0 + std::exp(-v));
                gx[i] += g[i] * static_cast<S>(sig * (1.0 + v * (1.0 - sig)));
            }
        });
    }
    return out;
}

// -------------------- shape ops --------------------

template <typename S>
Tensor<S> reshape(Tape<S>& tape, const Tensor<S>& x, Shape new_shape) {
    detail::require(numel_of(new_shape) == x.numel(),
                    "reshape: " + shape_str(x.shape()) + " has " + std::to_string(x.numel()) +
                        " elements, target " + shape_str(new_shape));
    Tensor<S> out = Tensor<S>::uninit(std::move(new_shape));
    std::memcpy(out.data().data(), x.data().data(), sizeof(S) * static_cast<std::size_t>(x.numel()));
    if (detail::tracked(tape, {&x})) {
        out.set_requires_grad(true);
        tape.record(out.storage(), [x = x, out]() mutable {
            std::span<const S> g = out.grad();
            x.ensure_grad();
            std::span<S> gx = x.grad();
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        });
    }
    return out;
}

template <typename S>
Tensor<S> swap_axes(Tape<S>& tape, const Tensor<S>& x, int axis_a, int axis_b) {
    const int nd = x.ndim();
    if (axis_a < 0) axis_a += nd;
    if (axis_b < 0) axis_b += nd;
    detail::require(axis_a >= 0 && axis_a < nd && axis_b >= 0 && axis_b < nd,
                    "swap_axes: axis out of range for rank " + std::to_string(nd));
    Shape out_shape = x.shape();
    std::swap(out_shape[static_cast<std::size_t>(axis_a)], out_shape[static_cast<std::size_t>(axis_b)]);

    std::vector<std::int64_t> in_strides = detail::row_major_strides(x.shape());
    std::swap(in_strides[static_cast<std::size_t>(axis_a)], in_strides[static_cast<std::size_t>(axis_b)]);

    Tensor<S> out = Tensor<S>::uninit(out_shape);
    const S* px = x.data().data();
    S* po = out.data().data();
    detail::for_each_permuted(out_shape, in_strides,
                              [&](std::int64_t o, std::int64_t i) { po[o] = px[i]; });
    if (detail::tracked(tape, {&x})) {
        out.set_requires_grad(true);
        tape.record(out.storage(), [x = x, out, out_shape, in_strides]() mutable {
            std::span<const S> g = out.grad();
            x.ensure_grad();
            std::span<S> gx = x.grad();
            detail::for_each_permuted(out_shape, in_strides,
                                      [&](std::int64_t o, std::int64_t i) { gx[i] += g[o]; });
        });
    }
    return out;
}

/// Swaps the last two axes.
template <typename S>
Tensor<S> transpose(Tape<S>& tape, const Tensor<S>& x) {
    detail::require(x.ndim() >= 2, "transpose: need rank >= 2, got " + shape_str(x.shape()));
    return swap_axes(tape, x, -2, -1);
}

template <typename S>
Tensor<S> concat_lastdim(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
    detail::require(a.ndim() == b.ndim() && a.ndim() >= 1,
                    "concat_lastdim: rank mismatch " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
    for (int i = 0; i < a.ndim() - 1; ++i) {
        detail::require(a.dim(i) == b.dim(i), "concat_lastdim: leading dim mismatch at axis " +
                                                  std::to_string(i));
    }
    const std::int64_t la = a.dim(-1);
    const std::int64_t lb = b.dim(-1);
    Shape out_shape = a.shape();
    out_shape.back() = la + lb;
    Tensor<S> out = Tensor<S>::uninit(out_shape);
    const std::int64_t rows = a.numel() / la;
    const S* pa = a.data().data();
    const S* pb = b.data().data();
    S* po = out.data().data();
    for (std::int64_t r = 0; r < rows; ++r) {
        std::memcpy(po + r * (la + lb), pa + r * la, sizeof(S) * static_cast<std::size_t>(la));
        std::memcpy(po + r * (la + lb) + la, pb + r * lb, sizeof(S) * static_cast<std::size_t>(lb));
    }
    if (detail::tracked(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape.record(out.storage(), [a = a, b = b, out, rows, la, lb]() mutable {
            std::span<const S> g = out.grad();
            if (a.requires_grad()) {
                a.ensure_grad();
                std::span<S> ga = a.grad();
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t i = 0; i < la; ++i) ga[r * la + i] += g[r * (la + lb) + i];
            }
            if (b.requires_grad()) {
                b.ensure_grad();
                std::span<S> gb = b.grad();
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t i = 0; i < lb; ++i) gb[r * lb + i] += g[r * (la + lb) + la + i];
            }
        });
    }
    return out;
}

// -------------------- matmul --------------------

/// Batched matrix product. `a` is [..., p, q]; `b` is either [q, r] (applied
/// to every batch slice of `a`) or [..., q, r] with leading dims equal to
/// `a`'s. Inner products run through Eigen.
template <typename S>
Tensor<S> matmul(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
    detail::require(a.ndim() >= 2, "matmul: lhs rank must be >= 2, got " + shape_str(a.shape()));
    detail::require(b.ndim() == 2 || b.ndim() == a.ndim(),
                    "matmul: rhs must be rank 2 or match lhs rank, got " + shape_str(b.shape()));
    const bool broadcast_rhs = b.ndim() == 2;
    if (!broadcast_rhs) {
        for (int i = 0; i < a.ndim() - 2; ++i) {
            detail::require(a.dim(i) == b.dim(i), "matmul: batch dim mismatch at axis " +
                                                      std::to_string(i));
        }
    }
    const std::int64_t p = a.dim(-2);
    const std::int64_t q = a.dim(-1);
    detail::require(b.dim(-2) == q, "matmul: inner dims " + shape_str(a.shape()) + " x " +
                                        shape_str(b.shape()));
    const std::int64_t r = b.dim(-1);

    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    out_shape.push_back(r);
    Tensor<S> out = Tensor<S>::uninit(out_shape);

    const std::int64_t batch = a.numel() / (p * q);
    const S* pa = a.data().data();
    const S* pb = b.data().data();
    S* po = out.data().data();
    for (std::int64_t i = 0; i < batch; ++i) {
        detail::ConstMatMap<S> A(pa + i * p * q, p, q);
        detail::ConstMatMap<S> B(pb + (broadcast_rhs ? 0 : i * q * r), q, r);
        detail::MatMap<S> C(po + i * p * r, p, r);
        C.noalias() = A * B;
    }

    if (detail::tracked(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape.record(out.storage(), [a = a, b = b, out, p, q, r, batch, broadcast_rhs]() mutable {
            const S* pg = out.grad().data();
            if (a.requires_grad()) {
                a.ensure_grad();
                S* ga = a.grad().data();
                const S* vb = b.data().data();
                for (std::int64_t i = 0; i < batch; ++i) {
                    detail::ConstMatMap<S> G(pg + i * p * r, p, r);
                    detail::ConstMatMap<S> B(vb + (broadcast_rhs ? 0 : i * q * r), q, r);
                    detail::MatMap<S> GA(ga + i * p * q, p, q);
                    GA.noalias() += G * B.transpose();
                }
            }
            if (b.requires_grad()) {
                b.ensure_grad();
                S* gb = b.grad().data();
                const S* va = a.data().data();
                for (std::int64_t i = 0; i < batch; ++i) {
                    detail::ConstMatMap<S> G(pg + i * p * r, p, r);
                    detail::ConstMatMap<S> A(va + i * p * q, p, q);
                    detail::MatMap<S> GB(gb + (broadcast_rhs ? 0 : i * q * r), q, r);
                    GB.noalias() += A.transpose() * G;
                }
            }
        });
    }
    return out;
}

// -------------------- normalization and softmax --------------------

/// Root-mean-square normalization over the last axis with a learned gain:
/// y_i = gain_i * x_i / sqrt(mean(x^2) + eps).
template <typename S>
Tensor<S> rmsnorm(Tape<S>& tape, const Tensor<S>& x, const Tensor<S>& gain, double eps) {
    const std::int64_t m = x.dim(-1);
    detail::require(gain.ndim() == 1 && gain.dim(0) == m,
                    "rmsnorm: gain shape " + shape_str(gain.shape()) + " for feature dim " +
                        std::to_string(m));
    detail::require(eps > 0.0, "rmsnorm: eps must be positive");
    const std::int64_t rows = x.numel() / m;
    Tensor<S> out = Tensor<S>::uninit(x.shape());
    const S* px = x.data().data();
    const S* pgain = gain.data().data();
    S* po = out.data().data();
    auto inv_r = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
    for (std::int64_t row = 0; row < rows; ++row) {
        const S* xr = px + row * m;
        double ms = 0.0;
        for (std::int64_t i = 0; i < m; ++i) ms += static_cast<double>(xr[i]) * static_cast<double>(xr[i]);
        ms /= static_cast<double>(m);
        const double inv = 1.0 / std::sqrt(ms + eps);
        (*inv_r)[static_cast<std::size_t>(row)] = inv;
        S* yr = po + row * m;
        for (std::int64_t i = 0; i < m; ++i)
            yr[i] = static_cast<S>(static_cast<double>(pgain[i]) * static_cast<double>(xr[i]) * inv);
    }
    if (detail::tracked(tape, {&x, &gain})) {
        out.set_requires_grad(true);
        tape.record(out.storage(), [x = x, gain = gain, out, inv_r, rows, m]() mutable {
            const S* pg = out.grad().data();
            const S* px2 = x.data().data();
            const S* pgain2 = gain.data().data();
            const bool want_x = x.requires_grad();
            const bool want_gain = gain.requires_grad();
            if (want_x) x.ensure_grad();
            if (want_gain) gain.ensure_grad();
            S* gx = want_x ? x.grad().data() : nullptr;
            S* ggain = want_gain ? gain.grad().data() : nullptr;
            for (std::int64_t row = 0; row < rows; ++row) {
                const S* xr = px2 + row * m;
                const S* gr = pg + row * m;
                const double inv = (*inv_r)[static_cast<std::size_t>(row)];
                if (want_gain) {
                    for (std::int64_t i = 0; i < m; ++i)
                        ggain[i] += static_cast<S>(static_cast<double>(gr[i]) *
                                                   static_cast<double>(xr[i]) * inv);
                }
                if (want_x) {
                    double dot = 0.0;
                    for (std::int64_t i = 0; i < m; ++i)
                        dot += static_cast<double>(gr[i]) * static_cast<double>(pgain2[i]) *
                               static_cast<double>(xr[i]);
                    const double k = inv * inv * inv * dot / static_cast<double>(m);
                    for (std::int64_t i = 0; i < m; ++i)
                        gx[row * m + i] += static_cast<S>(
                            static_cast<double>(gr[i]) * static_cast<double>(pgain2[i]) * inv -
                            static_cast<double>(xr[i]) * k);
                }
            }
        });
    }
    return out;
}

/// Softmax over the last axis, with max-subtraction for stability.
template <typename S>
Tensor<S> softmax_lastdim(Tape<S>& tape, const Tensor<S>& x) {
    const std::int64_t m = x.dim(-1);
    const std::int64_t rows = x.numel() / m;
    Tensor<S> out = Tensor<S>::uninit(x.shape());
    const S* px = x.data().data();
    S* po = out.data().data();
    for (std::int64_t row = 0; row < rows; ++row) {
        const S* xr = px + row * m;
        S* yr = po + row * m;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::int64_t i = 0; i < m; ++i) mx = std::max(mx, static_cast<double>(xr[i]));
        double sum = 0.0;
        for (std::int64_t i = 0; i < m; ++i) {
            const double e = std::exp(static_cast<double>(xr[i]) - mx);
            yr[i] = static_cast<S>(e);
            sum += e;
        }
        const double inv = 1.0 / sum;
        for (std::int64_t i = 0; i < m; ++i) yr[i] = static_cast<S>(static_cast<double>(yr[i]) * inv);
    }
    if (detail::tracked(tape, {&x})) {
        out.set_requires_grad(true);
        tape.record(out.storage(), [x = x, out, rows, m]() mutable {
            const S* pg = out.grad().data();
            const S* pp = out.data().data();
            x.ensure_grad();
            S* gx = x.grad().data();
            for (std::int64_t row = 0; row < rows; ++row) {
                const S* gr = pg + row * m;
                const S* pr = pp + row * m;
                double dot = 0.0;
                for (std::int64_t i = 0; i < m; ++i)
                    dot += static_cast<double>(gr[i]) * static_cast<double>(pr[i]);
                for (std::int64_t i = 0; i < m; ++i)
                    gx[row * m + i] += static_cast<S>(static_cast<double>(pr[i]) *
                                                      (static_cast<double>(gr[i]) - dot));
            }
        });
    }
    return out;
}

/// Causal softmax over the last axis of [..., t_q, t_k] score tensors.
/// Query row t may attend key columns j <= t + query_offset; the remaining
/// columns come out as exact zeros. query_offset is the position of query
/// row 0 in the key sequence (0 for training, cached length for decode).
template <typename S>
Tensor<S> causal_softmax_lastdim(Tape<S>& tape, const Tensor<S>& x, std::int64_t query_offset) {
    detail::require(x.ndim() >= 2, "causal_softmax_lastdim: need rank >= 2, got " +
                                       shape_str(x.shape()));
    detail::require(query_offset >= 0, "causal_softmax_lastdim: negative query_offset");
    const std::int64_t tk = x.dim(-1);
    const std::int64_t tq = x.dim(-2);
    const std::int64_t rows = x.numel() / (tq * tk);
    Tensor<S> out = Tensor<S>::uninit(x.shape());
    const S* px = x.data().data();
    S* po = out.data().data();
    for (std::int64_t row = 0; row < rows; ++row) {
        for (std::int64_t t = 0; t < tq; ++t) {
            const S* xr = px + (row * tq + t) * tk;
            S* yr = po + (row * tq + t) * tk;
            const std::int64_t allowed = std::min(tk, t + query_offset + 1);
            double mx = -std::numeric_limits<double>::infinity();
            for (std::int64_t j = 0; j < allowed; ++j) mx = std::max(mx, static_cast<double>(xr[j]));
            double sum = 0.0;
            for (std::int64_t j = 0; j < allowed; ++j) {
                const double e = std::exp(static_cast<double>(xr[j]) - mx);
                yr[j] = static_cast<S>(e);
                sum += e;
            }
            const double inv = 1.0 / sum;
            for (std::int64_t j = 0; j < allowed; ++j)
                yr[j] = static_cast<S>(static_cast<double>(yr[j]) * inv);
            for (std::int64_t j = allowed; j < tk; ++j) yr[j] = S(0);
        }
    }
    if (detail::tracked(tape, {&x})) {
        out.set_requires_grad(true);
        tape.record(out.storage(), [x = x, out, rows, tq, tk, query_offset]() mutable {
            const S* pg = out.grad().data();
            const S* pp = out.data().data();
            x.ensure_grad();
            S* gx = x.grad().data();
            for (std::int64_t row = 0; row < rows; ++row) {
                for (std::int64_t t = 0; t < tq; ++t) {
                    const std::int64_t base = (row * tq + t) * tk;
                    const std::int64_t allowed = std::min(tk, t + query_offset + 1);
                    double dot = 0.0;
                    for (std::int64_t j = 0; j < allowed; ++j)
                        dot += static_cast<double>(pg[base + j]) * static_cast<double>(pp[base + j]);
                    for (std::int64_t j = 0; j < allowed; ++j)
                        gx[base + j] += static_cast<S>(static_cast<double>(pp[base + j]) *
                                                       (static_cast<double>(pg[base + j]) - dot));
                }
            }
        });
    }
    return out;
}

// -------------------- embedding and loss --------------------

/// Looks up rows of a [vocab, width] table. The output has shape
/// id_shape + [width]; the backward rule scatter-adds into the table rows
/// in id order, which keeps repeated ids deterministic.
template <typename S>
Tensor<S> embedding_gather(Tape<S>& tape, const Tensor<S>& table, std::span<const TokenId> ids,
                           Shape id_shape) {
    detail::require(table.ndim() == 2, "embedding_gather: table must be rank 2, got " +
                                           shape_str(table.shape()));
    detail::require(numel_of(id_shape) == static_cast<std::int64_t>(ids.size()),
                    "embedding_gather: " + std::to_string(ids.size()) + " ids for shape " +
                        shape_str(id_shape));
    const std::int64_t vocab = table.dim(0);
    const std::int64_t width = table.dim(1);
    for (TokenId id : ids) {
        if (id < 0 || static_cast<std::int64_t>(id) >= vocab) {
            throw std::out_of_range("embedding_gather: id " + std::to_string(id) +
                                    " outside vocab of " + std::to_string(vocab));
        }
    }
    Shape out_shape = std::move(id_shape);
    out_shape.push_back(width);
    Tensor<S> out = Tensor<S>::uninit(std::move(out_shape));
    const S* pt = table.data().data();
    S* po = out.data().data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        std::memcpy(po + static_cast<std::int64_t>(i) * width,
                    pt + static_cast<std::int64_t>(ids[i]) * width,
                    sizeof(S) * static_cast<std::size_t>(width));
    }
    if (detail::tracked(tape, {&table})) {
        out.set_requires_grad(true);
        std::vector<TokenId> ids_copy(ids.begin(), ids.end());
        tape.record(out.storage(), [table = table, out, ids_copy = std::move(ids_copy), width]() mutable {
            const S* pg = out.grad().data();
            table.ensure_grad();
            S* gt = table.grad().data();
            for (std::size_t i = 0; i < ids_copy.size(); ++i) {
                S* row = gt + static_cast<std::int64_t>(ids_copy[i]) * width;
                const S* g = pg + static_cast<std::int64_t>(i) * width;
                for (std::int64_t j = 0; j < width; ++j) row[j] += g[j];
            }
        });
    }
    return out;
}

/// Mean negative log-likelihood of targets under softmax(logits).
/// logits is [n, vocab]; the result is a scalar tensor. Log-sum-exp uses
/// max-subtraction; a non-finite result raises NumericError.
template <typename S>
Tensor<S> cross_entropy(Tape<S>& tape, const Tensor<S>& logits, std::span<const TokenId> targets) {
    detail::require(logits.ndim() == 2, "cross_entropy: logits must be rank 2, got " +
                                            shape_str(logits.shape()));
    const std::int64_t n = logits.dim(0);
    const std::int64_t vocab = logits.dim(1);
    detail::require(n > 0, "cross_entropy: empty batch");
    detail::require(static_cast<std::int64_t>(targets.size()) == n,
                    "cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                        std::to_string(n) + " rows");
    for (TokenId t : targets) {
        if (t < 0 || static_cast<std::int64_t>(t) >= vocab) {
            throw std::out_of_range("cross_entropy: target " + std::to_string(t) +
                                    " outside vocab of " + std::to_string(vocab));
        }
    }
    const S* px = logits.data().data();
    auto lse = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n));
    double total = 0.0;
    for (std::int64_t row = 0; row < n; ++row) {
        const S* xr = px + row * vocab;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::int64_t j = 0; j < vocab; ++j) mx = std::max(mx, static_cast<double>(xr[j]));
        double sum = 0.0;
        for (std::int64_t j = 0; j < vocab; ++j) sum += std::exp(static_cast<double>(xr[j]) - mx);
        const double l = mx + std::log(sum);
        (*lse)[static_cast<std::size_t>(row)] = l;
        total += l - static_cast<double>(xr[targets[static_cast<std::size_t>(row)]]);
    }
    const double mean = total / static_cast<double>(n);
    if (!std::isfinite(mean)) throw NumericError("cross_entropy: non-finite loss");
    Tensor<S> out = Tensor<S>::scalar(static_cast<S>(mean));
    if (detail::tracked(tape, {&logits})) {
        out.set_requires_grad(true);
        std::vector<TokenId> tg(targets.begin(), targets.end());
        tape.record(out.storage(), [logits = logits, out, lse, tg = std::move(tg), n, vocab]() mutable {
            const double gout = static_cast<double>(out.grad()[0]);
            const double coeff = gout / static_cast<double>(n);
            const S* px2 = logits.data().data();
            logits.ensure_grad();
            S* gx = logits.grad().data();
            for (std::int64_t row = 0; row < n; ++row) {
                const S* xr = px2 + row * vocab;
                S* gr = gx + row * vocab;
                const double l = (*lse)[static_cast<std::size_t>(row)];
                for (std::int64_t j = 0; j < vocab; ++j) {
                    double p = std::exp(static_cast<double>(xr[j]) - l);
                    if (j == static_cast<std::int64_t>(tg[static_cast<std::size_t>(row)])) p -= 1.0;
                    gr[j] += static_cast<S>(coeff * p);
                }
            }
        });
    }
    return out;
}

// -------------------- gradient utilities --------------------

/// L2 norm over all parameter gradients, accumulated in double. Parameters
/// without a materialized gradient contribute zero.
template <typename S>
double global_norm(std::span<const Tensor<S>> params) {
    double acc = 0.0;
    for (const Tensor<S>& t : params) {
        if (!t.has_grad()) continue;
        for (S g : t.grad()) acc += static_cast<double>(g) * static_cast<double>(g);
    }
    return std::sqrt(acc);
}

template <typename S>
void zero_grad(std::span<Tensor<S>> params) {
    for (Tensor<S>& t : params) t.zero_grad();
}

}  // namespace mblm
