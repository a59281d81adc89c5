#pragma once

#include "mblm/config.hpp"
#include "mblm/errors.hpp"
#include "mblm/ops.hpp"
#include "mblm/rng.hpp"
#include "mblm/tensor.hpp"

namespace mblm {

// -------------------- rotary embedding --------------------

/// Precomputed cos/sin tables for rotary position embedding, shaped
/// [max_pos, head_dim / 2]. Pair i of a head vector rotates by
/// pos * theta^(-2i / head_dim).
template <typename S>
struct RopeTable {
    Tensor<S> cos;
    Tensor<S> sin;

    static RopeTable build(std::int64_t max_pos, std::int64_t head_dim, double theta) {
        if (head_dim % 2 != 0) {
            throw std::invalid_argument("rope: head_dim must be even, got " +
                                        std::to_string(head_dim));
        }
        const std::int64_t half = head_dim / 2;
        RopeTable t;
        t.cos = Tensor<S>::uninit({max_pos, half});
        t.sin = Tensor<S>::uninit({max_pos, half});
        S* pc = t.cos.data().data();
        S* ps = t.sin.data().data();
        for (std::int64_t pos = 0; pos < max_pos; ++pos) {
            for (std::int64_t i = 0; i < half; ++i) {
                const double freq =
                    std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
                const double angle = static_cast<double>(pos) * freq;
                pc[pos * half + i] = static_cast<S>(std::cos(angle));
                ps[pos * half + i] = static_cast<S>(std::sin(angle));
            }
        }
        return t;
    }

    std::int64_t max_pos() const { return cos.dim(0); }
    std::int64_t half_dim() const { return cos.dim(1); }
};

/// Rotates (2i, 2i+1) pairs of the last axis of [batch, heads, seq, head_dim]
/// by the table angles for positions[t]. The backward rule applies the
/// inverse rotation to the incoming gradient.
template <typename S>
Tensor<S> rope_apply(Tape<S>& tape, const Tensor<S>& x, const RopeTable<S>& rope,
                     std::span<const std::int64_t> positions) {
    detail::require(x.ndim() == 4, "rope_apply: expected [batch, heads, seq, head_dim], got " +
                                       shape_str(x.shape()));
    const std::int64_t seq = x.dim(2);
    const std::int64_t d = x.dim(3);
    detail::require(static_cast<std::int64_t>(positions.size()) == seq,
                    "rope_apply: " + std::to_string(positions.size()) + " positions for seq " +
                        std::to_string(seq));
    detail::require(d == 2 * rope.half_dim(), "rope_apply: head_dim " + std::to_string(d) +
                                                  " does not match table");
    for (std::int64_t p : positions) {
        if (p < 0 || p >= rope.max_pos()) {
            throw std::out_of_range("rope_apply: position " + std::to_string(p) +
                                    " outside table of " + std::to_string(rope.max_pos()));
        }
    }
    const std::int64_t half = d / 2;
    const std::int64_t rows = x.numel() / (seq * d);  // batch * heads
    Tensor<S> out = Tensor<S>::uninit(x.shape());
    const S* px = x.data().data();
    const S* pc = rope.cos.data().data();
    const S* ps = rope.sin.data().data();
    S* po = out.data().data();
    for (std::int64_t r = 0; r < rows; ++r) {
        for (std::int64_t t = 0; t < seq; ++t) {
            const std::int64_t base = (r * seq + t) * d;
            const std::int64_t tab = positions[static_cast<std::size_t>(t)] * half;
            for (std::int64_t i = 0; i < half; ++i) {
                const S c = pc[tab + i];
                const S s = ps[tab + i];
                const S x0 = px[base + 2 * i];
                const S x1 = px[base + 2 * i + 1];
                po[base + 2 * i] = x0 * c - x1 * s;
                po[base + 2 * i + 1] = x0 * s + x1 * c;
            }
        }
    }
    if (detail::tracked(tape, {&x})) {
        out.set_requires_grad(true);
        std::vector<std::int64_t> pos_copy(positions.begin(), positions.end());
        Tensor<S> cos_t = rope.cos;
        Tensor<S> sin_t = rope.sin;
        tape.record(out.storage(),
                    [x = x, out, cos_t, sin_t, pos_copy = std::move(pos_copy), rows, seq, d]() mutable {
                        const std::int64_t half = d / 2;
                        const S* pg = out.grad().data();
                        const S* pc2 = cos_t.data().data();
                        const S* ps2 = sin_t.data().data();
                        x.ensure_grad();
                        S* gx = x.grad().data();
                        for (std::int64_t r = 0; r < rows; ++r) {
                            for (std::int64_t t = 0; t < seq; ++t) {
                                const std::int64_t base = (r * seq + t) * d;
                                const std::int64_t tab = pos_copy[static_cast<std::size_t>(t)] * half;
                                for (std::int64_t i = 0; i < half; ++i) {
                                    const S c = pc2[tab + i];
                                    const S s = ps2[tab + i];
                                    const S g0 = pg[base + 2 * i];
                                    const S g1 = pg[base + 2 * i + 1];
                                    gx[base + 2 * i] += g0 * c + g1 * s;
                                    gx[base + 2 * i + 1] += -g0 * s + g1 * c;
                                }
                            }
                        }
                    });
    }
    return out;
}

// -------------------- weights --------------------

template <typename S>
struct FfnWeights {
    Tensor<S> w_gate;  // [d_model, d_ff]
    Tensor<S> w_up;    // [d_model, d_ff]
    Tensor<S> w_down;  // [d_ff, d_model]
};

template <typename S>
struct LayerWeights {
    Tensor<S> attn_norm_gain;  // [d_model]
    Tensor<S> w_q, w_k, w_v, w_o;  // [d_model, d_model]
    Tensor<S> ffn_norm_gain;   // [d_model]
    std::shared_ptr<FfnWeights<S>> ffn;  // one instance per layer, or one for all
};

template <typename S>
struct NamedParam {
    std::string name;
    Tensor<S> tensor;
    bool decay;  // whether decoupled weight decay applies
};

template <typename S>
struct TransformerModel {
    ModelConfig config;
    Tensor<S> tok_embedding;  // [vocab, d_model]
    std::vector<LayerWeights<S>> layers;
    std::shared_ptr<FfnWeights<S>> shared_ffn;  // set iff config.ffn_mode == shared
    Tensor<S> final_norm_gain;  // [d_model]
    Tensor<S> lm_head;          // [d_model, vocab]
    RopeTable<S> rope;

    /// Allocates every weight tensor for the config without writing values.
    /// Pages stay virtual until filled, so even the largest presets can be
    /// laid out cheaply for inspection or loading.
    static TransformerModel build(const ModelConfig& cfg) {
        const auto problems = validate(cfg);
        if (!problems.empty()) {
            std::string msg = "invalid model config:";
            for (const auto& p : problems) msg += "\n  " + p;
            throw ConfigError(msg);
        }
        const std::int64_t m = cfg.d_model;
        const std::int64_t ff = cfg.d_ff;
        TransformerModel model;
        model.config = cfg;
        model.tok_embedding = Tensor<S>::uninit({cfg.vocab_size, m}).set_requires_grad(true);
        auto make_ffn = [&] {
            auto f = std::make_shared<FfnWeights<S>>();
            f->w_gate = Tensor<S>::uninit({m, ff}).set_requires_grad(true);
            f->w_up = Tensor<S>::uninit({m, ff}).set_requires_grad(true);
            f->w_down = Tensor<S>::uninit({ff, m}).set_requires_grad(true);
            return f;
        };
        if (cfg.ffn_mode == FfnMode::shared) model.shared_ffn = make_ffn();
        model.layers.resize(static_cast<std::size_t>(cfg.n_layers));
        for (auto& layer : model.layers) {
            layer.attn_norm_gain = Tensor<S>::uninit({m}).set_requires_grad(true);
            layer.w_q = Tensor<S>::uninit({m, m}).set_requires_grad(true);
            layer.w_k = Tensor<S>::uninit({m, m}).set_requires_grad(true);
            layer.w_v = Tensor<S>::uninit({m, m}).set_requires_grad(true);
            layer.w_o = Tensor<S>::uninit({m, m}).set_requires_grad(true);
            layer.ffn_norm_gain = Tensor<S>::uninit({m}).set_requires_grad(true);
            layer.ffn = model.shared_ffn ? model.shared_ffn : make_ffn();
        }
        model.final_norm_gain = Tensor<S>::uninit({m}).set_requires_grad(true);
        model.lm_head = Tensor<S>::uninit({m, cfg.vocab_size}).set_requires_grad(true);
        model.rope = RopeTable<S>::build(cfg.context_len, cfg.head_dim(), cfg.rope_theta);
        return model;
    }

    /// Distinct trainable tensors in a fixed order. A shared feed-forward
    /// block appears exactly once, after the per-layer entries.
    std::vector<NamedParam<S>> params() const {
        std::vector<NamedParam<S>> out;
        out.push_back({"tok_embedding", tok_embedding, false});
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const std::string p = "layers." + std::to_string(i) + ".";
            const LayerWeights<S>& layer = layers[i];
            out.push_back({p + "attn_norm", layer.attn_norm_gain, false});
            out.push_back({p + "w_q", layer.w_q, true});
            out.push_back({p + "w_k", layer.w_k, true});
            out.push_back({p + "w_v", layer.w_v, true});
            out.push_back({p + "w_o", layer.w_o, true});
            out.push_back({p + "ffn_norm", layer.ffn_norm_gain, false});
            if (!shared_ffn) {
                out.push_back({p + "ffn.w_gate", layer.ffn->w_gate, true});
                out.push_back({p + "ffn.w_up", layer.ffn->w_up, true});
                out.push_back({p + "ffn.w_down", layer.ffn->w_down, true});
            }
        }
        if (shared_ffn) {
            out.push_back({"shared_ffn.w_gate", shared_ffn->w_gate, true});
            out.push_back({"shared_ffn.w_up", shared_ffn->w_up, true});
            out.push_back({"shared_ffn.w_down", shared_ffn->w_down, true});
        }
        out.push_back({"final_norm", final_norm_gain, false});
        out.push_back({"lm_head", lm_head, false});
        return out;
    }

    std::vector<Tensor<S>> param_tensors() const {
        std::vector<Tensor<S>> out;
        for (const auto& p : params()) out.push_back(p.tensor);
        return out;
    }
};

namespace detail {

template <typename S>
void fill_normal(Tensor<S> t, std::uint64_t seed, std::uint64_t stream, double stddev) {
    Rng rng(mix_seed(seed, stream));
    for (S& v : t.data()) v = static_cast<S>(rng.next_normal() * stddev);
}

}  // namespace detail

/// Builds a model and fills it with the standard init: matrices i.i.d.
/// normal(0, 0.02^2), the residual-writing projections (w_o, ffn w_down)
/// additionally scaled by 1/sqrt(2 * n_layers), norm gains at one. Each
/// tensor draws from its own seed stream, so the result is reproducible
/// for a given (config, seed) regardless of fill order.
template <typename S>
TransformerModel<S> init_model(const ModelConfig& cfg, std::uint64_t seed) {
    TransformerModel<S> model = TransformerModel<S>::build(cfg);
    const double base_std = 0.02;
    const double resid_std = base_std / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
    std::uint64_t stream = 0;
    detail::fill_normal(model.tok_embedding, seed, stream++, base_std);
    auto fill_ffn = [&](FfnWeights<S>& f) {
        detail::fill_normal(f.w_gate, seed, stream++, base_std);
        detail::fill_normal(f.w_up, seed, stream++, base_std);
        detail::fill_normal(f.w_down, seed, stream++, resid_std);
    };
    for (auto& layer : model.layers) {
        layer.attn_norm_gain.storage()->values.fill(S(1));
        detail::fill_normal(layer.w_q, seed, stream++, base_std);
        detail::fill_normal(layer.w_k, seed, stream++, base_std);
        detail::fill_normal(layer.w_v, seed, stream++, base_std);
        detail::fill_normal(layer.w_o, seed, stream++, resid_std);
        layer.ffn_norm_gain.storage()->values.fill(S(1));
        if (!model.shared_ffn) fill_ffn(*layer.ffn);
    }
    if (model.shared_ffn) fill_ffn(*model.shared_ffn);
    model.final_norm_gain.storage()->values.fill(S(1));
    detail::fill_normal(model.lm_head, seed, stream++, base_std);
    return model;
}

// -------------------- forward passes --------------------

/// Gated feed-forward block: down(silu(x w_gate) * (x w_up)).
template <typename S>
Tensor<S> ffn_forward(Tape<S>& tape, const FfnWeights<S>& ffn, const Tensor<S>& x) {
    Tensor<S> gated = silu(tape, matmul(tape, x, ffn.w_gate));
    Tensor<S> up = matmul(tape, x, ffn.w_up);
    return matmul(tape, mul(tape, gated, up), ffn.w_down);
}

/// Multi-head causal self-attention over x [batch, seq, d_model] with rotary
/// positions. Queries and keys rotate by positions[t]; each query row attends
/// only to itself and earlier rows of x.
template <typename S>
Tensor<S> attention_forward(Tape<S>& tape, const LayerWeights<S>& layer, const Tensor<S>& x,
                            const RopeTable<S>& rope, std::span<const std::int64_t> positions,
                            std::int64_t n_heads) {
    const std::int64_t b = x.dim(0);
    const std::int64_t t = x.dim(1);
    const std::int64_t m = x.dim(2);
    const std::int64_t d = m / n_heads;
    auto split_heads = [&](const Tensor<S>& proj) {
        return swap_axes(tape, reshape(tape, proj, {b, t, n_heads, d}), 1, 2);
    };
    Tensor<S> q = rope_apply(tape, split_heads(matmul(tape, x, layer.w_q)), rope, positions);
    Tensor<S> k = rope_apply(tape, split_heads(matmul(tape, x, layer.w_k)), rope, positions);
    Tensor<S> v = split_heads(matmul(tape, x, layer.w_v));
    Tensor<S> scores = scale(tape, matmul(tape, q, transpose(tape, k)),
                             1.0 / std::sqrt(static_cast<double>(d)));
    // query row i sits at row i of this block, so the causal window needs no
    // offset even when positions themselves start elsewhere
    Tensor<S> probs = causal_softmax_lastdim(tape, scores, 0);
    Tensor<S> ctx = matmul(tape, probs, v);
    Tensor<S> merged = reshape(tape, swap_axes(tape, ctx, 1, 2), {b, t, m});
    return matmul(tape, merged, layer.w_o);
}

/// Full forward pass: embeddings, pre-norm residual layers, final norm,
/// vocabulary projection. ids is row-major [batch, seq]; the result is
/// logits [batch, seq, vocab].
template <typename S>
Tensor<S> forward(Tape<S>& tape, const TransformerModel<S>& model, std::span<const TokenId> ids,
                  std::int64_t batch, std::int64_t seq) {
    const ModelConfig& cfg = model.config;
    if (batch < 1 || seq < 1) throw ConfigError("forward: batch and seq must be positive");
    if (seq > cfg.context_len) {
        throw ConfigError("forward: seq " + std::to_string(seq) + " exceeds context_len " +
                          std::to_string(cfg.context_len));
    }
    detail::require(static_cast<std::int64_t>(ids.size()) == batch * seq,
                    "forward: " + std::to_string(ids.size()) + " ids for batch " +
                        std::to_string(batch) + " x seq " + std::to_string(seq));
    std::vector<std::int64_t> positions(static_cast<std::size_t>(seq));
    std::iota(positions.begin(), positions.end(), 0);

    Tensor<S> h = embedding_gather(tape, model.tok_embedding, ids, {batch, seq});
    for (const LayerWeights<S>& layer : model.layers) {
        Tensor<S> a = rmsnorm(tape, h, layer.attn_norm_gain, cfg.rmsnorm_eps);
        h = add(tape, h, attention_forward(tape, layer, a, model.rope, positions, cfg.n_heads));
        Tensor<S> f = rmsnorm(tape, h, layer.ffn_norm_gain, cfg.rmsnorm_eps);
        h = add(tape, h, ffn_forward(tape, *layer.ffn, f));
    }
    Tensor<S> normed = rmsnorm(tape, h, model.final_norm_gain, cfg.rmsnorm_eps);
    return matmul(tape, normed, model.lm_head);
}

/// Mean next-token cross-entropy over a packed sample batch. ids is
/// row-major [batch, context_len + 1]; column j is the input at position j
/// and the target for position j-1.
template <typename S>
Tensor<S> next_token_loss(Tape<S>& tape, const TransformerModel<S>& model,
                          std::span<const TokenId> ids, std::int64_t batch) {
    const std::int64_t c = model.config.context_len;
    detail::require(batch >= 1, "next_token_loss: batch must be positive");
    detail::require(static_cast<std::int64_t>(ids.size()) == batch * (c + 1),
                    "next_token_loss: sample width must be context_len + 1");
    std::vector<TokenId> inputs(static_cast<std::size_t>(batch * c));
    std::vector<TokenId> targets(static_cast<std::size_t>(batch * c));
    for (std::int64_t b = 0; b < batch; ++b) {
        const TokenId* row = ids.data() + b * (c + 1);
        std::copy(row, row + c, inputs.data() + b * c);
        std::copy(row + 1, row + c + 1, targets.data() + b * c);
    }
    Tensor<S> logits = forward(tape, model, inputs, batch, c);
    Tensor<S> flat = reshape(tape, logits, {batch * c, model.config.vocab_size});
    return cross_entropy(tape, flat, targets);
}

}  // namespace mblm
