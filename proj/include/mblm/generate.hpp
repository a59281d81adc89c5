#pragma once

#include <algorithm>
#include <chrono>
#include <numeric>

#include "mblm/model.hpp"
#include "mblm/rng.hpp"

namespace mblm {

// Incremental decoding. These kernels run tape-free over plain buffers and
// share nothing with the training forward pass beyond the weights, which
// lets the tests cross-check the two routes against each other.

/// Per-layer key/value slabs of shape [heads, capacity, head_dim]. The
/// slabs are allocated up front (untouched pages stay virtual) and filled
/// left to right; positions below cached_len are valid. All layers advance
/// in lockstep.
template <typename S>
struct KvCache {
    struct LayerSlab {
        Tensor<S> k;
        Tensor<S> v;
    };
    std::vector<LayerSlab> layers;
    std::int64_t capacity = 0;
    std::int64_t cached_len = 0;

    static KvCache reserve(const ModelConfig& cfg, std::int64_t capacity) {
        if (capacity < 1 || capacity > cfg.context_len) {
            throw std::out_of_range("kv cache capacity " + std::to_string(capacity) +
                                    " outside [1, " + std::to_string(cfg.context_len) + "]");
        }
        KvCache cache;
        cache.capacity = capacity;
        cache.layers.resize(static_cast<std::size_t>(cfg.n_layers));
        for (auto& slab : cache.layers) {
            slab.k = Tensor<S>::uninit({cfg.n_heads, capacity, cfg.head_dim()});
            slab.v = Tensor<S>::uninit({cfg.n_heads, capacity, cfg.head_dim()});
        }
        return cache;
    }

    /// 2 * n_layers * capacity * d_model scalars.
    std::int64_t memory_bytes() const {
        std::int64_t scalars = 0;
        for (const auto& slab : layers) scalars += slab.k.numel() + slab.v.numel();
        return scalars * static_cast<std::int64_t>(sizeof(S));
    }
};

namespace detail {

template <typename S>
using DenseMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Row-wise rmsnorm with the same double-precision statistics as the
/// differentiable op.
template <typename S>
DenseMat<S> rmsnorm_rows(const DenseMat<S>& x, const Tensor<S>& gain, double eps) {
    const Eigen::Index m = x.cols();
    DenseMat<S> out(x.rows(), m);
    const S* pg = gain.data().data();
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        double ms = 0.0;
        for (Eigen::Index c = 0; c < m; ++c) {
            ms += static_cast<double>(x(r, c)) * static_cast<double>(x(r, c));
        }
        const double inv = 1.0 / std::sqrt(ms / static_cast<double>(m) + eps);
        for (Eigen::Index c = 0; c < m; ++c) {
            out(r, c) =
                static_cast<S>(static_cast<double>(pg[c]) * static_cast<double>(x(r, c)) * inv);
        }
    }
    return out;
}

/// Rotates every head's (2i, 2i+1) pairs of one [n_heads * head_dim] row
/// in place, using the table angles for position pos.
template <typename S>
void rope_rotate_row(S* row, const RopeTable<S>& rope, std::int64_t pos, std::int64_t n_heads,
                     std::int64_t head_dim) {
    const std::int64_t half = head_dim / 2;
    const S* pc = rope.cos.data().data() + pos * half;
    const S* ps = rope.sin.data().data() + pos * half;
    for (std::int64_t h = 0; h < n_heads; ++h) {
        S* head = row + h * head_dim;
        for (std::int64_t i = 0; i < half; ++i) {
            const S c = pc[i];
            const S s = ps[i];
            const S x0 = head[2 * i];
            const S x1 = head[2 * i + 1];
            head[2 * i] = x0 * c - x1 * s;
            head[2 * i + 1] = x0 * s + x1 * c;
        }
    }
}

/// In-place softmax over row[0..len) with double accumulators.
template <typename S>
void softmax_row(S* row, std::int64_t len) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::int64_t j = 0; j < len; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double sum = 0.0;
    for (std::int64_t j = 0; j < len; ++j) {
        const double e = std::exp(static_cast<double>(row[j]) - mx);
        row[j] = static_cast<S>(e);
        sum += e;
    }
    const double inv = 1.0 / sum;
    for (std::int64_t j = 0; j < len; ++j) {
        row[j] = static_cast<S>(static_cast<double>(row[j]) * inv);
    }
}

inline void check_token_ids(std::span<const TokenId> ids, std::int64_t vocab) {
    for (TokenId id : ids) {
        if (id < 0 || static_cast<std::int64_t>(id) >= vocab) {
            throw std::out_of_range("token id " + std::to_string(id) + " outside vocab of " +
                                    std::to_string(vocab));
        }
    }
}

/// Runs rows [first_pos, first_pos + x.rows()) through every layer,
/// appending rotated K and V to the cache, and returns the activations.
/// Works for both the multi-row prefill and the single-row decode step.
template <typename S>
DenseMat<S> cached_layers_forward(const TransformerModel<S>& model, KvCache<S>& cache,
                                  DenseMat<S> x, std::int64_t first_pos) {
    const ModelConfig& cfg = model.config;
    const std::int64_t m = cfg.d_model;
    const std::int64_t heads = cfg.n_heads;
    const std::int64_t d = cfg.head_dim();
    const Eigen::Index t = x.rows();
    const std::int64_t visible = first_pos + t;  // cache rows each new row may attend to
    const S inv_sqrt_d = static_cast<S>(1.0 / std::sqrt(static_cast<double>(d)));

    for (std::size_t li = 0; li < model.layers.size(); ++li) {
        const LayerWeights<S>& layer = model.layers[li];
        typename KvCache<S>::LayerSlab& slab = cache.layers[li];
        S* k_slab = slab.k.data().data();
        S* v_slab = slab.v.data().data();

        const DenseMat<S> a = rmsnorm_rows(x, layer.attn_norm_gain, cfg.rmsnorm_eps);
        ConstMatMap<S> wq(layer.w_q.data().data(), m, m);
        ConstMatMap<S> wk(layer.w_k.data().data(), m, m);
        ConstMatMap<S> wv(layer.w_v.data().data(), m, m);
        DenseMat<S> q = a * wq;
        DenseMat<S> k = a * wk;
        DenseMat<S> v = a * wv;
        for (Eigen::Index r = 0; r < t; ++r) {
            rope_rotate_row(q.row(r).data(), model.rope, first_pos + r, heads, d);
            rope_rotate_row(k.row(r).data(), model.rope, first_pos + r, heads, d);
            for (std::int64_t h = 0; h < heads; ++h) {
                const std::int64_t dst = (h * cache.capacity + first_pos + r) * d;
                std::memcpy(k_slab + dst, k.row(r).data() + h * d,
                            sizeof(S) * static_cast<std::size_t>(d));
                std::memcpy(v_slab + dst, v.row(r).data() + h * d,
                            sizeof(S) * static_cast<std::size_t>(d));
            }
        }

        DenseMat<S> ctx(t, m);
        for (std::int64_t h = 0; h < heads; ++h) {
            ConstMatMap<S> kh(k_slab + h * cache.capacity * d, visible, d);
            ConstMatMap<S> vh(v_slab + h * cache.capacity * d, visible, d);
            DenseMat<S> scores = (q.middleCols(h * d, d) * kh.transpose()) * inv_sqrt_d;
            for (Eigen::Index r = 0; r < t; ++r) {
                softmax_row(scores.row(r).data(), first_pos + r + 1);
                scores.row(r).tail(visible - (first_pos + r + 1)).setZero();
            }
            ctx.middleCols(h * d, d).noalias() = scores * vh;
        }
        ConstMatMap<S> wo(layer.w_o.data().data(), m, m);
        x += ctx * wo;

        const DenseMat<S> f = rmsnorm_rows(x, layer.ffn_norm_gain, cfg.rmsnorm_eps);
        ConstMatMap<S> wg(layer.ffn->w_gate.data().data(), m, cfg.d_ff);
        ConstMatMap<S> wu(layer.ffn->w_up.data().data(), m, cfg.d_ff);
        ConstMatMap<S> wd(layer.ffn->w_down.data().data(), cfg.d_ff, m);
        DenseMat<S> gate = f * wg;
        for (Eigen::Index i = 0; i < gate.size(); ++i) {
            const double val = static_cast<double>(gate.data()[i]);
            gate.data()[i] = static_cast<S>(val / (1.0 + std::exp(-val)));
        }
        const DenseMat<S> up = f * wu;
        x += gate.cwiseProduct(up) * wd;
    }
    return x;
}

/// Final norm and vocabulary projection for the last row only.
template <typename S>
std::vector<S> project_last_row(const TransformerModel<S>& model, const DenseMat<S>& x) {
    const ModelConfig& cfg = model.config;
    DenseMat<S> last = x.row(x.rows() - 1);
    last = rmsnorm_rows(last, model.final_norm_gain, cfg.rmsnorm_eps);
    ConstMatMap<S> head(model.lm_head.data().data(), cfg.d_model, cfg.vocab_size);
    const DenseMat<S> logits = last * head;
    return {logits.data(), logits.data() + cfg.vocab_size};
}

}  // namespace detail

template <typename S>
struct PrefillResult {
    KvCache<S> cache;
    std::vector<S> last_logits;  // [vocab] for the final prompt position
};

/// Full pass over the prompt, filling a context_len-capacity cache and
/// returning the logits that predict the token after the prompt.
template <typename S>
PrefillResult<S> prefill(const TransformerModel<S>& model, std::span<const TokenId> prompt) {
    const ModelConfig& cfg = model.config;
    const std::int64_t t = static_cast<std::int64_t>(prompt.size());
    if (t < 1 || t > cfg.context_len) {
        throw std::out_of_range("prefill: prompt length " + std::to_string(t) + " outside [1, " +
                                std::to_string(cfg.context_len) + "]");
    }
    detail::check_token_ids(prompt, cfg.vocab_size);

    PrefillResult<S> result;
    result.cache = KvCache<S>::reserve(cfg, cfg.context_len);
    detail::DenseMat<S> x(t, cfg.d_model);
    const S* table = model.tok_embedding.data().data();
    for (std::int64_t r = 0; r < t; ++r) {
        std::memcpy(x.row(r).data(), table + static_cast<std::int64_t>(prompt[r]) * cfg.d_model,
                    sizeof(S) * static_cast<std::size_t>(cfg.d_model));
    }
    x = detail::cached_layers_forward(model, result.cache, std::move(x), 0);
    result.cache.cached_len = t;
    result.last_logits = detail::project_last_row(model, x);
    return result;
}

/// One-token forward at rotary position cached_len; appends the token's
/// K and V and returns logits for the next position.
template <typename S>
std::vector<S> decode_step(const TransformerModel<S>& model, KvCache<S>& cache, TokenId token) {
    const ModelConfig& cfg = model.config;
    if (cache.cached_len >= cache.capacity) {
        throw std::out_of_range("decode_step: cache full at " + std::to_string(cache.capacity) +
                                " positions");
    }
    detail::check_token_ids(std::span<const TokenId>(&token, 1), cfg.vocab_size);

    detail::DenseMat<S> x(1, cfg.d_model);
    std::memcpy(x.data(), model.tok_embedding.data().data() +
                              static_cast<std::int64_t>(token) * cfg.d_model,
                sizeof(S) * static_cast<std::size_t>(cfg.d_model));
    x = detail::cached_layers_forward(model, cache, std::move(x), cache.cached_len);
    cache.cached_len += 1;
    return detail::project_last_row(model, x);
}

// -------------------- sampling --------------------

struct GenerationConfig {
    std::int64_t max_new_tokens = 0;
    double temperature = 1.0;  // 0 means greedy
    std::int64_t top_k = 0;    // 0 disables top-k truncation
    double top_p = 1.0;        // nucleus mass in (0, 1]
    std::uint64_t seed = 0;
    std::vector<TokenId> stop_ids;
};

/// Draws one token. Greedy at temperature 0 (ties go to the lowest id);
/// otherwise softmax at the given temperature, truncated by top_k first
/// and top_p second, renormalizing after each cut.
template <typename S>
TokenId sample(std::span<const S> logits, const GenerationConfig& gen, Rng& rng) {
    if (logits.empty()) throw std::invalid_argument("sample: empty logits");
    if (gen.temperature < 0.0) throw ConfigError("temperature must be non-negative");
    if (gen.top_k < 0) throw ConfigError("top_k must be non-negative");
    if (gen.top_p <= 0.0 || gen.top_p > 1.0) throw ConfigError("top_p must lie in (0, 1]");
    const std::int64_t vocab = static_cast<std::int64_t>(logits.size());

    if (gen.temperature == 0.0) {
        std::int64_t best = 0;
        for (std::int64_t i = 1; i < vocab; ++i) {
            if (static_cast<double>(logits[static_cast<std::size_t>(i)]) >
                static_cast<double>(logits[static_cast<std::size_t>(best)])) {
                best = i;
            }
        }
        return static_cast<TokenId>(best);
    }

    std::vector<double> prob(static_cast<std::size_t>(vocab));
    double mx = -std::numeric_limits<double>::infinity();
    for (std::int64_t i = 0; i < vocab; ++i) {
        prob[static_cast<std::size_t>(i)] =
            static_cast<double>(logits[static_cast<std::size_t>(i)]) / gen.temperature;
        mx = std::max(mx, prob[static_cast<std::size_t>(i)]);
    }
    double sum = 0.0;
    for (double& p : prob) {
        p = std::exp(p - mx);
        sum += p;
    }
    for (double& p : prob) p /= sum;

    std::vector<std::int64_t> order(static_cast<std::size_t>(vocab));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
        const double pa = prob[static_cast<std::size_t>(a)];
        const double pb = prob[static_cast<std::size_t>(b)];
        return pa != pb ? pa > pb : a < b;
    });

    std::int64_t kept = vocab;
    if (gen.top_k > 0) kept = std::min(kept, gen.top_k);
    double mass = 0.0;
    for (std::int64_t i = 0; i < kept; ++i) mass += prob[static_cast<std::size_t>(order[i])];
    if (gen.top_p < 1.0) {
        double cum = 0.0;
        std::int64_t nucleus = kept;
        for (std::int64_t i = 0; i < kept; ++i) {
            cum += prob[static_cast<std::size_t>(order[i])] / mass;
            if (cum >= gen.top_p) {
                nucleus = i + 1;
                break;
            }
        }
        kept = nucleus;
        mass = 0.0;
        for (std::int64_t i = 0; i < kept; ++i) mass += prob[static_cast<std::size_t>(order[i])];
    }

    const double u = rng.next_double() * mass;
    double acc = 0.0;
    for (std::int64_t i = 0; i < kept; ++i) {
        acc += prob[static_cast<std::size_t>(order[i])];
        if (u < acc) return static_cast<TokenId>(order[i]);
    }
    return static_cast<TokenId>(order[kept - 1]);
}

// -------------------- generation loop --------------------

struct GenerationResult {
    std::vector<TokenId> tokens;       // continuation only, prompt excluded
    std::vector<double> latency_ms;    // one entry per emitted token
    double tokens_per_sec() const {
        const double total = std::accumulate(latency_ms.begin(), latency_ms.end(), 0.0);
        return total > 0.0 ? static_cast<double>(tokens.size()) / (total / 1000.0) : 0.0;
    }
};

/// Prefill, then alternate sample and decode_step until max_new_tokens
/// tokens exist, a stop id is drawn (the stop id itself is not emitted),
/// or the cache has no room to extend further.
template <typename S>
GenerationResult generate(const TransformerModel<S>& model, std::span<const TokenId> prompt,
                          const GenerationConfig& gen) {
    if (gen.max_new_tokens < 0) throw ConfigError("max_new_tokens must be non-negative");
    PrefillResult<S> pre = prefill(model, prompt);
    KvCache<S>& cache = pre.cache;
    std::vector<S> logits = std::move(pre.last_logits);
    Rng rng(gen.seed);

    GenerationResult out;
    while (static_cast<std::int64_t>(out.tokens.size()) < gen.max_new_tokens) {
        const auto t0 = std::chrono::steady_clock::now();
        const TokenId tok = sample<S>(logits, gen, rng);
        if (std::find(gen.stop_ids.begin(), gen.stop_ids.end(), tok) != gen.stop_ids.end()) {
            break;
        }
        out.tokens.push_back(tok);
        const bool wants_more = static_cast<std::int64_t>(out.tokens.size()) < gen.max_new_tokens;
        const bool can_extend = cache.cached_len < cache.capacity;
        if (wants_more && can_extend) logits = decode_step(model, cache, tok);
        out.latency_ms.push_back(
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                .count());
        if (!(wants_more && can_extend)) break;
    }
    return out;
}

}  // namespace mblm
