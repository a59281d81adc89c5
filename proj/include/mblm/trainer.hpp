#pragma once

#include <cmath>
#include <functional>

#include "mblm/data.hpp"
#include "mblm/model.hpp"

namespace mblm {

/// Optimization recipe: AdamW with decoupled weight decay, linear warmup
/// into a cosine decay, and global-norm gradient clipping.
struct TrainConfig {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double adam_eps = 1e-8;
    double eta_max = 3e-4;
    double eta_min = 3e-5;
    std::int64_t warmup_steps = 2000;
    std::int64_t total_steps = 0;
    double weight_decay = 0.1;
    double clip_norm = 1.0;
    std::int64_t batch_size = 0;
    std::int64_t checkpoint_interval_tokens = 3'300'000'000;
    std::uint64_t seed = 0;
};

std::vector<std::string> validate(const TrainConfig& cfg);

/// Learning rate for update `step` (1-based; step 0 is the warmup origin).
/// Linear from 0 to eta_max over warmup_steps, then cosine from eta_max
/// down to eta_min at total_steps.
double lr_at(const TrainConfig& cfg, std::int64_t step);

/// First and second Adam moments, one slot per parameter tensor in
/// registry order. A shared feed-forward block therefore carries exactly
/// one set of moments.
template <typename S>
struct OptimizerState {
    struct Slot {
        Buffer<S> m;
        Buffer<S> v;
    };
    std::vector<Slot> slots;
    std::int64_t step = 0;

    static OptimizerState init(const std::vector<NamedParam<S>>& params) {
        OptimizerState st;
        st.slots.reserve(params.size());
        for (const auto& p : params) {
            Slot slot;
            slot.m = Buffer<S>::zeros(p.tensor.numel());
            slot.v = Buffer<S>::zeros(p.tensor.numel());
            st.slots.push_back(std::move(slot));
        }
        return st;
    }
};

/// Scales every gradient by clip_norm / norm when the global norm exceeds
/// clip_norm; returns the factor applied (1 when no clipping happened).
/// Pass a precomputed norm to skip the extra pass.
template <typename S>
double clip_global_norm(const std::vector<NamedParam<S>>& params, double clip_norm,
                        double precomputed_norm = -1.0) {
    double norm = precomputed_norm;
    if (norm < 0.0) {
        double acc = 0.0;
        for (const auto& p : params) {
            if (!p.tensor.has_grad()) continue;
            for (S g : p.tensor.grad()) acc += static_cast<double>(g) * static_cast<double>(g);
        }
        norm = std::sqrt(acc);
    }
    if (norm <= clip_norm || norm == 0.0) return 1.0;
    const double factor = clip_norm / norm;
    const S f = static_cast<S>(factor);
    for (const auto& p : params) {
        if (!p.tensor.has_grad()) continue;
        for (S& g : Tensor<S>(p.tensor).grad()) g *= f;
    }
    return factor;
}

/// One AdamW update over all parameters. Decoupled weight decay applies
/// only to slots flagged for decay (the 2-D projection matrices).
template <typename S>
void adamw_step(const std::vector<NamedParam<S>>& params, OptimizerState<S>& state,
                const TrainConfig& cfg, double lr) {
    if (params.size() != state.slots.size()) {
        throw std::invalid_argument("adamw_step: optimizer state does not match parameter set");
    }
    state.step += 1;
    const double b1 = cfg.beta1;
    const double b2 = cfg.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const NamedParam<S>& p = params[i];
        if (!p.tensor.has_grad()) {
            throw std::invalid_argument("adamw_step: parameter \"" + p.name +
                                        "\" has no gradient");
        }
        typename OptimizerState<S>::Slot& slot = state.slots[i];
        if (slot.m.size() != p.tensor.numel()) {
            throw std::invalid_argument("adamw_step: moment shape mismatch for \"" + p.name +
                                        "\"");
        }
        const double decay = p.decay ? cfg.weight_decay : 0.0;
        std::span<S> w = Tensor<S>(p.tensor).data();
        std::span<const S> g = p.tensor.grad();
        S* m = slot.m.data();
        S* v = slot.v.data();
        for (std::size_t e = 0; e < w.size(); ++e) {
            const double ge = static_cast<double>(g[e]);
            const double me = b1 * static_cast<double>(m[e]) + (1.0 - b1) * ge;
            const double ve = b2 * static_cast<double>(v[e]) + (1.0 - b2) * ge * ge;
            m[e] = static_cast<S>(me);
            v[e] = static_cast<S>(ve);
            const double mhat = me / bc1;
            const double vhat = ve / bc2;
            const double we = static_cast<double>(w[e]);
            w[e] = static_cast<S>(we - lr * (mhat / (std::sqrt(vhat) + cfg.adam_eps) +
                                             decay * we));
        }
    }
}

// -------------------- training loop --------------------

struct StepMetrics {
    std::int64_t step = 0;
    double loss = 0.0;
    double lr = 0.0;
    double grad_norm = 0.0;  // before clipping
    std::int64_t tokens_seen = 0;
    double wall_ms = 0.0;
};

using MetricsSink = std::function<void(const StepMetrics&)>;

std::string metrics_to_json_line(const StepMetrics& m);

struct TrainResult {
    std::int64_t final_step = 0;
    std::int64_t tokens_seen = 0;
    double final_loss = 0.0;
    std::vector<std::string> checkpoints;  // paths, final one last
};

/// Runs updates start_step+1 .. total_steps. Each step draws a batch,
/// computes the next-token loss, backpropagates, clips, applies AdamW at
/// lr_at(step), and reports metrics. A checkpoint lands in checkpoint_dir
/// whenever tokens_seen crosses a multiple of checkpoint_interval_tokens,
/// plus once at completion; an empty dir disables writing. A non-finite
/// loss aborts with the failing step in the message.
TrainResult train(TransformerModel<float>& model, OptimizerState<float>& opt, BatchIterator& data,
                  const TrainConfig& cfg, const MetricsSink& sink,
                  const std::string& checkpoint_dir, std::int64_t start_step = 0,
                  std::int64_t start_tokens = 0);

}  // namespace mblm
