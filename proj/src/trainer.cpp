#include "mblm/trainer.hpp"

#include <chrono>
#include <filesystem>

#include "json.hpp"
#include "mblm/checkpoint.hpp"
#include "mblm/errors.hpp"
#include "mblm/ops.hpp"

namespace mblm {

std::vector<std::string> validate(const TrainConfig& cfg) {
    std::vector<std::string> problems;
    auto bad = [&](const std::string& msg) { problems.push_back(msg); };
    if (!(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0)) bad("beta1 must lie in [0, 1)");
    if (!(cfg.beta2 >= 0.0 && cfg.beta2 < 1.0)) bad("beta2 must lie in [0, 1)");
    if (!(cfg.adam_eps > 0.0)) bad("adam_eps must be positive");
    if (!(cfg.eta_max > 0.0)) bad("eta_max must be positive");
    if (!(cfg.eta_min > 0.0)) bad("eta_min must be positive");
    if (cfg.eta_min > cfg.eta_max) bad("eta_min must not exceed eta_max");
    if (cfg.warmup_steps < 0) bad("warmup_steps must be non-negative");
    if (cfg.total_steps <= 0) bad("total_steps must be positive");
    if (cfg.warmup_steps >= cfg.total_steps) bad("warmup_steps must be below total_steps");
    if (cfg.weight_decay < 0.0) bad("weight_decay must be non-negative");
    if (!(cfg.clip_norm > 0.0)) bad("clip_norm must be positive");
    if (cfg.batch_size <= 0) bad("batch_size must be positive");
    if (cfg.checkpoint_interval_tokens <= 0) bad("checkpoint_interval_tokens must be positive");
    return problems;
}

double lr_at(const TrainConfig& cfg, std::int64_t step) {
    if (step < 0 || step > cfg.total_steps) {
        throw std::out_of_range("lr_at: step " + std::to_string(step) + " outside [0, " +
                                std::to_string(cfg.total_steps) + "]");
    }
    if (step < cfg.warmup_steps) {
        return cfg.eta_max * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    }
    const double progress = static_cast<double>(step - cfg.warmup_steps) /
                            static_cast<double>(cfg.total_steps - cfg.warmup_steps);
    constexpr double pi = 3.14159265358979323846;
    return cfg.eta_min + 0.5 * (cfg.eta_max - cfg.eta_min) * (1.0 + std::cos(pi * progress));
}

std::string metrics_to_json_line(const StepMetrics& m) {
    nlohmann::json j;
    j["step"] = m.step;
    j["loss"] = m.loss;
    j["lr"] = m.lr;
    j["grad_norm"] = m.grad_norm;
    j["tokens_seen"] = m.tokens_seen;
    j["wall_ms"] = m.wall_ms;
    return j.dump();
}

TrainResult train(TransformerModel<float>& model, OptimizerState<float>& opt, BatchIterator& data,
                  const TrainConfig& cfg, const MetricsSink& sink,
                  const std::string& checkpoint_dir, std::int64_t start_step,
                  std::int64_t start_tokens) {
    if (auto problems = validate(cfg); !problems.empty()) {
        std::string msg = "invalid training configuration:";
        for (const auto& p : problems) msg += "\n  - " + p;
        throw ConfigError(msg);
    }
    if (start_step < 0 || start_step > cfg.total_steps) {
        throw ConfigError("resume step " + std::to_string(start_step) + " outside [0, " +
                          std::to_string(cfg.total_steps) + "]");
    }
    if (data.sample_width() != model.config.context_len + 1) {
        throw ConfigError("samples are " + std::to_string(data.sample_width()) +
                          " ids wide but context_len " +
                          std::to_string(model.config.context_len) + " needs " +
                          std::to_string(model.config.context_len + 1));
    }
    if (data.batch_size() != cfg.batch_size) {
        throw ConfigError("batch iterator yields " + std::to_string(data.batch_size()) +
                          " rows but batch_size is " + std::to_string(cfg.batch_size));
    }

    std::vector<NamedParam<float>> params = model.params();
    if (opt.slots.size() != params.size()) {
        throw ConfigError("optimizer holds " + std::to_string(opt.slots.size()) +
                          " slots for " + std::to_string(params.size()) + " parameters");
    }
    if (opt.step != start_step) {
        throw ConfigError("optimizer step " + std::to_string(opt.step) +
                          " does not match resume step " + std::to_string(start_step));
    }
    std::vector<Tensor<float>> tensors = model.param_tensors();

    const std::int64_t tokens_per_step = cfg.batch_size * model.config.context_len;
    const std::int64_t interval = cfg.checkpoint_interval_tokens;

    TrainResult result;
    result.tokens_seen = start_tokens;
    result.final_loss = std::numeric_limits<double>::quiet_NaN();

    auto save = [&](std::int64_t step, const std::string& name) {
        if (checkpoint_dir.empty()) return;
        std::filesystem::create_directories(checkpoint_dir);
        const std::string path = (std::filesystem::path(checkpoint_dir) / name).string();
        save_checkpoint(path, model, &opt, step, result.tokens_seen,
                        cursor_to_json(data.cursor()));
        result.checkpoints.push_back(path);
    };

    for (std::int64_t step = start_step + 1; step <= cfg.total_steps; ++step) {
        const auto t0 = std::chrono::steady_clock::now();
        BatchIterator::Batch batch = data.next();

        Tape<float> tape;
        Tensor<float> loss;
        try {
            loss = next_token_loss(tape, model, batch.ids, batch.rows);
        } catch (const NumericError& e) {
            throw NumericError("step " + std::to_string(step) + ": " + e.what());
        }
        const double loss_value = static_cast<double>(loss.data()[0]);
        tape.backward(loss);

        const double grad_norm = global_norm<float>(tensors);
        if (!std::isfinite(grad_norm)) {
            throw NumericError("step " + std::to_string(step) + ": non-finite gradient norm");
        }
        clip_global_norm(params, cfg.clip_norm, grad_norm);

        const double lr = lr_at(cfg, step);
        adamw_step(params, opt, cfg, lr);
        zero_grad<float>(tensors);

        const std::int64_t tokens_before = result.tokens_seen;
        result.tokens_seen += tokens_per_step;
        result.final_step = step;
        result.final_loss = loss_value;
        const auto t1 = std::chrono::steady_clock::now();

        if (sink) {
            StepMetrics m;
            m.step = step;
            m.loss = loss_value;
            m.lr = lr;
            m.grad_norm = grad_norm;
            m.tokens_seen = result.tokens_seen;
            m.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
            sink(m);
        }
        if (result.tokens_seen / interval > tokens_before / interval) {
            save(step, "checkpoint-step-" + std::to_string(step) + ".mblm");
        }
    }

    if (result.final_step == 0) result.final_step = start_step;
    save(result.final_step, "checkpoint-final.mblm");
    return result;
}

}  // namespace mblm
