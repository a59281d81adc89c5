#include "mblm/bench.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>

#include <sys/resource.h>
#include <sys/utsname.h>

#include "json.hpp"
#include "mblm/errors.hpp"
#include "mblm/generate.hpp"
#include "mblm/trainer.hpp"

namespace mblm {

namespace {

struct MeanStddev {
    double mean = 0.0;
    double stddev = 0.0;
};

MeanStddev summarize(const std::vector<double>& xs) {
    MeanStddev out;
    const double n = static_cast<double>(xs.size());
    for (double x : xs) out.mean += x;
    out.mean /= n;
    if (xs.size() > 1) {
        double ss = 0.0;
        for (double x : xs) ss += (x - out.mean) * (x - out.mean);
        out.stddev = std::sqrt(ss / (n - 1.0));
    }
    return out;
}

std::string host_descriptor() {
    utsname u{};
    if (uname(&u) != 0) return "unknown";
    return std::string(u.sysname) + " " + u.release + " " + u.machine;
}

void fill_common(BenchReport& report, const ModelConfig& cfg, const std::string& name,
                 const MemoryEstimate& est) {
    report.config_name = name;
    report.param_count = count_params(cfg).total;
    report.weights_bytes = est.weights_bytes;
    report.kv_cache_bytes = est.kv_cache_bytes;
    report.optimizer_bytes = est.optimizer_bytes;
    report.total_bytes = est.total_bytes;
    report.peak_rss_bytes = peak_rss_bytes();
    report.host = host_descriptor();
    report.scalar_type = "float32";
}

}  // namespace

std::int64_t peak_rss_bytes() {
    rusage usage{};
    if (getrusage(RUSAGE_SELF, &usage) != 0) return 0;
    return static_cast<std::int64_t>(usage.ru_maxrss) * 1024;  // ru_maxrss is in KiB on Linux
}

std::int64_t forward_matmul_flops(const ModelConfig& cfg, std::int64_t tokens) {
    if (tokens < 1) throw ConfigError("forward_matmul_flops: tokens must be positive");
    const std::int64_t t = tokens;
    const std::int64_t m = cfg.d_model;
    const std::int64_t per_layer = 8 * t * m * m        // q, k, v, o projections
                                   + 4 * t * t * m      // scores and context
                                   + 6 * t * m * cfg.d_ff;  // gate, up, down
    return cfg.n_layers * per_layer + 2 * t * m * cfg.vocab_size;
}

BenchReport bench_generate_model(const TransformerModel<float>& model,
                                 const std::string& config_name, std::int64_t prompt_len,
                                 std::int64_t new_tokens, std::int64_t runs, std::uint64_t seed) {
    const ModelConfig& cfg = model.config;
    if (runs < 3) throw ConfigError("bench: need at least 3 runs, got " + std::to_string(runs));
    if (prompt_len < 1 || prompt_len > cfg.context_len) {
        throw ConfigError("bench: prompt_len " + std::to_string(prompt_len) + " outside [1, " +
                          std::to_string(cfg.context_len) + "]");
    }
    if (new_tokens < 1) throw ConfigError("bench: new_tokens must be positive");

    std::vector<TokenId> prompt(static_cast<std::size_t>(prompt_len));
    Rng rng(seed);
    for (auto& id : prompt) {
        id = static_cast<TokenId>(rng.next_below(static_cast<std::uint64_t>(cfg.vocab_size)));
    }
    GenerationConfig gen;
    gen.max_new_tokens = new_tokens;
    gen.temperature = 0.0;

    generate(model, prompt, gen);  // warmup, discarded
    std::vector<double> tps;
    for (std::int64_t r = 0; r < runs; ++r) {
        const GenerationResult result = generate(model, prompt, gen);
        tps.push_back(result.tokens_per_sec());
    }
    const MeanStddev stats = summarize(tps);

    BenchReport report;
    report.mode = "generate";
    // the cache reserves full-context capacity regardless of tokens used
    fill_common(report, cfg, config_name,
                memory_estimate(cfg, sizeof(float), 1, cfg.context_len, false));
    report.runs = runs;
    report.prompt_len = prompt_len;
    report.new_tokens = new_tokens;
    report.tokens_per_sec_mean = stats.mean;
    report.tokens_per_sec_stddev = stats.stddev;
    return report;
}

BenchReport bench_generate(const ModelConfig& cfg, const std::string& config_name,
                           std::int64_t prompt_len, std::int64_t new_tokens, std::int64_t runs,
                           std::uint64_t seed) {
    const TransformerModel<float> model = init_model<float>(cfg, seed);
    return bench_generate_model(model, config_name, prompt_len, new_tokens, runs, seed);
}

BenchReport bench_train_step(const ModelConfig& cfg, const std::string& config_name,
                             std::int64_t batch, std::int64_t runs, std::uint64_t seed) {
    if (runs < 3) throw ConfigError("bench: need at least 3 runs, got " + std::to_string(runs));
    if (batch < 1) throw ConfigError("bench: batch must be positive");

    TransformerModel<float> model = init_model<float>(cfg, seed);
    const std::vector<NamedParam<float>> params = model.params();
    std::vector<Tensor<float>> tensors = model.param_tensors();
    OptimizerState<float> opt = OptimizerState<float>::init(params);
    TrainConfig tc;
    tc.total_steps = runs + 1;
    tc.warmup_steps = 0;
    tc.batch_size = batch;

    Rng rng(seed + 1);
    std::vector<TokenId> ids(static_cast<std::size_t>(batch * (cfg.context_len + 1)));
    for (auto& id : ids) {
        id = static_cast<TokenId>(rng.next_below(static_cast<std::uint64_t>(cfg.vocab_size)));
    }

    auto one_step = [&] {
        Tape<float> tape;
        Tensor<float> loss = next_token_loss(tape, model, ids, batch);
        tape.backward(loss);
        const double norm = global_norm<float>(tensors);
        clip_global_norm(params, tc.clip_norm, norm);
        adamw_step(params, opt, tc, 1e-4);
        zero_grad<float>(tensors);
    };

    one_step();  // warmup, discarded
    std::vector<double> step_ms;
    for (std::int64_t r = 0; r < runs; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        one_step();
        const auto t1 = std::chrono::steady_clock::now();
        step_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    const MeanStddev stats = summarize(step_ms);

    BenchReport report;
    report.mode = "train-step";
    fill_common(report, cfg, config_name, memory_estimate(cfg, sizeof(float), 0, 0, true));
    report.runs = runs;
    report.batch = batch;
    report.step_ms_mean = stats.mean;
    report.step_ms_stddev = stats.stddev;
    return report;
}

std::string to_text(const BenchReport& report) {
    auto line = [](const std::string& label, const std::string& value) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%-22s %s\n", label.c_str(), value.c_str());
        return std::string(buf);
    };
    auto num = [](double v) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.3f", v);
        return std::string(buf);
    };
    std::string out;
    out += line("config", report.config_name);
    out += line("mode", report.mode);
    out += line("scalar type", report.scalar_type);
    out += line("host", report.host);
    out += line("parameters", std::to_string(report.param_count));
    out += line("weights bytes", std::to_string(report.weights_bytes));
    out += line("kv cache bytes", std::to_string(report.kv_cache_bytes));
    out += line("optimizer bytes", std::to_string(report.optimizer_bytes));
    out += line("total bytes", std::to_string(report.total_bytes));
    out += line("peak rss bytes", std::to_string(report.peak_rss_bytes));
    out += line("runs", std::to_string(report.runs));
    if (report.mode == "generate") {
        out += line("prompt length", std::to_string(report.prompt_len));
        out += line("new tokens", std::to_string(report.new_tokens));
        out += line("tokens/sec mean", num(report.tokens_per_sec_mean));
        out += line("tokens/sec stddev", num(report.tokens_per_sec_stddev));
    } else {
        out += line("batch", std::to_string(report.batch));
        out += line("step ms mean", num(report.step_ms_mean));
        out += line("step ms stddev", num(report.step_ms_stddev));
    }
    return out;
}

std::string to_json(const BenchReport& report) {
    nlohmann::json j;
    j["config_name"] = report.config_name;
    j["mode"] = report.mode;
    j["param_count"] = report.param_count;
    j["weights_bytes"] = report.weights_bytes;
    j["kv_cache_bytes"] = report.kv_cache_bytes;
    j["optimizer_bytes"] = report.optimizer_bytes;
    j["total_bytes"] = report.total_bytes;
    j["peak_rss_bytes"] = report.peak_rss_bytes;
    j["runs"] = report.runs;
    j["prompt_len"] = report.prompt_len;
    j["new_tokens"] = report.new_tokens;
    j["batch"] = report.batch;
    j["tokens_per_sec_mean"] = report.tokens_per_sec_mean;
    j["tokens_per_sec_stddev"] = report.tokens_per_sec_stddev;
    j["step_ms_mean"] = report.step_ms_mean;
    j["step_ms_stddev"] = report.step_ms_stddev;
    j["host"] = report.host;
    j["scalar_type"] = report.scalar_type;
    return j.dump(2) + "\n";
}

}  // namespace mblm
