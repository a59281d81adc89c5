#pragma once

#include <string>

#include "mblm/config.hpp"
#include "mblm/model.hpp"

namespace mblm {

/// Throughput and memory summary for one configuration and mode. Memory
/// fields are analytic (they restate memory_estimate); peak RSS is what
/// the OS accounted for this process and is best-effort only.
struct BenchReport {
    std::string config_name;
    std::string mode;  // "generate" or "train-step"
    std::int64_t param_count = 0;

    std::int64_t weights_bytes = 0;
    std::int64_t kv_cache_bytes = 0;
    std::int64_t optimizer_bytes = 0;
    std::int64_t total_bytes = 0;
    std::int64_t peak_rss_bytes = 0;

    std::int64_t runs = 0;
    std::int64_t prompt_len = 0;
    std::int64_t new_tokens = 0;
    std::int64_t batch = 0;

    double tokens_per_sec_mean = 0.0;
    double tokens_per_sec_stddev = 0.0;
    double step_ms_mean = 0.0;
    double step_ms_stddev = 0.0;

    std::string host;
    std::string scalar_type;
};

/// Peak resident set size of this process, in bytes (0 if unavailable).
std::int64_t peak_rss_bytes();

/// Analytic matmul work for one forward pass over `tokens` positions,
/// counting 2*m*n*k per product. Depends only on the dimensions, so
/// shared and dedicated feed-forward modes score identically.
std::int64_t forward_matmul_flops(const ModelConfig& cfg, std::int64_t tokens);

/// Times greedy generation on a randomly initialized model: one discarded
/// warmup pass, then `runs` measured passes (runs must be at least 3).
BenchReport bench_generate(const ModelConfig& cfg, const std::string& config_name,
                           std::int64_t prompt_len, std::int64_t new_tokens, std::int64_t runs,
                           std::uint64_t seed);

/// Same measurement against an existing model (e.g. one loaded from a
/// checkpoint).
BenchReport bench_generate_model(const TransformerModel<float>& model,
                                 const std::string& config_name, std::int64_t prompt_len,
                                 std::int64_t new_tokens, std::int64_t runs, std::uint64_t seed);

/// Times forward + backward + optimizer update on a synthetic batch: one
/// discarded warmup step, then `runs` measured steps (runs must be at
/// least 3).
BenchReport bench_train_step(const ModelConfig& cfg, const std::string& config_name,
                             std::int64_t batch, std::int64_t runs, std::uint64_t seed);

std::string to_text(const BenchReport& report);
std::string to_json(const BenchReport& report);

}  // namespace mblm
