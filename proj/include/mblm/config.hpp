#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace mblm {

enum class FfnMode { dedicated, shared };

std::string_view to_string(FfnMode mode);
FfnMode ffn_mode_from_string(std::string_view s);

/// Architecture hyperparameters for a Llama-style decoder-only model.
///
/// The feed-forward block is either dedicated (one per layer) or shared
/// (a single block referenced by every layer). Attention projections and
/// FFN matrices carry no bias terms; embedding and output head are untied.
struct ModelConfig {
    std::int64_t n_layers = 0;     // N
    std::int64_t d_model = 0;      // M, hidden size
    std::int64_t d_ff = 0;         // I, intermediate size
    std::int64_t n_heads = 0;
    std::int64_t vocab_size = 0;   // V
    std::int64_t context_len = 0;  // C, max sequence positions
    double rmsnorm_eps = 1e-6;
    FfnMode ffn_mode = FfnMode::dedicated;
    double rope_theta = 10000.0;

    std::int64_t head_dim() const { return n_heads > 0 ? d_model / n_heads : 0; }

    bool operator==(const ModelConfig&) const = default;
};

/// Named presets:
///   baseline1       N=22 M=1024 I=5632  dedicated, 16 heads
///   baseline2       N=8  M=2048 I=5632  dedicated, 32 heads
///   large-base      N=22 M=2048 I=5632  dedicated, 32 heads
///   mobillama-0.5B  N=22 M=2048 I=5632  shared,    32 heads
///   mobillama-0.8B  N=22 M=2532 I=11080 shared,     6 heads
/// All presets use V=32000, C=2048, eps=1e-6, rope_theta=10000.
ModelConfig preset(std::string_view name);
const std::vector<std::string>& preset_names();

/// Every violated ModelConfig invariant, as human-readable messages.
/// Empty result means the configuration is valid.
std::vector<std::string> validate(const ModelConfig& config);

struct ParamBreakdown {
    std::int64_t embedding_params = 0;  // V*M
    std::int64_t attention_params = 0;  // N*4*M^2
    std::int64_t ffn_params = 0;        // 3*M*I*(N dedicated, 1 shared)
    std::int64_t norm_params = 0;       // N*2*M + M
    std::int64_t head_params = 0;       // V*M (untied)
    std::int64_t total = 0;

    struct Fractions {
        double embedding = 0, attention = 0, ffn = 0, norm = 0, head = 0;
    };
    Fractions fractions() const;
};

/// Analytic parameter count. Matches the element count of an instantiated
/// model exactly. Throws ConfigError if the config does not validate.
ParamBreakdown count_params(const ModelConfig& config);

struct MemoryEstimate {
    std::int64_t weights_bytes = 0;
    std::int64_t kv_cache_bytes = 0;    // 2*N*batch*seq*M scalars
    std::int64_t optimizer_bytes = 0;   // two Adam moments
    std::int64_t total_bytes = 0;
};

MemoryEstimate memory_estimate(const ModelConfig& config, std::int64_t bytes_per_param,
                               std::int64_t batch, std::int64_t seq_len, bool with_optimizer);

/// Strict JSON config file: exactly the keys
///   {n_layers, d_model, d_ff, n_heads, vocab_size, context_len,
///    rmsnorm_eps, ffn_mode, rope_theta}
/// with ffn_mode as "dedicated" or "shared". Unknown keys are rejected.
ModelConfig parse_model_config(const std::string& json_text);
ModelConfig load_model_config(const std::string& path);
std::string model_config_to_json(const ModelConfig& config);
void save_model_config(const ModelConfig& config, const std::string& path);

}  // namespace mblm
