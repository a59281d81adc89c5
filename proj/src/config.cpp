#include "mblm/config.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"

#include "mblm/errors.hpp"

namespace mblm {

std::string_view to_string(FfnMode mode) {
    return mode == FfnMode::shared ? "shared" : "dedicated";
}

FfnMode ffn_mode_from_string(std::string_view s) {
    if (s == "dedicated") return FfnMode::dedicated;
    if (s == "shared") return FfnMode::shared;
    throw ConfigError("ffn_mode must be \"dedicated\" or \"shared\", got \"" + std::string(s) + "\"");
}

namespace {

ModelConfig base_preset() {
    ModelConfig cfg;
    cfg.vocab_size = 32000;
    cfg.context_len = 2048;
    cfg.rmsnorm_eps = 1e-6;
    cfg.rope_theta = 10000.0;
    return cfg;
}

}  // namespace

ModelConfig preset(std::string_view name) {
    ModelConfig cfg = base_preset();
    if (name == "baseline1") {
        cfg.n_layers = 22;
        cfg.d_model = 1024;
        cfg.d_ff = 5632;
        cfg.n_heads = 16;  // head_dim 64, matching the 2048-wide presets
        cfg.ffn_mode = FfnMode::dedicated;
    } else if (name == "baseline2") {
        cfg.n_layers = 8;
        cfg.d_model = 2048;
        cfg.d_ff = 5632;
        cfg.n_heads = 32;
        cfg.ffn_mode = FfnMode::dedicated;
    } else if (name == "large-base") {
        cfg.n_layers = 22;
        cfg.d_model = 2048;
        cfg.d_ff = 5632;
        cfg.n_heads = 32;
        cfg.ffn_mode = FfnMode::dedicated;
    } else if (name == "mobillama-0.5B") {
        cfg.n_layers = 22;
        cfg.d_model = 2048;
        cfg.d_ff = 5632;
        cfg.n_heads = 32;
        cfg.ffn_mode = FfnMode::shared;
    } else if (name == "mobillama-0.8B") {
        cfg.n_layers = 22;
        cfg.d_model = 2532;
        cfg.d_ff = 11080;
        cfg.n_heads = 6;  // 2532 is not divisible by 32; 6 heads give an even head_dim of 422
        cfg.ffn_mode = FfnMode::shared;
    } else {
        throw ConfigError("unknown preset \"" + std::string(name) + "\"");
    }
    return cfg;
}

const std::vector<std::string>& preset_names() {
    static const std::vector<std::string> names = {
        "baseline1", "baseline2", "large-base", "mobillama-0.5B", "mobillama-0.8B"};
    return names;
}

std::vector<std::string> validate(const ModelConfig& c) {
    std::vector<std::string> violations;
    auto require_positive = [&](std::int64_t v, const char* name) {
        if (v <= 0) violations.push_back(std::string(name) + " must be strictly positive");
    };
    require_positive(c.n_layers, "n_layers");
    require_positive(c.d_model, "d_model");
    require_positive(c.d_ff, "d_ff");
    require_positive(c.n_heads, "n_heads");
    require_positive(c.vocab_size, "vocab_size");
    require_positive(c.context_len, "context_len");
    if (!(c.rmsnorm_eps > 0)) violations.push_back("rmsnorm_eps must be > 0");
    if (!(c.rope_theta > 0)) violations.push_back("rope_theta must be > 0");
    if (c.n_heads > 0 && c.d_model > 0) {
        if (c.d_model % c.n_heads != 0) {
            violations.push_back("d_model must equal n_heads * head_dim exactly");
        } else if ((c.d_model / c.n_heads) % 2 != 0) {
            violations.push_back("head_dim must be even (rotary pairs dimensions 2i, 2i+1)");
        }
    }
    return violations;
}

ParamBreakdown::Fractions ParamBreakdown::fractions() const {
    Fractions f;
    if (total <= 0) return f;
    const double t = static_cast<double>(total);
    f.embedding = static_cast<double>(embedding_params) / t;
    f.attention = static_cast<double>(attention_params) / t;
    f.ffn = static_cast<double>(ffn_params) / t;
    f.norm = static_cast<double>(norm_params) / t;
    f.head = static_cast<double>(head_params) / t;
    return f;
}

ParamBreakdown count_params(const ModelConfig& c) {
    const auto violations = validate(c);
    if (!violations.empty()) {
        std::string msg = "invalid config:";
        for (const auto& v : violations) msg += " " + v + ";";
        throw ConfigError(msg);
    }
    ParamBreakdown b;
    b.embedding_params = c.vocab_size * c.d_model;
    b.head_params = c.vocab_size * c.d_model;
    b.attention_params = c.n_layers * 4 * c.d_model * c.d_model;
    b.norm_params = c.n_layers * 2 * c.d_model + c.d_model;
    const std::int64_t ffn_blocks = c.ffn_mode == FfnMode::shared ? 1 : c.n_layers;
    b.ffn_params = ffn_blocks * 3 * c.d_model * c.d_ff;
    b.total = b.embedding_params + b.head_params + b.attention_params + b.norm_params + b.ffn_params;
    return b;
}

MemoryEstimate memory_estimate(const ModelConfig& c, std::int64_t bytes_per_param,
                               std::int64_t batch, std::int64_t seq_len, bool with_optimizer) {
    if (seq_len > c.context_len) {
        throw ConfigError("seq_len " + std::to_string(seq_len) + " exceeds context_len " +
                          std::to_string(c.context_len));
    }
    if (bytes_per_param <= 0) throw ConfigError("bytes_per_param must be positive");
    if (batch < 0 || seq_len < 0) throw ConfigError("batch and seq_len must be non-negative");

    MemoryEstimate m;
    const std::int64_t total_params = count_params(c).total;
    m.weights_bytes = total_params * bytes_per_param;
    m.kv_cache_bytes = 2 * c.n_layers * batch * seq_len * c.d_model * bytes_per_param;
    m.optimizer_bytes = with_optimizer ? 2 * total_params * bytes_per_param : 0;
    m.total_bytes = m.weights_bytes + m.kv_cache_bytes + m.optimizer_bytes;
    return m;
}

// -------------------- JSON config file --------------------

ModelConfig parse_model_config(const std::string& json_text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("config must be a JSON object");

    static const char* known_keys[] = {"n_layers",    "d_model",     "d_ff",
                                       "n_heads",     "vocab_size",  "context_len",
                                       "rmsnorm_eps", "ffn_mode",    "rope_theta"};
    for (const auto& [key, value] : j.items()) {
        (void)value;
        bool known = false;
        for (const char* k : known_keys) known |= key == k;
        if (!known) throw ConfigError("unknown config key \"" + key + "\"");
    }

    ModelConfig cfg;
    auto get_count = [&](const char* key) -> std::int64_t {
        if (!j.contains(key)) throw ConfigError(std::string("missing config key \"") + key + "\"");
        if (!j[key].is_number_integer()) {
            throw ConfigError(std::string("config key \"") + key + "\" must be an integer");
        }
        return j[key].get<std::int64_t>();
    };
    auto get_real = [&](const char* key) -> double {
        if (!j.contains(key)) throw ConfigError(std::string("missing config key \"") + key + "\"");
        if (!j[key].is_number()) {
            throw ConfigError(std::string("config key \"") + key + "\" must be a number");
        }
        return j[key].get<double>();
    };
    cfg.n_layers = get_count("n_layers");
    cfg.d_model = get_count("d_model");
    cfg.d_ff = get_count("d_ff");
    cfg.n_heads = get_count("n_heads");
    cfg.vocab_size = get_count("vocab_size");
    cfg.context_len = get_count("context_len");
    cfg.rmsnorm_eps = get_real("rmsnorm_eps");
    cfg.rope_theta = get_real("rope_theta");
    if (!j.contains("ffn_mode") || !j["ffn_mode"].is_string()) {
        throw ConfigError("config key \"ffn_mode\" must be a string");
    }
    cfg.ffn_mode = ffn_mode_from_string(j["ffn_mode"].get<std::string>());
    return cfg;
}

ModelConfig load_model_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file \"" + path + "\"");
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_model_config(buf.str());
}

std::string model_config_to_json(const ModelConfig& c) {
    nlohmann::json j;
    j["n_layers"] = c.n_layers;
    j["d_model"] = c.d_model;
    j["d_ff"] = c.d_ff;
    j["n_heads"] = c.n_heads;
    j["vocab_size"] = c.vocab_size;
    j["context_len"] = c.context_len;
    j["rmsnorm_eps"] = c.rmsnorm_eps;
    j["ffn_mode"] = std::string(to_string(c.ffn_mode));
    j["rope_theta"] = c.rope_theta;
    return j.dump(2) + "\n";
}

void save_model_config(const ModelConfig& config, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write config file \"" + path + "\"");
    out << model_config_to_json(config);
}

}  // namespace mblm
