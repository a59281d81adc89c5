#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "CLI11.hpp"
#include "json.hpp"
#include "mblm/bench.hpp"
#include "mblm/checkpoint.hpp"
#include "mblm/config.hpp"
#include "mblm/data.hpp"
#include "mblm/errors.hpp"
#include "mblm/generate.hpp"
#include "mblm/model.hpp"
#include "mblm/trainer.hpp"

namespace fs = std::filesystem;

namespace {

using namespace mblm;

std::string with_commas(std::int64_t v) {
    const bool neg = v < 0;
    const std::string digits = std::to_string(neg ? -v : v);
    std::string out;
    for (std::size_t i = 0; i < digits.size(); ++i) {
        if (i > 0 && (digits.size() - i) % 3 == 0) out.push_back(',');
        out.push_back(digits[i]);
    }
    return neg ? "-" + out : out;
}

// -------------------- model config selection --------------------

/// A model config comes from --preset or --config; individual field flags
/// override whichever base was chosen.
struct ConfigArgs {
    std::string preset_name;
    std::string config_path;
    std::vector<std::function<void(ModelConfig&)>> overrides;
};

void add_config_flags(CLI::App* cmd, ConfigArgs& args) {
    auto* p = cmd->add_option("--preset", args.preset_name, "Named architecture preset")
                  ->check(CLI::IsMember(preset_names()));
    auto* c = cmd->add_option("--config", args.config_path, "Model config JSON file")
                  ->check(CLI::ExistingFile);
    p->excludes(c);
    c->excludes(p);

    auto int_field = [cmd, &args](const std::string& flag, std::int64_t ModelConfig::*field,
                                  const std::string& help) {
        cmd->add_option_function<std::int64_t>(
            flag,
            [&args, field](std::int64_t v) {
                args.overrides.push_back([field, v](ModelConfig& cfg) { cfg.*field = v; });
            },
            help);
    };
    auto real_field = [cmd, &args](const std::string& flag, double ModelConfig::*field,
                                   const std::string& help) {
        cmd->add_option_function<double>(
            flag,
            [&args, field](double v) {
                args.overrides.push_back([field, v](ModelConfig& cfg) { cfg.*field = v; });
            },
            help);
    };
    int_field("--n-layers", &ModelConfig::n_layers, "Override transformer layer count");
    int_field("--d-model", &ModelConfig::d_model, "Override hidden size");
    int_field("--d-ff", &ModelConfig::d_ff, "Override feed-forward size");
    int_field("--n-heads", &ModelConfig::n_heads, "Override attention head count");
    int_field("--vocab-size", &ModelConfig::vocab_size, "Override vocabulary size");
    int_field("--context-len", &ModelConfig::context_len, "Override context length");
    real_field("--rmsnorm-eps", &ModelConfig::rmsnorm_eps, "Override RMSNorm epsilon");
    real_field("--rope-theta", &ModelConfig::rope_theta, "Override rotary base frequency");
    cmd->add_option_function<std::string>(
           "--ffn-mode",
           [&args](const std::string& v) {
               args.overrides.push_back(
                   [mode = ffn_mode_from_string(v)](ModelConfig& cfg) { cfg.ffn_mode = mode; });
           },
           "Override feed-forward mode")
        ->check(CLI::IsMember({"dedicated", "shared"}));
}

ModelConfig resolve_config(const ConfigArgs& args) {
    ModelConfig cfg;
    if (!args.preset_name.empty()) {
        cfg = preset(args.preset_name);
    } else if (!args.config_path.empty()) {
        cfg = load_model_config(args.config_path);
    } else {
        throw ConfigError("pass --preset or --config");
    }
    for (const auto& apply : args.overrides) apply(cfg);
    const auto problems = validate(cfg);
    if (!problems.empty()) {
        std::string msg = "invalid model config:";
        for (const auto& p : problems) msg += "\n  " + p;
        throw ConfigError(msg);
    }
    return cfg;
}

std::string config_display_name(const ConfigArgs& args) {
    if (!args.preset_name.empty()) return args.preset_name;
    if (!args.config_path.empty()) return fs::path(args.config_path).stem().string();
    return "custom";
}

void echo_config(const ModelConfig& cfg) {
    std::cerr << "effective config: " << nlohmann::json::parse(model_config_to_json(cfg)).dump()
              << "\n";
}

// -------------------- environment overrides --------------------

std::string env_out_dir() {
    const char* v = std::getenv("MBLM_OUT_DIR");
    return v != nullptr ? std::string(v) : std::string();
}

std::string resolve_out_dir(const std::string& flag_value) {
    if (!flag_value.empty()) return flag_value;
    const std::string env = env_out_dir();
    if (!env.empty()) return env;
    throw ConfigError("pass --out or set MBLM_OUT_DIR");
}

void apply_thread_env() {
    const char* v = std::getenv("MBLM_THREADS");
    if (v == nullptr) return;
    int threads = 0;
    try {
        threads = std::stoi(v);
    } catch (const std::exception&) {
        threads = 0;
    }
    if (threads < 1) {
        throw ConfigError("MBLM_THREADS must be a positive integer, got \"" + std::string(v) +
                          "\"");
    }
    Eigen::setNbThreads(threads);
}

// -------------------- params --------------------

void run_params(const ConfigArgs& args) {
    const ModelConfig cfg = resolve_config(args);
    echo_config(cfg);
    const ParamBreakdown pb = count_params(cfg);
    const auto frac = pb.fractions();

    char line[128];
    auto row = [&](const char* label, std::int64_t count, double fraction) {
        std::snprintf(line, sizeof line, "  %-10s %18s  %5.1f%%\n", label,
                      with_commas(count).c_str(), fraction * 100.0);
        std::cout << line;
    };
    std::cout << "parameters for " << config_display_name(args) << " (" << to_string(cfg.ffn_mode)
              << " ffn)\n";
    row("embedding", pb.embedding_params, frac.embedding);
    row("attention", pb.attention_params, frac.attention);
    row("ffn", pb.ffn_params, frac.ffn);
    row("norm", pb.norm_params, frac.norm);
    row("head", pb.head_params, frac.head);
    std::snprintf(line, sizeof line, "  %-10s %18s\n", "total", with_commas(pb.total).c_str());
    std::cout << line;

    ModelConfig shared = cfg;
    shared.ffn_mode = FfnMode::shared;
    ModelConfig dedicated = cfg;
    dedicated.ffn_mode = FfnMode::dedicated;
    const std::int64_t st = count_params(shared).total;
    const std::int64_t dt = count_params(dedicated).total;
    const double reduction = dt > 0 ? 100.0 * static_cast<double>(dt - st) / static_cast<double>(dt)
                                    : 0.0;
    std::snprintf(line, sizeof line, "sharing at these dimensions saves %s params (%.1f%%)\n",
                  with_commas(dt - st).c_str(), reduction);
    std::cout << line << "  shared " << with_commas(st) << " vs dedicated " << with_commas(dt)
              << "\n";
}

// -------------------- pack --------------------

struct PackArgs {
    std::string input_dir;
    std::string out_dir;
    std::int64_t segments = kDefaultSegments;
    std::int64_t sample_len = 2049;
    std::string tokenizer = "byte";
};

void run_pack(const PackArgs& args) {
    const std::string out_dir = resolve_out_dir(args.out_dir);
    const TokenizerSpec spec = args.tokenizer == "byte" ? TokenizerSpec::bytes()
                                                        : TokenizerSpec::load_external(args.tokenizer);
    std::cerr << "effective config: "
              << nlohmann::json{{"input", args.input_dir},
                                {"out", out_dir},
                                {"segments", args.segments},
                                {"sample_len", args.sample_len},
                                {"tokenizer", args.tokenizer}}
                     .dump()
              << "\n";

    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(args.input_dir)) {
        if (entry.is_regular_file()) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw DataError("no files under \"" + args.input_dir + "\"");

    std::vector<Document> docs;
    docs.reserve(files.size());
    for (const auto& file : files) {
        std::ifstream in(file, std::ios::binary);
        std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        if (!in && !in.eof()) throw DataError("cannot read \"" + file.string() + "\"");
        docs.push_back({file.filename().string(), encode(spec, text)});
    }

    const auto samples = pack(spec, docs, args.sample_len);
    const Manifest manifest = write_segments(samples, args.segments, out_dir, spec);
    std::cout << "packed " << samples.size() << " samples (" << args.sample_len
              << " ids each) from " << files.size() << " files into " << manifest.segments.size()
              << " segments under " << out_dir << "\n";
}

// -------------------- train --------------------

struct TrainArgs {
    ConfigArgs config;
    std::string data_dir;
    std::string out_dir;
    std::string resume;
    TrainConfig tc;
    bool warmup_given = false;
};

void run_train(const TrainArgs& args) {
    TrainConfig tc = args.tc;
    if (!args.warmup_given && tc.warmup_steps >= tc.total_steps) {
        tc.warmup_steps = tc.total_steps / 10;
    }
    const std::string out_dir = resolve_out_dir(args.out_dir);

    ModelConfig cfg;
    TransformerModel<float> model;
    OptimizerState<float> opt;
    std::int64_t start_step = 0;
    std::int64_t start_tokens = 0;
    std::string cursor_json;
    if (!args.resume.empty()) {
        LoadedCheckpoint ck = load_checkpoint(args.resume);
        if (!ck.meta.has_optimizer) {
            throw ConfigError("\"" + args.resume +
                              "\" holds no optimizer state and cannot resume training");
        }
        cfg = ck.meta.config;
        if (!args.config.preset_name.empty() || !args.config.config_path.empty()) {
            if (!(resolve_config(args.config) == cfg)) {
                throw ConfigError("config flags disagree with the checkpoint being resumed");
            }
        }
        model = std::move(ck.model);
        opt = std::move(ck.opt);
        start_step = ck.meta.step;
        start_tokens = ck.meta.tokens_seen;
        cursor_json = ck.meta.rng_state_json;
    } else {
        cfg = resolve_config(args.config);
        model = init_model<float>(cfg, tc.seed);
        opt = OptimizerState<float>::init(model.params());
    }
    echo_config(cfg);
    std::cerr << "train settings: "
              << nlohmann::json{{"total_steps", tc.total_steps},
                                {"warmup_steps", tc.warmup_steps},
                                {"batch_size", tc.batch_size},
                                {"eta_max", tc.eta_max},
                                {"eta_min", tc.eta_min},
                                {"weight_decay", tc.weight_decay},
                                {"clip_norm", tc.clip_norm},
                                {"checkpoint_interval_tokens", tc.checkpoint_interval_tokens},
                                {"seed", tc.seed},
                                {"start_step", start_step}}
                     .dump()
              << "\n";

    BatchIterator data(load_dataset(args.data_dir), tc.batch_size, tc.seed);
    if (!cursor_json.empty() && cursor_json != "{}") data.seek(cursor_from_json(cursor_json));

    fs::create_directories(out_dir);
    const std::string metrics_path = out_dir + "/metrics.jsonl";
    std::ofstream metrics(metrics_path,
                          args.resume.empty() ? std::ios::trunc : std::ios::app);
    if (!metrics) throw DataError("cannot write \"" + metrics_path + "\"");
    const MetricsSink sink = [&](const StepMetrics& m) {
        const std::string line = metrics_to_json_line(m);
        std::cout << line << std::endl;
        metrics << line << "\n";
    };

    const TrainResult result = train(model, opt, data, tc, sink, out_dir, start_step, start_tokens);
    std::cerr << "trained to step " << result.final_step << " (" << with_commas(result.tokens_seen)
              << " tokens), final loss " << result.final_loss << "\n";
    for (const auto& path : result.checkpoints) std::cerr << "wrote " << path << "\n";
}

// -------------------- generate --------------------

struct GenerateArgs {
    std::string checkpoint;
    std::string prompt;
    GenerationConfig gen;
};

void run_generate(const GenerateArgs& args) {
    LoadedCheckpoint ck = load_checkpoint(args.checkpoint);
    echo_config(ck.meta.config);
    const TokenizerSpec spec = TokenizerSpec::bytes();
    if (ck.meta.config.vocab_size < spec.vocab_size) {
        throw ConfigError("checkpoint vocab of " + std::to_string(ck.meta.config.vocab_size) +
                          " cannot host the byte tokenizer's " +
                          std::to_string(spec.vocab_size) + " ids");
    }

    std::vector<TokenId> ids;
    ids.push_back(spec.bos);
    const auto prompt_ids = encode(spec, args.prompt);
    ids.insert(ids.end(), prompt_ids.begin(), prompt_ids.end());
    if (static_cast<std::int64_t>(ids.size()) > ck.meta.config.context_len) {
        throw ConfigError("prompt of " + std::to_string(ids.size()) +
                          " tokens exceeds the context of " +
                          std::to_string(ck.meta.config.context_len));
    }

    GenerationConfig gen = args.gen;
    gen.stop_ids = {spec.eos};
    const GenerationResult result = generate(ck.model, ids, gen);
    std::cout << decode(spec, result.tokens) << "\n";
    char line[96];
    std::snprintf(line, sizeof line, "generated %zu tokens at %.1f tokens/sec\n",
                  result.tokens.size(), result.tokens_per_sec());
    std::cerr << line;
}

// -------------------- bench --------------------

struct BenchArgs {
    ConfigArgs config;
    std::string mode = "generate";
    std::int64_t runs = 5;
    std::int64_t prompt_len = 16;
    std::int64_t new_tokens = 32;
    std::int64_t batch = 1;
    std::uint64_t seed = 0;
    bool json = false;
};

void run_bench(const BenchArgs& args) {
    const ModelConfig cfg = resolve_config(args.config);
    echo_config(cfg);
    const std::string name = config_display_name(args.config);
    const BenchReport report =
        args.mode == "generate"
            ? bench_generate(cfg, name, args.prompt_len, args.new_tokens, args.runs, args.seed)
            : bench_train_step(cfg, name, args.batch, args.runs, args.seed);
    std::cout << (args.json ? to_json(report) : to_text(report));
}

// -------------------- inspect --------------------

void run_inspect(const std::string& path) {
    const CheckpointMeta meta = inspect_checkpoint(path);
    std::cout << "checkpoint: " << path << "\n";
    std::cout << "config: " << nlohmann::json::parse(model_config_to_json(meta.config)).dump()
              << "\n";
    std::cout << "step: " << meta.step << "\n";
    std::cout << "tokens_seen: " << with_commas(meta.tokens_seen) << "\n";
    std::cout << "optimizer moments: " << (meta.has_optimizer ? "present" : "absent") << "\n";
    std::cout << "rng_state: " << meta.rng_state_json << "\n";

    std::int64_t payload_bytes = 0;
    for (const auto& entry : meta.tensors) {
        payload_bytes += numel_of(entry.dims) * static_cast<std::int64_t>(sizeof(float));
    }
    std::cout << meta.tensors.size() << " tensors, " << with_commas(payload_bytes)
              << " payload bytes\n";
    char line[160];
    for (const auto& entry : meta.tensors) {
        std::snprintf(line, sizeof line, "  %-32s %-14s @ %s\n", entry.name.c_str(),
                      shape_str(entry.dims).c_str(), with_commas(entry.offset).c_str());
        std::cout << line;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"shared-feed-forward transformer toolkit"};
    app.require_subcommand(1);

    ConfigArgs params_args;
    auto* params_cmd = app.add_subcommand("params", "Print the parameter budget of a config");
    add_config_flags(params_cmd, params_args);
    params_cmd->callback([&] { run_params(params_args); });

    PackArgs pack_args;
    auto* pack_cmd =
        app.add_subcommand("pack", "Tokenize and pack a directory of text files into segments");
    pack_cmd->add_option("--input", pack_args.input_dir, "Directory of input text files")
        ->required()
        ->check(CLI::ExistingDirectory);
    pack_cmd->add_option("--out", pack_args.out_dir, "Output dataset directory");
    pack_cmd->add_option("--segments", pack_args.segments, "Number of segment files");
    pack_cmd->add_option("--sample-len", pack_args.sample_len, "Ids per packed sample");
    pack_cmd->add_option("--tokenizer", pack_args.tokenizer,
                         "\"byte\" or a path to a vocabulary JSON file");
    pack_cmd->callback([&] { run_pack(pack_args); });

    TrainArgs train_args;
    auto* train_cmd = app.add_subcommand("train", "Train a model on a packed dataset");
    add_config_flags(train_cmd, train_args.config);
    train_cmd->add_option("--data", train_args.data_dir, "Packed dataset directory")
        ->required()
        ->check(CLI::ExistingDirectory);
    train_cmd->add_option("--out", train_args.out_dir, "Directory for checkpoints and metrics");
    train_cmd->add_option("--steps", train_args.tc.total_steps, "Total optimizer steps")
        ->required();
    train_cmd->add_option("--batch-size", train_args.tc.batch_size, "Samples per step")
        ->default_val(std::int64_t{8});
    auto* warmup =
        train_cmd->add_option("--warmup-steps", train_args.tc.warmup_steps,
                              "Linear warmup steps (defaults to 2000, or steps/10 when shorter)");
    train_cmd->add_option("--eta-max", train_args.tc.eta_max, "Peak learning rate");
    train_cmd->add_option("--eta-min", train_args.tc.eta_min, "Final learning rate");
    train_cmd->add_option("--weight-decay", train_args.tc.weight_decay, "Decoupled weight decay");
    train_cmd->add_option("--clip-norm", train_args.tc.clip_norm, "Global gradient norm limit");
    train_cmd->add_option("--checkpoint-interval-tokens", train_args.tc.checkpoint_interval_tokens,
                          "Tokens between checkpoints");
    train_cmd->add_option("--seed", train_args.tc.seed, "Init and shuffle seed");
    train_cmd->add_option("--resume", train_args.resume, "Checkpoint to continue from")
        ->check(CLI::ExistingFile);
    train_cmd->callback([&] {
        train_args.warmup_given = warmup->count() > 0;
        run_train(train_args);
    });

    GenerateArgs gen_args;
    gen_args.gen.max_new_tokens = 64;
    auto* gen_cmd = app.add_subcommand("generate", "Sample a continuation from a checkpoint");
    gen_cmd->add_option("--checkpoint", gen_args.checkpoint, "Model checkpoint file")
        ->required()
        ->check(CLI::ExistingFile);
    gen_cmd->add_option("--prompt", gen_args.prompt, "Prompt text (byte tokenizer)");
    gen_cmd->add_option("--max-new", gen_args.gen.max_new_tokens, "Continuation length limit");
    gen_cmd->add_option("--temperature", gen_args.gen.temperature,
                        "Sampling temperature, 0 for greedy");
    gen_cmd->add_option("--top-k", gen_args.gen.top_k, "Keep only the k likeliest ids (0 = off)");
    gen_cmd->add_option("--top-p", gen_args.gen.top_p, "Nucleus mass in (0, 1]");
    gen_cmd->add_option("--seed", gen_args.gen.seed, "Sampling seed");
    gen_cmd->callback([&] { run_generate(gen_args); });

    BenchArgs bench_args;
    auto* bench_cmd = app.add_subcommand("bench", "Measure throughput and memory for a config");
    add_config_flags(bench_cmd, bench_args.config);
    bench_cmd->add_option("--mode", bench_args.mode, "What to time")
        ->check(CLI::IsMember({"generate", "train-step"}));
    bench_cmd->add_option("--runs", bench_args.runs, "Measured repetitions (after one warmup)");
    bench_cmd->add_option("--prompt-len", bench_args.prompt_len, "Prompt tokens (generate mode)");
    bench_cmd->add_option("--new-tokens", bench_args.new_tokens,
                          "Tokens to generate (generate mode)");
    bench_cmd->add_option("--batch", bench_args.batch, "Batch size (train-step mode)");
    bench_cmd->add_option("--seed", bench_args.seed, "Model init seed");
    bench_cmd->add_flag("--json", bench_args.json, "Emit the report as JSON");
    bench_cmd->callback([&] { run_bench(bench_args); });

    std::string inspect_path;
    auto* inspect_cmd =
        app.add_subcommand("inspect", "Print a checkpoint header without loading payloads");
    inspect_cmd->add_option("--checkpoint", inspect_path, "Checkpoint file")
        ->required()
        ->check(CLI::ExistingFile);
    inspect_cmd->callback([&] { run_inspect(inspect_path); });

    try {
        apply_thread_env();
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
