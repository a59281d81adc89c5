#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <string>

#include "json.hpp"
#include "mblm/checkpoint.hpp"
#include "mblm/data.hpp"
#include "mblm/errors.hpp"
#include "mblm/trainer.hpp"
#include "testutil.hpp"

using namespace mblm;

namespace {

namespace fs = std::filesystem;

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
};

TrainConfig schedule_cfg() {
    TrainConfig cfg;
    cfg.total_steps = 10000;
    return cfg;  // warmup 2000, eta 3e-4 -> 3e-5 from the defaults
}

/// One named parameter whose gradient is set directly; values start at zero.
NamedParam<float> param_with_grad(const std::string& name, const std::vector<float>& grad,
                                  bool decay = true) {
    Tensor<float> t = Tensor<float>::zeros({static_cast<std::int64_t>(grad.size())});
    t.set_requires_grad(true);
    t.ensure_grad();
    std::copy(grad.begin(), grad.end(), t.grad().begin());
    return {name, t, decay};
}

double params_grad_norm(const std::vector<NamedParam<float>>& params) {
    double acc = 0.0;
    for (const auto& p : params) {
        for (float g : p.tensor.grad()) acc += static_cast<double>(g) * g;
    }
    return std::sqrt(acc);
}

std::vector<PackedSample> random_corpus(int n_samples, int width, std::int64_t vocab,
                                        std::uint64_t seed) {
    const auto ids = testutil::random_ids(static_cast<std::int64_t>(n_samples) * width, vocab, seed);
    std::vector<PackedSample> samples(static_cast<std::size_t>(n_samples));
    for (int i = 0; i < n_samples; ++i) {
        samples[i].source = "synthetic";
        samples[i].token_ids.assign(ids.begin() + static_cast<std::ptrdiff_t>(i) * width,
                                    ids.begin() + static_cast<std::ptrdiff_t>(i + 1) * width);
    }
    return samples;
}

void require_same_tensors(const TransformerModel<float>& a, const TransformerModel<float>& b) {
    const auto pa = a.params();
    const auto pb = b.params();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        REQUIRE(pa[i].name == pb[i].name);
        REQUIRE(pa[i].tensor.numel() == pb[i].tensor.numel());
        INFO("parameter ", pa[i].name);
        CHECK(std::memcmp(pa[i].tensor.data().data(), pb[i].tensor.data().data(),
                          static_cast<std::size_t>(pa[i].tensor.numel()) * sizeof(float)) == 0);
    }
}

void require_same_moments(const OptimizerState<float>& a, const OptimizerState<float>& b) {
    REQUIRE(a.slots.size() == b.slots.size());
    CHECK(a.step == b.step);
    for (std::size_t i = 0; i < a.slots.size(); ++i) {
        REQUIRE(a.slots[i].m.size() == b.slots[i].m.size());
        CHECK(std::memcmp(a.slots[i].m.data(), b.slots[i].m.data(),
                          static_cast<std::size_t>(a.slots[i].m.size()) * sizeof(float)) == 0);
        CHECK(std::memcmp(a.slots[i].v.data(), b.slots[i].v.data(),
                          static_cast<std::size_t>(a.slots[i].v.size()) * sizeof(float)) == 0);
    }
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Rewrites a checkpoint with an edited JSON header, fixing up the length
/// prefix so only the edit itself is wrong.
void rewrite_header(const std::string& path, const std::function<void(nlohmann::json&)>& edit) {
    std::string bytes = slurp(path);
    std::uint64_t len = 0;
    std::memcpy(&len, bytes.data() + 8, sizeof len);
    nlohmann::json j = nlohmann::json::parse(bytes.substr(16, len));
    edit(j);
    const std::string header = j.dump();
    std::string out = bytes.substr(0, 8);
    const std::uint64_t new_len = header.size();
    out.append(reinterpret_cast<const char*>(&new_len), sizeof new_len);
    out += header;
    out += bytes.substr(16 + len);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

}  // namespace

TEST_CASE("learning rate anchors") {
    const TrainConfig cfg = schedule_cfg();
    CHECK(lr_at(cfg, 0) == 0.0);
    CHECK(lr_at(cfg, 2000) == 3e-4);
    CHECK(lr_at(cfg, 10000) == 3e-5);
    CHECK(lr_at(cfg, 1000) == doctest::Approx(1.5e-4).epsilon(1e-12));
    // cosine midpoint sits at the arithmetic mean of the extremes
    CHECK(std::abs(lr_at(cfg, 2000 + (10000 - 2000) / 2) - 1.65e-4) <= 1e-12);
}

TEST_CASE("learning rate is continuous and monotone in each phase") {
    const TrainConfig cfg = schedule_cfg();
    CHECK(std::abs(lr_at(cfg, 1999) - lr_at(cfg, 2000)) < 1e-6);
    for (std::int64_t s = 1; s <= 2000; ++s) {
        if (lr_at(cfg, s) <= lr_at(cfg, s - 1)) FAIL("warmup not increasing at step ", s);
    }
    for (std::int64_t s = 2001; s <= 10000; ++s) {
        if (lr_at(cfg, s) >= lr_at(cfg, s - 1)) FAIL("decay not decreasing at step ", s);
    }
}

TEST_CASE("learning rate rejects steps outside the schedule") {
    const TrainConfig cfg = schedule_cfg();
    CHECK_THROWS_AS(lr_at(cfg, -1), std::out_of_range);
    CHECK_THROWS_AS(lr_at(cfg, 10001), std::out_of_range);
}

TEST_CASE("train config validation lists every violation") {
    TrainConfig cfg = schedule_cfg();
    cfg.batch_size = 4;
    CHECK(validate(cfg).empty());

    cfg.eta_min = 5e-4;  // above eta_max
    cfg.warmup_steps = 10000;
    cfg.clip_norm = 0.0;
    const auto problems = validate(cfg);
    CHECK(problems.size() == 3);
}

TEST_CASE("clipping scales an oversized gradient to the threshold") {
    auto params = std::vector<NamedParam<float>>{param_with_grad("a", {3.0f, 4.0f})};
    const double factor = clip_global_norm(params, 1.0);
    CHECK(factor == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(params[0].tensor.grad()[0] == doctest::Approx(0.6f));
    CHECK(params[0].tensor.grad()[1] == doctest::Approx(0.8f));
    CHECK(params_grad_norm(params) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("clipping leaves a small gradient untouched") {
    auto params = std::vector<NamedParam<float>>{param_with_grad("a", {0.3f, 0.4f})};
    const double factor = clip_global_norm(params, 1.0);
    CHECK(factor == 1.0);
    CHECK(params[0].tensor.grad()[0] == 0.3f);
    CHECK(params[0].tensor.grad()[1] == 0.4f);
}

TEST_CASE("post-clip norm never exceeds the threshold") {
    Rng rng(77);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<NamedParam<float>> params;
        const int n_tensors = 1 + static_cast<int>(rng.next_below(4));
        const double scale = std::exp(rng.next_normal() * 2.0);  // spans tiny to huge norms
        for (int t = 0; t < n_tensors; ++t) {
            std::vector<float> g(1 + rng.next_below(40));
            for (float& v : g) v = static_cast<float>(rng.next_normal() * scale);
            params.push_back(param_with_grad("p" + std::to_string(t), g));
        }
        clip_global_norm(params, 1.0);
        INFO("trial ", trial);
        CHECK(params_grad_norm(params) <= 1.0 + 1e-6);
    }
}

TEST_CASE("first adamw update moves a unit weight to 0.9") {
    auto params = std::vector<NamedParam<float>>{param_with_grad("p", {0.5f}, false)};
    params[0].tensor.data()[0] = 1.0f;
    auto state = OptimizerState<float>::init(params);
    TrainConfig cfg;  // beta1 0.9, beta2 0.95, eps 1e-8
    adamw_step(params, state, cfg, 0.1);
    CHECK(state.step == 1);
    CHECK(std::abs(params[0].tensor.data()[0] - 0.9f) <= 1e-6f);
    CHECK(state.slots[0].m.data()[0] == doctest::Approx(0.05f));
    CHECK(state.slots[0].v.data()[0] == doctest::Approx(0.0125f));
}

TEST_CASE("zero gradient and zero decay leave weights untouched") {
    auto params = std::vector<NamedParam<float>>{param_with_grad("p", {0.0f, 0.0f, 0.0f})};
    for (std::size_t i = 0; i < 3; ++i) params[0].tensor.data()[i] = 1.5f + static_cast<float>(i);
    auto state = OptimizerState<float>::init(params);
    TrainConfig cfg;
    cfg.weight_decay = 0.0;
    for (int s = 0; s < 5; ++s) adamw_step(params, state, cfg, 0.1);
    CHECK(params[0].tensor.data()[0] == 2.0f - 0.5f);
    CHECK(params[0].tensor.data()[1] == 2.5f);
    CHECK(params[0].tensor.data()[2] == 3.5f);
}

TEST_CASE("decay skips norm gains and both embedding tables") {
    auto model = init_model<float>(testutil::tiny_config(FfnMode::dedicated), 5);
    auto params = model.params();
    for (auto& p : params) Tensor<float>(p.tensor).ensure_grad();  // all-zero gradients
    auto state = OptimizerState<float>::init(params);

    std::vector<std::vector<float>> before;
    for (const auto& p : params) {
        before.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
    }
    TrainConfig cfg;  // weight_decay 0.1
    const double lr = 0.01;
    adamw_step(params, state, cfg, lr);

    for (std::size_t i = 0; i < params.size(); ++i) {
        INFO("parameter ", params[i].name);
        std::span<const float> now = params[i].tensor.data();
        if (!params[i].decay) {
            CHECK(std::memcmp(now.data(), before[i].data(), now.size() * sizeof(float)) == 0);
            continue;
        }
        const float shrink = static_cast<float>(1.0 - lr * cfg.weight_decay);
        for (std::size_t e = 0; e < now.size(); ++e) {
            if (std::abs(now[e] - before[i][e] * shrink) > 1e-7f) {
                FAIL("decay mismatch in ", params[i].name, " element ", e);
            }
        }
    }
}

TEST_CASE("decay flags cover exactly the projection matrices") {
    const auto dedicated = init_model<float>(testutil::tiny_config(FfnMode::dedicated), 1).params();
    const auto shared = init_model<float>(testutil::tiny_config(FfnMode::shared), 1).params();
    auto n_decayed = [](const std::vector<NamedParam<float>>& params) {
        std::int64_t n = 0;
        for (const auto& p : params) n += p.decay ? 1 : 0;
        return n;
    };
    // 4 attention + 3 ffn matrices per layer; shared mode keeps one ffn set
    CHECK(n_decayed(dedicated) == 2 * 7);
    CHECK(n_decayed(shared) == 2 * 4 + 3);
    for (const auto& p : dedicated) {
        const bool is_matrix = p.tensor.shape().size() == 2;
        const bool is_embedding = p.name == "tok_embedding" || p.name == "lm_head";
        CHECK(p.decay == (is_matrix && !is_embedding));
    }
}

TEST_CASE("shared feed-forward gets a single moment slot") {
    const auto params = init_model<float>(testutil::tiny_config(FfnMode::shared), 1).params();
    const auto state = OptimizerState<float>::init(params);
    CHECK(state.slots.size() == params.size());
    CHECK(params.size() == 1 + 2 * 6 + 3 + 2);  // embeddings, per-layer, one ffn, final norm, head
    for (std::size_t i = 0; i < params.size(); ++i) {
        CHECK(state.slots[i].m.size() == params[i].tensor.numel());
        CHECK(state.slots[i].v.size() == params[i].tensor.numel());
    }
}

TEST_CASE("adamw rejects parameters without gradients") {
    auto t = Tensor<float>::zeros({3});
    auto params = std::vector<NamedParam<float>>{{"p", t, true}};
    auto state = OptimizerState<float>::init(params);
    TrainConfig cfg;
    CHECK_THROWS_AS(adamw_step(params, state, cfg, 0.1), std::invalid_argument);
}

namespace {

struct TrainRig {
    ModelConfig model_cfg = testutil::tiny_config(FfnMode::shared);
    TransformerModel<float> model;
    OptimizerState<float> opt;
    BatchIterator data;
    TrainConfig cfg;

    explicit TrainRig(std::int64_t total_steps, std::int64_t interval_tokens,
                      std::uint64_t seed = 9)
        : model(init_model<float>(model_cfg, seed)),
          opt(OptimizerState<float>::init(model.params())),
          data(random_corpus(20, static_cast<int>(model_cfg.context_len) + 1,
                             model_cfg.vocab_size, 123),
               2, 42) {
        cfg.total_steps = total_steps;
        cfg.warmup_steps = 2;
        cfg.eta_max = 1e-3;
        cfg.eta_min = 1e-4;
        cfg.batch_size = 2;
        cfg.checkpoint_interval_tokens = interval_tokens;
    }
};

}  // namespace

TEST_CASE("checkpoints land on token-interval crossings and at the end") {
    TempDir dir("mblm_cadence_test");
    // 16 tokens per step, so an interval of 64 crosses at steps 4 and 8
    TrainRig rig(10, 4 * 2 * 8);
    std::vector<StepMetrics> metrics;
    const TrainResult result = train(rig.model, rig.opt, rig.data, rig.cfg,
                                     [&](const StepMetrics& m) { metrics.push_back(m); },
                                     dir.str());

    REQUIRE(result.checkpoints.size() == 3);
    CHECK(fs::path(result.checkpoints[0]).filename() == "checkpoint-step-4.mblm");
    CHECK(fs::path(result.checkpoints[1]).filename() == "checkpoint-step-8.mblm");
    CHECK(fs::path(result.checkpoints[2]).filename() == "checkpoint-final.mblm");
    for (const auto& p : result.checkpoints) CHECK(fs::exists(p));
    CHECK(result.final_step == 10);
    CHECK(result.tokens_seen == 10 * 16);

    REQUIRE(metrics.size() == 10);
    for (std::size_t i = 0; i < metrics.size(); ++i) {
        const auto& m = metrics[i];
        CHECK(m.step == static_cast<std::int64_t>(i) + 1);
        CHECK(m.loss > 0.0);
        CHECK(std::isfinite(m.loss));
        CHECK(m.lr == lr_at(rig.cfg, m.step));
        CHECK(m.grad_norm > 0.0);
        CHECK(m.tokens_seen == m.step * 16);
        CHECK(m.wall_ms >= 0.0);
    }

    const nlohmann::json line = nlohmann::json::parse(metrics_to_json_line(metrics[0]));
    CHECK(line.at("step") == 1);
    CHECK(line.at("tokens_seen") == 16);
    CHECK(line.at("loss").get<double>() == metrics[0].loss);
    CHECK(line.at("lr").get<double>() == metrics[0].lr);
    CHECK(line.at("grad_norm").get<double>() == metrics[0].grad_norm);
    CHECK(line.contains("wall_ms"));
}

TEST_CASE("identical runs produce bit-identical weights") {
    TempDir dir("mblm_determinism_test");
    TrainRig a(10, 1 << 30);
    TrainRig b(10, 1 << 30);
    train(a.model, a.opt, a.data, a.cfg, nullptr, "");
    train(b.model, b.opt, b.data, b.cfg, nullptr, "");
    require_same_tensors(a.model, b.model);
    require_same_moments(a.opt, b.opt);
}

TEST_CASE("resuming from a mid-run checkpoint matches the uninterrupted run") {
    TempDir dir("mblm_resume_test");
    // interval of 80 tokens = 5 steps, so a checkpoint lands mid-run at step 5
    TrainRig full(10, 5 * 2 * 8);
    const TrainResult full_result =
        train(full.model, full.opt, full.data, full.cfg, nullptr, dir.str() + "/full");
    REQUIRE(fs::path(full_result.checkpoints[0]).filename() == "checkpoint-step-5.mblm");

    LoadedCheckpoint resumed = load_checkpoint(full_result.checkpoints[0]);
    REQUIRE(resumed.meta.has_optimizer);
    CHECK(resumed.meta.step == 5);
    CHECK(resumed.meta.tokens_seen == 5 * 16);

    TrainRig replay(10, 5 * 2 * 8);
    replay.data.seek(cursor_from_json(resumed.meta.rng_state_json));
    const TrainResult tail =
        train(resumed.model, resumed.opt, replay.data, replay.cfg, nullptr, dir.str() + "/tail",
              resumed.meta.step, resumed.meta.tokens_seen);

    CHECK(tail.final_step == 10);
    CHECK(tail.tokens_seen == full_result.tokens_seen);
    require_same_tensors(full.model, resumed.model);
    require_same_moments(full.opt, resumed.opt);

    // the two final checkpoints agree byte for byte, cursor included
    CHECK(slurp(full_result.checkpoints.back()) == slurp(tail.checkpoints.back()));
}

TEST_CASE("loss falls on a structured byte corpus") {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 64;
    cfg.d_ff = 128;
    cfg.n_heads = 4;
    cfg.vocab_size = 259;
    cfg.context_len = 64;

    const TokenizerSpec spec = TokenizerSpec::bytes();
    std::vector<Document> docs;
    for (int d = 0; d < 5; ++d) {
        std::string text;
        for (int rep = 0; rep < 41; ++rep) text += "abcdefghijklmnop";
        docs.push_back({"doc" + std::to_string(d), encode(spec, text)});
    }
    const auto samples = pack(spec, docs, cfg.context_len + 1);
    REQUIRE(samples.size() == 50);

    auto model = init_model<float>(cfg, 3);
    auto opt = OptimizerState<float>::init(model.params());
    BatchIterator data(samples, 8, 11);

    TrainConfig tc;
    tc.total_steps = 200;
    tc.warmup_steps = 20;
    tc.eta_max = 1e-3;
    tc.eta_min = 1e-4;
    tc.batch_size = 8;

    std::vector<double> losses;
    train(model, opt, data, tc, [&](const StepMetrics& m) { losses.push_back(m.loss); }, "");

    REQUIRE(losses.size() == 200);
    const double initial = losses.front();
    CHECK(std::abs(initial - std::log(259.0)) <= 0.15 * std::log(259.0));
    double tail = 0.0;
    for (std::size_t i = losses.size() - 20; i < losses.size(); ++i) tail += losses[i];
    tail /= 20.0;
    INFO("initial ", initial, " smoothed final ", tail);
    CHECK(tail <= 0.8 * initial);
}

TEST_CASE("train rejects inconsistent setups") {
    TempDir dir("mblm_trainbad_test");
    SUBCASE("bad schedule") {
        TrainRig rig(10, 1 << 30);
        rig.cfg.warmup_steps = 10;
        CHECK_THROWS_AS(train(rig.model, rig.opt, rig.data, rig.cfg, nullptr, ""), ConfigError);
    }
    SUBCASE("batch size mismatch") {
        TrainRig rig(10, 1 << 30);
        rig.cfg.batch_size = 3;
        CHECK_THROWS_AS(train(rig.model, rig.opt, rig.data, rig.cfg, nullptr, ""), ConfigError);
    }
    SUBCASE("sample width mismatch") {
        TrainRig rig(10, 1 << 30);
        BatchIterator narrow(random_corpus(20, 6, rig.model_cfg.vocab_size, 123), 2, 42);
        CHECK_THROWS_AS(train(rig.model, rig.opt, narrow, rig.cfg, nullptr, ""), ConfigError);
    }
    SUBCASE("optimizer slot mismatch") {
        TrainRig rig(10, 1 << 30);
        rig.opt.slots.pop_back();
        CHECK_THROWS_AS(train(rig.model, rig.opt, rig.data, rig.cfg, nullptr, ""), ConfigError);
    }
    SUBCASE("optimizer step mismatch") {
        TrainRig rig(10, 1 << 30);
        rig.opt.step = 3;
        CHECK_THROWS_AS(train(rig.model, rig.opt, rig.data, rig.cfg, nullptr, ""), ConfigError);
    }
}

TEST_CASE("a non-finite loss aborts and names the step") {
    TrainRig rig(10, 1 << 30);
    rig.model.final_norm_gain.data()[0] = std::numeric_limits<float>::quiet_NaN();
    try {
        train(rig.model, rig.opt, rig.data, rig.cfg, nullptr, "");
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("step 1") != std::string::npos);
    }
}

TEST_CASE("checkpoint save-load-save is byte-identical") {
    TempDir dir("mblm_ckpt_test");
    TrainRig rig(4, 1 << 30);
    train(rig.model, rig.opt, rig.data, rig.cfg, nullptr, "");  // nonzero moments

    const std::string first = dir.str() + "/a.mblm";
    const std::string second = dir.str() + "/b.mblm";
    const std::string cursor = cursor_to_json(rig.data.cursor());
    save_checkpoint(first, rig.model, &rig.opt, 4, 64, cursor);

    LoadedCheckpoint loaded = load_checkpoint(first);
    CHECK(loaded.meta.config == rig.model_cfg);
    CHECK(loaded.meta.step == 4);
    CHECK(loaded.meta.tokens_seen == 64);
    CHECK(loaded.meta.has_optimizer);
    CHECK(loaded.opt.step == 4);
    CHECK(cursor_from_json(loaded.meta.rng_state_json).index ==
          rig.data.cursor().index);
    require_same_tensors(rig.model, loaded.model);
    for (std::size_t i = 0; i < rig.opt.slots.size(); ++i) {
        CHECK(std::memcmp(rig.opt.slots[i].m.data(), loaded.opt.slots[i].m.data(),
                          static_cast<std::size_t>(rig.opt.slots[i].m.size()) * sizeof(float)) ==
              0);
    }

    save_checkpoint(second, loaded.model, &loaded.opt, loaded.meta.step,
                    loaded.meta.tokens_seen, loaded.meta.rng_state_json);
    CHECK(slurp(first) == slurp(second));
}

TEST_CASE("checkpoint without moments round-trips too") {
    TempDir dir("mblm_ckpt_plain_test");
    auto model = init_model<float>(testutil::tiny_config(FfnMode::dedicated), 21);
    const std::string first = dir.str() + "/a.mblm";
    save_checkpoint(first, model, nullptr, 0, 0, "");

    const CheckpointMeta meta = inspect_checkpoint(first);
    CHECK_FALSE(meta.has_optimizer);
    CHECK(meta.step == 0);
    CHECK(meta.rng_state_json == "{}");

    LoadedCheckpoint loaded = load_checkpoint(first);
    CHECK(loaded.opt.slots.empty());
    require_same_tensors(model, loaded.model);

    const std::string second = dir.str() + "/b.mblm";
    save_checkpoint(second, loaded.model, nullptr, 0, 0, loaded.meta.rng_state_json);
    CHECK(slurp(first) == slurp(second));
}

TEST_CASE("checkpoint loader rejects damaged files") {
    TempDir dir("mblm_ckpt_bad_test");
    auto model = init_model<float>(testutil::tiny_config(FfnMode::shared), 8);
    const std::string path = dir.str() + "/ck.mblm";

    SUBCASE("wrong magic") {
        save_checkpoint(path, model, nullptr, 0, 0, "");
        std::string bytes = slurp(path);
        bytes[0] = 'X';
        std::ofstream(path, std::ios::binary | std::ios::trunc) << bytes;
        CHECK_THROWS_AS(load_checkpoint(path), DataError);
    }
    SUBCASE("unsupported version") {
        save_checkpoint(path, model, nullptr, 0, 0, "");
        std::string bytes = slurp(path);
        bytes[4] = 9;
        std::ofstream(path, std::ios::binary | std::ios::trunc) << bytes;
        CHECK_THROWS_AS(load_checkpoint(path), DataError);
    }
    SUBCASE("missing tensor") {
        save_checkpoint(path, model, nullptr, 0, 0, "");
        rewrite_header(path, [](nlohmann::json& j) { j["tensors"].erase("lm_head"); });
        CHECK_THROWS_AS(load_checkpoint(path), DataError);
    }
    SUBCASE("unexpected tensor") {
        save_checkpoint(path, model, nullptr, 0, 0, "");
        rewrite_header(path, [](nlohmann::json& j) {
            j["tensors"]["stowaway"] = j["tensors"]["lm_head"];
        });
        CHECK_THROWS_AS(load_checkpoint(path), DataError);
    }
    SUBCASE("shape mismatch") {
        save_checkpoint(path, model, nullptr, 0, 0, "");
        rewrite_header(path, [](nlohmann::json& j) {
            j["tensors"]["lm_head"]["dims"] = {1, 2};
        });
        CHECK_THROWS_AS(load_checkpoint(path), DataError);
    }
    SUBCASE("payload overrun") {
        save_checkpoint(path, model, nullptr, 0, 0, "");
        rewrite_header(path, [](nlohmann::json& j) {
            j["tensors"]["lm_head"]["offset"] = 1u << 30;
        });
        CHECK_THROWS_AS(load_checkpoint(path), DataError);
    }
    SUBCASE("truncated file") {
        save_checkpoint(path, model, nullptr, 0, 0, "");
        const std::string bytes = slurp(path);
        std::ofstream(path, std::ios::binary | std::ios::trunc)
            << bytes.substr(0, bytes.size() - 5);
        CHECK_THROWS_AS(load_checkpoint(path), DataError);
    }
    SUBCASE("not a file") {
        CHECK_THROWS_AS(load_checkpoint(dir.str() + "/absent.mblm"), DataError);
    }
}
