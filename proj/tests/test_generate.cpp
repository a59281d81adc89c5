#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "mblm/errors.hpp"
#include "mblm/generate.hpp"
#include "testutil.hpp"

using namespace mblm;

namespace {

/// Last-position logits via the training forward pass, the independent
/// reference for the cache kernels.
std::vector<float> tape_last_logits(const TransformerModel<float>& model,
                                    std::span<const TokenId> ids) {
    Tape<float> tape;
    tape.set_recording(false);
    Tensor<float> logits =
        forward(tape, model, ids, 1, static_cast<std::int64_t>(ids.size()));
    const std::int64_t v = model.config.vocab_size;
    std::span<const float> data = logits.data();
    const std::size_t base = data.size() - static_cast<std::size_t>(v);
    return {data.begin() + static_cast<std::ptrdiff_t>(base), data.end()};
}

TokenId argmax_lowest(std::span<const float> logits) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i) {
        if (logits[i] > logits[best]) best = i;
    }
    return static_cast<TokenId>(best);
}

ModelConfig random_tiny_config(Rng& rng, std::int64_t context_len) {
    ModelConfig cfg;
    cfg.n_layers = 1 + static_cast<std::int64_t>(rng.next_below(3));
    cfg.n_heads = 1 + static_cast<std::int64_t>(rng.next_below(2));
    const std::int64_t head_dim = 2 * (1 + static_cast<std::int64_t>(rng.next_below(2)));
    cfg.d_model = cfg.n_heads * head_dim;
    cfg.d_ff = 4 + static_cast<std::int64_t>(rng.next_below(9));
    cfg.vocab_size = 5 + static_cast<std::int64_t>(rng.next_below(12));
    cfg.context_len = context_len;
    cfg.ffn_mode = rng.next_below(2) == 0 ? FfnMode::dedicated : FfnMode::shared;
    return cfg;
}

float max_abs_diff(std::span<const float> a, std::span<const float> b) {
    REQUIRE(a.size() == b.size());
    float worst = 0.0f;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    return worst;
}

}  // namespace

TEST_CASE("prefill logits match the training forward pass") {
    Rng meta(501);
    for (int trial = 0; trial < 10; ++trial) {
        const ModelConfig cfg = random_tiny_config(meta, 12);
        const auto model = init_model<float>(cfg, 1000 + trial);
        for (std::int64_t t : {std::int64_t{1}, std::int64_t{5}, cfg.context_len}) {
            const auto prompt = testutil::random_ids(t, cfg.vocab_size, 77 + trial);
            const PrefillResult<float> pre = prefill(model, prompt);
            CHECK(pre.cache.cached_len == t);
            CHECK(pre.cache.capacity == cfg.context_len);
            const auto reference = tape_last_logits(model, prompt);
            INFO("trial ", trial, " prompt length ", t);
            CHECK(max_abs_diff(pre.last_logits, reference) <= 1e-5f);
        }
    }
}

TEST_CASE("decode_step continues the prompt's rotary numbering") {
    Rng meta(733);
    for (int trial = 0; trial < 5; ++trial) {
        const ModelConfig cfg = random_tiny_config(meta, 12);
        const auto model = init_model<float>(cfg, 300 + trial);
        auto ids = testutil::random_ids(5, cfg.vocab_size, 31 + trial);

        PrefillResult<float> pre = prefill(model, ids);
        for (int extra = 0; extra < 3; ++extra) {
            const TokenId next =
                static_cast<TokenId>((ids.back() + 1) % cfg.vocab_size);
            const auto cached = decode_step(model, pre.cache, next);
            ids.push_back(next);
            const auto reference = tape_last_logits(model, ids);
            INFO("trial ", trial, " position ", ids.size() - 1);
            CHECK(max_abs_diff(cached, reference) <= 1e-5f);
        }
    }
}

TEST_CASE("cached and cache-free greedy decoding agree for 64 steps") {
    Rng meta(9090);
    for (int trial = 0; trial < 10; ++trial) {
        const ModelConfig cfg = random_tiny_config(meta, 80);
        const auto model = init_model<float>(cfg, 40 + trial);
        const auto prompt = testutil::random_ids(8, cfg.vocab_size, 7 + trial);

        GenerationConfig gen;
        gen.max_new_tokens = 64;
        gen.temperature = 0.0;
        const GenerationResult cached = generate(model, prompt, gen);
        REQUIRE(cached.tokens.size() == 64);

        std::vector<TokenId> ids(prompt.begin(), prompt.end());
        std::vector<TokenId> plain;
        for (int step = 0; step < 64; ++step) {
            const auto logits = tape_last_logits(model, ids);
            const TokenId tok = argmax_lowest(logits);
            plain.push_back(tok);
            ids.push_back(tok);
        }
        INFO("trial ", trial);
        CHECK(cached.tokens == plain);
    }
}

TEST_CASE("decode_step advances the cache one position at a time") {
    const ModelConfig cfg = testutil::tiny_config(FfnMode::shared);
    const auto model = init_model<float>(cfg, 2);
    PrefillResult<float> pre = prefill(model, testutil::random_ids(3, cfg.vocab_size, 5));
    CHECK(pre.cache.cached_len == 3);
    for (std::int64_t expected = 4; expected <= cfg.context_len; ++expected) {
        const auto logits = decode_step(model, pre.cache, 1);
        CHECK(pre.cache.cached_len == expected);
        REQUIRE(static_cast<std::int64_t>(logits.size()) == cfg.vocab_size);
        for (float v : logits) CHECK(std::isfinite(v));
    }
    CHECK_THROWS_AS(decode_step(model, pre.cache, 1), std::out_of_range);
}

TEST_CASE("prefill rejects out-of-range prompts") {
    const ModelConfig cfg = testutil::tiny_config(FfnMode::dedicated);
    const auto model = init_model<float>(cfg, 3);
    CHECK_NOTHROW(prefill(model, testutil::random_ids(cfg.context_len, cfg.vocab_size, 1)));
    CHECK_THROWS_AS(prefill(model, testutil::random_ids(cfg.context_len + 1, cfg.vocab_size, 1)),
                    std::out_of_range);
    CHECK_THROWS_AS(prefill(model, std::span<const TokenId>{}), std::out_of_range);
    const std::vector<TokenId> bad = {0, static_cast<TokenId>(cfg.vocab_size)};
    CHECK_THROWS_AS(prefill(model, bad), std::out_of_range);
}

TEST_CASE("greedy sampling takes the argmax with lowest-id ties") {
    Rng rng(1);
    GenerationConfig gen;
    gen.temperature = 0.0;
    const std::vector<float> logits = {1.0f, 5.0f, 2.0f};
    CHECK(sample<float>(logits, gen, rng) == 1);
    const std::vector<float> tied = {3.0f, 3.0f, 3.0f};
    CHECK(sample<float>(tied, gen, rng) == 0);
}

TEST_CASE("top-k of one forces the most likely id") {
    Rng rng(9);
    GenerationConfig gen;
    gen.temperature = 1.0;
    gen.top_k = 1;
    const std::vector<float> equal = {0.5f, 0.5f, 0.5f, 0.5f};
    for (int i = 0; i < 20; ++i) CHECK(sample<float>(equal, gen, rng) == 0);
}

TEST_CASE("temperature-one sampling matches softmax within 0.02 total variation") {
    const std::vector<float> logits = {0.5f, -0.3f, 1.2f, 0.0f, -1.0f};
    std::vector<double> expected(5);
    double sum = 0.0;
    for (int i = 0; i < 5; ++i) {
        expected[static_cast<std::size_t>(i)] = std::exp(static_cast<double>(logits[static_cast<std::size_t>(i)]));
        sum += expected[static_cast<std::size_t>(i)];
    }
    for (double& p : expected) p /= sum;

    Rng rng(4242);
    GenerationConfig gen;
    gen.temperature = 1.0;
    std::vector<double> counts(5, 0.0);
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) {
        const TokenId t = sample<float>(logits, gen, rng);
        REQUIRE(t >= 0);
        REQUIRE(t < 5);
        counts[static_cast<std::size_t>(t)] += 1.0;
    }
    double tv = 0.0;
    for (int i = 0; i < 5; ++i) {
        tv += std::abs(counts[static_cast<std::size_t>(i)] / draws - expected[static_cast<std::size_t>(i)]);
    }
    tv *= 0.5;
    INFO("total variation ", tv);
    CHECK(tv <= 0.02);
}

TEST_CASE("nucleus truncation keeps the smallest prefix reaching the mass") {
    // probabilities 0.5, 0.3, 0.15, 0.05; a 0.8 nucleus is exactly {0, 1}
    std::vector<float> logits;
    for (double p : {0.5, 0.3, 0.15, 0.05}) logits.push_back(static_cast<float>(std::log(p)));

    Rng rng(31);
    GenerationConfig gen;
    gen.temperature = 1.0;
    gen.top_p = 0.8;
    std::map<TokenId, int> seen;
    for (int i = 0; i < 4000; ++i) seen[sample<float>(logits, gen, rng)] += 1;
    REQUIRE(seen.size() == 2);
    CHECK(seen.count(0) == 1);
    CHECK(seen.count(1) == 1);
    // renormalized to 5/8 vs 3/8
    CHECK(std::abs(seen[0] / 4000.0 - 0.625) <= 0.03);
}

TEST_CASE("top-k applies before top-p") {
    // after top_k = 3 renormalizes to (0.526, 0.316, 0.158), a 0.9 nucleus
    // still needs all three survivors
    std::vector<float> logits;
    for (double p : {0.5, 0.3, 0.15, 0.05}) logits.push_back(static_cast<float>(std::log(p)));
    Rng rng(77);
    GenerationConfig gen;
    gen.temperature = 1.0;
    gen.top_k = 3;
    gen.top_p = 0.9;
    std::map<TokenId, int> seen;
    for (int i = 0; i < 6000; ++i) seen[sample<float>(logits, gen, rng)] += 1;
    REQUIRE(seen.size() == 3);
    CHECK(seen.count(3) == 0);
}

TEST_CASE("sampling validates its knobs") {
    Rng rng(1);
    const std::vector<float> logits = {0.0f, 1.0f};
    GenerationConfig gen;
    gen.top_p = 0.0;
    CHECK_THROWS_AS(sample<float>(logits, gen, rng), ConfigError);
    gen.top_p = 1.5;
    CHECK_THROWS_AS(sample<float>(logits, gen, rng), ConfigError);
    gen.top_p = 1.0;
    gen.temperature = -0.5;
    CHECK_THROWS_AS(sample<float>(logits, gen, rng), ConfigError);
    gen.temperature = 1.0;
    gen.top_k = -1;
    CHECK_THROWS_AS(sample<float>(logits, gen, rng), ConfigError);
}

TEST_CASE("generation determinism and bookkeeping") {
    const ModelConfig cfg = testutil::tiny_config(FfnMode::shared);
    const auto model = init_model<float>(cfg, 12);
    const auto prompt = testutil::random_ids(3, cfg.vocab_size, 9);

    GenerationConfig gen;
    gen.max_new_tokens = 4;
    gen.temperature = 0.8;
    gen.seed = 5;
    const GenerationResult a = generate(model, prompt, gen);
    const GenerationResult b = generate(model, prompt, gen);
    CHECK(a.tokens == b.tokens);
    REQUIRE(a.tokens.size() == 4);
    CHECK(a.latency_ms.size() == a.tokens.size());
    CHECK(a.tokens_per_sec() > 0.0);
    for (TokenId t : a.tokens) {
        CHECK(t >= 0);
        CHECK(t < cfg.vocab_size);
    }

    gen.max_new_tokens = 0;
    const GenerationResult empty = generate(model, prompt, gen);
    CHECK(empty.tokens.empty());
    CHECK(empty.latency_ms.empty());
}

TEST_CASE("a drawn stop id ends generation without being emitted") {
    const ModelConfig cfg = testutil::tiny_config(FfnMode::dedicated);
    const auto model = init_model<float>(cfg, 8);
    const auto prompt = testutil::random_ids(3, cfg.vocab_size, 2);

    GenerationConfig gen;
    gen.max_new_tokens = 5;
    gen.temperature = 0.0;
    const GenerationResult free_run = generate(model, prompt, gen);
    REQUIRE(!free_run.tokens.empty());

    gen.stop_ids = {free_run.tokens[0]};
    const GenerationResult stopped = generate(model, prompt, gen);
    CHECK(stopped.tokens.empty());
}

TEST_CASE("generation stops when the context is exhausted") {
    const ModelConfig cfg = testutil::tiny_config(FfnMode::shared);  // context 8
    const auto model = init_model<float>(cfg, 4);
    GenerationConfig gen;
    gen.max_new_tokens = 5;
    gen.temperature = 0.0;

    // a full-context prompt still yields the one token prefill predicts
    const GenerationResult full = generate(model, testutil::random_ids(8, cfg.vocab_size, 3), gen);
    CHECK(full.tokens.size() == 1);

    // one free slot: that token is decoded once, then its successor ends it
    const GenerationResult near = generate(model, testutil::random_ids(7, cfg.vocab_size, 3), gen);
    CHECK(near.tokens.size() == 2);
}

TEST_CASE("cache memory follows the analytic estimate") {
    for (const char* name : {"mobillama-0.5B", "baseline1"}) {
        const ModelConfig cfg = preset(name);
        for (std::int64_t len : {std::int64_t{1}, std::int64_t{128}, cfg.context_len}) {
            const auto cache = KvCache<float>::reserve(cfg, len);
            const MemoryEstimate est = memory_estimate(cfg, sizeof(float), 1, len, false);
            INFO(name, " at length ", len);
            CHECK(cache.memory_bytes() == est.kv_cache_bytes);
        }
    }
    const ModelConfig tiny = testutil::tiny_config(FfnMode::shared);
    CHECK(KvCache<float>::reserve(tiny, 8).memory_bytes() ==
          memory_estimate(tiny, sizeof(float), 1, 8, false).kv_cache_bytes);
    CHECK_THROWS_AS(KvCache<float>::reserve(tiny, 0), std::out_of_range);
    CHECK_THROWS_AS(KvCache<float>::reserve(tiny, tiny.context_len + 1), std::out_of_range);
}
