#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "spectree/transformer.hpp"
#include "test_support.hpp"

using namespace spectree;

namespace {

ModelConfig toy_config() {
    ModelConfig cfg;
    cfg.num_layers = 2;
    cfg.num_heads = 2;
    cfg.d_model = 16;
    cfg.vocab_size = 32;
    cfg.max_positions = 64;
    return cfg;
}

std::vector<TokenId> random_tokens(std::mt19937& rng, int len, int vocab) {
    std::uniform_int_distribution<TokenId> tok(0, vocab - 1);
    std::vector<TokenId> out(len);
    for (auto& t : out) t = tok(rng);
    return out;
}

// Per-path incremental oracle: fresh cache, prefill the prompt, then decode
// the tree path token by token; returns the last logits.
LogitRow per_path_logits(const ModelWeights& w, const std::vector<TokenId>& prompt,
                         const std::vector<TokenId>& path_below_root) {
    KVCache cache(w.config);
    LogitRow logits = prefill(w, prompt, cache);
    int position = static_cast<int>(prompt.size());
    for (TokenId t : path_below_root) {
        logits = decode_incremental(w, t, position, cache);
        ++position;
    }
    return logits;
}

}  // namespace

TEST_CASE("init_random_weights determinism and parameter count") {
    const ModelConfig cfg = toy_config();
    const ModelWeights a = init_random_weights(cfg, 42);
    const ModelWeights b = init_random_weights(cfg, 42);
    CHECK(a.token_embedding.data == b.token_embedding.data);
    CHECK(a.layers[1].w_ff2.data == b.layers[1].w_ff2.data);
    CHECK(a.output_projection.data == b.output_projection.data);

    const ModelWeights c = init_random_weights(cfg, 1);
    const ModelWeights d = init_random_weights(cfg, 2);
    CHECK(c.token_embedding.data != d.token_embedding.data);

    // Closed-form shape sum, written out independently.
    const std::size_t d_model = 16, vocab = 32, lmax = 64, layers = 2, ffn = 4 * 16;
    const std::size_t expected = vocab * d_model + lmax * d_model +
                                 layers * (4 * d_model * d_model + d_model * ffn + ffn * d_model +
                                           4 * d_model) +
                                 2 * d_model + d_model * vocab;
    CHECK(cfg.parameter_count() == expected);

    // And the actual buffers add up to the same count.
    std::size_t actual = a.token_embedding.size() + a.position_embedding.size() +
                         a.lnf_gamma.size() + a.lnf_beta.size() + a.output_projection.size();
    for (const auto& layer : a.layers)
        actual += layer.ln1_gamma.size() + layer.ln1_beta.size() + layer.wq.size() +
                  layer.wk.size() + layer.wv.size() + layer.wo.size() + layer.ln2_gamma.size() +
                  layer.ln2_beta.size() + layer.w_ff1.size() + layer.w_ff2.size();
    CHECK(actual == expected);

    // All entries finite and inside the init range.
    for (double v : a.token_embedding.data) CHECK(std::abs(v) < 0.08);
}

TEST_CASE("attention with a single row reduces to V * Wo") {
    const int d_model = 4;
    Matrix x(1, d_model);
    Matrix wq(d_model, d_model), wk(d_model, d_model), wv(d_model, d_model), wo(d_model, d_model);
    std::mt19937 rng(5);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (auto* m : {&x, &wq, &wk, &wv, &wo})
        for (double& v : m->data) v = u(rng);

    const Matrix o = attention(x, wq, wk, wv, wo, 2, causal_mask(1));

    std::vector<double> v_row(d_model, 0.0);
    matvec({x.row(0), 4}, wv, v_row);
    std::vector<double> expected(d_model, 0.0);
    matvec(v_row, wo, expected);
    for (int c = 0; c < d_model; ++c)
        CHECK(o.at(0, c) == doctest::Approx(expected[c]).epsilon(1e-12));
}

TEST_CASE("attention 2x2 hand-computed identity case") {
    // d_model 2, one head, all weights identity, X = [e1; e2]. Scores are
    // QK^T/sqrt(2) = I/sqrt(2); the upper-right entry is masked.
    const int d_model = 2;
    Matrix x(2, d_model);
    x.at(0, 0) = 1.0;
    x.at(1, 1) = 1.0;
    Matrix eye(d_model, d_model);
    eye.at(0, 0) = eye.at(1, 1) = 1.0;

    const Matrix o = attention(x, eye, eye, eye, eye, 1, causal_mask(2));

    // Row 0 attends only itself: H = V0 = e1.
    CHECK(o.at(0, 0) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(o.at(0, 1) == doctest::Approx(0.0).epsilon(1e-15));
    // Row 1: scores (0, 1/sqrt(2)) -> weights computed by hand.
    const double s = 1.0 / std::sqrt(2.0);
    const double w1 = std::exp(s) / (std::exp(0.0) + std::exp(s));
    const double w0 = 1.0 - w1;
    CHECK(o.at(1, 0) == doctest::Approx(w0).epsilon(1e-12));
    CHECK(o.at(1, 1) == doctest::Approx(w1).epsilon(1e-12));
}

TEST_CASE("attention causality: row j ignores later rows") {
    const int d_model = 8, l = 5;
    std::mt19937 rng(9);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Matrix wq(d_model, d_model), wk(d_model, d_model), wv(d_model, d_model), wo(d_model, d_model);
    for (auto* m : {&wq, &wk, &wv, &wo})
        for (double& v : m->data) v = u(rng);
    Matrix x(l, d_model);
    for (double& v : x.data) v = u(rng);

    const Matrix base = attention(x, wq, wk, wv, wo, 2, causal_mask(l));
    Matrix perturbed = x;
    for (int c = 0; c < d_model; ++c) perturbed.at(3, c) += 10.0 * u(rng);
    const Matrix out = attention(perturbed, wq, wk, wv, wo, 2, causal_mask(l));

    // Rows 0..2 are bitwise unaffected by changing row 3 (masked weights are
    // exactly zero, not merely tiny).
    for (int j = 0; j < 3; ++j)
        for (int c = 0; c < d_model; ++c) CHECK(out.at(j, c) == base.at(j, c));
}

TEST_CASE("attention shape errors") {
    Matrix x(2, 4);
    Matrix w(4, 4), bad(3, 4);
    CHECK_THROWS_AS(attention(x, bad, w, w, w, 2, causal_mask(2)), Error);
    CHECK_THROWS_AS(attention(x, w, w, w, w, 3, causal_mask(2)), Error);
    CHECK_THROWS_AS(attention(x, w, w, w, w, 2, causal_mask(3)), Error);
}

TEST_CASE("masked softmax: unmasked rows normalize, masked entries are exactly zero") {
    // Mirrors the production max-subtraction recipe on random score rows.
    std::mt19937 rng(13);
    std::uniform_real_distribution<double> u(-50.0, 50.0);
    for (int iter = 0; iter < 1000; ++iter) {
        const int n = 1 + static_cast<int>(rng() % 12);
        std::vector<double> scores(n);
        std::vector<bool> masked(n, false);
        for (int i = 0; i < n; ++i) scores[i] = u(rng);
        for (int i = 1; i < n; ++i) masked[i] = (rng() % 3 == 0);  // keep entry 0 unmasked
        for (int i = 0; i < n; ++i)
            if (masked[i]) scores[i] += kMaskNegInf;

        double mx = scores[0];
        for (double s : scores) mx = std::max(mx, s);
        double denom = 0.0;
        for (double& s : scores) {
            s = std::exp(s - mx);
            denom += s;
        }
        double unmasked_sum = 0.0;
        for (int i = 0; i < n; ++i) {
            const double w = scores[i] / denom;
            if (masked[i])
                CHECK(w == 0.0);
            else
                unmasked_sum += w;
        }
        CHECK(std::abs(unmasked_sum - 1.0) <= 1e-12);
    }
}

TEST_CASE("prefill of one token equals a single decode") {
    const ModelWeights w = init_random_weights(toy_config(), 7);
    KVCache a(w.config), b(w.config);
    const std::vector<TokenId> prompt{5};
    const LogitRow via_prefill = prefill(w, prompt, a);
    const LogitRow via_decode = decode_incremental(w, 5, 0, b);
    CHECK(via_prefill == via_decode);  // same computation, bit-identical
}

TEST_CASE("prefill then incremental decode matches whole-sequence recompute and the reference") {
    const ModelWeights w = init_random_weights(toy_config(), 11);
    std::mt19937 rng(17);
    for (int iter = 0; iter < 10; ++iter) {
        const auto prompt = random_tokens(rng, 6, w.config.vocab_size);
        const auto extra = random_tokens(rng, 5, w.config.vocab_size);

        KVCache cache(w.config);
        LogitRow logits = prefill(w, prompt, cache);
        std::vector<TokenId> all = prompt;
        for (TokenId t : extra) {
            logits = decode_incremental(w, t, static_cast<int>(all.size()), cache);
            all.push_back(t);
        }

        KVCache fresh(w.config);
        const LogitRow recomputed = prefill(w, all, fresh);
        CHECK(test::max_abs_delta(logits, recomputed) <= 1e-9);

        const auto reference = test::reference_forward(w, all);
        CHECK(test::max_abs_delta(logits, reference.back()) <= 1e-9);
    }
}

TEST_CASE("prefill rejects prompts beyond max positions") {
    ModelConfig cfg = toy_config();
    cfg.max_positions = 8;
    const ModelWeights w = init_random_weights(cfg, 3);
    KVCache cache(cfg);
    const std::vector<TokenId> prompt(9, 1);
    try {
        prefill(w, prompt, cache);
        FAIL("expected prompt too long");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::prompt_too_long);
    }
}

TEST_CASE("decode_incremental enforces the cache watermark") {
    const ModelWeights w = init_random_weights(toy_config(), 3);
    KVCache cache(w.config);
    prefill(w, std::vector<TokenId>{1, 2}, cache);
    try {
        decode_incremental(w, 3, 3, cache);  // position 2 vacant
        FAIL("expected cache gap");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::cache_gap);
    }
}

TEST_CASE("greedy decoding is deterministic across runs") {
    const ModelWeights w = init_random_weights(toy_config(), 21);
    std::vector<TokenId> runs[2];
    for (auto& run : runs) {
        KVCache cache(w.config);
        LogitRow logits = prefill(w, std::vector<TokenId>{3, 1, 4}, cache);
        std::vector<TokenId> seq{3, 1, 4};
        for (int i = 0; i < 10; ++i) {
            const TokenId t = argmax_token(logits);
            run.push_back(t);
            logits = decode_incremental(w, t, static_cast<int>(seq.size()), cache);
            seq.push_back(t);
        }
    }
    CHECK(runs[0] == runs[1]);
}

TEST_CASE("argmax breaks ties toward the lowest token id") {
    const std::vector<double> logits{1.0, 3.0, 3.0, 2.0};
    CHECK(argmax_token(logits) == 1);
}

TEST_CASE("chain of length 1 reduces exactly to decode_incremental") {
    const ModelWeights w = init_random_weights(toy_config(), 31);
    KVCache a(w.config), b(w.config);
    prefill(w, std::vector<TokenId>{2, 7, 1}, a);
    prefill(w, std::vector<TokenId>{2, 7, 1}, b);

    const TokenId chain[1] = {9};
    const auto chain_rows = chain_attention_step(w, chain, 3, a);
    const LogitRow incremental = decode_incremental(w, 9, 3, b);
    CHECK(chain_rows.size() == 1);
    CHECK(chain_rows[0] == incremental);
}

TEST_CASE("chain attention equals sequential decoding") {
    const ModelWeights w = init_random_weights(toy_config(), 33);
    std::mt19937 rng(39);
    for (int iter = 0; iter < 20; ++iter) {
        const auto prompt =
            random_tokens(rng, 4 + static_cast<int>(rng() % 5), w.config.vocab_size);
        const auto chain = random_tokens(rng, 3, w.config.vocab_size);

        KVCache batched(w.config);
        prefill(w, prompt, batched);
        const auto rows = chain_attention_step(w, chain, static_cast<int>(prompt.size()), batched);

        KVCache sequential(w.config);
        prefill(w, prompt, sequential);
        int pos = static_cast<int>(prompt.size());
        for (size_t i = 0; i < chain.size(); ++i) {
            const LogitRow expected = decode_incremental(w, chain[i], pos, sequential);
            CHECK(test::max_abs_delta(rows[i], expected) <= 1e-9);
            ++pos;
        }
    }
}

TEST_CASE("omitting the intra-chain fix corrupts the first row") {
    const ModelWeights w = init_random_weights(toy_config(), 35);
    const std::vector<TokenId> prompt{1, 2, 3};
    const std::vector<TokenId> chain{4, 5, 6};

    KVCache unfixed_cache(w.config);
    prefill(w, prompt, unfixed_cache);
    const auto unfixed =
        detail::chain_attention_step_impl(w, chain, 3, unfixed_cache, /*apply_causal_fix=*/false);

    KVCache oracle_cache(w.config);
    prefill(w, prompt, oracle_cache);
    const LogitRow row0 = decode_incremental(w, chain[0], 3, oracle_cache);

    CHECK(test::max_abs_delta(unfixed[0], row0) > 1e-9);
}

TEST_CASE("tree-aware chain wrapper validates linkage") {
    const ModelWeights w = init_random_weights(toy_config(), 37);
    const TokenTree tree = TokenTree::merge_sequences({{2, 3, 4}, {2, 5}});
    KVCache cache(w.config);
    prefill(w, std::vector<TokenId>{2}, cache);

    const int good[] = {1, 2};  // token 3 then token 4
    CHECK(chain_attention_step(w, tree, good, 1, cache).size() == 2);

    const int bad[] = {1, 3};  // token 3 then its sibling 5
    try {
        chain_attention_step(w, tree, bad, 1, cache);
        FAIL("expected chain not linked");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::chain_not_linked);
    }
}

TEST_CASE("linear tree decodes identically to the incremental chain") {
    const ModelWeights w = init_random_weights(toy_config(), 41);
    const std::vector<TokenId> prompt{6, 2, 9};
    const TokenTree tree = TokenTree::merge_sequences({{9, 4, 8, 1}});

    KVCache cache(w.config);
    prefill(w, prompt, cache);
    const auto decoded = tree_parallel_decode(w, tree, 3, cache);
    CHECK(cache.occupancy() == 3);

    KVCache oracle(w.config);
    LogitRow logits = prefill(w, prompt, oracle);
    CHECK(decoded.tokens[0] == argmax_token(logits));
    CHECK(test::max_abs_delta(decoded.logits[0], logits) <= 1e-9);
    int pos = 3;
    const TokenId path[] = {4, 8, 1};
    for (int i = 0; i < 3; ++i) {
        logits = decode_incremental(w, path[i], pos++, oracle);
        CHECK(decoded.tokens[i + 1] == argmax_token(logits));
        CHECK(test::max_abs_delta(decoded.logits[i + 1], logits) <= 1e-9);
    }
}

TEST_CASE("paper-shaped tree matches the per-path incremental oracle") {
    const ModelWeights w = init_random_weights(toy_config(), 43);
    const std::vector<TokenId> prompt{3, 1, 2};
    const TokenTree tree = TokenTree::merge_sequences({{2, 3, 4, 5}, {2, 3, 6, 7}, {2, 3, 8, 9}});

    KVCache cache(w.config);
    prefill(w, prompt, cache);
    const auto decoded = tree_parallel_decode(w, tree, 3, cache);

    for (int node = 0; node < tree.size(); ++node) {
        const auto path = tree.ancestors(node);
        const std::vector<TokenId> below_root(path.begin() + 1, path.end());
        const LogitRow expected = per_path_logits(w, prompt, below_root);
        CHECK(decoded.tokens[node] == argmax_token(expected));
        CHECK(test::max_abs_delta(decoded.logits[node], expected) <= 1e-9);
    }
}

TEST_CASE("random trees match the oracle") {
    std::mt19937 rng(47);
    const ModelWeights w = init_random_weights(toy_config(), 51);
    for (int iter = 0; iter < 15; ++iter) {
        const auto prompt =
            random_tokens(rng, 3 + static_cast<int>(rng() % 4), w.config.vocab_size);
        auto seqs = test::random_shared_root_sequences(rng, 4, 4, w.config.vocab_size);
        for (auto& s : seqs) s[0] = prompt.back();  // root alignment
        const TokenTree tree = TokenTree::merge_sequences(seqs, 64);

        KVCache cache(w.config);
        prefill(w, prompt, cache);
        const auto decoded = tree_parallel_decode(w, tree, static_cast<int>(prompt.size()), cache);
        CHECK(cache.occupancy() == static_cast<int>(prompt.size()));

        for (int node = 0; node < tree.size(); ++node) {
            const auto path = tree.ancestors(node);
            const std::vector<TokenId> below_root(path.begin() + 1, path.end());
            const LogitRow expected = per_path_logits(w, prompt, below_root);
            CHECK(decoded.tokens[node] == argmax_token(expected));
            CHECK(test::max_abs_delta(decoded.logits[node], expected) <= 1e-9);
        }
    }
}

TEST_CASE("perturbing a non-ancestor never changes a node's output") {
    const ModelWeights w = init_random_weights(toy_config(), 57);
    const std::vector<TokenId> prompt{4, 9};

    // Two branches diverging after the shared second token.
    const TokenTree tree = TokenTree::merge_sequences({{9, 3, 5, 6}, {9, 3, 7, 8}});
    KVCache cache(w.config);
    prefill(w, prompt, cache);
    const auto base = tree_parallel_decode(w, tree, 2, cache);

    // Change the second branch (tokens 7, 8 -> 10, 11): outputs of the first
    // branch's nodes must be bitwise identical.
    const TokenTree altered = TokenTree::merge_sequences({{9, 3, 5, 6}, {9, 3, 10, 11}});
    KVCache cache2(w.config);
    prefill(w, prompt, cache2);
    const auto changed = tree_parallel_decode(w, altered, 2, cache2);

    // Node ids: 0=root(9), 1=3, 2=5, 3=6 in both trees (5 < 7 and 5 < 10).
    for (int node = 0; node <= 3; ++node) {
        CHECK(base.tokens[node] == changed.tokens[node]);
        CHECK(test::max_abs_delta(base.logits[node], changed.logits[node]) == 0.0);
    }
}

TEST_CASE("dfs-overwrite invariant holds at every node") {
    std::mt19937 rng(59);
    const ModelWeights w = init_random_weights(toy_config(), 61);
    for (int iter = 0; iter < 10; ++iter) {
        const auto prompt = random_tokens(rng, 4, w.config.vocab_size);
        auto seqs = test::random_shared_root_sequences(rng, 4, 4, w.config.vocab_size);
        for (auto& s : seqs) s[0] = prompt.back();
        const TokenTree tree = TokenTree::merge_sequences(seqs, 64);

        KVCache cache(w.config);
        prefill(w, prompt, cache);
        const int prefix_len = static_cast<int>(prompt.size());

        int visited = 0;
        TreeDecodeHooks hooks;
        hooks.on_node = [&](int node, int position, const KVCache& c) {
            const auto path = tree.ancestors(node);
            CHECK(position == prefix_len - 1 + tree.depth(node));
            // Positions prefix_len-1 .. position hold exactly the
            // root-to-node tokens.
            for (int k = 0; k <= tree.depth(node); ++k)
                CHECK(c.token_at(prefix_len - 1 + k) == path[k]);
            ++visited;
        };
        tree_parallel_decode(w, tree, prefix_len, cache, &hooks);
        CHECK(visited == tree.size());
    }
}

TEST_CASE("tree deeper than the position budget is rejected") {
    ModelConfig cfg = toy_config();
    cfg.max_positions = 6;
    const ModelWeights w = init_random_weights(cfg, 63);
    KVCache cache(cfg);
    prefill(w, std::vector<TokenId>{1, 2, 3, 4}, cache);
    const TokenTree tree = TokenTree::merge_sequences({{4, 1, 2, 3}});  // depth 3
    try {
        tree_parallel_decode(w, tree, 4, cache);
        FAIL("expected tree too deep");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::tree_too_deep);
    }
}

TEST_CASE("final_hidden matches the reference recompute") {
    const ModelWeights w = init_random_weights(toy_config(), 71);
    std::mt19937 rng(73);
    const auto tokens = random_tokens(rng, 7, w.config.vocab_size);

    KVCache cache(w.config);
    prefill(w, tokens, cache);
    const auto hidden = final_hidden(w, cache);
    CHECK(hidden.size() == static_cast<size_t>(w.config.d_model));

    const auto again = final_hidden(w, cache);
    CHECK(hidden == again);

    const auto reference = test::reference_final_hidden(w, tokens);
    CHECK(test::max_abs_delta(hidden, reference) <= 1e-9);

    KVCache empty(w.config);
    try {
        final_hidden(w, empty);
        FAIL("expected empty context");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::empty_context);
    }
}
