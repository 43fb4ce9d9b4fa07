#include "spectree/engine.hpp"

#include <algorithm>
#include <chrono>

namespace spectree {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point start) {
    return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

void check_request(const ModelWeights& llm, const GenerationRequest& req) {
    if (req.prompt.empty())
        fail(Errc::empty_input, "generation request: empty prompt");
    if (req.max_new_tokens < 1)
        fail(Errc::invalid_argument, "generation request: max_new_tokens must be >= 1");
    if (static_cast<int>(req.prompt.size()) + req.max_new_tokens > llm.config.max_positions)
        fail(Errc::prompt_too_long,
             "generation request: prompt + budget exceeds max positions " +
                 std::to_string(llm.config.max_positions));
}

}  // namespace

void RunMetrics::accumulate(const RunMetrics& other) {
    llm_steps += other.llm_steps;
    ssm_runs += other.ssm_runs;
    tokens_generated += other.tokens_generated;
    wall_ms += other.wall_ms;
    verified_per_step =
        llm_steps > 0 ? static_cast<double>(tokens_generated) / static_cast<double>(llm_steps)
                      : 0.0;
}

GenerationResult run_incremental(const ModelWeights& llm, const GenerationRequest& req) {
    check_request(llm, req);
    const auto start = Clock::now();

    GenerationResult result;
    result.sequence = req.prompt;
    KVCache cache(llm.config);
    LogitRow logits = prefill(llm, req.prompt, cache);

    for (int produced = 0; produced < req.max_new_tokens; ++produced) {
        const TokenId next = argmax_token(logits);
        result.sequence.push_back(next);
        result.metrics.llm_steps += 1;
        result.metrics.tokens_generated += 1;
        if (next == req.eos || produced + 1 == req.max_new_tokens) break;
        logits = decode_incremental(llm, next, static_cast<int>(result.sequence.size()) - 1, cache);
    }

    result.metrics.wall_ms = elapsed_ms(start);
    result.metrics.verified_per_step =
        static_cast<double>(result.metrics.tokens_generated) /
        static_cast<double>(result.metrics.llm_steps);
    return result;
}

GenerationResult run_speculative(const ModelWeights& llm,
                                 std::span<const std::shared_ptr<Ssm>> pool,
                                 ConfigSelector& selector, const GenerationRequest& req,
                                 const SpeculativeOptions& opts) {
    check_request(llm, req);
    if (pool.empty())
        fail(Errc::empty_input, "run_speculative: empty pool");
    const auto start = Clock::now();

    GenerationResult result;
    result.sequence = req.prompt;
    std::vector<TokenId>& seq = result.sequence;
    RunMetrics& metrics = result.metrics;

    KVCache cache(llm.config);
    prefill(llm, req.prompt, cache);  // logits discarded: the tree root pass recomputes them

    const int budget = req.max_new_tokens;
    int produced = 0;
    std::vector<double> hidden;

    while (produced < budget) {
        SpecConfig cfg;
        if (selector.wants_hidden()) {
            hidden = final_hidden(llm, cache);
            cfg = selector.choose(seq, hidden);
        } else {
            cfg = selector.choose(seq, {});
        }
        if (cfg.beam_width < 1 || cfg.beam_depth < 1)
            fail(Errc::invalid_argument, "run_speculative: selector returned invalid config");
        // Keep the deepest speculated node within the position limit.
        cfg.beam_depth =
            std::min(cfg.beam_depth, llm.config.max_positions - static_cast<int>(seq.size()) - 1);
        metrics.ssm_runs += static_cast<std::int64_t>(pool.size()) * std::max(cfg.beam_depth, 0);

        TokenTree tree =
            cfg.beam_depth >= 1
                ? speculate_tree(pool, seq, cfg, opts.max_tree_nodes, req.eos)
                : TokenTree::merge_sequences({{seq.back()}}, opts.max_tree_nodes);

        TreeDecodeResult decoded =
            tree_parallel_decode(llm, tree, static_cast<int>(seq.size()), cache);
        metrics.llm_steps += 1;

        std::vector<TokenId> verified = verify(tree, decoded.tokens);
        // Budget truncation, then EOS cut (EOS ends the run even if more
        // verified tokens follow positionally).
        if (static_cast<int>(verified.size()) > budget - produced)
            verified.resize(budget - produced);
        bool hit_eos = false;
        for (size_t i = 0; i < verified.size(); ++i) {
            if (verified[i] == req.eos && req.eos != kNoEosToken) {
                verified.resize(i + 1);
                hit_eos = true;
                break;
            }
        }

        // Re-decode the accepted tokens so the cache holds the whole new
        // sequence (the bonus token's K/V were never computed, and sibling
        // chains may have overwritten the matched path's rows).
        for (TokenId t : verified) {
            decode_incremental(llm, t, static_cast<int>(seq.size()), cache);
            seq.push_back(t);
        }
        produced += static_cast<int>(verified.size());
        metrics.tokens_generated += static_cast<std::int64_t>(verified.size());
        if (hit_eos) break;
    }

    metrics.wall_ms = elapsed_ms(start);
    metrics.verified_per_step = metrics.llm_steps > 0
                                    ? static_cast<double>(metrics.tokens_generated) /
                                          static_cast<double>(metrics.llm_steps)
                                    : 0.0;
    return result;
}

ComparisonReport compare_equivalence(const ModelWeights& llm,
                                     std::span<const std::shared_ptr<Ssm>> pool,
                                     ConfigSelector& selector,
                                     std::span<const GenerationRequest> corpus,
                                     const SpeculativeOptions& opts, const CompareHooks* hooks) {
    ComparisonReport report;
    for (const GenerationRequest& req : corpus) {
        GenerationResult inc = run_incremental(llm, req);
        GenerationResult spec = run_speculative(llm, pool, selector, req, opts);
        if (hooks && hooks->perturb_speculative) hooks->perturb_speculative(spec.sequence);

        ComparisonReport::PromptOutcome outcome;
        outcome.incremental = inc.metrics;
        outcome.speculative = spec.metrics;
        outcome.match = inc.sequence == spec.sequence;
        if (!outcome.match) {
            const size_t n = std::min(inc.sequence.size(), spec.sequence.size());
            size_t i = 0;
            while (i < n && inc.sequence[i] == spec.sequence[i]) ++i;
            outcome.first_mismatch = static_cast<int>(i);
            report.mismatches += 1;
        }
        report.incremental_total.accumulate(inc.metrics);
        report.speculative_total.accumulate(spec.metrics);
        report.prompts.push_back(std::move(outcome));
    }
    return report;
}

}  // namespace spectree
