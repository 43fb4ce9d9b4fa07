#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "spectree/speculator.hpp"
#include "spectree/token_tree.hpp"
#include "spectree/transformer.hpp"

namespace spectree {

struct GenerationRequest {
    std::vector<TokenId> prompt;
    int max_new_tokens = 1;
    TokenId eos = kNoEosToken;
};

struct RunMetrics {
    std::int64_t llm_steps = 0;
    std::int64_t ssm_runs = 0;  // per-SSM decoding steps (pool size x depth per step)
    std::int64_t tokens_generated = 0;
    double verified_per_step = 0.0;  // tokens_generated / llm_steps
    double wall_ms = 0.0;

    void accumulate(const RunMetrics& other);
};

struct GenerationResult {
    std::vector<TokenId> sequence;  // prompt followed by generated tokens
    RunMetrics metrics;
};

// One speculative configuration decision per decoding step. `sequence` is
// the current token sequence; `hidden` is the final hidden state at its last
// position when the selector asked for it (wants_hidden), empty otherwise.
class ConfigSelector {
public:
    virtual ~ConfigSelector() = default;
    virtual SpecConfig choose(std::span<const TokenId> sequence,
                              std::span<const double> hidden) = 0;
    virtual bool wants_hidden() const { return false; }
};

class FixedConfigSelector final : public ConfigSelector {
public:
    explicit FixedConfigSelector(SpecConfig cfg) : cfg_(cfg) {}
    SpecConfig choose(std::span<const TokenId>, std::span<const double>) override { return cfg_; }

private:
    SpecConfig cfg_;
};

struct SpeculativeOptions {
    int max_tree_nodes = kDefaultMaxTreeNodes;
};

// Alg-1 style greedy loop: one token per LLM step until EOS or budget. The
// correctness oracle for everything else.
GenerationResult run_incremental(const ModelWeights& llm, const GenerationRequest& req);

// Speculate -> TreeParallelDecode -> Verify loop. Produces exactly the same
// sequence as run_incremental for the same request, in fewer LLM steps
// whenever speculation matches.
GenerationResult run_speculative(const ModelWeights& llm,
                                 std::span<const std::shared_ptr<Ssm>> pool,
                                 ConfigSelector& selector, const GenerationRequest& req,
                                 const SpeculativeOptions& opts = {});

inline GenerationResult run_speculative(const ModelWeights& llm,
                                        std::span<const std::shared_ptr<Ssm>> pool,
                                        SpecConfig cfg, const GenerationRequest& req,
                                        const SpeculativeOptions& opts = {}) {
    FixedConfigSelector selector(cfg);
    return run_speculative(llm, pool, selector, req, opts);
}

struct ComparisonReport {
    struct PromptOutcome {
        bool match = false;
        int first_mismatch = -1;  // sequence index of the first divergence
        RunMetrics incremental;
        RunMetrics speculative;
    };
    std::vector<PromptOutcome> prompts;
    RunMetrics incremental_total;
    RunMetrics speculative_total;
    int mismatches = 0;
};

struct CompareHooks {
    // Test-only divergence injection applied to the speculative output.
    std::function<void(std::vector<TokenId>&)> perturb_speculative;
};

ComparisonReport compare_equivalence(const ModelWeights& llm,
                                     std::span<const std::shared_ptr<Ssm>> pool,
                                     ConfigSelector& selector,
                                     std::span<const GenerationRequest> corpus,
                                     const SpeculativeOptions& opts = {},
                                     const CompareHooks* hooks = nullptr);

}  // namespace spectree
