#pragma once

#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <vector>

#include "spectree/engine.hpp"
#include "spectree/speculator.hpp"

namespace spectree {

// A tuning prompt paired with the LLM's greedy continuation for it.
struct PromptSample {
    std::vector<TokenId> prompt;
    std::vector<TokenId> llm_continuation;
};

// Longest common prefix length.
int matching_length(std::span<const TokenId> a, std::span<const TokenId> b);

// Pool produced by collective boost tuning. ssms are in tuning order: member
// i was fitted on the samples the first i members failed to match, so any
// prefix of the list is itself a valid (smaller) pool.
struct BoostPool {
    std::vector<std::shared_ptr<Ssm>> ssms;
    int match_horizon = 4;
    std::vector<std::int64_t> residual_counts;  // residual size after each round
};

// Sentinel horizon: no sample is ever marked, every round fits the full set.
inline constexpr int kNeverMatchHorizon = std::numeric_limits<int>::max();

using SsmFactory =
    std::function<std::shared_ptr<Ssm>(const std::vector<PromptSample>& residual, int round)>;

// Greedy one-token-at-a-time continuation of an SSM; ties break low.
std::vector<TokenId> greedy_continuation(Ssm& ssm, std::span<const TokenId> prompt, int horizon,
                                         TokenId eos = kNoEosToken);

// Materializes llm_continuation for each prompt by greedy LLM decoding (the
// continuation is deterministic, so callers typically cache the result).
std::vector<PromptSample> materialize_samples(const ModelWeights& llm,
                                              const std::vector<std::vector<TokenId>>& prompts,
                                              int horizon, TokenId eos = kNoEosToken);

// Fit-then-filter loop: fit one SSM on the residual set, mark every sample
// whose SSM greedy continuation matches the LLM continuation for at least
// match_horizon tokens, drop the marked samples, repeat. Stops early when
// the residual empties.
BoostPool collective_boost_tune(int pool_size, const std::vector<PromptSample>& corpus,
                                const SsmFactory& factory, int match_horizon,
                                TokenId eos = kNoEosToken);

// Factory fitting an add-alpha n-gram on prompt + continuation token streams
// of the residual set. Round index becomes the SSM id.
SsmFactory make_ngram_factory(int order, double alpha, int vocab_size);

// Average verified tokens per LLM step over the evaluation requests, running
// the full speculative engine with a fixed config.
double pool_coverage(const ModelWeights& llm, const BoostPool& pool,
                     std::span<const GenerationRequest> eval_requests, SpecConfig cfg,
                     const SpeculativeOptions& opts = {});

}  // namespace spectree
