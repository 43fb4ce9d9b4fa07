#include "spectree/boost_tuning.hpp"

#include <algorithm>

namespace spectree {

int matching_length(std::span<const TokenId> a, std::span<const TokenId> b) {
    const size_t n = std::min(a.size(), b.size());
    size_t i = 0;
    while (i < n && a[i] == b[i]) ++i;
    return static_cast<int>(i);
}

std::vector<TokenId> greedy_continuation(Ssm& ssm, std::span<const TokenId> prompt, int horizon,
                                         TokenId eos) {
    std::vector<TokenId> seq(prompt.begin(), prompt.end());
    std::vector<TokenId> out;
    out.reserve(horizon);
    for (int i = 0; i < horizon; ++i) {
        const std::vector<double> lp = ssm.next_log_probs(seq);
        const TokenId next = argmax_token(lp);
        out.push_back(next);
        seq.push_back(next);
        if (eos != kNoEosToken && next == eos) break;
    }
    return out;
}

std::vector<PromptSample> materialize_samples(const ModelWeights& llm,
                                              const std::vector<std::vector<TokenId>>& prompts,
                                              int horizon, TokenId eos) {
    std::vector<PromptSample> samples;
    samples.reserve(prompts.size());
    for (const auto& prompt : prompts) {
        GenerationRequest req{prompt, horizon, eos};
        GenerationResult res = run_incremental(llm, req);
        PromptSample s;
        s.prompt = prompt;
        s.llm_continuation.assign(res.sequence.begin() + static_cast<long>(prompt.size()),
                                  res.sequence.end());
        samples.push_back(std::move(s));
    }
    return samples;
}

BoostPool collective_boost_tune(int pool_size, const std::vector<PromptSample>& corpus,
                                const SsmFactory& factory, int match_horizon, TokenId eos) {
    if (pool_size < 1)
        fail(Errc::invalid_argument, "collective_boost_tune: pool_size must be >= 1");
    if (corpus.empty())
        fail(Errc::empty_input, "collective_boost_tune: empty corpus");

    BoostPool pool;
    pool.match_horizon = match_horizon;
    std::vector<PromptSample> residual = corpus;

    for (int round = 0; round < pool_size && !residual.empty(); ++round) {
        std::shared_ptr<Ssm> ssm = factory(residual, round);
        std::vector<PromptSample> remaining;
        for (PromptSample& sample : residual) {
            const int horizon = static_cast<int>(sample.llm_continuation.size());
            const std::vector<TokenId> guess =
                greedy_continuation(*ssm, sample.prompt, horizon, eos);
            const int matched = matching_length(guess, sample.llm_continuation);
            // A sample is marked (dropped) when the SSM reproduces at least
            // match_horizon of the LLM's subsequent tokens.
            if (matched < match_horizon) remaining.push_back(std::move(sample));
        }
        pool.ssms.push_back(std::move(ssm));
        pool.residual_counts.push_back(static_cast<std::int64_t>(remaining.size()));
        residual = std::move(remaining);
    }
    return pool;
}

SsmFactory make_ngram_factory(int order, double alpha, int vocab_size) {
    return [order, alpha, vocab_size](const std::vector<PromptSample>& residual,
                                      int round) -> std::shared_ptr<Ssm> {
        std::vector<std::vector<TokenId>> streams;
        streams.reserve(residual.size());
        for (const PromptSample& s : residual) {
            std::vector<TokenId> stream = s.prompt;
            stream.insert(stream.end(), s.llm_continuation.begin(), s.llm_continuation.end());
            streams.push_back(std::move(stream));
        }
        return std::make_shared<NgramSsm>(round, ngram_fit(streams, order, alpha, vocab_size));
    };
}

double pool_coverage(const ModelWeights& llm, const BoostPool& pool,
                     std::span<const GenerationRequest> eval_requests, SpecConfig cfg,
                     const SpeculativeOptions& opts) {
    if (eval_requests.empty())
        fail(Errc::empty_input, "pool_coverage: empty evaluation set");
    RunMetrics total;
    for (const GenerationRequest& req : eval_requests) {
        GenerationResult res = run_speculative(llm, pool.ssms, cfg, req, opts);
        total.accumulate(res.metrics);
    }
    return total.verified_per_step;
}

}  // namespace spectree
