#include "spectree/speculator.hpp"

#include <algorithm>
#include <cmath>
#include <future>

namespace spectree {

namespace grid {

bool is_grid_config(SpecConfig cfg) {
    return std::find(kBeamWidths.begin(), kBeamWidths.end(), cfg.beam_width) != kBeamWidths.end() &&
           std::find(kBeamDepths.begin(), kBeamDepths.end(), cfg.beam_depth) != kBeamDepths.end();
}

int index_of(SpecConfig cfg) {
    for (int wi = 0; wi < static_cast<int>(kBeamWidths.size()); ++wi)
        for (int di = 0; di < static_cast<int>(kBeamDepths.size()); ++di)
            if (kBeamWidths[wi] == cfg.beam_width && kBeamDepths[di] == cfg.beam_depth)
                return wi * static_cast<int>(kBeamDepths.size()) + di;
    fail(Errc::invalid_argument, "config (" + std::to_string(cfg.beam_width) + ", " +
                                     std::to_string(cfg.beam_depth) + ") is not on the 15-point grid");
}

SpecConfig config_at(int index) {
    if (index < 0 || index >= kNumConfigs)
        fail(Errc::invalid_argument, "config index " + std::to_string(index) + " out of range");
    const int nd = static_cast<int>(kBeamDepths.size());
    return {kBeamWidths[index / nd], kBeamDepths[index % nd]};
}

}  // namespace grid

double NgramTable::prob(std::span<const TokenId> context, TokenId token) const {
    std::int64_t count = 0;
    std::int64_t total = 0;
    if (static_cast<int>(context.size()) == order - 1) {
        auto it = contexts.find(std::vector<TokenId>(context.begin(), context.end()));
        if (it != contexts.end()) {
            total = it->second.total;
            auto ct = it->second.counts.find(token);
            if (ct != it->second.counts.end()) count = ct->second;
        }
    }
    return (static_cast<double>(count) + alpha) /
           (static_cast<double>(total) + alpha * vocab_size);
}

NgramTable ngram_fit(const std::vector<std::vector<TokenId>>& corpus, int order, double alpha,
                     int vocab_size) {
    if (order < 1 || alpha <= 0.0 || vocab_size < 1)
        fail(Errc::invalid_argument, "ngram_fit: need order >= 1, alpha > 0, vocab >= 1");
    if (corpus.empty())
        fail(Errc::empty_input, "ngram_fit: empty corpus");
    NgramTable table;
    table.order = order;
    table.alpha = alpha;
    table.vocab_size = vocab_size;
    for (const auto& seq : corpus) {
        for (size_t i = static_cast<size_t>(order) - 1; i < seq.size(); ++i) {
            std::vector<TokenId> ctx(seq.begin() + (i - order + 1), seq.begin() + i);
            auto& bucket = table.contexts[std::move(ctx)];
            bucket.counts[seq[i]] += 1;
            bucket.total += 1;
        }
    }
    return table;
}

std::vector<double> NgramSsm::next_log_probs(std::span<const TokenId> prefix) {
    std::span<const TokenId> ctx;
    const size_t need = static_cast<size_t>(table_.order) - 1;
    if (prefix.size() >= need) ctx = prefix.subspan(prefix.size() - need);
    // Shorter prefixes keep an undersized context, which prob() treats as
    // unseen (uniform fallback).
    else ctx = prefix;
    std::vector<double> lp(table_.vocab_size);
    for (TokenId t = 0; t < table_.vocab_size; ++t) lp[t] = std::log(table_.prob(ctx, t));
    return lp;
}

TransformerSsm::TransformerSsm(int id, std::shared_ptr<const ModelWeights> weights)
    : id_(id), weights_(std::move(weights)), cache_(weights_->config) {}

std::vector<double> TransformerSsm::next_log_probs(std::span<const TokenId> prefix) {
    LogitRow logits = prefill(*weights_, prefix, cache_);
    // Log softmax with max subtraction.
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double denom = 0.0;
    for (double v : logits) denom += std::exp(v - mx);
    const double log_denom = std::log(denom);
    for (double& v : logits) v = (v - mx) - log_denom;
    return logits;
}

std::vector<std::vector<TokenId>> beam_speculate(Ssm& ssm, std::span<const TokenId> prefix,
                                                 SpecConfig cfg, TokenId eos) {
    if (prefix.empty())
        fail(Errc::empty_input, "beam_speculate: empty prefix");
    if (cfg.beam_width < 1 || cfg.beam_depth < 1)
        fail(Errc::invalid_argument, "beam_speculate: width and depth must be >= 1");

    struct Beam {
        std::vector<TokenId> tokens;  // speculated continuation, excludes the root
        double log_prob = 0.0;
        bool done = false;
    };
    std::vector<Beam> beams{Beam{}};
    std::vector<TokenId> scratch(prefix.begin(), prefix.end());

    struct Candidate {
        double log_prob;
        TokenId token;  // kNoEosToken marks a carried-over finished beam
        int beam;
    };
    std::vector<Candidate> candidates;

    for (int step = 0; step < cfg.beam_depth; ++step) {
        bool any_live = false;
        for (const Beam& b : beams)
            if (!b.done) any_live = true;
        if (!any_live) break;

        candidates.clear();
        for (int bi = 0; bi < static_cast<int>(beams.size()); ++bi) {
            const Beam& b = beams[bi];
            if (b.done) {
                candidates.push_back({b.log_prob, kNoEosToken, bi});
                continue;
            }
            scratch.resize(prefix.size());
            scratch.insert(scratch.end(), b.tokens.begin(), b.tokens.end());
            const std::vector<double> lp = ssm.next_log_probs(scratch);
            for (TokenId t = 0; t < static_cast<TokenId>(lp.size()); ++t)
                candidates.push_back({b.log_prob + lp[t], t, bi});
        }
        std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
            if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
            if (a.token != b.token) return a.token < b.token;
            return a.beam < b.beam;
        });
        const int keep = std::min<int>(cfg.beam_width, static_cast<int>(candidates.size()));
        std::vector<Beam> next;
        next.reserve(keep);
        for (int i = 0; i < keep; ++i) {
            const Candidate& c = candidates[i];
            Beam nb = beams[c.beam];
            if (c.token != kNoEosToken) {
                nb.tokens.push_back(c.token);
                nb.log_prob = c.log_prob;
                nb.done = (eos != kNoEosToken && c.token == eos);
            }
            next.push_back(std::move(nb));
        }
        beams = std::move(next);
    }

    std::vector<std::vector<TokenId>> sequences;
    sequences.reserve(beams.size());
    for (const Beam& b : beams) {
        std::vector<TokenId> seq;
        seq.reserve(b.tokens.size() + 1);
        seq.push_back(prefix.back());
        seq.insert(seq.end(), b.tokens.begin(), b.tokens.end());
        sequences.push_back(std::move(seq));
    }
    return sequences;
}

TokenTree speculate_tree(std::span<const std::shared_ptr<Ssm>> pool,
                         std::span<const TokenId> prefix,
                         const std::map<int, SpecConfig>& configs, int max_nodes, TokenId eos) {
    if (pool.empty())
        fail(Errc::empty_input, "speculate_tree: empty pool");
    std::vector<SpecConfig> resolved(pool.size());
    for (size_t i = 0; i < pool.size(); ++i) {
        auto it = configs.find(pool[i]->id());
        if (it == configs.end())
            fail(Errc::invalid_argument,
                 "speculate_tree: no config for ssm " + std::to_string(pool[i]->id()));
        resolved[i] = it->second;
    }

    // Pool members run concurrently (each owns its scratch state); the
    // gather is ordered by pool slot, and the merge itself is insensitive to
    // sequence order, so the result does not depend on completion order.
    std::vector<std::vector<std::vector<TokenId>>> gathered(pool.size());
    if (pool.size() == 1) {
        gathered[0] = beam_speculate(*pool[0], prefix, resolved[0], eos);
    } else {
        std::vector<std::future<std::vector<std::vector<TokenId>>>> futures;
        futures.reserve(pool.size());
        for (size_t i = 0; i < pool.size(); ++i)
            futures.push_back(std::async(std::launch::async, [&, i] {
                return beam_speculate(*pool[i], prefix, resolved[i], eos);
            }));
        for (size_t i = 0; i < pool.size(); ++i) gathered[i] = futures[i].get();
    }

    std::vector<std::vector<TokenId>> sequences;
    for (auto& seqs : gathered)
        for (auto& s : seqs) sequences.push_back(std::move(s));
    return TokenTree::merge_sequences(sequences, max_nodes);
}

TokenTree speculate_tree(std::span<const std::shared_ptr<Ssm>> pool,
                         std::span<const TokenId> prefix, SpecConfig cfg, int max_nodes,
                         TokenId eos) {
    std::map<int, SpecConfig> configs;
    for (const auto& ssm : pool) configs[ssm->id()] = cfg;
    return speculate_tree(pool, prefix, configs, max_nodes, eos);
}

}  // namespace spectree
