#pragma once

#include <array>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "spectree/token_tree.hpp"
#include "spectree/transformer.hpp"

namespace spectree {

// Beam width / depth of one speculation run. The learned scheduler operates
// on the fixed 15-point grid below; the engine itself accepts any positive
// pair (it clamps depth near the position limit).
struct SpecConfig {
    int beam_width = 1;
    int beam_depth = 1;

    friend bool operator==(SpecConfig a, SpecConfig b) {
        return a.beam_width == b.beam_width && a.beam_depth == b.beam_depth;
    }
};

namespace grid {

inline constexpr std::array<int, 3> kBeamWidths{1, 2, 4};
inline constexpr std::array<int, 5> kBeamDepths{1, 2, 4, 8, 16};
inline constexpr int kNumConfigs = 15;  // width-major, depth-minor

bool is_grid_config(SpecConfig cfg);
int index_of(SpecConfig cfg);      // throws invalid_argument off-grid
SpecConfig config_at(int index);   // inverse of index_of

}  // namespace grid

// Speculation interface. Anything that can score next tokens may implement
// it (the shipped implementations are an n-gram table and a tiny
// transformer); handles are immutable during speculation apart from private
// scratch state, and each handle is driven by one thread at a time.
class Ssm {
public:
    virtual ~Ssm() = default;
    virtual int id() const = 0;
    virtual int vocab_size() const = 0;
    virtual std::string kind() const = 0;
    // Log probabilities over the next token given the whole prefix.
    virtual std::vector<double> next_log_probs(std::span<const TokenId> prefix) = 0;
};

// Add-alpha smoothed n-gram counts:
//   P(t | ctx) = (count(ctx, t) + alpha) / (total(ctx) + alpha * vocab)
// Unseen contexts fall back to the uniform 1/vocab implied by the formula.
struct NgramTable {
    struct Bucket {
        std::map<TokenId, std::int64_t> counts;
        std::int64_t total = 0;

        friend bool operator==(const Bucket&, const Bucket&) = default;
    };

    int order = 2;       // n; contexts are the preceding n-1 tokens
    double alpha = 1.0;  // > 0
    int vocab_size = 0;
    std::map<std::vector<TokenId>, Bucket> contexts;

    double prob(std::span<const TokenId> context, TokenId token) const;
};

NgramTable ngram_fit(const std::vector<std::vector<TokenId>>& corpus, int order, double alpha,
                     int vocab_size);

class NgramSsm final : public Ssm {
public:
    NgramSsm(int id, NgramTable table) : id_(id), table_(std::move(table)) {}

    int id() const override { return id_; }
    int vocab_size() const override { return table_.vocab_size; }
    std::string kind() const override { return "ngram"; }
    std::vector<double> next_log_probs(std::span<const TokenId> prefix) override;

    const NgramTable& table() const { return table_; }

private:
    int id_;
    NgramTable table_;
};

class TransformerSsm final : public Ssm {
public:
    TransformerSsm(int id, std::shared_ptr<const ModelWeights> weights);

    int id() const override { return id_; }
    int vocab_size() const override { return weights_->config.vocab_size; }
    std::string kind() const override { return "tiny-transformer"; }
    std::vector<double> next_log_probs(std::span<const TokenId> prefix) override;

    const ModelWeights& weights() const { return *weights_; }

private:
    int id_;
    std::shared_ptr<const ModelWeights> weights_;
    KVCache cache_;  // private scratch
};

// Beam search over summed log probabilities. Returns up to beam_width
// sequences, each beginning with the last prefix token followed by at most
// beam_depth speculated tokens (fewer once a beam hits `eos`; finished beams
// stay in the candidate set). Ties break by token id, then by beam index.
std::vector<std::vector<TokenId>> beam_speculate(Ssm& ssm, std::span<const TokenId> prefix,
                                                 SpecConfig cfg, TokenId eos = kNoEosToken);

// Runs every pool member with its configured (b, d), then merges all
// candidate sequences into one deduplicated token tree rooted at the last
// prefix token. The gather order is fixed (pool order), and the merge itself
// is insensitive to sequence order, so results do not depend on SSM
// completion order.
TokenTree speculate_tree(std::span<const std::shared_ptr<Ssm>> pool,
                         std::span<const TokenId> prefix,
                         const std::map<int, SpecConfig>& configs,
                         int max_nodes = kDefaultMaxTreeNodes, TokenId eos = kNoEosToken);

// Uniform-config convenience (the default mode: one config shared by all).
TokenTree speculate_tree(std::span<const std::shared_ptr<Ssm>> pool,
                         std::span<const TokenId> prefix, SpecConfig cfg,
                         int max_nodes = kDefaultMaxTreeNodes, TokenId eos = kNoEosToken);

}  // namespace spectree
