#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "spectree/matrix.hpp"
#include "spectree/token_tree.hpp"

namespace spectree {

// Additive realization of the -inf mask entry. Scores stay far below 1e13 in
// magnitude, so score + kMaskNegInf rounds to exactly kMaskNegInf and the
// masked weight underflows to exactly 0 after softmax.
inline constexpr double kMaskNegInf = -1e30;

struct ModelConfig {
    int num_layers = 2;
    int num_heads = 2;
    int d_model = 16;
    int vocab_size = 258;
    int max_positions = 256;
    int ffn_mult = 4;

    int head_dim() const { return d_model / num_heads; }
    int ffn_dim() const { return ffn_mult * d_model; }

    void validate() const;  // throws shape_mismatch on inconsistent dims
    std::size_t parameter_count() const;
};

struct LayerWeights {
    std::vector<double> ln1_gamma, ln1_beta;
    Matrix wq, wk, wv, wo;  // d_model x d_model, per-head blocks fused column-wise
    std::vector<double> ln2_gamma, ln2_beta;
    Matrix w_ff1;  // d_model x ffn_dim
    Matrix w_ff2;  // ffn_dim x d_model
};

// Pre-norm decoder blocks with a GELU feed-forward, learned absolute
// positions, final layer norm, untied output projection.
struct ModelWeights {
    ModelConfig config;
    Matrix token_embedding;     // vocab_size x d_model
    Matrix position_embedding;  // max_positions x d_model
    std::vector<LayerWeights> layers;
    std::vector<double> lnf_gamma, lnf_beta;
    Matrix output_projection;  // d_model x vocab_size

    std::size_t parameter_count() const { return config.parameter_count(); }
};

// Deterministic init: same seed gives bit-identical weights (the generator is
// self-contained, not the standard library distribution). Entries are drawn
// uniformly from (-0.08, 0.08) in the serialized tensor order.
ModelWeights init_random_weights(const ModelConfig& config, std::uint64_t seed);

using LogitRow = std::vector<double>;

// Greedy pick; lowest token id wins ties.
TokenId argmax_token(std::span<const double> logits);

// Per-layer key/value rows indexed by absolute position plus an occupancy
// watermark. Positions >= occupancy are scratch: tree decoding writes there
// and the rows are considered vacant again afterwards. Each cache belongs to
// exactly one in-flight request.
class KVCache {
public:
    explicit KVCache(const ModelConfig& config);

    const ModelConfig& config() const { return config_; }
    int occupancy() const { return occupancy_; }
    int max_positions() const { return config_.max_positions; }

    // Marks positions >= new_occupancy vacant. Rows are kept as scratch; the
    // watermark alone defines validity.
    void rollback(int new_occupancy);

    double* key_row(int layer, int position);
    double* value_row(int layer, int position);
    const double* key_row(int layer, int position) const;
    const double* value_row(int layer, int position) const;

    // Token whose K/V currently occupy `position` (instrumentation for the
    // DFS-overwrite invariant and input to final_hidden).
    TokenId token_at(int position) const { return tokens_[position]; }

    void record_token(int position, TokenId token) { tokens_[position] = token; }
    void set_occupancy(int occupancy) { occupancy_ = occupancy; }

private:
    ModelConfig config_;
    int occupancy_ = 0;
    std::vector<std::vector<double>> keys_;    // [layer][position * d_model + i]
    std::vector<std::vector<double>> values_;  // [layer][position * d_model + i]
    std::vector<TokenId> tokens_;
};

// Multi-head self-attention on an explicit representation matrix:
//   Q_i = X W_i^Q,  K_i = X W_i^K,  V_i = X W_i^V
//   O   = concat_i(softmax(mask(Q_i K_i^T / sqrt(d))) V_i) W^O
// `mask` is rows x rows with entries 0 (allowed) or kMaskNegInf (disallowed).
Matrix attention(const Matrix& x, const Matrix& wq, const Matrix& wk, const Matrix& wv,
                 const Matrix& wo, int num_heads, const Matrix& mask);

// mask_{jk} = 0 for j >= k, kMaskNegInf for j < k.
Matrix causal_mask(int rows);

namespace detail {
// Cached decoding core shared by prefill, incremental decode and tree
// decoding. Runs `chain_tokens` at absolute positions base_position.. against
// the cache: every query attends all cached positions below base_position
// plus the chain itself, with intra-chain pairs above the causal diagonal
// re-masked (`apply_causal_fix`; disabled only by the negative-control test).
// Writes the chain's K/V rows and the tokens; advances the watermark only
// when the write starts at or below it. When hidden_rows is non-null it
// receives the post-final-norm hidden state per chain token.
std::vector<LogitRow> chain_attention_step_impl(const ModelWeights& w,
                                                std::span<const TokenId> chain_tokens,
                                                int base_position, KVCache& cache,
                                                bool apply_causal_fix,
                                                std::vector<std::vector<double>>* hidden_rows = nullptr);
}  // namespace detail

// Batched decode of a parent-linked token run (see dfs_chains). The caller
// guarantees cache positions [0, base_position) hold the chain's shared
// ancestry; results match token-at-a-time decoding.
std::vector<LogitRow> chain_attention_step(const ModelWeights& w,
                                           std::span<const TokenId> chain_tokens,
                                           int base_position, KVCache& cache);

// Tree-aware wrapper: checks that `chain` is parent-linked inside `tree`
// (ChainNotLinked otherwise) and decodes its tokens at the positions implied
// by prefix_len and the chain's tree depths.
std::vector<LogitRow> chain_attention_step(const ModelWeights& w, const TokenTree& tree,
                                           std::span<const int> chain, int prefix_len,
                                           KVCache& cache);

// Single-pass prompt processing: resets the cache, fills positions
// 0..len-1 and returns the next-token logits of the last position.
LogitRow prefill(const ModelWeights& w, std::span<const TokenId> prompt, KVCache& cache);

// One autoregressive step: writes `token`'s K/V at `position` (which must be
// at or below the watermark) and returns the next-token logits.
LogitRow decode_incremental(const ModelWeights& w, TokenId token, int position, KVCache& cache);

// Final-layer hidden state (post final norm, pre output projection) of the
// last occupied position, recomputed from the cache. Scheduler input.
std::vector<double> final_hidden(const ModelWeights& w, KVCache& cache);

struct TreeDecodeResult {
    std::vector<TokenId> tokens;   // greedy LLM output per node id
    std::vector<LogitRow> logits;  // logits per node id
};

struct TreeDecodeHooks {
    // Invoked once per node with its absolute position, at a moment when the
    // cache rows for the node's root-to-node path are guaranteed live.
    std::function<void(int node, int position, const KVCache& cache)> on_node;
    // Negative control: disables the intra-chain causal re-mask.
    bool apply_chain_causal_fix = true;
};

// Computes the LLM output for every tree node in one pass over the weights.
// Precondition: cache occupancy == prefix_len and the root token's K/V sit at
// position prefix_len-1 (the root is the last verified token). Nodes at tree
// depth k live at absolute position prefix_len-1+k; siblings share positions
// via depth-first overwrite. On return the occupancy is prefix_len again.
TreeDecodeResult tree_parallel_decode(const ModelWeights& w, const TokenTree& tree,
                                      int prefix_len, KVCache& cache,
                                      const TreeDecodeHooks* hooks = nullptr);

}  // namespace spectree
