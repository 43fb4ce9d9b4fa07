#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "spectree/error.hpp"

namespace spectree {

using TokenId = std::int32_t;

// Sentinel meaning "no EOS token": generation stops on budget only.
inline constexpr TokenId kNoEosToken = -1;

inline constexpr int kRootParent = -1;
inline constexpr int kDefaultMaxTreeNodes = 64;

// Deduplicated prefix tree of candidate token sequences.
//
// Node ids are depth-first preorder integers (root = 0) with the children of
// every node ordered by ascending token id, so iterating ids 0..size()-1 is
// already a depth-first traversal and every parent precedes its children.
// Immutable after construction; safe to share read-only across threads.
class TokenTree {
public:
    struct Node {
        TokenId token;
        int parent;  // kRootParent for the root
        int depth;   // root = 0
    };

    // Builds the merge of the given sequences: the result contains one node
    // per distinct prefix and nothing else. All sequences must be nonempty
    // and share the same first token, which becomes the root.
    static TokenTree merge_sequences(const std::vector<std::vector<TokenId>>& sequences,
                                     int max_nodes = kDefaultMaxTreeNodes);

    int size() const { return static_cast<int>(nodes_.size()); }
    int root() const { return 0; }
    int max_depth() const { return max_depth_; }

    TokenId token(int node) const;
    int parent(int node) const;
    int depth(int node) const;
    const std::vector<int>& children(int node) const;

    // S_node: tokens from the root to `node` inclusive, root first.
    std::vector<TokenId> ancestors(int node) const;

    // Decomposes the non-root nodes into maximal runs where each node is the
    // next one's parent, in depth-first order. Concatenating the runs yields
    // the full DFS traversal of non-root nodes.
    std::vector<std::vector<int>> dfs_chains() const;

private:
    TokenTree() = default;
    void check_node(int node) const;

    std::vector<Node> nodes_;
    std::vector<std::vector<int>> children_;
    int max_depth_ = 0;
};

// Verification walk: starting at the root, follow the child whose token
// matches llm_outputs[current] while one exists, collecting matched tokens,
// then append the output of the last matched node (the bonus token).
// llm_outputs must hold one entry per node, indexed by node id.
std::vector<TokenId> verify(const TokenTree& tree, std::span<const TokenId> llm_outputs);

}  // namespace spectree
