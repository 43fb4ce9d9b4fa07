#include "spectree/token_tree.hpp"

#include <algorithm>
#include <map>
#include <string>

namespace spectree {

const char* errc_name(Errc code) {
    switch (code) {
        case Errc::empty_input: return "empty_input";
        case Errc::root_mismatch: return "root_mismatch";
        case Errc::unknown_node: return "unknown_node";
        case Errc::missing_output: return "missing_output";
        case Errc::tree_too_large: return "tree_too_large";
        case Errc::tree_too_deep: return "tree_too_deep";
        case Errc::shape_mismatch: return "shape_mismatch";
        case Errc::prompt_too_long: return "prompt_too_long";
        case Errc::cache_gap: return "cache_gap";
        case Errc::chain_not_linked: return "chain_not_linked";
        case Errc::empty_context: return "empty_context";
        case Errc::incomplete_profile: return "incomplete_profile";
        case Errc::bad_magic: return "bad_magic";
        case Errc::crc_mismatch: return "crc_mismatch";
        case Errc::io_error: return "io_error";
        case Errc::invalid_argument: return "invalid_argument";
    }
    return "unknown";
}

namespace {

// Trie used only during construction; the final tree is flattened into
// preorder arrays.
struct TrieNode {
    TokenId token;
    std::map<TokenId, int> children;  // token -> trie index, ascending
};

}  // namespace

TokenTree TokenTree::merge_sequences(const std::vector<std::vector<TokenId>>& sequences,
                                     int max_nodes) {
    if (sequences.empty())
        fail(Errc::empty_input, "merge_sequences: no sequences");
    for (const auto& seq : sequences)
        if (seq.empty())
            fail(Errc::empty_input, "merge_sequences: empty sequence");

    const TokenId root_token = sequences.front().front();
    for (const auto& seq : sequences)
        if (seq.front() != root_token)
            fail(Errc::root_mismatch,
                 "merge_sequences: first tokens differ (" + std::to_string(root_token) +
                     " vs " + std::to_string(seq.front()) + ")");

    std::vector<TrieNode> trie;
    trie.push_back({root_token, {}});
    for (const auto& seq : sequences) {
        int at = 0;
        for (size_t i = 1; i < seq.size(); ++i) {
            auto it = trie[at].children.find(seq[i]);
            if (it == trie[at].children.end()) {
                if (static_cast<int>(trie.size()) >= max_nodes)
                    fail(Errc::tree_too_large,
                         "merge_sequences: tree exceeds " + std::to_string(max_nodes) + " nodes");
                int next = static_cast<int>(trie.size());
                trie.push_back({seq[i], {}});
                trie[at].children.emplace(seq[i], next);
                at = next;
            } else {
                at = it->second;
            }
        }
    }

    // Flatten in preorder; std::map iteration gives ascending-token children.
    TokenTree tree;
    tree.nodes_.reserve(trie.size());
    tree.children_.resize(trie.size());
    struct Frame {
        int trie_index;
        int parent_id;
        int depth;
    };
    std::vector<Frame> stack;
    stack.push_back({0, kRootParent, 0});
    while (!stack.empty()) {
        Frame f = stack.back();
        stack.pop_back();
        int id = static_cast<int>(tree.nodes_.size());
        tree.nodes_.push_back({trie[f.trie_index].token, f.parent_id, f.depth});
        tree.max_depth_ = std::max(tree.max_depth_, f.depth);
        if (f.parent_id != kRootParent)
            tree.children_[f.parent_id].push_back(id);
        // Push children in descending token order so they pop ascending.
        const auto& kids = trie[f.trie_index].children;
        for (auto it = kids.rbegin(); it != kids.rend(); ++it)
            stack.push_back({it->second, id, f.depth + 1});
    }
    return tree;
}

void TokenTree::check_node(int node) const {
    if (node < 0 || node >= size())
        fail(Errc::unknown_node, "node " + std::to_string(node) + " not in tree of size " +
                                     std::to_string(size()));
}

TokenId TokenTree::token(int node) const {
    check_node(node);
    return nodes_[node].token;
}

int TokenTree::parent(int node) const {
    check_node(node);
    return nodes_[node].parent;
}

int TokenTree::depth(int node) const {
    check_node(node);
    return nodes_[node].depth;
}

const std::vector<int>& TokenTree::children(int node) const {
    check_node(node);
    return children_[node];
}

std::vector<TokenId> TokenTree::ancestors(int node) const {
    check_node(node);
    std::vector<TokenId> path(static_cast<size_t>(nodes_[node].depth) + 1);
    int at = node;
    for (int i = nodes_[node].depth; i >= 0; --i) {
        path[i] = nodes_[at].token;
        at = nodes_[at].parent;
    }
    return path;
}

std::vector<std::vector<int>> TokenTree::dfs_chains() const {
    // Preorder ids make this a single scan: a node continues the current
    // chain exactly when its parent was the previously visited node.
    std::vector<std::vector<int>> chains;
    for (int node = 1; node < size(); ++node) {
        if (chains.empty() || nodes_[node].parent != node - 1)
            chains.emplace_back();
        chains.back().push_back(node);
    }
    return chains;
}

std::vector<TokenId> verify(const TokenTree& tree, std::span<const TokenId> llm_outputs) {
    if (static_cast<int>(llm_outputs.size()) != tree.size())
        fail(Errc::missing_output, "verify: got " + std::to_string(llm_outputs.size()) +
                                       " outputs for " + std::to_string(tree.size()) + " nodes");
    std::vector<TokenId> verified;
    int u = tree.root();
    for (;;) {
        const TokenId want = llm_outputs[u];
        int next = -1;
        for (int v : tree.children(u)) {
            if (tree.token(v) == want) {
                next = v;
                break;  // dedup guarantees at most one match
            }
        }
        if (next < 0)
            break;
        u = next;
        verified.push_back(want);
    }
    verified.push_back(llm_outputs[u]);
    return verified;
}

}  // namespace spectree
