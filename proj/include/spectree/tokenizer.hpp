#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "spectree/token_tree.hpp"

namespace spectree {

// Byte-level tokenizer: 256 byte values plus BOS/EOS markers. Lossless:
// detokenize(tokenize(s)) == s for any byte string.
class ByteTokenizer {
public:
    static constexpr TokenId kBos = 256;
    static constexpr TokenId kEos = 257;
    static constexpr int kVocabSize = 258;

    std::vector<TokenId> tokenize(std::string_view text) const;
    std::string detokenize(std::span<const TokenId> tokens) const;  // strips BOS/EOS
};

}  // namespace spectree
