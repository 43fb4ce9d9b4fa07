#include "spectree/tokenizer.hpp"

namespace spectree {

std::vector<TokenId> ByteTokenizer::tokenize(std::string_view text) const {
    std::vector<TokenId> tokens;
    tokens.reserve(text.size() + 1);
    tokens.push_back(kBos);
    for (unsigned char c : text) tokens.push_back(static_cast<TokenId>(c));
    return tokens;
}

std::string ByteTokenizer::detokenize(std::span<const TokenId> tokens) const {
    std::string out;
    out.reserve(tokens.size());
    for (TokenId t : tokens) {
        if (t == kBos || t == kEos) continue;
        if (t < 0 || t > 255)
            fail(Errc::invalid_argument, "detokenize: token " + std::to_string(t) +
                                             " is not a byte value");
        out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
    }
    return out;
}

}  // namespace spectree
