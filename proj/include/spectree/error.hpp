#pragma once

#include <stdexcept>
#include <string>

namespace spectree {

enum class Errc {
    empty_input,
    root_mismatch,
    unknown_node,
    missing_output,
    tree_too_large,
    tree_too_deep,
    shape_mismatch,
    prompt_too_long,
    cache_gap,
    chain_not_linked,
    empty_context,
    incomplete_profile,
    bad_magic,
    crc_mismatch,
    io_error,
    invalid_argument,
};

const char* errc_name(Errc code);

class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& what)
        : std::runtime_error(what), code_(code) {}

    Errc code() const noexcept { return code_; }

private:
    Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) {
    throw Error(code, what);
}

}  // namespace spectree
