"""Speculative decoding with token tree verification.

Thin wrapper over the native module: toy transformer models, token tree
construction/verification, beam speculation, boost-tuned n-gram pools, the
config scheduler math, and the incremental/speculative serving loops.
"""

from spectree._spectree import (  # noqa: F401
    BOS,
    BYTE_VOCAB_SIZE,
    EOS,
    NO_EOS,
    ModelConfig,
    ModelWeights,
    SpectreeError,
    Ssm,
    TokenTree,
    beam_speculate,
    boost_tune_ngrams,
    choose_config,
    detokenize,
    grid_configs,
    init_random_weights,
    load_weights,
    matching_length,
    ngram_ssm,
    run_incremental,
    run_speculative,
    save_weights,
    speculate_tree,
    tokenize,
    transformer_ssm,
    verify,
)

__all__ = [
    "BOS",
    "BYTE_VOCAB_SIZE",
    "EOS",
    "NO_EOS",
    "ModelConfig",
    "ModelWeights",
    "SpectreeError",
    "Ssm",
    "TokenTree",
    "beam_speculate",
    "boost_tune_ngrams",
    "choose_config",
    "detokenize",
    "grid_configs",
    "init_random_weights",
    "load_weights",
    "matching_length",
    "ngram_ssm",
    "run_incremental",
    "run_speculative",
    "save_weights",
    "speculate_tree",
    "tokenize",
    "transformer_ssm",
    "verify",
]
