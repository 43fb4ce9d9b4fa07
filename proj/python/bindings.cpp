// Python bindings for the core operations: token tree construction and
// verification, toy transformer models, speculation, boost tuning, the
// scheduler math and both serving loops.

#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "spectree/boost_tuning.hpp"
#include "spectree/engine.hpp"
#include "spectree/io.hpp"
#include "spectree/scheduler.hpp"
#include "spectree/tokenizer.hpp"

namespace py = pybind11;
using namespace spectree;

namespace {

py::dict metrics_dict(const RunMetrics& m) {
    py::dict d;
    d["llm_steps"] = m.llm_steps;
    d["ssm_runs"] = m.ssm_runs;
    d["tokens_generated"] = m.tokens_generated;
    d["verified_per_step"] = m.verified_per_step;
    d["wall_ms"] = m.wall_ms;
    return d;
}

GenerationRequest make_request(std::vector<TokenId> prompt, int max_new_tokens, TokenId eos) {
    return {std::move(prompt), max_new_tokens, eos};
}

}  // namespace

PYBIND11_MODULE(_spectree, m) {
    m.doc() = "Speculative decoding with token tree verification";

    py::register_exception<Error>(m, "SpectreeError");

    m.attr("NO_EOS") = kNoEosToken;
    m.attr("BOS") = static_cast<int>(ByteTokenizer::kBos);
    m.attr("EOS") = static_cast<int>(ByteTokenizer::kEos);
    m.attr("BYTE_VOCAB_SIZE") = static_cast<int>(ByteTokenizer::kVocabSize);

    // Token trees.
    py::class_<TokenTree>(m, "TokenTree")
        .def_static("merge_sequences", &TokenTree::merge_sequences, py::arg("sequences"),
                    py::arg("max_nodes") = kDefaultMaxTreeNodes)
        .def_property_readonly("size", &TokenTree::size)
        .def_property_readonly("max_depth", &TokenTree::max_depth)
        .def("token", &TokenTree::token)
        .def("parent", &TokenTree::parent)
        .def("depth", &TokenTree::depth)
        .def("children", &TokenTree::children)
        .def("ancestors", &TokenTree::ancestors)
        .def("dfs_chains", &TokenTree::dfs_chains);

    m.def(
        "verify",
        [](const TokenTree& tree, const std::vector<TokenId>& outputs) {
            return verify(tree, outputs);
        },
        py::arg("tree"), py::arg("llm_outputs"));

    // Models.
    py::class_<ModelConfig>(m, "ModelConfig")
        .def(py::init([](int num_layers, int num_heads, int d_model, int vocab_size,
                         int max_positions, int ffn_mult) {
                 ModelConfig cfg{num_layers, num_heads, d_model, vocab_size, max_positions,
                                 ffn_mult};
                 cfg.validate();
                 return cfg;
             }),
             py::arg("num_layers") = 2, py::arg("num_heads") = 2, py::arg("d_model") = 16,
             py::arg("vocab_size") = 258, py::arg("max_positions") = 256,
             py::arg("ffn_mult") = 4)
        .def_readonly("num_layers", &ModelConfig::num_layers)
        .def_readonly("num_heads", &ModelConfig::num_heads)
        .def_readonly("d_model", &ModelConfig::d_model)
        .def_readonly("vocab_size", &ModelConfig::vocab_size)
        .def_readonly("max_positions", &ModelConfig::max_positions)
        .def_readonly("ffn_mult", &ModelConfig::ffn_mult)
        .def("parameter_count", &ModelConfig::parameter_count);

    py::class_<ModelWeights, std::shared_ptr<ModelWeights>>(m, "ModelWeights")
        .def_property_readonly("config", [](const ModelWeights& w) { return w.config; })
        .def("parameter_count", &ModelWeights::parameter_count);

    m.def(
        "init_random_weights",
        [](const ModelConfig& cfg, std::uint64_t seed) {
            return std::make_shared<ModelWeights>(init_random_weights(cfg, seed));
        },
        py::arg("config"), py::arg("seed"));
    m.def(
        "save_weights",
        [](const std::string& path, const std::shared_ptr<ModelWeights>& w) {
            save_weights(path, *w);
        },
        py::arg("path"), py::arg("weights"));
    m.def(
        "load_weights",
        [](const std::string& path) { return std::make_shared<ModelWeights>(load_weights(path)); },
        py::arg("path"));

    // Tokenizer.
    m.def("tokenize", [](const py::bytes& data) {
        const ByteTokenizer tok;
        return tok.tokenize(std::string(data));
    });
    m.def("detokenize", [](const std::vector<TokenId>& tokens) {
        const ByteTokenizer tok;
        return py::bytes(tok.detokenize(tokens));
    });

    // Speculators.
    py::class_<Ssm, std::shared_ptr<Ssm>>(m, "Ssm")
        .def_property_readonly("id", &Ssm::id)
        .def_property_readonly("kind", &Ssm::kind)
        .def_property_readonly("vocab_size", &Ssm::vocab_size)
        .def("next_log_probs", [](Ssm& ssm, const std::vector<TokenId>& prefix) {
            return ssm.next_log_probs(prefix);
        });

    m.def(
        "ngram_ssm",
        [](int id, const std::vector<std::vector<TokenId>>& corpus, int order, double alpha,
           int vocab_size) -> std::shared_ptr<Ssm> {
            return std::make_shared<NgramSsm>(id, ngram_fit(corpus, order, alpha, vocab_size));
        },
        py::arg("id"), py::arg("corpus"), py::arg("order"), py::arg("alpha"),
        py::arg("vocab_size"));
    m.def(
        "transformer_ssm",
        [](int id, const std::shared_ptr<ModelWeights>& weights) -> std::shared_ptr<Ssm> {
            return std::make_shared<TransformerSsm>(id, weights);
        },
        py::arg("id"), py::arg("weights"));

    m.def(
        "beam_speculate",
        [](const std::shared_ptr<Ssm>& ssm, const std::vector<TokenId>& prefix, int beam_width,
           int beam_depth, TokenId eos) {
            return beam_speculate(*ssm, prefix, {beam_width, beam_depth}, eos);
        },
        py::arg("ssm"), py::arg("prefix"), py::arg("beam_width"), py::arg("beam_depth"),
        py::arg("eos") = kNoEosToken);
    m.def(
        "speculate_tree",
        [](const std::vector<std::shared_ptr<Ssm>>& pool, const std::vector<TokenId>& prefix,
           int beam_width, int beam_depth, int max_nodes, TokenId eos) {
            return speculate_tree(pool, prefix, SpecConfig{beam_width, beam_depth}, max_nodes,
                                  eos);
        },
        py::arg("pool"), py::arg("prefix"), py::arg("beam_width"), py::arg("beam_depth"),
        py::arg("max_nodes") = kDefaultMaxTreeNodes, py::arg("eos") = kNoEosToken);

    // Serving loops.
    m.def(
        "run_incremental",
        [](const std::shared_ptr<ModelWeights>& llm, const std::vector<TokenId>& prompt,
           int max_new_tokens, TokenId eos) {
            const GenerationResult res =
                run_incremental(*llm, make_request(prompt, max_new_tokens, eos));
            return py::make_tuple(res.sequence, metrics_dict(res.metrics));
        },
        py::arg("llm"), py::arg("prompt"), py::arg("max_new_tokens"),
        py::arg("eos") = kNoEosToken);
    m.def(
        "run_speculative",
        [](const std::shared_ptr<ModelWeights>& llm, const std::vector<std::shared_ptr<Ssm>>& pool,
           const std::vector<TokenId>& prompt, int max_new_tokens, int beam_width, int beam_depth,
           TokenId eos, int max_tree_nodes) {
            const GenerationResult res =
                run_speculative(*llm, pool, SpecConfig{beam_width, beam_depth},
                                make_request(prompt, max_new_tokens, eos), {max_tree_nodes});
            return py::make_tuple(res.sequence, metrics_dict(res.metrics));
        },
        py::arg("llm"), py::arg("pool"), py::arg("prompt"), py::arg("max_new_tokens"),
        py::arg("beam_width") = 1, py::arg("beam_depth") = 4, py::arg("eos") = kNoEosToken,
        py::arg("max_tree_nodes") = kDefaultMaxTreeNodes);

    // Boost tuning.
    m.def(
        "boost_tune_ngrams",
        [](const std::shared_ptr<ModelWeights>& llm,
           const std::vector<std::vector<TokenId>>& prompts, int horizon, int pool_size,
           int match_horizon, int order, double alpha, TokenId eos) {
            const auto samples = materialize_samples(*llm, prompts, horizon, eos);
            const auto factory = make_ngram_factory(order, alpha, llm->config.vocab_size);
            const BoostPool pool =
                collective_boost_tune(pool_size, samples, factory, match_horizon, eos);
            return py::make_tuple(pool.ssms, pool.residual_counts);
        },
        py::arg("llm"), py::arg("prompts"), py::arg("horizon"), py::arg("pool_size"),
        py::arg("match_horizon") = 4, py::arg("order") = 3, py::arg("alpha") = 0.1,
        py::arg("eos") = kNoEosToken);
    m.def("matching_length", [](const std::vector<TokenId>& a, const std::vector<TokenId>& b) {
        return matching_length(a, b);
    });

    // Scheduler math.
    m.def(
        "choose_config",
        [](const std::vector<double>& predictions, const std::vector<double>& speculate_ms,
           const std::vector<double>& verify_ms) {
            if (speculate_ms.size() != grid::kNumConfigs || verify_ms.size() != grid::kNumConfigs)
                fail(Errc::incomplete_profile, "need 15 latency entries");
            CostProfile profile;
            std::copy(speculate_ms.begin(), speculate_ms.end(), profile.speculate_ms.begin());
            std::copy(verify_ms.begin(), verify_ms.end(), profile.verify_ms.begin());
            profile.samples = 1;
            const SpecConfig cfg = choose_config(predictions, profile);
            return py::make_tuple(cfg.beam_width, cfg.beam_depth);
        },
        py::arg("predictions"), py::arg("speculate_ms"), py::arg("verify_ms"));
    m.def("grid_configs", [] {
        std::vector<std::pair<int, int>> out;
        for (int i = 0; i < grid::kNumConfigs; ++i) {
            const SpecConfig cfg = grid::config_at(i);
            out.emplace_back(cfg.beam_width, cfg.beam_depth);
        }
        return out;
    });
}
