// spectree: desk-scale speculative decoding engine.
//
// Subcommands cover the whole workflow: gen-model makes a seeded toy
// transformer, boost-tune fits an SSM pool against it, collect-samples /
// train-scheduler / profile-cost build the learned scheduler, and decode /
// compare / bench run the serving loops and emit metrics JSON.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "spectree/boost_tuning.hpp"
#include "spectree/engine.hpp"
#include "spectree/io.hpp"
#include "spectree/scheduler.hpp"
#include "spectree/tokenizer.hpp"

namespace {

using namespace spectree;

constexpr int kUsageError = 2;
constexpr int kRuntimeError = 1;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::vector<GenerationRequest> requests_from_corpus(const std::string& corpus_path,
                                                    int max_tokens, bool use_eos) {
    const ByteTokenizer tokenizer;
    std::vector<GenerationRequest> requests;
    for (const std::string& text : load_prompt_corpus(corpus_path))
        requests.push_back({tokenizer.tokenize(text), max_tokens,
                            use_eos ? ByteTokenizer::kEos : kNoEosToken});
    if (requests.empty())
        fail(Errc::empty_input, "corpus " + corpus_path + " has no prompts");
    return requests;
}

std::shared_ptr<Ssm> load_ssm_file(const std::string& path, int id) {
    const std::string ext = std::filesystem::path(path).extension().string();
    if (ext == ".spng") return std::make_shared<NgramSsm>(id, load_ngram(path));
    if (ext == ".spt")
        return std::make_shared<TransformerSsm>(
            id, std::make_shared<const ModelWeights>(load_weights(path)));
    throw UsageError("--ssm expects a .spng or .spt file, got " + path);
}

struct GenModelArgs {
    int layers = 2;
    int heads = 2;
    int dmodel = 32;
    int vocab = ByteTokenizer::kVocabSize;
    int lmax = 512;
    int ffn_mult = 4;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::string out;
};

int run_gen_model(const GenModelArgs& args) {
    ModelConfig cfg;
    cfg.num_layers = args.layers;
    cfg.num_heads = args.heads;
    cfg.d_model = args.dmodel;
    cfg.vocab_size = args.vocab;
    cfg.max_positions = args.lmax;
    cfg.ffn_mult = args.ffn_mult;
    const std::uint64_t seed = args.seed_set ? args.seed : default_seed();
    save_weights(args.out, init_random_weights(cfg, seed));
    std::printf("wrote %s (%zu parameters, seed %llu)\n", args.out.c_str(),
                cfg.parameter_count(), static_cast<unsigned long long>(seed));
    return 0;
}

struct RunArgs {
    std::string llm;
    std::string mode = "incremental";
    std::string prompt_file;
    std::string pool_dir;
    std::string scheduler_file;
    std::string profile_file;
    int width = 1;
    int depth = 4;
    int max_tokens = 64;
    int max_tree_nodes = kDefaultMaxTreeNodes;
    bool no_eos = false;
    std::string metrics_out;
};

std::unique_ptr<ConfigSelector> make_selector(const RunArgs& args) {
    if (!args.scheduler_file.empty()) {
        if (args.profile_file.empty())
            throw UsageError("--scheduler requires --profile");
        return std::make_unique<PredictorSelector>(load_predictor(args.scheduler_file),
                                                   load_cost_profile(args.profile_file));
    }
    return std::make_unique<FixedConfigSelector>(SpecConfig{args.width, args.depth});
}

int run_decode(const RunArgs& args) {
    const ModelWeights llm = load_weights(args.llm);
    const auto requests = requests_from_corpus(args.prompt_file, args.max_tokens, !args.no_eos);

    RunMetrics totals;
    if (args.mode == "incremental") {
        for (const auto& req : requests) totals.accumulate(run_incremental(llm, req).metrics);
    } else if (args.mode == "speculative") {
        if (args.pool_dir.empty())
            throw UsageError("speculative mode requires --pool");
        const BoostPool pool = load_pool(args.pool_dir);
        const auto selector = make_selector(args);
        const SpeculativeOptions opts{args.max_tree_nodes};
        for (const auto& req : requests)
            totals.accumulate(run_speculative(llm, pool.ssms, *selector, req, opts).metrics);
    } else {
        throw UsageError("--mode must be incremental or speculative");
    }

    if (!args.metrics_out.empty())
        write_metrics_json(args.metrics_out, args.mode, static_cast<int>(requests.size()),
                           totals, 0);
    std::printf("%s: %d prompts, %lld llm steps, %lld ssm runs, %lld tokens, %.3f verified/step\n",
                args.mode.c_str(), static_cast<int>(requests.size()),
                static_cast<long long>(totals.llm_steps), static_cast<long long>(totals.ssm_runs),
                static_cast<long long>(totals.tokens_generated), totals.verified_per_step);
    return 0;
}

int run_compare(const RunArgs& args) {
    const ModelWeights llm = load_weights(args.llm);
    if (args.pool_dir.empty())
        throw UsageError("compare requires --pool");
    const BoostPool pool = load_pool(args.pool_dir);
    const auto requests = requests_from_corpus(args.prompt_file, args.max_tokens, !args.no_eos);
    const auto selector = make_selector(args);
    const SpeculativeOptions opts{args.max_tree_nodes};

    const ComparisonReport report =
        compare_equivalence(llm, pool.ssms, *selector, requests, opts);
    for (size_t i = 0; i < report.prompts.size(); ++i) {
        const auto& p = report.prompts[i];
        if (p.match)
            std::printf("prompt %zu: ok (%lld vs %lld llm steps)\n", i,
                        static_cast<long long>(p.speculative.llm_steps),
                        static_cast<long long>(p.incremental.llm_steps));
        else
            std::printf("prompt %zu: MISMATCH at token %d\n", i, p.first_mismatch);
    }
    if (!args.metrics_out.empty())
        write_metrics_json(args.metrics_out, "compare", static_cast<int>(requests.size()),
                           report.speculative_total, report.mismatches);
    std::printf("%d/%zu prompts matched; speculative %.3f verified/step vs incremental %.3f\n",
                static_cast<int>(report.prompts.size()) - report.mismatches,
                report.prompts.size(), report.speculative_total.verified_per_step,
                report.incremental_total.verified_per_step);
    return report.mismatches == 0 ? 0 : kRuntimeError;
}

int run_bench(const RunArgs& args) {
    const ModelWeights llm = load_weights(args.llm);
    if (args.pool_dir.empty())
        throw UsageError("bench requires --pool");
    const BoostPool pool = load_pool(args.pool_dir);
    const auto requests = requests_from_corpus(args.prompt_file, args.max_tokens, !args.no_eos);
    const auto selector = make_selector(args);
    const SpeculativeOptions opts{args.max_tree_nodes};

    RunMetrics totals;
    for (const auto& req : requests)
        totals.accumulate(run_speculative(llm, pool.ssms, *selector, req, opts).metrics);

    const std::string mode =
        args.scheduler_file.empty() ? "bench-fixed" : "bench-scheduler";
    if (!args.metrics_out.empty())
        write_metrics_json(args.metrics_out, mode, static_cast<int>(requests.size()), totals, 0);
    std::printf("%s: %d prompts, %lld llm steps, %lld ssm runs, %lld tokens, %.3f verified/step, "
                "%.1f ms\n",
                mode.c_str(), static_cast<int>(requests.size()),
                static_cast<long long>(totals.llm_steps), static_cast<long long>(totals.ssm_runs),
                static_cast<long long>(totals.tokens_generated), totals.verified_per_step,
                totals.wall_ms);
    return 0;
}

struct BoostTuneArgs {
    std::string llm;
    std::string corpus;
    std::string out;
    int pool_size = 5;
    int horizon = 4;
    int ngram_order = 3;
    double alpha = 0.1;
    int continuation_len = 16;
    bool no_eos = false;
};

int run_boost_tune(const BoostTuneArgs& args) {
    const ModelWeights llm = load_weights(args.llm);
    const ByteTokenizer tokenizer;
    std::vector<std::vector<TokenId>> prompts;
    for (const std::string& text : load_prompt_corpus(args.corpus))
        prompts.push_back(tokenizer.tokenize(text));
    if (prompts.empty())
        fail(Errc::empty_input, "corpus has no prompts");

    // Greedy LLM continuations are deterministic, so they are materialized
    // once up front.
    const TokenId eos = args.no_eos ? kNoEosToken : ByteTokenizer::kEos;
    const auto samples = materialize_samples(llm, prompts, args.continuation_len, eos);
    const auto factory = make_ngram_factory(args.ngram_order, args.alpha, llm.config.vocab_size);
    const BoostPool pool =
        collective_boost_tune(args.pool_size, samples, factory, args.horizon, eos);
    save_pool(args.out, pool);

    std::printf("tuned %zu ssms over %zu samples; residuals:", pool.ssms.size(), samples.size());
    for (auto r : pool.residual_counts) std::printf(" %lld", static_cast<long long>(r));
    std::printf("\nwrote %s\n", args.out.c_str());
    return 0;
}

struct CollectArgs {
    std::string llm;
    std::string ssm;
    std::string corpus;
    std::string out;
    int max_tokens = 16;
    bool no_eos = false;
};

int run_collect_samples(const CollectArgs& args) {
    const ModelWeights llm = load_weights(args.llm);
    auto ssm = load_ssm_file(args.ssm, 0);
    const auto requests = requests_from_corpus(args.corpus, args.max_tokens, !args.no_eos);
    const auto samples = collect_samples(llm, *ssm, requests);
    save_samples_jsonl(args.out, samples);
    std::printf("collected %zu samples from %zu prompts -> %s\n", samples.size(),
                requests.size(), args.out.c_str());
    return 0;
}

struct TrainArgs {
    std::string samples;
    std::string out;
    int epochs = 20;
    double lr = 1e-2;
    int hidden = kPredictorHiddenDim;
    std::uint64_t seed = 0;
    bool seed_set = false;
};

int run_train_scheduler(const TrainArgs& args) {
    const auto samples = load_samples_jsonl(args.samples);
    if (samples.empty())
        fail(Errc::empty_input, "no training samples in " + args.samples);
    const std::uint64_t seed = args.seed_set ? args.seed : default_seed();
    MatchPredictor p =
        init_predictor(static_cast<int>(samples.front().h.size()), args.hidden, seed);
    const TrainReport report = mlp_train(p, samples, args.epochs, args.lr);
    save_predictor(args.out, p);
    std::printf("trained on %zu samples: loss %.6f -> %.6f; wrote %s\n", samples.size(),
                report.initial_loss, report.final_loss, args.out.c_str());
    return 0;
}

struct ProfileArgs {
    std::string llm;
    std::string pool_dir;
    std::string out;
    int reps = 30;
    int context_len = 32;
    std::uint64_t seed = 0;
    bool seed_set = false;
};

int run_profile_cost(const ProfileArgs& args) {
    const ModelWeights llm = load_weights(args.llm);
    const BoostPool pool = load_pool(args.pool_dir);
    const std::uint64_t seed = args.seed_set ? args.seed : default_seed();
    const CostProfile profile =
        measure_cost_profile(llm, pool.ssms, args.reps, args.context_len, seed);
    save_cost_profile(args.out, profile);
    std::printf("profiled 15 configs, %d reps each -> %s\n", args.reps, args.out.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Desk-scale speculative decoding engine with token tree verification"};
    app.require_subcommand(1);

    GenModelArgs gen;
    CLI::App* gen_cmd = app.add_subcommand("gen-model", "Create a seeded toy transformer");
    gen_cmd->add_option("--layers", gen.layers);
    gen_cmd->add_option("--heads", gen.heads);
    gen_cmd->add_option("--dmodel", gen.dmodel);
    gen_cmd->add_option("--vocab", gen.vocab);
    gen_cmd->add_option("--lmax", gen.lmax);
    gen_cmd->add_option("--ffn-mult", gen.ffn_mult);
    gen_cmd->add_option("--seed", gen.seed)->each([&](const std::string&) { gen.seed_set = true; });
    gen_cmd->add_option("--out", gen.out)->required();

    RunArgs decode;
    CLI::App* decode_cmd = app.add_subcommand("decode", "Generate from a prompt corpus");
    decode_cmd->add_option("--llm", decode.llm)->required();
    decode_cmd->add_option("--mode", decode.mode);
    decode_cmd->add_option("--prompt-file", decode.prompt_file)->required();
    decode_cmd->add_option("--pool", decode.pool_dir);
    decode_cmd->add_option("--scheduler", decode.scheduler_file);
    decode_cmd->add_option("--profile", decode.profile_file);
    decode_cmd->add_option("--fixed-width", decode.width);
    decode_cmd->add_option("--fixed-depth", decode.depth);
    decode_cmd->add_option("--max-tokens", decode.max_tokens);
    decode_cmd->add_option("--max-tree-nodes", decode.max_tree_nodes);
    decode_cmd->add_flag("--no-eos", decode.no_eos);
    decode_cmd->add_option("--metrics", decode.metrics_out);

    RunArgs compare;
    CLI::App* compare_cmd =
        app.add_subcommand("compare", "Check speculative output equals incremental");
    compare_cmd->add_option("--llm", compare.llm)->required();
    compare_cmd->add_option("--pool", compare.pool_dir)->required();
    compare_cmd->add_option("--corpus", compare.prompt_file)->required();
    compare_cmd->add_option("--scheduler", compare.scheduler_file);
    compare_cmd->add_option("--profile", compare.profile_file);
    compare_cmd->add_option("--fixed-width", compare.width);
    compare_cmd->add_option("--fixed-depth", compare.depth);
    compare_cmd->add_option("--max-tokens", compare.max_tokens);
    compare_cmd->add_option("--max-tree-nodes", compare.max_tree_nodes);
    compare_cmd->add_flag("--no-eos", compare.no_eos);
    compare_cmd->add_option("--metrics", compare.metrics_out);

    RunArgs bench;
    CLI::App* bench_cmd = app.add_subcommand("bench", "Speculative benchmark over a corpus");
    bench_cmd->add_option("--llm", bench.llm)->required();
    bench_cmd->add_option("--pool", bench.pool_dir)->required();
    bench_cmd->add_option("--corpus", bench.prompt_file)->required();
    bench_cmd->add_option("--scheduler", bench.scheduler_file);
    bench_cmd->add_option("--profile", bench.profile_file);
    bench_cmd->add_option("--fixed-width", bench.width);
    bench_cmd->add_option("--fixed-depth", bench.depth);
    bench_cmd->add_option("--max-tokens", bench.max_tokens);
    bench_cmd->add_option("--max-tree-nodes", bench.max_tree_nodes);
    bench_cmd->add_flag("--no-eos", bench.no_eos);
    bench_cmd->add_option("--metrics", bench.metrics_out);

    BoostTuneArgs boost;
    CLI::App* boost_cmd = app.add_subcommand("boost-tune", "Collectively boost-tune an SSM pool");
    boost_cmd->add_option("--llm", boost.llm)->required();
    boost_cmd->add_option("--corpus", boost.corpus)->required();
    boost_cmd->add_option("--out", boost.out)->required();
    boost_cmd->add_option("--pool-size", boost.pool_size);
    boost_cmd->add_option("--horizon", boost.horizon);
    boost_cmd->add_option("--ngram-order", boost.ngram_order);
    boost_cmd->add_option("--alpha", boost.alpha);
    boost_cmd->add_option("--continuation-len", boost.continuation_len);
    boost_cmd->add_flag("--no-eos", boost.no_eos);

    CollectArgs collect;
    CLI::App* collect_cmd =
        app.add_subcommand("collect-samples", "Collect matching-length training samples");
    collect_cmd->add_option("--llm", collect.llm)->required();
    collect_cmd->add_option("--ssm", collect.ssm)->required();
    collect_cmd->add_option("--corpus", collect.corpus)->required();
    collect_cmd->add_option("--out", collect.out)->required();
    collect_cmd->add_option("--max-tokens", collect.max_tokens);
    collect_cmd->add_flag("--no-eos", collect.no_eos);

    TrainArgs train;
    CLI::App* train_cmd =
        app.add_subcommand("train-scheduler", "Train the matching-length predictor");
    train_cmd->add_option("--samples", train.samples)->required();
    train_cmd->add_option("--out", train.out)->required();
    train_cmd->add_option("--epochs", train.epochs);
    train_cmd->add_option("--lr", train.lr);
    train_cmd->add_option("--hidden", train.hidden);
    train_cmd->add_option("--seed", train.seed)->each([&](const std::string&) {
        train.seed_set = true;
    });

    ProfileArgs profile;
    CLI::App* profile_cmd =
        app.add_subcommand("profile-cost", "Measure per-config latencies");
    profile_cmd->add_option("--llm", profile.llm)->required();
    profile_cmd->add_option("--pool", profile.pool_dir)->required();
    profile_cmd->add_option("--out", profile.out)->required();
    profile_cmd->add_option("--reps", profile.reps);
    profile_cmd->add_option("--context-len", profile.context_len);
    profile_cmd->add_option("--seed", profile.seed)->each([&](const std::string&) {
        profile.seed_set = true;
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsageError;
    }

    try {
        if (gen_cmd->parsed()) return run_gen_model(gen);
        if (decode_cmd->parsed()) return run_decode(decode);
        if (compare_cmd->parsed()) return run_compare(compare);
        if (bench_cmd->parsed()) return run_bench(bench);
        if (boost_cmd->parsed()) return run_boost_tune(boost);
        if (collect_cmd->parsed()) return run_collect_samples(collect);
        if (train_cmd->parsed()) return run_train_scheduler(train);
        if (profile_cmd->parsed()) return run_profile_cost(profile);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kUsageError;
    } catch (const Error& e) {
        std::cerr << "error (" << errc_name(e.code()) << "): " << e.what() << "\n";
        return kRuntimeError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kRuntimeError;
    }
    return kUsageError;
}
