#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "spectree/boost_tuning.hpp"
#include "spectree/scheduler.hpp"
#include "test_support.hpp"

using namespace spectree;

namespace {

CostProfile uniform_profile(double speculate = 1.0, double verify = 1.0) {
    CostProfile p;
    p.speculate_ms.fill(speculate);
    p.verify_ms.fill(verify);
    p.samples = 30;
    return p;
}

std::vector<TrainSample> random_samples(std::mt19937& rng, int count, int input_dim) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::uniform_real_distribution<double> y(0.0, 4.0);
    std::vector<TrainSample> samples(count);
    for (auto& s : samples) {
        s.h.resize(input_dim);
        for (auto& v : s.h) v = u(rng);
        for (auto& v : s.y) v = y(rng);
    }
    return samples;
}

// Brute-force oracle written over the (b, d) pairs directly, with explicit
// tie handling, independent of the grid indexing helpers.
SpecConfig oracle_choice(const std::array<double, 15>& f, const CostProfile& profile) {
    SpecConfig best{0, 0};
    double best_cost = -1e300;
    int i = 0;
    for (int b : {1, 2, 4}) {
        for (int d : {1, 2, 4, 8, 16}) {
            const double cost = f[i] / (profile.verify_ms[i] + profile.speculate_ms[i]);
            if (cost > best_cost) {
                best_cost = cost;
                best = {b, d};
            }
            ++i;
        }
    }
    return best;
}

}  // namespace

TEST_CASE("mlp_forward basics") {
    SUBCASE("all-zero weights give all-zero output") {
        MatchPredictor p;
        p.w1 = Matrix(8, 4);
        p.b1.assign(4, 0.0);
        p.w2 = Matrix(4, 4);
        p.b2.assign(4, 0.0);
        p.w3 = Matrix(4, 15);
        p.b3.assign(15, 0.0);
        const std::vector<double> h(8, 1.5);
        for (double v : mlp_forward(p, h)) CHECK(v == 0.0);
    }
    SUBCASE("seeded weights give a reproducible vector") {
        const MatchPredictor p = init_predictor(8, 16, 99);
        const std::vector<double> h{1, -2, 3, -4, 5, -6, 7, -8};
        const auto a = mlp_forward(p, h);
        const auto b = mlp_forward(p, h);
        CHECK(a == b);
        CHECK(a.size() == 15);
    }
    SUBCASE("shape mismatch") {
        const MatchPredictor p = init_predictor(8, 16, 1);
        CHECK_THROWS_AS(mlp_forward(p, std::vector<double>(7, 0.0)), Error);
    }
}

TEST_CASE("analytic gradients match central finite differences per layer") {
    std::mt19937 rng(5);
    MatchPredictor p = init_predictor(6, 10, 7);
    const auto samples = random_samples(rng, 8, 6);
    const MlpGradients g = mlp_gradients(p, samples);

    const double eps = 1e-5;
    auto fd_entry = [&](double* theta) {
        const double saved = *theta;
        *theta = saved + eps;
        const double up = mlp_loss(p, samples);
        *theta = saved - eps;
        const double down = mlp_loss(p, samples);
        *theta = saved;
        return (up - down) / (2.0 * eps);
    };
    // Relative error at layer granularity (vector norms), immune to the
    // cancellation noise of individual near-zero entries.
    auto layer_rel = [&](std::span<double> theta, std::span<const double> analytic) {
        double diff = 0.0, na = 0.0, nf = 0.0;
        for (size_t i = 0; i < theta.size(); ++i) {
            const double fd = fd_entry(&theta[i]);
            diff += (analytic[i] - fd) * (analytic[i] - fd);
            na += analytic[i] * analytic[i];
            nf += fd * fd;
        }
        return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nf), 1e-12});
    };

    CHECK(layer_rel(p.w1.data, g.w1.data) <= 1e-6);
    CHECK(layer_rel(p.b1, g.b1) <= 1e-6);
    CHECK(layer_rel(p.w2.data, g.w2.data) <= 1e-6);
    CHECK(layer_rel(p.b2, g.b2) <= 1e-6);
    CHECK(layer_rel(p.w3.data, g.w3.data) <= 1e-6);
    CHECK(layer_rel(p.b3, g.b3) <= 1e-6);
}

TEST_CASE("training fits a constant target through the output bias") {
    std::mt19937 rng(11);
    auto samples = random_samples(rng, 16, 6);
    for (auto& s : samples) s.y.fill(3.0);

    MatchPredictor p = init_predictor(6, 10, 13);
    const TrainReport report = mlp_train(p, samples, 2000, 0.05);
    CHECK(report.final_loss <= report.initial_loss);
    CHECK(report.final_loss <= 1e-3);
}

TEST_CASE("zero epochs leave the predictor untouched") {
    std::mt19937 rng(17);
    const auto samples = random_samples(rng, 4, 6);
    MatchPredictor p = init_predictor(6, 10, 19);
    const MatchPredictor before = p;
    mlp_train(p, samples, 0, 0.1);
    CHECK(p.w1.data == before.w1.data);
    CHECK(p.w2.data == before.w2.data);
    CHECK(p.w3.data == before.w3.data);
    CHECK(p.b1 == before.b1);
}

TEST_CASE("training beats the variance baseline on linear targets") {
    std::mt19937 rng(23);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const int input_dim = 8;
    Matrix truth(input_dim, 15);
    for (double& v : truth.data) v = u(rng);

    std::vector<TrainSample> samples(64);
    for (auto& s : samples) {
        s.h.resize(input_dim);
        for (auto& v : s.h) v = u(rng);
        std::vector<double> y(15, 0.0);
        matvec(s.h, truth, y);
        std::copy(y.begin(), y.end(), s.y.begin());
    }

    // Variance of the targets around their mean: the trivial predictor's MSE.
    double mean = 0.0;
    for (const auto& s : samples)
        for (double v : s.y) mean += v;
    mean /= samples.size() * 15.0;
    double variance = 0.0;
    for (const auto& s : samples)
        for (double v : s.y) variance += (v - mean) * (v - mean);
    variance /= samples.size() * 15.0;

    MatchPredictor p = init_predictor(input_dim, 32, 29);
    const TrainReport report = mlp_train(p, samples, 3000, 0.05);
    CHECK(report.final_loss * 10.0 <= variance);

    // The desk training profile also has to descend.
    MatchPredictor desk = init_predictor(input_dim, 32, 29);
    const TrainReport desk_report = mlp_train(desk, samples, 20, 1e-2);
    CHECK(desk_report.final_loss <= desk_report.initial_loss);
}

TEST_CASE("choose_config arithmetic and tie-breaking") {
    SUBCASE("direct substitution: 3 tokens over 15 ms is 0.2 per ms") {
        CostProfile profile = uniform_profile();
        profile.verify_ms[grid::index_of({1, 4})] = 10.0;
        profile.speculate_ms[grid::index_of({1, 4})] = 5.0;
        std::array<double, 15> f{};
        f[grid::index_of({1, 4})] = 3.0;
        const int idx = argmax_cost_index(f, profile);
        CHECK(idx == grid::index_of({1, 4}));
        CHECK(f[idx] / (profile.verify_ms[idx] + profile.speculate_ms[idx]) ==
              doctest::Approx(0.2));
    }
    SUBCASE("equal predictions with latencies growing in b*d select (1,1)") {
        CostProfile profile;
        profile.samples = 30;
        for (int i = 0; i < 15; ++i) {
            const SpecConfig cfg = grid::config_at(i);
            profile.speculate_ms[i] = 0.5 * cfg.beam_width * cfg.beam_depth;
            profile.verify_ms[i] = 0.25 * cfg.beam_width * cfg.beam_depth;
        }
        std::array<double, 15> f;
        f.fill(2.0);
        CHECK(choose_config(f, profile) == SpecConfig{1, 1});
    }
    SUBCASE("ties break toward smaller width then depth") {
        const CostProfile profile = uniform_profile();
        std::array<double, 15> f;
        f.fill(1.0);  // equal cost everywhere
        CHECK(choose_config(f, profile) == SpecConfig{1, 1});

        f.fill(0.0);
        f[grid::index_of({2, 4})] = 5.0;
        f[grid::index_of({4, 1})] = 5.0;
        CHECK(choose_config(f, profile) == SpecConfig{2, 4});
    }
    SUBCASE("random draws match the brute-force oracle") {
        std::mt19937 rng(31);
        std::uniform_real_distribution<double> fy(0.0, 16.0);
        std::uniform_real_distribution<double> lat(0.01, 10.0);
        for (int iter = 0; iter < 1000; ++iter) {
            CostProfile profile;
            profile.samples = 30;
            std::array<double, 15> f;
            for (int i = 0; i < 15; ++i) {
                f[i] = fy(rng);
                profile.speculate_ms[i] = lat(rng);
                profile.verify_ms[i] = lat(rng);
            }
            CHECK(choose_config(f, profile) == oracle_choice(f, profile));
        }
    }
    SUBCASE("scaling all latencies never changes the selection") {
        std::mt19937 rng(37);
        std::uniform_real_distribution<double> fy(0.0, 16.0);
        std::uniform_real_distribution<double> lat(0.01, 10.0);
        for (int iter = 0; iter < 200; ++iter) {
            CostProfile profile;
            profile.samples = 30;
            std::array<double, 15> f;
            for (int i = 0; i < 15; ++i) {
                f[i] = fy(rng);
                profile.speculate_ms[i] = lat(rng);
                profile.verify_ms[i] = lat(rng);
            }
            const SpecConfig base = choose_config(f, profile);
            CostProfile scaled = profile;
            for (int i = 0; i < 15; ++i) {
                scaled.speculate_ms[i] *= 1000.0;
                scaled.verify_ms[i] *= 1000.0;
            }
            CHECK(choose_config(f, scaled) == base);
        }
    }
    SUBCASE("incomplete profiles are rejected") {
        CostProfile profile = uniform_profile();
        profile.verify_ms[7] = 0.0;
        std::array<double, 15> f{};
        try {
            choose_config(f, profile);
            FAIL("expected incomplete profile");
        } catch (const Error& e) {
            CHECK(e.code() == Errc::incomplete_profile);
        }
    }
}

TEST_CASE("collect_samples shapes and bounds") {
    ModelConfig cfg;
    cfg.num_layers = 1;
    cfg.num_heads = 2;
    cfg.d_model = 16;
    cfg.vocab_size = 16;
    cfg.max_positions = 96;
    const ModelWeights llm = init_random_weights(cfg, 41);

    // SSM fit on the llm's own output so some matches occur.
    std::mt19937 rng(43);
    std::uniform_int_distribution<TokenId> tok(0, cfg.vocab_size - 1);
    std::vector<std::vector<TokenId>> prompts(8);
    for (auto& p : prompts) {
        p.resize(2 + rng() % 3);
        for (auto& t : p) t = tok(rng);
    }
    const auto tuning = materialize_samples(llm, prompts, 12);
    const auto factory = make_ngram_factory(3, 0.05, cfg.vocab_size);
    auto ssm = factory(tuning, 0);

    std::vector<GenerationRequest> corpus;
    int expected_positions = 0;
    for (int i = 0; i < 4; ++i) {
        corpus.push_back({prompts[i], 6, kNoEosToken});
        expected_positions += 6;
    }
    const auto samples = collect_samples(llm, *ssm, corpus);
    CHECK(static_cast<int>(samples.size()) == expected_positions);

    int wider_wins = 0, wider_ties = 0, wider_losses = 0;
    for (const auto& s : samples) {
        CHECK(s.h.size() == static_cast<size_t>(cfg.d_model));
        for (int i = 0; i < 15; ++i) {
            const SpecConfig c = grid::config_at(i);
            CHECK(s.y[i] >= 0.0);
            CHECK(s.y[i] <= c.beam_depth);
        }
        for (int d = 0; d < 5; ++d) {
            const double narrow = s.y[grid::index_of({1, grid::kBeamDepths[d]})];
            const double wide = s.y[grid::index_of({4, grid::kBeamDepths[d]})];
            if (wide > narrow) ++wider_wins;
            else if (wide == narrow) ++wider_ties;
            else ++wider_losses;
        }
    }
    // Wider beams overwhelmingly dominate on collected data (the superset
    // holds per-step; rare pruning inversions are tolerated).
    CHECK(wider_losses * 20 <= wider_wins + wider_ties);
}

TEST_CASE("measured cost profile is positive and monotone in depth") {
    ModelConfig cfg;
    cfg.num_layers = 1;
    cfg.num_heads = 2;
    cfg.d_model = 16;
    cfg.vocab_size = 16;
    cfg.max_positions = 64;
    const ModelWeights llm = init_random_weights(cfg, 47);
    std::vector<std::shared_ptr<Ssm>> pool{
        std::make_shared<TransformerSsm>(0, std::make_shared<const ModelWeights>(llm))};

    const CostProfile profile = measure_cost_profile(llm, pool, 31, 16, 7);
    CHECK(profile.samples == 31);
    for (int i = 0; i < 15; ++i) {
        CHECK(profile.speculate_ms[i] > 0.0);
        CHECK(profile.verify_ms[i] > 0.0);
    }
    // Deeper speculation does strictly more transformer work at fixed width.
    for (int b : {1, 2, 4})
        for (int di = 1; di < 5; ++di) {
            const double shallow = profile.speculate_ms[grid::index_of({b, grid::kBeamDepths[di - 1]})];
            const double deep = profile.speculate_ms[grid::index_of({b, grid::kBeamDepths[di]})];
            CHECK(deep >= shallow);
        }
}

TEST_CASE("predictor selector plugs into the engine") {
    ModelConfig cfg;
    cfg.num_layers = 1;
    cfg.num_heads = 2;
    cfg.d_model = 16;
    cfg.vocab_size = 16;
    cfg.max_positions = 96;
    const ModelWeights llm = init_random_weights(cfg, 53);
    const auto shared = std::make_shared<const ModelWeights>(llm);
    std::vector<std::shared_ptr<Ssm>> pool{std::make_shared<TransformerSsm>(0, shared)};

    PredictorSelector selector(init_predictor(cfg.d_model, 8, 3), uniform_profile());
    CHECK(selector.wants_hidden());
    const GenerationRequest req{{1, 2, 3}, 12, kNoEosToken};
    const GenerationResult spec = run_speculative(llm, pool, selector, req, {128});
    const GenerationResult inc = run_incremental(llm, req);
    CHECK(spec.sequence == inc.sequence);
}

TEST_CASE("oracle selector dominates any fixed config per step") {
    ModelConfig cfg;
    cfg.num_layers = 1;
    cfg.num_heads = 2;
    cfg.d_model = 16;
    cfg.vocab_size = 16;
    cfg.max_positions = 128;
    const ModelWeights llm = init_random_weights(cfg, 59);

    std::mt19937 rng(61);
    std::uniform_int_distribution<TokenId> tok(0, cfg.vocab_size - 1);
    std::vector<std::vector<TokenId>> prompts(10);
    for (auto& p : prompts) {
        p.resize(3);
        for (auto& t : p) t = tok(rng);
    }
    const auto tuning = materialize_samples(llm, prompts, 12);
    const auto factory = make_ngram_factory(3, 0.05, cfg.vocab_size);
    std::vector<std::shared_ptr<Ssm>> pool{factory(tuning, 0)};

    CostProfile profile;
    profile.samples = 30;
    for (int i = 0; i < 15; ++i) {
        const SpecConfig c = grid::config_at(i);
        profile.speculate_ms[i] = 0.05 + 0.02 * c.beam_depth * c.beam_width;
        profile.verify_ms[i] = 0.10 + 0.01 * c.beam_depth * c.beam_width;
    }

    const GenerationRequest req{prompts[0], 20, kNoEosToken};
    const GenerationResult target = run_incremental(llm, req);
    OracleSelector oracle(target.sequence, pool, profile);
    const GenerationResult spec = run_speculative(llm, pool, oracle, req, {128});
    CHECK(spec.sequence == target.sequence);

    const auto chosen = oracle.chosen_costs();
    REQUIRE(!chosen.empty());
    for (const SpecConfig fixed : {SpecConfig{1, 16}, SpecConfig{2, 4}, SpecConfig{4, 16}}) {
        const auto fixed_costs = oracle.costs_for(fixed);
        for (size_t s = 0; s < chosen.size(); ++s) CHECK(chosen[s] >= fixed_costs[s]);
    }
}
