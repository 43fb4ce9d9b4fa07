#include "spectree/scheduler.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "spectree/boost_tuning.hpp"
#include "spectree/rng.hpp"

namespace spectree {

void MatchPredictor::validate() const {
    if (w1.rows < 1 || w1.cols < 1 || w2.rows != w1.cols || w2.cols != w1.cols ||
        w3.rows != w2.cols || w3.cols != grid::kNumConfigs ||
        static_cast<int>(b1.size()) != w1.cols || static_cast<int>(b2.size()) != w2.cols ||
        static_cast<int>(b3.size()) != w3.cols)
        fail(Errc::shape_mismatch, "match predictor: inconsistent layer shapes");
}

MatchPredictor init_predictor(int input_dim, int hidden_dim, std::uint64_t seed) {
    if (input_dim < 1 || hidden_dim < 1)
        fail(Errc::shape_mismatch, "init_predictor: dims must be >= 1");
    MatchPredictor p;
    UniformStream rng(seed);
    p.w1 = Matrix(input_dim, hidden_dim);
    p.b1.assign(hidden_dim, 0.0);
    p.w2 = Matrix(hidden_dim, hidden_dim);
    p.b2.assign(hidden_dim, 0.0);
    p.w3 = Matrix(hidden_dim, grid::kNumConfigs);
    p.b3.assign(grid::kNumConfigs, 0.0);
    rng.fill(p.w1, -0.08, 0.08);
    rng.fill(p.w2, -0.08, 0.08);
    rng.fill(p.w3, -0.08, 0.08);
    return p;
}

namespace {

struct ForwardTrace {
    std::vector<double> z1, a1, z2, a2, out;
};

void forward_trace(const MatchPredictor& p, std::span<const double> h, ForwardTrace& t) {
    t.z1.assign(p.hidden_dim(), 0.0);
    matvec(h, p.w1, t.z1);
    for (int i = 0; i < p.hidden_dim(); ++i) t.z1[i] += p.b1[i];
    t.a1 = t.z1;
    for (double& v : t.a1) v = std::max(v, 0.0);

    t.z2.assign(p.hidden_dim(), 0.0);
    matvec(t.a1, p.w2, t.z2);
    for (int i = 0; i < p.hidden_dim(); ++i) t.z2[i] += p.b2[i];
    t.a2 = t.z2;
    for (double& v : t.a2) v = std::max(v, 0.0);

    t.out.assign(p.output_dim(), 0.0);
    matvec(t.a2, p.w3, t.out);
    for (int i = 0; i < p.output_dim(); ++i) t.out[i] += p.b3[i];
}

}  // namespace

std::vector<double> mlp_forward(const MatchPredictor& p, std::span<const double> h) {
    p.validate();
    if (static_cast<int>(h.size()) != p.input_dim())
        fail(Errc::shape_mismatch, "mlp_forward: feature size " + std::to_string(h.size()) +
                                       " != input dim " + std::to_string(p.input_dim()));
    ForwardTrace t;
    forward_trace(p, h, t);
    return std::move(t.out);
}

double mlp_loss(const MatchPredictor& p, std::span<const TrainSample> samples) {
    if (samples.empty())
        fail(Errc::empty_input, "mlp_loss: no samples");
    double total = 0.0;
    for (const TrainSample& s : samples) {
        const std::vector<double> out = mlp_forward(p, s.h);
        for (int j = 0; j < grid::kNumConfigs; ++j) {
            const double e = out[j] - s.y[j];
            total += e * e;
        }
    }
    return total / (static_cast<double>(samples.size()) * grid::kNumConfigs);
}

MlpGradients mlp_gradients(const MatchPredictor& p, std::span<const TrainSample> samples) {
    p.validate();
    if (samples.empty())
        fail(Errc::empty_input, "mlp_gradients: no samples");

    MlpGradients g;
    g.w1 = Matrix(p.w1.rows, p.w1.cols);
    g.b1.assign(p.b1.size(), 0.0);
    g.w2 = Matrix(p.w2.rows, p.w2.cols);
    g.b2.assign(p.b2.size(), 0.0);
    g.w3 = Matrix(p.w3.rows, p.w3.cols);
    g.b3.assign(p.b3.size(), 0.0);

    const double norm = 2.0 / (static_cast<double>(samples.size()) * grid::kNumConfigs);
    ForwardTrace t;
    std::vector<double> dout(p.output_dim()), da2(p.hidden_dim()), da1(p.hidden_dim());

    for (const TrainSample& s : samples) {
        if (static_cast<int>(s.h.size()) != p.input_dim())
            fail(Errc::shape_mismatch, "mlp_gradients: feature size mismatch");
        forward_trace(p, s.h, t);
        for (int j = 0; j < p.output_dim(); ++j) dout[j] = norm * (t.out[j] - s.y[j]);

        for (int i = 0; i < p.w3.rows; ++i)
            for (int j = 0; j < p.w3.cols; ++j) g.w3.at(i, j) += t.a2[i] * dout[j];
        for (int j = 0; j < p.output_dim(); ++j) g.b3[j] += dout[j];

        for (int i = 0; i < p.hidden_dim(); ++i) {
            double acc = 0.0;
            for (int j = 0; j < p.output_dim(); ++j) acc += p.w3.at(i, j) * dout[j];
            da2[i] = t.z2[i] > 0.0 ? acc : 0.0;
        }
        for (int i = 0; i < p.w2.rows; ++i)
            for (int j = 0; j < p.w2.cols; ++j) g.w2.at(i, j) += t.a1[i] * da2[j];
        for (int j = 0; j < p.hidden_dim(); ++j) g.b2[j] += da2[j];

        for (int i = 0; i < p.hidden_dim(); ++i) {
            double acc = 0.0;
            for (int j = 0; j < p.hidden_dim(); ++j) acc += p.w2.at(i, j) * da2[j];
            da1[i] = t.z1[i] > 0.0 ? acc : 0.0;
        }
        for (int i = 0; i < p.w1.rows; ++i)
            for (int j = 0; j < p.w1.cols; ++j) g.w1.at(i, j) += s.h[i] * da1[j];
        for (int j = 0; j < p.hidden_dim(); ++j) g.b1[j] += da1[j];
    }
    return g;
}

TrainReport mlp_train(MatchPredictor& p, std::span<const TrainSample> samples, int epochs,
                      double lr) {
    if (samples.empty())
        fail(Errc::empty_input, "mlp_train: no samples");
    TrainReport report;
    report.initial_loss = mlp_loss(p, samples);
    for (int epoch = 0; epoch < epochs; ++epoch) {
        const MlpGradients g = mlp_gradients(p, samples);
        for (size_t i = 0; i < p.w1.data.size(); ++i) p.w1.data[i] -= lr * g.w1.data[i];
        for (size_t i = 0; i < p.b1.size(); ++i) p.b1[i] -= lr * g.b1[i];
        for (size_t i = 0; i < p.w2.data.size(); ++i) p.w2.data[i] -= lr * g.w2.data[i];
        for (size_t i = 0; i < p.b2.size(); ++i) p.b2[i] -= lr * g.b2[i];
        for (size_t i = 0; i < p.w3.data.size(); ++i) p.w3.data[i] -= lr * g.w3.data[i];
        for (size_t i = 0; i < p.b3.size(); ++i) p.b3[i] -= lr * g.b3[i];
    }
    report.final_loss = mlp_loss(p, samples);
    return report;
}

MatchPredictor mlp_train(std::span<const TrainSample> samples, int epochs, double lr,
                         std::uint64_t seed, int hidden_dim) {
    if (samples.empty())
        fail(Errc::empty_input, "mlp_train: no samples");
    MatchPredictor p = init_predictor(static_cast<int>(samples.front().h.size()), hidden_dim, seed);
    mlp_train(p, samples, epochs, lr);
    return p;
}

void CostProfile::validate() const {
    for (int i = 0; i < grid::kNumConfigs; ++i)
        if (!(speculate_ms[i] > 0.0) || !(verify_ms[i] > 0.0))
            fail(Errc::incomplete_profile,
                 "cost profile: non-positive latency for config index " + std::to_string(i));
}

int argmax_cost_index(std::span<const double> predictions, const CostProfile& profile) {
    if (static_cast<int>(predictions.size()) != grid::kNumConfigs)
        fail(Errc::shape_mismatch, "argmax_cost_index: need 15 predictions");
    profile.validate();
    // Width-major, depth-minor indexing makes "first index wins" exactly the
    // smaller-b-then-smaller-d tie rule.
    int best = 0;
    double best_cost = predictions[0] / (profile.verify_ms[0] + profile.speculate_ms[0]);
    for (int i = 1; i < grid::kNumConfigs; ++i) {
        const double cost = predictions[i] / (profile.verify_ms[i] + profile.speculate_ms[i]);
        if (cost > best_cost) {
            best = i;
            best_cost = cost;
        }
    }
    return best;
}

SpecConfig choose_config(std::span<const double> predictions, const CostProfile& profile) {
    return grid::config_at(argmax_cost_index(predictions, profile));
}

SpecConfig choose_config(const MatchPredictor& p, std::span<const double> h,
                         const CostProfile& profile) {
    const std::vector<double> f = mlp_forward(p, h);
    return choose_config(f, profile);
}

std::vector<TrainSample> collect_samples(const ModelWeights& llm, Ssm& ssm,
                                         std::span<const GenerationRequest> corpus) {
    std::vector<TrainSample> samples;
    KVCache cache(llm.config);
    for (const GenerationRequest& req : corpus) {
        const GenerationResult target = run_incremental(llm, req);
        const std::span<const TokenId> generated{
            target.sequence.data() + req.prompt.size(),
            target.sequence.size() - req.prompt.size()};

        prefill(llm, req.prompt, cache);
        std::vector<TokenId> seq = req.prompt;
        for (size_t step = 0; step < generated.size(); ++step) {
            TrainSample sample;
            sample.h = final_hidden(llm, cache);
            const std::span<const TokenId> remaining = generated.subspan(step);
            for (int ci = 0; ci < grid::kNumConfigs; ++ci) {
                const auto beams = beam_speculate(ssm, seq, grid::config_at(ci), req.eos);
                int best = 0;
                for (const auto& beam : beams) {
                    const std::span<const TokenId> continuation{beam.data() + 1,
                                                                beam.size() - 1};
                    best = std::max(best, matching_length(continuation, remaining));
                }
                sample.y[ci] = static_cast<double>(best);
            }
            samples.push_back(std::move(sample));
            decode_incremental(llm, generated[step], static_cast<int>(seq.size()), cache);
            seq.push_back(generated[step]);
        }
    }
    return samples;
}

namespace {

double median_ms(std::vector<double>& v) {
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

CostProfile measure_cost_profile(const ModelWeights& llm,
                                 std::span<const std::shared_ptr<Ssm>> pool, int reps,
                                 int context_len, std::uint64_t seed) {
    if (reps < 1)
        fail(Errc::invalid_argument, "measure_cost_profile: reps must be >= 1");
    if (pool.empty())
        fail(Errc::empty_input, "measure_cost_profile: empty pool");
    if (context_len < 1 || context_len + grid::kBeamDepths.back() + 1 > llm.config.max_positions)
        fail(Errc::invalid_argument, "measure_cost_profile: context does not fit");

    UniformStream rng(seed);
    std::vector<TokenId> context(context_len);
    for (TokenId& t : context)
        t = static_cast<TokenId>(rng.next_index(llm.config.vocab_size));

    KVCache cache(llm.config);
    prefill(llm, context, cache);

    using Clock = std::chrono::steady_clock;
    CostProfile profile;
    profile.samples = reps;
    std::vector<double> durations(reps);

    for (int ci = 0; ci < grid::kNumConfigs; ++ci) {
        const SpecConfig cfg = grid::config_at(ci);
        const int max_nodes =
            static_cast<int>(pool.size()) * cfg.beam_width * cfg.beam_depth + 2;

        for (int r = 0; r < reps; ++r) {
            const auto t0 = Clock::now();
            TokenTree tree = speculate_tree(pool, context, cfg, max_nodes);
            durations[r] = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
            (void)tree;
        }
        profile.speculate_ms[ci] = median_ms(durations);

        const TokenTree tree = speculate_tree(pool, context, cfg, max_nodes);
        for (int r = 0; r < reps; ++r) {
            const auto t0 = Clock::now();
            tree_parallel_decode(llm, tree, context_len, cache);
            durations[r] = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
        }
        profile.verify_ms[ci] = median_ms(durations);
    }
    return profile;
}

PredictorSelector::PredictorSelector(MatchPredictor predictor, CostProfile profile)
    : predictor_(std::move(predictor)), profile_(std::move(profile)) {
    predictor_.validate();
    profile_.validate();
}

SpecConfig PredictorSelector::choose(std::span<const TokenId>, std::span<const double> hidden) {
    return choose_config(predictor_, hidden, profile_);
}

OracleSelector::OracleSelector(std::vector<TokenId> full_target,
                               std::vector<std::shared_ptr<Ssm>> pool, CostProfile profile,
                               TokenId eos)
    : full_target_(std::move(full_target)),
      pool_(std::move(pool)),
      profile_(std::move(profile)),
      eos_(eos) {
    profile_.validate();
}

std::array<double, grid::kNumConfigs> OracleSelector::step_predictions(
    std::span<const TokenId> sequence) {
    std::array<double, grid::kNumConfigs> predictions{};
    if (sequence.size() >= full_target_.size()) return predictions;
    const std::span<const TokenId> remaining{full_target_.data() + sequence.size(),
                                             full_target_.size() - sequence.size()};
    for (int ci = 0; ci < grid::kNumConfigs; ++ci) {
        int best = 0;
        for (const auto& ssm : pool_) {
            const auto beams = beam_speculate(*ssm, sequence, grid::config_at(ci), eos_);
            for (const auto& beam : beams) {
                const std::span<const TokenId> continuation{beam.data() + 1, beam.size() - 1};
                best = std::max(best, matching_length(continuation, remaining));
            }
        }
        predictions[ci] = static_cast<double>(best);
    }
    return predictions;
}

SpecConfig OracleSelector::choose(std::span<const TokenId> sequence, std::span<const double>) {
    const auto predictions = step_predictions(sequence);
    history_.push_back(predictions);
    const int idx = argmax_cost_index(predictions, profile_);
    chosen_costs_.push_back(predictions[idx] /
                            (profile_.verify_ms[idx] + profile_.speculate_ms[idx]));
    return grid::config_at(idx);
}

std::vector<double> OracleSelector::costs_for(SpecConfig cfg) const {
    const int idx = grid::index_of(cfg);
    std::vector<double> costs;
    costs.reserve(history_.size());
    for (const auto& predictions : history_)
        costs.push_back(predictions[idx] / (profile_.verify_ms[idx] + profile_.speculate_ms[idx]));
    return costs;
}

}  // namespace spectree
