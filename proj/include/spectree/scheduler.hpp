#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "spectree/engine.hpp"
#include "spectree/matrix.hpp"
#include "spectree/speculator.hpp"

namespace spectree {

// Three affine layers with a rectifier between: input -> hidden -> hidden ->
// one predicted matching length per grid config.
struct MatchPredictor {
    Matrix w1;  // input_dim x hidden_dim
    std::vector<double> b1;
    Matrix w2;  // hidden_dim x hidden_dim
    std::vector<double> b2;
    Matrix w3;  // hidden_dim x kNumConfigs
    std::vector<double> b3;

    int input_dim() const { return w1.rows; }
    int hidden_dim() const { return w1.cols; }
    int output_dim() const { return w3.cols; }
    void validate() const;
};

inline constexpr int kPredictorHiddenDim = 64;

MatchPredictor init_predictor(int input_dim, int hidden_dim, std::uint64_t seed);

std::vector<double> mlp_forward(const MatchPredictor& p, std::span<const double> h);

struct TrainSample {
    std::vector<double> h;                            // final hidden state
    std::array<double, grid::kNumConfigs> y{};        // observed matching lengths
};

// Mean squared error over all samples and outputs.
double mlp_loss(const MatchPredictor& p, std::span<const TrainSample> samples);

struct MlpGradients {
    Matrix w1;
    std::vector<double> b1;
    Matrix w2;
    std::vector<double> b2;
    Matrix w3;
    std::vector<double> b3;
};

// Analytic gradient of mlp_loss (checked against finite differences).
MlpGradients mlp_gradients(const MatchPredictor& p, std::span<const TrainSample> samples);

struct TrainReport {
    double initial_loss = 0.0;
    double final_loss = 0.0;
};

// Plain full-batch gradient descent on the MSE.
TrainReport mlp_train(MatchPredictor& p, std::span<const TrainSample> samples, int epochs,
                      double lr);

MatchPredictor mlp_train(std::span<const TrainSample> samples, int epochs, double lr,
                         std::uint64_t seed, int hidden_dim = kPredictorHiddenDim);

// Measured speculation / verification latencies per grid config, medians in
// milliseconds over `samples` repetitions.
struct CostProfile {
    std::array<double, grid::kNumConfigs> speculate_ms{};
    std::array<double, grid::kNumConfigs> verify_ms{};
    int samples = 0;

    void validate() const;  // incomplete_profile unless every entry > 0
};

// Index of the config maximizing predicted-matching-per-latency
//   cost(b, d | h) = f(b, d | h) / (L_verify(b, d) + L_speculate(b, d)).
// Ties break toward smaller width, then smaller depth.
int argmax_cost_index(std::span<const double> predictions, const CostProfile& profile);

SpecConfig choose_config(std::span<const double> predictions, const CostProfile& profile);
SpecConfig choose_config(const MatchPredictor& p, std::span<const double> h,
                         const CostProfile& profile);

// One training sample per generated position of each request: the final
// hidden state before the step, and for each grid config the realized
// matching length of that config's speculation against the LLM's greedy
// continuation.
std::vector<TrainSample> collect_samples(const ModelWeights& llm, Ssm& ssm,
                                         std::span<const GenerationRequest> corpus);

// Wall-clock medians for each grid config's speculation (all pool members)
// and verification (tree decode) at a fixed synthetic context.
CostProfile measure_cost_profile(const ModelWeights& llm,
                                 std::span<const std::shared_ptr<Ssm>> pool, int reps,
                                 int context_len = 32, std::uint64_t seed = 42);

// Serving-time selector: predictor picks the per-step config.
class PredictorSelector final : public ConfigSelector {
public:
    PredictorSelector(MatchPredictor predictor, CostProfile profile);

    SpecConfig choose(std::span<const TokenId> sequence,
                      std::span<const double> hidden) override;
    bool wants_hidden() const override { return true; }

private:
    MatchPredictor predictor_;
    CostProfile profile_;
};

// Reference selector with the true matching lengths injected: it knows the
// LLM's full greedy output for the request and evaluates all grid configs
// directly. Used to bound what any trained predictor can achieve.
class OracleSelector final : public ConfigSelector {
public:
    OracleSelector(std::vector<TokenId> full_target,
                   std::vector<std::shared_ptr<Ssm>> pool, CostProfile profile,
                   TokenId eos = kNoEosToken);

    SpecConfig choose(std::span<const TokenId> sequence,
                      std::span<const double> hidden) override;

    // Chosen-config cost and the fixed-config cost at each step, for the
    // per-step dominance check.
    const std::vector<double>& chosen_costs() const { return chosen_costs_; }
    std::vector<double> costs_for(SpecConfig cfg) const;

private:
    std::array<double, grid::kNumConfigs> step_predictions(std::span<const TokenId> sequence);

    std::vector<TokenId> full_target_;
    std::vector<std::shared_ptr<Ssm>> pool_;
    CostProfile profile_;
    TokenId eos_;
    std::vector<double> chosen_costs_;
    std::vector<std::array<double, grid::kNumConfigs>> history_;
};

}  // namespace spectree
