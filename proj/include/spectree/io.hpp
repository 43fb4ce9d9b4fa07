#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "spectree/boost_tuning.hpp"
#include "spectree/engine.hpp"
#include "spectree/scheduler.hpp"
#include "spectree/speculator.hpp"
#include "spectree/transformer.hpp"

namespace spectree {

// CRC-32 (IEEE 802.3 polynomial, reflected), as used by the file trailers.
std::uint32_t crc32(std::span<const unsigned char> data);

// Weights file "SPT1": magic, six little-endian u32 header fields
// (num_layers, num_heads, d_model, vocab_size, max_positions, ffn_mult),
// row-major 64-bit little-endian float payload in fixed tensor order, and a
// trailing CRC32 of the payload. load(save(w)) is bit-identical.
void save_weights(const std::string& path, const ModelWeights& weights);
ModelWeights load_weights(const std::string& path);

// Predictor file "SPRD": same discipline, header u32 fields
// (input_dim, hidden_dim, output_dim).
void save_predictor(const std::string& path, const MatchPredictor& predictor);
MatchPredictor load_predictor(const std::string& path);

// N-gram file "SPNG": versioned binary with the same trailer discipline.
void save_ngram(const std::string& path, const NgramTable& table);
NgramTable load_ngram(const std::string& path);

// Boost-tuned pool directory: manifest.json (ids, horizon, residual counts)
// plus one serialized SSM per round.
void save_pool(const std::string& dir, const BoostPool& pool);
BoostPool load_pool(const std::string& dir);

// Stable metrics schema shared by all subcommands:
// {mode, prompts, llm_steps, ssm_runs, tokens_generated, verified_per_step,
//  wall_ms, mismatches}.
void write_metrics_json(const std::string& path, const std::string& mode, int prompts,
                        const RunMetrics& metrics, int mismatches);

// JSONL corpus: one object per line with a "prompt" text field.
std::vector<std::string> load_prompt_corpus(const std::string& path);

// Cost profile as JSON (15 grid entries with measured medians).
void save_cost_profile(const std::string& path, const CostProfile& profile);
CostProfile load_cost_profile(const std::string& path);

// Training sample dump: JSONL of {"h": [...], "y": [15 floats]}.
void save_samples_jsonl(const std::string& path, std::span<const TrainSample> samples);
std::vector<TrainSample> load_samples_jsonl(const std::string& path);

// Default seed, overridable through the SPECTREE_SEED environment variable.
std::uint64_t default_seed();

}  // namespace spectree
