#include "spectree/transformer.hpp"

#include <cassert>
#include <cmath>
#include <cstring>
#include <string>

#include "spectree/rng.hpp"

namespace spectree {

void matvec(std::span<const double> x, const Matrix& w, std::span<double> out) {
    assert(static_cast<int>(x.size()) == w.rows && static_cast<int>(out.size()) == w.cols);
    std::fill(out.begin(), out.end(), 0.0);
    for (int i = 0; i < w.rows; ++i) {
        const double xi = x[i];
        const double* wrow = w.row(i);
        for (int j = 0; j < w.cols; ++j)
            out[j] += xi * wrow[j];
    }
}

void ModelConfig::validate() const {
    if (num_layers < 1 || num_heads < 1 || d_model < 1 || vocab_size < 2 ||
        max_positions < 1 || ffn_mult < 1)
        fail(Errc::shape_mismatch, "model config: all dims must be >= 1 (vocab >= 2)");
    if (d_model % num_heads != 0)
        fail(Errc::shape_mismatch, "model config: d_model " + std::to_string(d_model) +
                                       " not divisible by " + std::to_string(num_heads) + " heads");
}

std::size_t ModelConfig::parameter_count() const {
    const std::size_t d = static_cast<std::size_t>(d_model);
    const std::size_t per_layer = 4 * d * d                  // wq wk wv wo
                                  + 2 * d * ffn_dim()        // w_ff1 w_ff2
                                  + 4 * d;                   // two layer norms
    return static_cast<std::size_t>(vocab_size) * d          // token embedding
           + static_cast<std::size_t>(max_positions) * d     // position embedding
           + static_cast<std::size_t>(num_layers) * per_layer
           + 2 * d                                           // final norm
           + d * static_cast<std::size_t>(vocab_size);       // output projection
}

namespace {

constexpr double kInitLo = -0.08;
constexpr double kInitHi = 0.08;
constexpr double kLayerNormEps = 1e-5;

void layer_norm(std::span<const double> x, std::span<const double> gamma,
                std::span<const double> beta, std::span<double> out) {
    const int d = static_cast<int>(x.size());
    double mean = 0.0;
    for (int i = 0; i < d; ++i) mean += x[i];
    mean /= d;
    double var = 0.0;
    for (int i = 0; i < d; ++i) {
        const double c = x[i] - mean;
        var += c * c;
    }
    var /= d;
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    for (int i = 0; i < d; ++i)
        out[i] = gamma[i] * (x[i] - mean) * inv + beta[i];
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865476)); }

}  // namespace

ModelWeights init_random_weights(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    ModelWeights w;
    w.config = config;
    UniformStream rng(seed);

    // Tensor order here is the serialized order of the weights file.
    w.token_embedding = Matrix(config.vocab_size, config.d_model);
    rng.fill(w.token_embedding, kInitLo, kInitHi);
    w.position_embedding = Matrix(config.max_positions, config.d_model);
    rng.fill(w.position_embedding, kInitLo, kInitHi);

    w.layers.resize(config.num_layers);
    for (auto& layer : w.layers) {
        layer.ln1_gamma.resize(config.d_model);
        layer.ln1_beta.resize(config.d_model);
        rng.fill(layer.ln1_gamma, kInitLo, kInitHi);
        rng.fill(layer.ln1_beta, kInitLo, kInitHi);
        layer.wq = Matrix(config.d_model, config.d_model);
        layer.wk = Matrix(config.d_model, config.d_model);
        layer.wv = Matrix(config.d_model, config.d_model);
        layer.wo = Matrix(config.d_model, config.d_model);
        rng.fill(layer.wq, kInitLo, kInitHi);
        rng.fill(layer.wk, kInitLo, kInitHi);
        rng.fill(layer.wv, kInitLo, kInitHi);
        rng.fill(layer.wo, kInitLo, kInitHi);
        layer.ln2_gamma.resize(config.d_model);
        layer.ln2_beta.resize(config.d_model);
        rng.fill(layer.ln2_gamma, kInitLo, kInitHi);
        rng.fill(layer.ln2_beta, kInitLo, kInitHi);
        layer.w_ff1 = Matrix(config.d_model, config.ffn_dim());
        layer.w_ff2 = Matrix(config.ffn_dim(), config.d_model);
        rng.fill(layer.w_ff1, kInitLo, kInitHi);
        rng.fill(layer.w_ff2, kInitLo, kInitHi);
    }

    w.lnf_gamma.resize(config.d_model);
    w.lnf_beta.resize(config.d_model);
    rng.fill(w.lnf_gamma, kInitLo, kInitHi);
    rng.fill(w.lnf_beta, kInitLo, kInitHi);
    w.output_projection = Matrix(config.d_model, config.vocab_size);
    rng.fill(w.output_projection, kInitLo, kInitHi);
    return w;
}

TokenId argmax_token(std::span<const double> logits) {
    assert(!logits.empty());
    int best = 0;
    for (int i = 1; i < static_cast<int>(logits.size()); ++i)
        if (logits[i] > logits[best]) best = i;
    return static_cast<TokenId>(best);
}

KVCache::KVCache(const ModelConfig& config) : config_(config) {
    config.validate();
    const std::size_t per_layer =
        static_cast<std::size_t>(config.max_positions) * config.d_model;
    keys_.assign(config.num_layers, std::vector<double>(per_layer, 0.0));
    values_.assign(config.num_layers, std::vector<double>(per_layer, 0.0));
    tokens_.assign(config.max_positions, kNoEosToken);
}

void KVCache::rollback(int new_occupancy) {
    if (new_occupancy < 0 || new_occupancy > occupancy_)
        fail(Errc::invalid_argument, "rollback: bad occupancy " + std::to_string(new_occupancy));
    occupancy_ = new_occupancy;
}

double* KVCache::key_row(int layer, int position) {
    return keys_[layer].data() + static_cast<std::size_t>(position) * config_.d_model;
}
double* KVCache::value_row(int layer, int position) {
    return values_[layer].data() + static_cast<std::size_t>(position) * config_.d_model;
}
const double* KVCache::key_row(int layer, int position) const {
    return keys_[layer].data() + static_cast<std::size_t>(position) * config_.d_model;
}
const double* KVCache::value_row(int layer, int position) const {
    return values_[layer].data() + static_cast<std::size_t>(position) * config_.d_model;
}

Matrix causal_mask(int rows) {
    Matrix m(rows, rows);
    for (int j = 0; j < rows; ++j)
        for (int k = j + 1; k < rows; ++k)
            m.at(j, k) = kMaskNegInf;
    return m;
}

Matrix attention(const Matrix& x, const Matrix& wq, const Matrix& wk, const Matrix& wv,
                 const Matrix& wo, int num_heads, const Matrix& mask) {
    const int l = x.rows;
    const int d_model = x.cols;
    if (d_model == 0 || num_heads < 1 || d_model % num_heads != 0)
        fail(Errc::shape_mismatch, "attention: bad head split");
    if (wq.rows != d_model || wq.cols != d_model || wk.rows != d_model || wk.cols != d_model ||
        wv.rows != d_model || wv.cols != d_model || wo.rows != d_model || wo.cols != d_model)
        fail(Errc::shape_mismatch, "attention: weight shape mismatch");
    if (mask.rows != l || mask.cols != l)
        fail(Errc::shape_mismatch, "attention: mask must be l x l");

    const int d_head = d_model / num_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d_head));

    Matrix q(l, d_model), k(l, d_model), v(l, d_model);
    for (int r = 0; r < l; ++r) {
        matvec({x.row(r), static_cast<size_t>(d_model)}, wq, {q.row(r), static_cast<size_t>(d_model)});
        matvec({x.row(r), static_cast<size_t>(d_model)}, wk, {k.row(r), static_cast<size_t>(d_model)});
        matvec({x.row(r), static_cast<size_t>(d_model)}, wv, {v.row(r), static_cast<size_t>(d_model)});
    }

    Matrix heads(l, d_model);  // concatenated H_i
    std::vector<double> scores(l);
    for (int h = 0; h < num_heads; ++h) {
        const int off = h * d_head;
        for (int j = 0; j < l; ++j) {
            for (int c = 0; c < l; ++c) {
                double s = 0.0;
                const double* qr = q.row(j) + off;
                const double* kr = k.row(c) + off;
                for (int t = 0; t < d_head; ++t) s += qr[t] * kr[t];
                scores[c] = s * scale + mask.at(j, c);
            }
            double mx = scores[0];
            for (int c = 1; c < l; ++c) mx = std::max(mx, scores[c]);
            double denom = 0.0;
            for (int c = 0; c < l; ++c) {
                scores[c] = std::exp(scores[c] - mx);
                denom += scores[c];
            }
            double* out = heads.row(j) + off;
            for (int c = 0; c < l; ++c) {
                const double wgt = scores[c] / denom;
                assert(mask.at(j, c) == 0.0 || wgt == 0.0);
                const double* vr = v.row(c) + off;
                for (int t = 0; t < d_head; ++t) out[t] += wgt * vr[t];
            }
        }
    }

    Matrix o(l, d_model);
    for (int r = 0; r < l; ++r)
        matvec({heads.row(r), static_cast<size_t>(d_model)}, wo,
               {o.row(r), static_cast<size_t>(d_model)});
    return o;
}

namespace detail {

std::vector<LogitRow> chain_attention_step_impl(const ModelWeights& w,
                                                std::span<const TokenId> chain_tokens,
                                                int base_position, KVCache& cache,
                                                bool apply_causal_fix,
                                                std::vector<std::vector<double>>* hidden_rows) {
    const ModelConfig& cfg = w.config;
    const int len = static_cast<int>(chain_tokens.size());
    if (len == 0)
        fail(Errc::empty_input, "chain_attention_step: empty chain");
    if (base_position < 0 || base_position + len > cfg.max_positions)
        fail(Errc::tree_too_deep,
             "chain_attention_step: positions " + std::to_string(base_position) + ".." +
                 std::to_string(base_position + len - 1) + " exceed max " +
                 std::to_string(cfg.max_positions));
    for (TokenId t : chain_tokens)
        if (t < 0 || t >= cfg.vocab_size)
            fail(Errc::invalid_argument, "chain_attention_step: token out of vocab");

    const int d_model = cfg.d_model;
    const int d_head = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(d_head));
    const int total = base_position + len;  // cache rows visible to the chain

    // Residual stream rows for the chain.
    Matrix x(len, d_model);
    for (int i = 0; i < len; ++i) {
        const double* tok = w.token_embedding.row(chain_tokens[i]);
        const double* pos = w.position_embedding.row(base_position + i);
        double* xr = x.row(i);
        for (int c = 0; c < d_model; ++c) xr[c] = tok[c] + pos[c];
    }

    std::vector<double> normed(d_model);
    Matrix q(len, d_model);
    std::vector<double> attn(d_model), proj(d_model);
    std::vector<double> scores(total);
    std::vector<double> ffn_hidden(cfg.ffn_dim());

    for (int layer = 0; layer < cfg.num_layers; ++layer) {
        const LayerWeights& lw = w.layers[layer];
        // QKV for the whole chain; K/V rows land in the cache so attention
        // below reads chain keys and prefix keys through one code path.
        for (int i = 0; i < len; ++i) {
            layer_norm({x.row(i), static_cast<size_t>(d_model)}, lw.ln1_gamma, lw.ln1_beta, normed);
            matvec(normed, lw.wq, {q.row(i), static_cast<size_t>(d_model)});
            matvec(normed, lw.wk, {cache.key_row(layer, base_position + i),
                                   static_cast<size_t>(d_model)});
            matvec(normed, lw.wv, {cache.value_row(layer, base_position + i),
                                   static_cast<size_t>(d_model)});
        }
        for (int i = 0; i < len; ++i) {
            const int self = base_position + i;
            std::fill(attn.begin(), attn.end(), 0.0);
            for (int h = 0; h < cfg.num_heads; ++h) {
                const int off = h * d_head;
                const double* qr = q.row(i) + off;
                for (int p = 0; p < total; ++p) {
                    const double* kr = cache.key_row(layer, p) + off;
                    double s = 0.0;
                    for (int t = 0; t < d_head; ++t) s += qr[t] * kr[t];
                    s *= scale;
                    // Batching used the cache as of the chain's last token;
                    // restore causality for the intra-chain pairs above the
                    // diagonal.
                    if (apply_causal_fix && p > self) s += kMaskNegInf;
                    scores[p] = s;
                }
                double mx = scores[0];
                for (int p = 1; p < total; ++p) mx = std::max(mx, scores[p]);
                double denom = 0.0;
                for (int p = 0; p < total; ++p) {
                    scores[p] = std::exp(scores[p] - mx);
                    denom += scores[p];
                }
                for (int p = 0; p < total; ++p) {
                    const double wgt = scores[p] / denom;
                    const double* vr = cache.value_row(layer, p) + off;
                    for (int t = 0; t < d_head; ++t) attn[off + t] += wgt * vr[t];
                }
            }
            matvec(attn, lw.wo, proj);
            double* xr = x.row(i);
            for (int c = 0; c < d_model; ++c) xr[c] += proj[c];

            layer_norm({x.row(i), static_cast<size_t>(d_model)}, lw.ln2_gamma, lw.ln2_beta, normed);
            matvec(normed, lw.w_ff1, ffn_hidden);
            for (double& vv : ffn_hidden) vv = gelu(vv);
            matvec(ffn_hidden, lw.w_ff2, proj);
            for (int c = 0; c < d_model; ++c) xr[c] += proj[c];
        }
    }

    std::vector<LogitRow> logits(len);
    if (hidden_rows) hidden_rows->resize(len);
    for (int i = 0; i < len; ++i) {
        layer_norm({x.row(i), static_cast<size_t>(d_model)}, w.lnf_gamma, w.lnf_beta, normed);
        if (hidden_rows) (*hidden_rows)[i] = normed;
        logits[i].resize(cfg.vocab_size);
        matvec(normed, w.output_projection, logits[i]);
    }

    for (int i = 0; i < len; ++i) cache.record_token(base_position + i, chain_tokens[i]);
    // Writes at or below the watermark commit (and invalidate any stale
    // suffix); writes above it stay scratch for tree decoding.
    if (base_position <= cache.occupancy()) cache.set_occupancy(base_position + len);
    return logits;
}

}  // namespace detail

std::vector<LogitRow> chain_attention_step(const ModelWeights& w,
                                           std::span<const TokenId> chain_tokens,
                                           int base_position, KVCache& cache) {
    return detail::chain_attention_step_impl(w, chain_tokens, base_position, cache, true);
}

namespace {

void validate_chain(const TokenTree& tree, std::span<const int> chain) {
    if (chain.empty())
        fail(Errc::empty_input, "chain_attention_step: empty chain");
    for (size_t i = 1; i < chain.size(); ++i)
        if (tree.parent(chain[i]) != chain[i - 1])
            fail(Errc::chain_not_linked, "chain element " + std::to_string(chain[i]) +
                                             " is not a child of its predecessor " +
                                             std::to_string(chain[i - 1]));
}

}  // namespace

std::vector<LogitRow> chain_attention_step(const ModelWeights& w, const TokenTree& tree,
                                           std::span<const int> chain, int prefix_len,
                                           KVCache& cache) {
    validate_chain(tree, chain);
    std::vector<TokenId> tokens;
    tokens.reserve(chain.size());
    for (int node : chain) tokens.push_back(tree.token(node));
    const int base = prefix_len - 1 + tree.depth(chain.front());
    return detail::chain_attention_step_impl(w, tokens, base, cache, true);
}

LogitRow prefill(const ModelWeights& w, std::span<const TokenId> prompt, KVCache& cache) {
    if (prompt.empty())
        fail(Errc::empty_input, "prefill: empty prompt");
    if (static_cast<int>(prompt.size()) > w.config.max_positions)
        fail(Errc::prompt_too_long, "prefill: prompt length " + std::to_string(prompt.size()) +
                                        " exceeds max positions " +
                                        std::to_string(w.config.max_positions));
    cache.rollback(0);
    auto rows = detail::chain_attention_step_impl(w, prompt, 0, cache, true);
    return std::move(rows.back());
}

LogitRow decode_incremental(const ModelWeights& w, TokenId token, int position, KVCache& cache) {
    if (position < 0 || position > cache.occupancy())
        fail(Errc::cache_gap, "decode_incremental: position " + std::to_string(position) +
                                  " beyond occupancy " + std::to_string(cache.occupancy()));
    const TokenId chain[1] = {token};
    auto rows = detail::chain_attention_step_impl(w, chain, position, cache, true);
    return std::move(rows.front());
}

std::vector<double> final_hidden(const ModelWeights& w, KVCache& cache) {
    const int occ = cache.occupancy();
    if (occ == 0)
        fail(Errc::empty_context, "final_hidden: no decoded positions");
    // Re-run the last token's forward pass; it rewrites its own K/V rows with
    // identical values, so the cache is unchanged observably.
    const TokenId chain[1] = {cache.token_at(occ - 1)};
    std::vector<std::vector<double>> hidden_rows;
    detail::chain_attention_step_impl(w, chain, occ - 1, cache, true, &hidden_rows);
    return std::move(hidden_rows.front());
}

TreeDecodeResult tree_parallel_decode(const ModelWeights& w, const TokenTree& tree,
                                      int prefix_len, KVCache& cache,
                                      const TreeDecodeHooks* hooks) {
    if (prefix_len < 1 || cache.occupancy() != prefix_len)
        fail(Errc::cache_gap, "tree_parallel_decode: cache occupancy " +
                                  std::to_string(cache.occupancy()) + " != prefix length " +
                                  std::to_string(prefix_len));
    if (prefix_len + tree.max_depth() > w.config.max_positions)
        fail(Errc::tree_too_deep, "tree_parallel_decode: prefix " + std::to_string(prefix_len) +
                                      " + depth " + std::to_string(tree.max_depth()) +
                                      " exceeds max positions " +
                                      std::to_string(w.config.max_positions));
    if (cache.token_at(prefix_len - 1) != tree.token(tree.root()))
        fail(Errc::root_mismatch, "tree_parallel_decode: root token does not match the cached "
                                  "last verified token");
    const bool fix = hooks == nullptr || hooks->apply_chain_causal_fix;

    TreeDecodeResult result;
    result.tokens.assign(tree.size(), 0);
    result.logits.resize(tree.size());

    // Root: recompute the last verified token's forward pass in place. Its
    // K/V rows are rewritten with identical values.
    {
        const TokenId root_tok[1] = {tree.token(tree.root())};
        auto rows = detail::chain_attention_step_impl(w, root_tok, prefix_len - 1, cache, fix);
        result.logits[tree.root()] = std::move(rows.front());
        result.tokens[tree.root()] = argmax_token(result.logits[tree.root()]);
        if (hooks && hooks->on_node) hooks->on_node(tree.root(), prefix_len - 1, cache);
    }

    // Chains in depth-first order keep the shared rows holding exactly each
    // node's ancestors when its logits are computed (depth-first overwrite).
    std::vector<TokenId> chain_tokens;
    for (const auto& chain : tree.dfs_chains()) {
        validate_chain(tree, chain);
        chain_tokens.clear();
        for (int node : chain) chain_tokens.push_back(tree.token(node));
        const int base = prefix_len - 1 + tree.depth(chain.front());
        auto rows = detail::chain_attention_step_impl(w, chain_tokens, base, cache, fix);
        for (size_t i = 0; i < chain.size(); ++i) {
            result.logits[chain[i]] = std::move(rows[i]);
            result.tokens[chain[i]] = argmax_token(result.logits[chain[i]]);
            if (hooks && hooks->on_node)
                hooks->on_node(chain[i], base + static_cast<int>(i), cache);
        }
    }

    // Positions at and beyond prefix_len are vacant again; the prefix row of
    // the root was rewritten bit-identically.
    cache.rollback(prefix_len);
    return result;
}

}  // namespace spectree
