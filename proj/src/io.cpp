#include "spectree/io.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace spectree {

namespace fs = std::filesystem;
using nlohmann::json;

std::uint32_t crc32(std::span<const unsigned char> data) {
    static const std::array<std::uint32_t, 256> table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1u) ? 0xedb88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    std::uint32_t crc = 0xffffffffu;
    for (unsigned char b : data) crc = table[(crc ^ b) & 0xffu] ^ (crc >> 8);
    return crc ^ 0xffffffffu;
}

namespace {

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
    out.push_back(static_cast<unsigned char>(v));
    out.push_back(static_cast<unsigned char>(v >> 8));
    out.push_back(static_cast<unsigned char>(v >> 16));
    out.push_back(static_cast<unsigned char>(v >> 24));
}

void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void put_f64(std::vector<unsigned char>& out, double v) {
    put_u64(out, std::bit_cast<std::uint64_t>(v));
}

void put_i32(std::vector<unsigned char>& out, std::int32_t v) {
    put_u32(out, static_cast<std::uint32_t>(v));
}

class Reader {
public:
    Reader(std::span<const unsigned char> data, const std::string& path)
        : data_(data), path_(path) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 3; i >= 0; --i) v = (v << 8) | data_[at_ + i];
        at_ += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 7; i >= 0; --i) v = (v << 8) | data_[at_ + i];
        at_ += 8;
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    std::int32_t i32() { return static_cast<std::int32_t>(u32()); }

    size_t remaining() const { return data_.size() - at_; }
    size_t position() const { return at_; }

private:
    void need(size_t n) {
        if (data_.size() - at_ < n)
            fail(Errc::shape_mismatch, path_ + ": truncated file");
    }

    std::span<const unsigned char> data_;
    size_t at_ = 0;
    const std::string& path_;
};

std::vector<unsigned char> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        fail(Errc::io_error, "cannot open " + path);
    std::vector<unsigned char> data((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return data;
}

void write_file(const std::string& path, std::span<const unsigned char> data) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        fail(Errc::io_error, "cannot open " + path + " for writing");
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size()));
    if (!out)
        fail(Errc::io_error, "short write to " + path);
}

// Shared container discipline: 4-byte magic, header bytes, payload bytes,
// trailing CRC32 of the payload.
void write_container(const std::string& path, const char magic[4],
                     std::span<const unsigned char> header,
                     std::span<const unsigned char> payload) {
    std::vector<unsigned char> out;
    out.reserve(4 + header.size() + payload.size() + 4);
    out.insert(out.end(), magic, magic + 4);
    out.insert(out.end(), header.begin(), header.end());
    out.insert(out.end(), payload.begin(), payload.end());
    put_u32(out, crc32(payload));
    write_file(path, out);
}

// Validates magic and CRC; returns the bytes between magic and trailer.
std::vector<unsigned char> read_container(const std::string& path, const char magic[4]) {
    const std::vector<unsigned char> data = read_file(path);
    if (data.size() < 8)
        fail(Errc::shape_mismatch, path + ": truncated file");
    if (!std::equal(magic, magic + 4, data.begin()))
        fail(Errc::bad_magic, path + ": bad magic");
    return {data.begin() + 4, data.end()};
}

std::uint32_t split_crc(std::vector<unsigned char>& body, const std::string& path) {
    if (body.size() < 4)
        fail(Errc::shape_mismatch, path + ": truncated file");
    std::uint32_t stored = 0;
    for (int i = 3; i >= 0; --i) stored = (stored << 8) | body[body.size() - 4 + i];
    body.resize(body.size() - 4);
    return stored;
}

void append_tensor(std::vector<unsigned char>& out, const Matrix& m) {
    for (double v : m.data) put_f64(out, v);
}
void append_tensor(std::vector<unsigned char>& out, const std::vector<double>& v) {
    for (double x : v) put_f64(out, x);
}

// Loaded parameters must be finite; a payload that deserializes to NaN or
// infinity is rejected even when its CRC matches.
void read_tensor(Reader& r, Matrix& m) {
    for (double& v : m.data) {
        v = r.f64();
        if (!std::isfinite(v))
            fail(Errc::shape_mismatch, "non-finite parameter in payload");
    }
}
void read_tensor(Reader& r, std::vector<double>& v) {
    for (double& x : v) {
        x = r.f64();
        if (!std::isfinite(x))
            fail(Errc::shape_mismatch, "non-finite parameter in payload");
    }
}

}  // namespace

void save_weights(const std::string& path, const ModelWeights& w) {
    const ModelConfig& cfg = w.config;
    cfg.validate();
    std::vector<unsigned char> header;
    put_u32(header, static_cast<std::uint32_t>(cfg.num_layers));
    put_u32(header, static_cast<std::uint32_t>(cfg.num_heads));
    put_u32(header, static_cast<std::uint32_t>(cfg.d_model));
    put_u32(header, static_cast<std::uint32_t>(cfg.vocab_size));
    put_u32(header, static_cast<std::uint32_t>(cfg.max_positions));
    put_u32(header, static_cast<std::uint32_t>(cfg.ffn_mult));

    std::vector<unsigned char> payload;
    payload.reserve(cfg.parameter_count() * 8);
    append_tensor(payload, w.token_embedding);
    append_tensor(payload, w.position_embedding);
    for (const LayerWeights& layer : w.layers) {
        append_tensor(payload, layer.ln1_gamma);
        append_tensor(payload, layer.ln1_beta);
        append_tensor(payload, layer.wq);
        append_tensor(payload, layer.wk);
        append_tensor(payload, layer.wv);
        append_tensor(payload, layer.wo);
        append_tensor(payload, layer.ln2_gamma);
        append_tensor(payload, layer.ln2_beta);
        append_tensor(payload, layer.w_ff1);
        append_tensor(payload, layer.w_ff2);
    }
    append_tensor(payload, w.lnf_gamma);
    append_tensor(payload, w.lnf_beta);
    append_tensor(payload, w.output_projection);
    write_container(path, "SPT1", header, payload);
}

ModelWeights load_weights(const std::string& path) {
    std::vector<unsigned char> body = read_container(path, "SPT1");
    const std::uint32_t stored_crc = split_crc(body, path);
    Reader r(body, path);

    ModelConfig cfg;
    cfg.num_layers = static_cast<int>(r.u32());
    cfg.num_heads = static_cast<int>(r.u32());
    cfg.d_model = static_cast<int>(r.u32());
    cfg.vocab_size = static_cast<int>(r.u32());
    cfg.max_positions = static_cast<int>(r.u32());
    cfg.ffn_mult = static_cast<int>(r.u32());
    cfg.validate();

    if (r.remaining() != cfg.parameter_count() * 8)
        fail(Errc::shape_mismatch,
             path + ": payload length does not match the header's parameter count");
    if (crc32({body.data() + r.position(), r.remaining()}) != stored_crc)
        fail(Errc::crc_mismatch, path + ": payload CRC mismatch");

    ModelWeights w;
    w.config = cfg;
    w.token_embedding = Matrix(cfg.vocab_size, cfg.d_model);
    read_tensor(r, w.token_embedding);
    w.position_embedding = Matrix(cfg.max_positions, cfg.d_model);
    read_tensor(r, w.position_embedding);
    w.layers.resize(cfg.num_layers);
    for (LayerWeights& layer : w.layers) {
        layer.ln1_gamma.resize(cfg.d_model);
        layer.ln1_beta.resize(cfg.d_model);
        read_tensor(r, layer.ln1_gamma);
        read_tensor(r, layer.ln1_beta);
        layer.wq = Matrix(cfg.d_model, cfg.d_model);
        layer.wk = Matrix(cfg.d_model, cfg.d_model);
        layer.wv = Matrix(cfg.d_model, cfg.d_model);
        layer.wo = Matrix(cfg.d_model, cfg.d_model);
        read_tensor(r, layer.wq);
        read_tensor(r, layer.wk);
        read_tensor(r, layer.wv);
        read_tensor(r, layer.wo);
        layer.ln2_gamma.resize(cfg.d_model);
        layer.ln2_beta.resize(cfg.d_model);
        read_tensor(r, layer.ln2_gamma);
        read_tensor(r, layer.ln2_beta);
        layer.w_ff1 = Matrix(cfg.d_model, cfg.ffn_dim());
        layer.w_ff2 = Matrix(cfg.ffn_dim(), cfg.d_model);
        read_tensor(r, layer.w_ff1);
        read_tensor(r, layer.w_ff2);
    }
    w.lnf_gamma.resize(cfg.d_model);
    w.lnf_beta.resize(cfg.d_model);
    read_tensor(r, w.lnf_gamma);
    read_tensor(r, w.lnf_beta);
    w.output_projection = Matrix(cfg.d_model, cfg.vocab_size);
    read_tensor(r, w.output_projection);
    return w;
}

void save_predictor(const std::string& path, const MatchPredictor& p) {
    p.validate();
    std::vector<unsigned char> header;
    put_u32(header, static_cast<std::uint32_t>(p.input_dim()));
    put_u32(header, static_cast<std::uint32_t>(p.hidden_dim()));
    put_u32(header, static_cast<std::uint32_t>(p.output_dim()));

    std::vector<unsigned char> payload;
    append_tensor(payload, p.w1);
    append_tensor(payload, p.b1);
    append_tensor(payload, p.w2);
    append_tensor(payload, p.b2);
    append_tensor(payload, p.w3);
    append_tensor(payload, p.b3);
    write_container(path, "SPRD", header, payload);
}

MatchPredictor load_predictor(const std::string& path) {
    std::vector<unsigned char> body = read_container(path, "SPRD");
    const std::uint32_t stored_crc = split_crc(body, path);
    Reader r(body, path);

    const int input_dim = static_cast<int>(r.u32());
    const int hidden_dim = static_cast<int>(r.u32());
    const int output_dim = static_cast<int>(r.u32());
    if (input_dim < 1 || hidden_dim < 1 || output_dim != grid::kNumConfigs)
        fail(Errc::shape_mismatch, path + ": bad predictor dims");
    const size_t payload_doubles =
        static_cast<size_t>(input_dim) * hidden_dim + hidden_dim +
        static_cast<size_t>(hidden_dim) * hidden_dim + hidden_dim +
        static_cast<size_t>(hidden_dim) * output_dim + output_dim;
    if (r.remaining() != payload_doubles * 8)
        fail(Errc::shape_mismatch, path + ": payload length mismatch");
    if (crc32({body.data() + r.position(), r.remaining()}) != stored_crc)
        fail(Errc::crc_mismatch, path + ": payload CRC mismatch");

    MatchPredictor p;
    p.w1 = Matrix(input_dim, hidden_dim);
    p.b1.resize(hidden_dim);
    p.w2 = Matrix(hidden_dim, hidden_dim);
    p.b2.resize(hidden_dim);
    p.w3 = Matrix(hidden_dim, output_dim);
    p.b3.resize(output_dim);
    read_tensor(r, p.w1);
    read_tensor(r, p.b1);
    read_tensor(r, p.w2);
    read_tensor(r, p.b2);
    read_tensor(r, p.w3);
    read_tensor(r, p.b3);
    return p;
}

void save_ngram(const std::string& path, const NgramTable& table) {
    std::vector<unsigned char> header;
    put_u32(header, 1u);  // format version
    put_u32(header, static_cast<std::uint32_t>(table.order));
    put_u32(header, static_cast<std::uint32_t>(table.vocab_size));

    std::vector<unsigned char> payload;
    put_f64(payload, table.alpha);
    put_u64(payload, table.contexts.size());
    for (const auto& [ctx, bucket] : table.contexts) {
        for (TokenId t : ctx) put_i32(payload, t);
        put_u64(payload, static_cast<std::uint64_t>(bucket.total));
        put_u64(payload, bucket.counts.size());
        for (const auto& [token, count] : bucket.counts) {
            put_i32(payload, token);
            put_u64(payload, static_cast<std::uint64_t>(count));
        }
    }
    write_container(path, "SPNG", header, payload);
}

NgramTable load_ngram(const std::string& path) {
    std::vector<unsigned char> body = read_container(path, "SPNG");
    const std::uint32_t stored_crc = split_crc(body, path);
    Reader r(body, path);

    const std::uint32_t version = r.u32();
    if (version != 1)
        fail(Errc::shape_mismatch, path + ": unsupported ngram format version");
    NgramTable table;
    table.order = static_cast<int>(r.u32());
    table.vocab_size = static_cast<int>(r.u32());
    if (table.order < 1 || table.vocab_size < 1)
        fail(Errc::shape_mismatch, path + ": bad ngram header");
    if (crc32({body.data() + r.position(), r.remaining()}) != stored_crc)
        fail(Errc::crc_mismatch, path + ": payload CRC mismatch");

    table.alpha = r.f64();
    const std::uint64_t n_contexts = r.u64();
    for (std::uint64_t i = 0; i < n_contexts; ++i) {
        std::vector<TokenId> ctx(table.order - 1);
        for (TokenId& t : ctx) t = r.i32();
        NgramTable::Bucket bucket;
        bucket.total = static_cast<std::int64_t>(r.u64());
        const std::uint64_t entries = r.u64();
        for (std::uint64_t e = 0; e < entries; ++e) {
            const TokenId token = r.i32();
            bucket.counts[token] = static_cast<std::int64_t>(r.u64());
        }
        table.contexts.emplace(std::move(ctx), std::move(bucket));
    }
    return table;
}

void save_pool(const std::string& dir, const BoostPool& pool) {
    fs::create_directories(dir);
    json manifest;
    manifest["version"] = 1;
    manifest["match_horizon"] = pool.match_horizon;
    manifest["residual_counts"] = pool.residual_counts;
    json ssms = json::array();
    for (const auto& ssm : pool.ssms) {
        json entry;
        entry["id"] = ssm->id();
        entry["kind"] = ssm->kind();
        char name[32];
        if (const auto* ngram = dynamic_cast<const NgramSsm*>(ssm.get())) {
            std::snprintf(name, sizeof name, "ssm_%03d.spng", ssm->id());
            save_ngram((fs::path(dir) / name).string(), ngram->table());
        } else if (const auto* tiny = dynamic_cast<const TransformerSsm*>(ssm.get())) {
            std::snprintf(name, sizeof name, "ssm_%03d.spt", ssm->id());
            save_weights((fs::path(dir) / name).string(), tiny->weights());
        } else {
            fail(Errc::invalid_argument, "save_pool: unsupported ssm kind " + ssm->kind());
        }
        entry["file"] = name;
        ssms.push_back(std::move(entry));
    }
    manifest["ssms"] = std::move(ssms);

    std::ofstream out(fs::path(dir) / "manifest.json");
    if (!out)
        fail(Errc::io_error, "cannot write pool manifest in " + dir);
    out << manifest.dump(2) << "\n";
}

BoostPool load_pool(const std::string& dir) {
    std::ifstream in(fs::path(dir) / "manifest.json");
    if (!in)
        fail(Errc::io_error, "cannot open pool manifest in " + dir);
    json manifest;
    try {
        in >> manifest;
    } catch (const json::exception& e) {
        fail(Errc::io_error, std::string("bad pool manifest: ") + e.what());
    }

    BoostPool pool;
    pool.match_horizon = manifest.at("match_horizon").get<int>();
    pool.residual_counts = manifest.at("residual_counts").get<std::vector<std::int64_t>>();
    for (const json& entry : manifest.at("ssms")) {
        const int id = entry.at("id").get<int>();
        const std::string kind = entry.at("kind").get<std::string>();
        const std::string file = (fs::path(dir) / entry.at("file").get<std::string>()).string();
        if (kind == "ngram") {
            pool.ssms.push_back(std::make_shared<NgramSsm>(id, load_ngram(file)));
        } else if (kind == "tiny-transformer") {
            pool.ssms.push_back(std::make_shared<TransformerSsm>(
                id, std::make_shared<const ModelWeights>(load_weights(file))));
        } else {
            fail(Errc::io_error, "pool manifest: unknown ssm kind " + kind);
        }
    }
    return pool;
}

void write_metrics_json(const std::string& path, const std::string& mode, int prompts,
                        const RunMetrics& metrics, int mismatches) {
    json doc;
    doc["mode"] = mode;
    doc["prompts"] = prompts;
    doc["llm_steps"] = metrics.llm_steps;
    doc["ssm_runs"] = metrics.ssm_runs;
    doc["tokens_generated"] = metrics.tokens_generated;
    doc["verified_per_step"] = metrics.verified_per_step;
    doc["wall_ms"] = metrics.wall_ms;
    doc["mismatches"] = mismatches;

    std::ofstream out(path);
    if (!out)
        fail(Errc::io_error, "cannot write metrics to " + path);
    out << doc.dump(2) << "\n";
}

std::vector<std::string> load_prompt_corpus(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        fail(Errc::io_error, "cannot open corpus " + path);
    std::vector<std::string> prompts;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            json obj = json::parse(line);
            prompts.push_back(obj.at("prompt").get<std::string>());
        } catch (const json::exception& e) {
            fail(Errc::io_error,
                 path + ":" + std::to_string(line_no) + ": bad corpus line: " + e.what());
        }
    }
    return prompts;
}

void save_cost_profile(const std::string& path, const CostProfile& profile) {
    profile.validate();
    json doc;
    doc["version"] = 1;
    doc["samples"] = profile.samples;
    json entries = json::array();
    for (int i = 0; i < grid::kNumConfigs; ++i) {
        const SpecConfig cfg = grid::config_at(i);
        entries.push_back({{"beam_width", cfg.beam_width},
                           {"beam_depth", cfg.beam_depth},
                           {"speculate_ms", profile.speculate_ms[i]},
                           {"verify_ms", profile.verify_ms[i]}});
    }
    doc["entries"] = std::move(entries);

    std::ofstream out(path);
    if (!out)
        fail(Errc::io_error, "cannot write cost profile to " + path);
    out << doc.dump(2) << "\n";
}

CostProfile load_cost_profile(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        fail(Errc::io_error, "cannot open cost profile " + path);
    json doc;
    try {
        in >> doc;
    } catch (const json::exception& e) {
        fail(Errc::io_error, std::string("bad cost profile: ") + e.what());
    }
    CostProfile profile;
    profile.samples = doc.value("samples", 0);
    std::array<bool, grid::kNumConfigs> seen{};
    for (const json& entry : doc.at("entries")) {
        const SpecConfig cfg{entry.at("beam_width").get<int>(), entry.at("beam_depth").get<int>()};
        const int idx = grid::index_of(cfg);
        profile.speculate_ms[idx] = entry.at("speculate_ms").get<double>();
        profile.verify_ms[idx] = entry.at("verify_ms").get<double>();
        seen[idx] = true;
    }
    for (bool s : seen)
        if (!s)
            fail(Errc::incomplete_profile, path + ": cost profile missing grid entries");
    profile.validate();
    return profile;
}

void save_samples_jsonl(const std::string& path, std::span<const TrainSample> samples) {
    std::ofstream out(path);
    if (!out)
        fail(Errc::io_error, "cannot write samples to " + path);
    for (const TrainSample& s : samples) {
        json obj;
        obj["h"] = s.h;
        obj["y"] = s.y;
        out << obj.dump() << "\n";
    }
}

std::vector<TrainSample> load_samples_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        fail(Errc::io_error, "cannot open samples " + path);
    std::vector<TrainSample> samples;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            json obj = json::parse(line);
            TrainSample s;
            s.h = obj.at("h").get<std::vector<double>>();
            const auto y = obj.at("y").get<std::vector<double>>();
            if (y.size() != grid::kNumConfigs)
                fail(Errc::shape_mismatch, path + ": sample y must have 15 entries");
            std::copy(y.begin(), y.end(), s.y.begin());
            samples.push_back(std::move(s));
        } catch (const json::exception& e) {
            fail(Errc::io_error,
                 path + ":" + std::to_string(line_no) + ": bad sample line: " + e.what());
        }
    }
    return samples;
}

std::uint64_t default_seed() {
    if (const char* env = std::getenv("SPECTREE_SEED")) {
        char* end = nullptr;
        const unsigned long long v = std::strtoull(env, &end, 10);
        if (end && *end == '\0') return static_cast<std::uint64_t>(v);
        fail(Errc::invalid_argument, "SPECTREE_SEED must be an unsigned integer");
    }
    return 42;
}

}  // namespace spectree
