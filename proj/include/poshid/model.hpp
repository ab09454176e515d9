#pragma once

// Decoder-only transformer definition: configuration, seeded weight
// construction and checkpoint I/O. The forward pass lives in forward.hpp.
//
// Weights are stored as row-major float32 tensors; matrices are indexed
// [out][in]. A model is immutable after construction and safe to share
// across threads.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "poshid/common.hpp"
#include "poshid/rng.hpp"
#include "poshid/tokenizer.hpp"

namespace poshid {

static_assert(std::endian::native == std::endian::little,
              "checkpoint and dump formats assume a little-endian host");

enum class PositionScheme { rope, alibi, nope };

inline const char* to_string(PositionScheme s) {
    switch (s) {
        case PositionScheme::rope: return "rope";
        case PositionScheme::alibi: return "alibi";
        default: return "nope";
    }
}

inline PositionScheme position_scheme_from_string(const std::string& s) {
    if (s == "rope") return PositionScheme::rope;
    if (s == "alibi") return PositionScheme::alibi;
    if (s == "nope") return PositionScheme::nope;
    throw std::invalid_argument("unknown position scheme: " + s);
}

struct ModelConfig {
    int n_layers = 8;
    int n_heads = 4;
    int d_model = 64;
    int d_head = 16;
    int d_ff = 256;
    int vocab_size = kByteVocab;
    int max_seq = 1024;
    PositionScheme scheme = PositionScheme::rope;
    double rope_base = 10000.0;
    uint64_t seed = 1;

    void validate() const {
        require(n_layers >= 2, "config: n_layers must be >= 2");
        require(n_heads >= 1 && d_head >= 1, "config: heads and head dim must be positive");
        require(d_model == n_heads * d_head, "config: d_model must equal n_heads * d_head");
        require(d_ff >= 1, "config: d_ff must be positive");
        require(vocab_size >= 2, "config: vocab_size must be >= 2");
        require(max_seq >= 64, "config: max_seq must be >= 64");
        if (scheme == PositionScheme::rope)
            require(rope_base > 1.0, "config: rope base must exceed 1");
    }
};

struct LayerWeights {
    std::vector<float> attn_norm_gain;  // [d_model]
    std::vector<float> wq, wk, wv, wo;  // [d_model][d_model]
    std::vector<float> mlp_norm_gain;   // [d_model]
    std::vector<float> w_in;            // [d_ff][d_model]
    std::vector<float> w_out;           // [d_model][d_ff]
};

struct Model {
    ModelConfig config;
    std::vector<float> embedding;        // [vocab][d_model]
    std::vector<LayerWeights> layers;    // n_layers entries
    std::vector<float> final_norm_gain;  // [d_model]
    std::vector<float> unembed;          // [vocab][d_model]

    // Stable identifier recorded in dump metadata.
    std::string id() const {
        std::ostringstream os;
        os << "poshid-" << to_string(config.scheme) << "-L" << config.n_layers << "-d"
           << config.d_model << "-seed" << config.seed;
        return os.str();
    }
};

namespace detail {

inline void fill_gaussian(std::vector<float>& w, size_t count, GaussianRng& rng, double stddev) {
    w.resize(count);
    for (size_t i = 0; i < count; ++i)
        w[i] = static_cast<float>(rng.gaussian() * stddev);
}

}  // namespace detail

// Seeded Gaussian init: every weight matrix entry ~ N(0, 1/d_model), norm
// gains start at 1. The draw order is fixed (embedding, layers in order,
// final norm, unembedding), so one seed always yields identical bytes.
inline Model init_model(const ModelConfig& config) {
    config.validate();
    Model m;
    m.config = config;
    GaussianRng rng(config.seed);
    const double stddev = 1.0 / std::sqrt(static_cast<double>(config.d_model));
    const size_t d = static_cast<size_t>(config.d_model);
    const size_t ff = static_cast<size_t>(config.d_ff);
    const size_t vocab = static_cast<size_t>(config.vocab_size);

    detail::fill_gaussian(m.embedding, vocab * d, rng, stddev);
    m.layers.resize(static_cast<size_t>(config.n_layers));
    for (auto& layer : m.layers) {
        layer.attn_norm_gain.assign(d, 1.0f);
        detail::fill_gaussian(layer.wq, d * d, rng, stddev);
        detail::fill_gaussian(layer.wk, d * d, rng, stddev);
        detail::fill_gaussian(layer.wv, d * d, rng, stddev);
        detail::fill_gaussian(layer.wo, d * d, rng, stddev);
        layer.mlp_norm_gain.assign(d, 1.0f);
        detail::fill_gaussian(layer.w_in, ff * d, rng, stddev);
        detail::fill_gaussian(layer.w_out, d * ff, rng, stddev);
    }
    m.final_norm_gain.assign(d, 1.0f);
    detail::fill_gaussian(m.unembed, vocab * d, rng, stddev);
    return m;
}

// ---------------------------------------------------------------------------
// Checkpoint format: [u32 LE header length][JSON header][raw f32 LE payload].
// The header carries the config and float-unit offsets of every named tensor.
// nlohmann::json keeps object keys sorted, so serialization is deterministic
// and write -> read -> write is byte-identical.
// ---------------------------------------------------------------------------

namespace detail {

struct TensorRef {
    std::string name;
    const std::vector<float>* data;
};

inline std::vector<TensorRef> tensor_list(const Model& m) {
    std::vector<TensorRef> refs;
    refs.push_back({"embedding", &m.embedding});
    for (size_t i = 0; i < m.layers.size(); ++i) {
        const std::string p = "layers." + std::to_string(i + 1) + ".";  // 1-based layer names
        const LayerWeights& lw = m.layers[i];
        refs.push_back({p + "attn_norm_gain", &lw.attn_norm_gain});
        refs.push_back({p + "wq", &lw.wq});
        refs.push_back({p + "wk", &lw.wk});
        refs.push_back({p + "wv", &lw.wv});
        refs.push_back({p + "wo", &lw.wo});
        refs.push_back({p + "mlp_norm_gain", &lw.mlp_norm_gain});
        refs.push_back({p + "w_in", &lw.w_in});
        refs.push_back({p + "w_out", &lw.w_out});
    }
    refs.push_back({"final_norm_gain", &m.final_norm_gain});
    refs.push_back({"unembed", &m.unembed});
    return refs;
}

inline nlohmann::json config_to_json(const ModelConfig& c) {
    nlohmann::json j;
    j["n_layers"] = c.n_layers;
    j["n_heads"] = c.n_heads;
    j["d_model"] = c.d_model;
    j["d_head"] = c.d_head;
    j["d_ff"] = c.d_ff;
    j["vocab_size"] = c.vocab_size;
    j["max_seq"] = c.max_seq;
    j["scheme"] = to_string(c.scheme);
    j["rope_base"] = c.rope_base;
    j["seed"] = c.seed;
    return j;
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.d_head = j.at("d_head").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_seq = j.at("max_seq").get<int>();
    c.scheme = position_scheme_from_string(j.at("scheme").get<std::string>());
    c.rope_base = j.at("rope_base").get<double>();
    c.seed = j.at("seed").get<uint64_t>();
    return c;
}

}  // namespace detail

inline void save_checkpoint(const Model& m, const std::string& path) {
    const auto refs = detail::tensor_list(m);
    nlohmann::json header;
    header["format"] = "poshid-checkpoint";
    header["version"] = 1;
    header["config"] = detail::config_to_json(m.config);
    nlohmann::json tensors;
    uint64_t offset = 0;  // in float units from payload start
    for (const auto& ref : refs) {
        nlohmann::json t;
        t["offset"] = offset;
        t["size"] = ref.data->size();
        tensors[ref.name] = t;
        offset += ref.data->size();
    }
    header["tensors"] = tensors;

    const std::string header_str = header.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    const uint32_t header_len = static_cast<uint32_t>(header_str.size());
    out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    for (const auto& ref : refs)
        out.write(reinterpret_cast<const char*>(ref.data->data()),
                  static_cast<std::streamsize>(ref.data->size() * sizeof(float)));
    if (!out) throw std::runtime_error("failed writing checkpoint: " + path);
}

inline Model load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    uint32_t header_len = 0;
    in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
    if (!in) throw std::runtime_error("truncated checkpoint header: " + path);
    std::string header_str(header_len, '\0');
    in.read(header_str.data(), header_len);
    if (!in) throw std::runtime_error("truncated checkpoint header: " + path);
    const nlohmann::json header = nlohmann::json::parse(header_str);
    if (header.at("format").get<std::string>() != "poshid-checkpoint")
        throw std::invalid_argument("not a poshid checkpoint: " + path);

    Model m;
    m.config = detail::config_from_json(header.at("config"));
    m.config.validate();
    m.layers.resize(static_cast<size_t>(m.config.n_layers));
    auto refs = detail::tensor_list(m);

    std::vector<char> payload((std::istreambuf_iterator<char>(in)),
                              std::istreambuf_iterator<char>());
    const float* floats = reinterpret_cast<const float*>(payload.data());
    const uint64_t n_floats = payload.size() / sizeof(float);

    const nlohmann::json& tensors = header.at("tensors");
    for (auto& ref : refs) {
        const nlohmann::json& t = tensors.at(ref.name);
        const uint64_t offset = t.at("offset").get<uint64_t>();
        const uint64_t size = t.at("size").get<uint64_t>();
        require(offset + size <= n_floats, "checkpoint: tensor " + ref.name + " out of bounds");
        auto* dst = const_cast<std::vector<float>*>(ref.data);
        dst->assign(floats + offset, floats + offset + size);
    }
    return m;
}

}  // namespace poshid
