#pragma once

// Measurement and perturbation toolkit: attention-to-segment readout, mean
// hidden-state dumps over random inputs, crop-mask construction, position-id
// shifts, channel offsets and post-softmax attention boosts.
//
// PHSD dump file layout (little endian):
//   bytes 0..3   magic "PHSD"
//   u32          version (1)
//   u32          n_layers
//   u32          seq_len
//   u32          hidden_size
//   f32[...]     values, layer-major, then position, then channel
// A JSON sidecar at <path>.json carries provenance metadata.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "poshid/common.hpp"
#include "poshid/forward.hpp"
#include "poshid/model.hpp"
#include "poshid/rng.hpp"
#include "poshid/tokenizer.hpp"

namespace poshid {

struct DumpMetadata {
    std::string source_model;
    std::string capture_point = "residual_input";
    std::string input_description;
    int samples_averaged = 0;
};

// Per-layer [seq x hidden] activation averages; the input to channel search.
struct HiddenStateDump {
    int n_layers = 0;
    int seq_len = 0;
    int hidden_size = 0;
    std::vector<float> values;  // [layer][position][channel]
    DumpMetadata meta;

    void validate() const {
        require(n_layers >= 1 && seq_len >= 1 && hidden_size >= 1,
                "dump: dimensions must be positive");
        require(values.size() == static_cast<size_t>(n_layers) * seq_len * hidden_size,
                "dump: value count does not match dimensions");
        for (float v : values)
            require(std::isfinite(v), "dump: non-finite activation value");
    }

    // layer and channel 1-based, position 0-based
    float at(int layer, int position, int channel) const {
        return values[(static_cast<size_t>(layer - 1) * seq_len + position) * hidden_size +
                      (channel - 1)];
    }
    float& at(int layer, int position, int channel) {
        return values[(static_cast<size_t>(layer - 1) * seq_len + position) * hidden_size +
                      (channel - 1)];
    }
};

// Observation band used when a caller does not pick probe layers: the
// middle-to-late stretch [L/2, 5L/8].
inline LayerRange default_probe_layers(int n_layers) {
    const int lo = std::max(1, n_layers / 2);
    const int hi = std::max(lo, 5 * n_layers / 8);
    return {lo, hi};
}

// Mean attention from the last row to the tokens of G, averaged over the
// selected layers and heads. All (layer, head) pairs must be present in the
// capture.
inline double attention_to_segment(const AttentionCapture& capture, const Segment& segment,
                                   const std::set<int>& layers, const std::set<int>& heads) {
    require(!layers.empty() && !heads.empty(), "attention_to_segment: empty layer or head set");
    segment.validate(capture.seq_len, "attention_to_segment");
    const int last = capture.seq_len - 1;
    double acc = 0.0;
    for (int layer : layers) {
        for (int head : heads) {
            const auto& w = capture.at(layer, head);
            double seg = 0.0;
            for (int j = segment.begin; j < segment.end; ++j)
                seg += w[static_cast<size_t>(last) * capture.seq_len + j];
            acc += seg / segment.size();
        }
    }
    return acc / (static_cast<double>(layers.size()) * heads.size());
}

// Average the residual-stream inputs of every layer over n_samples random
// byte strings (BOS-prefixed, seq_len tokens total). Deterministic per seed.
inline HiddenStateDump mean_hidden_dump(const Model& model, int n_samples, int seq_len,
                                        uint64_t seed) {
    const ModelConfig& cfg = model.config;
    require(n_samples >= 1, "mean_hidden_dump: need at least one sample");
    require(seq_len >= 2 && seq_len <= cfg.max_seq,
            "mean_hidden_dump: seq_len outside [2, max_seq]");

    const size_t total =
        static_cast<size_t>(cfg.n_layers) * seq_len * static_cast<size_t>(cfg.d_model);
    std::vector<double> acc(total, 0.0);

    ForwardOverrides ov;
    for (int layer = 1; layer <= cfg.n_layers; ++layer) ov.capture_hidden.insert(layer);

    for (int s = 0; s < n_samples; ++s) {
        GaussianRng rng(mix_seed(seed, static_cast<uint64_t>(s)));
        std::vector<int> tokens(static_cast<size_t>(seq_len));
        tokens[0] = kBosId;
        for (int i = 1; i < seq_len; ++i)
            tokens[static_cast<size_t>(i)] = static_cast<int>(rng.below(256));
        const ForwardResult res = forward(model, tokens, ov);
        for (int layer = 1; layer <= cfg.n_layers; ++layer) {
            const auto& h = res.hidden.at(layer);
            const size_t base =
                static_cast<size_t>(layer - 1) * seq_len * static_cast<size_t>(cfg.d_model);
            for (size_t i = 0; i < h.size(); ++i) acc[base + i] += static_cast<double>(h[i]);
        }
    }

    HiddenStateDump dump;
    dump.n_layers = cfg.n_layers;
    dump.seq_len = seq_len;
    dump.hidden_size = cfg.d_model;
    dump.values.resize(total);
    for (size_t i = 0; i < total; ++i)
        dump.values[i] = static_cast<float>(acc[i] / n_samples);
    dump.meta.source_model = model.id();
    dump.meta.input_description =
        "random byte strings, bos-prefixed, seed=" + std::to_string(seed);
    dump.meta.samples_averaged = n_samples;
    return dump;
}

// Causal-mask crop: rows inside G may attend only themselves, earlier tokens
// of G, and (by default) token 0; all other rows keep the causal pattern.
// Only removes visibility, never grants any pair the causal mask forbids.
inline MaskOverride crop_mask(int seq_len, const Segment& segment, const LayerRange& layers,
                              bool keep_first_token = true) {
    segment.validate(seq_len, "crop_mask");
    require(segment.begin > 0, "crop_mask: segment must not contain token 0");
    MaskOverride mo;
    mo.layers = layers;
    mo.description = "crop_mask(G=[" + std::to_string(segment.begin) + "," +
                     std::to_string(segment.end) + "), keep_first=" +
                     (keep_first_token ? "true" : "false") + ")";
    const Segment seg = segment;
    mo.allows = [seg, keep_first_token](int row, int col) {
        if (col > row) return false;
        if (!seg.contains(row)) return true;
        if (keep_first_token && col == 0) return true;
        return seg.contains(col);
    };
    return mo;
}

struct PositionShift {
    enum class Mode { to_beginning, to_end, offset };
    Mode mode = Mode::offset;
    Segment reference;  // ids copied from here for to_beginning / to_end
    int delta = 0;      // used by offset
};

// Position ids with the tokens of G remapped; everything outside G keeps the
// default 0..seq_len-1 ids.
inline std::vector<int> shift_position_ids(int seq_len, const Segment& segment,
                                           const PositionShift& shift) {
    segment.validate(seq_len, "shift_position_ids");
    std::vector<int> ids(static_cast<size_t>(seq_len));
    for (int i = 0; i < seq_len; ++i) ids[static_cast<size_t>(i)] = i;
    if (shift.mode == PositionShift::Mode::offset) {
        for (int g = segment.begin; g < segment.end; ++g) {
            const int shifted = g + shift.delta;
            require(shifted >= 0, "shift_position_ids: offset drives an id negative");
            ids[static_cast<size_t>(g)] = shifted;
        }
        return ids;
    }
    shift.reference.validate(seq_len, "shift_position_ids reference");
    require(shift.reference.size() == segment.size(),
            "shift_position_ids: reference segment length must match G");
    for (int i = 0; i < segment.size(); ++i)
        ids[static_cast<size_t>(segment.begin + i)] = shift.reference.begin + i;
    return ids;
}

// Additive edit of one channel over G's tokens in the given layers.
inline ChannelEdit channel_offset(const Segment& segment, int channel, double delta,
                                  const LayerRange& layers) {
    ChannelEdit edit;
    edit.layers = layers;
    edit.token_begin = segment.begin;
    edit.token_end = segment.end;
    edit.channel = channel;
    edit.kind = ChannelEdit::Kind::add;
    edit.amount = delta;
    return edit;
}

// Post-softmax multiplication of the weights at G's columns, renormalized.
inline AttentionBoost boost_attention(const Segment& segment, double factor,
                                      const LayerRange& layers) {
    require(factor > 0.0, "boost_attention: factor must be positive");
    AttentionBoost boost;
    boost.layers = layers;
    boost.segment = segment;
    boost.factor = factor;
    boost.renormalize = true;
    return boost;
}

// ---------------------------------------------------------------------------
// PHSD file I/O
// ---------------------------------------------------------------------------

inline void save_phsd(const HiddenStateDump& dump, const std::string& path) {
    dump.validate();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open dump for writing: " + path);
    out.write("PHSD", 4);
    const uint32_t header[4] = {1u, static_cast<uint32_t>(dump.n_layers),
                                static_cast<uint32_t>(dump.seq_len),
                                static_cast<uint32_t>(dump.hidden_size)};
    out.write(reinterpret_cast<const char*>(header), sizeof(header));
    out.write(reinterpret_cast<const char*>(dump.values.data()),
              static_cast<std::streamsize>(dump.values.size() * sizeof(float)));
    if (!out) throw std::runtime_error("failed writing dump: " + path);

    nlohmann::json meta;
    meta["source_model"] = dump.meta.source_model;
    meta["capture_point"] = dump.meta.capture_point;
    meta["input"] = dump.meta.input_description;
    meta["samples_averaged"] = dump.meta.samples_averaged;
    std::ofstream side(path + ".json");
    if (!side) throw std::runtime_error("cannot open dump sidecar for writing: " + path + ".json");
    side << meta.dump(2) << "\n";
}

inline HiddenStateDump load_phsd(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open dump: " + path);
    char magic[4] = {};
    in.read(magic, 4);
    require(in && std::memcmp(magic, "PHSD", 4) == 0, "not a PHSD dump: " + path);
    uint32_t header[4] = {};
    in.read(reinterpret_cast<char*>(header), sizeof(header));
    require(static_cast<bool>(in), "truncated PHSD header: " + path);
    require(header[0] == 1u, "unsupported PHSD version");

    HiddenStateDump dump;
    dump.n_layers = static_cast<int>(header[1]);
    dump.seq_len = static_cast<int>(header[2]);
    dump.hidden_size = static_cast<int>(header[3]);
    const size_t total =
        static_cast<size_t>(dump.n_layers) * dump.seq_len * dump.hidden_size;
    dump.values.resize(total);
    in.read(reinterpret_cast<char*>(dump.values.data()),
            static_cast<std::streamsize>(total * sizeof(float)));
    require(static_cast<bool>(in), "truncated PHSD payload: " + path);

    std::ifstream side(path + ".json");
    if (side) {
        nlohmann::json meta = nlohmann::json::parse(side, nullptr, /*allow_exceptions=*/false);
        if (!meta.is_discarded()) {
            dump.meta.source_model = meta.value("source_model", "");
            dump.meta.capture_point = meta.value("capture_point", "residual_input");
            dump.meta.input_description = meta.value("input", "");
            dump.meta.samples_averaged = meta.value("samples_averaged", 0);
        }
    }
    dump.validate();
    return dump;
}

}  // namespace poshid
