#pragma once

// Hand-constructed fixture model with a known positional channel.
//
// Layer 1 holds one head with zero query/key projections (uniform causal
// attention) whose value path reads a begin-of-sequence indicator channel.
// Row p of uniform attention averages the indicator over p+1 tokens, so the
// head writes exactly 1/(p+1) into the planted residual channel: a strictly
// decreasing, position-determined activation created purely by the causal
// mask (the model carries no position embeddings).
//
// With the bias head enabled, a mid-stack head turns that channel into
// position-biased attention: its keys read the planted channel, its query a
// constant channel, so attention from the last row leans heavily toward
// early positions. Values copy per-token content codes and the unembedding
// decodes them, which makes retrieval loss genuinely depend on the slant:
// erasing the planted channel flattens the attention and lowers the mean
// loss of a position-balanced calibration set. All remaining weights stay
// zero, so every other channel is either constant or dead.

#include <cmath>
#include <cstdint>
#include <vector>

#include "poshid/common.hpp"
#include "poshid/forward.hpp"
#include "poshid/model.hpp"
#include "poshid/rng.hpp"
#include "poshid/scaling.hpp"
#include "poshid/tokenizer.hpp"

namespace poshid {

struct PlantedLayout {
    int planted_channel = 0;   // 1-based: carries 1/(p+1)
    int const_channel = 0;     // 1-based: 1 in every token embedding
    int bos_channel = 0;       // 1-based: 1 only in the BOS embedding
    int content_begin = 0;     // 1-based first content-code channel
    int output_begin = 0;      // 1-based first bias-head output channel
    int code_dim = 0;
    int plant_layer = 1;
    int bias_layer = 0;        // 1-based, inside default_scaling_layers
};

inline PlantedLayout planted_layout(const ModelConfig& config) {
    PlantedLayout layout;
    layout.code_dim = config.d_head;
    layout.planted_channel = 5;
    layout.content_begin = config.d_head + 1;
    layout.output_begin = 2 * config.d_head + 1;
    layout.const_channel = config.d_model - 3;
    layout.bos_channel = config.d_model - 2;
    const LayerRange band = default_scaling_layers(config.n_layers);
    layout.bias_layer = std::min(band.hi, band.lo + 1);
    return layout;
}

// Signed +/-1 content code for each byte token, shared by the embedding and
// the unembedding so attended content decodes back to token logits.
inline std::vector<float> planted_codes(int code_dim, uint64_t seed) {
    GaussianRng rng(mix_seed(seed, 0xC0DEULL));
    std::vector<float> codes(static_cast<size_t>(256) * code_dim);
    for (auto& c : codes) c = (rng.next_u64() & 1u) ? 1.0f : -1.0f;
    return codes;
}

inline constexpr double kPlantedContentScale = 0.5;  // embedding code amplitude
inline constexpr double kPlantedKeyGain = 1.2;       // bias-head key read of the channel
inline constexpr double kPlantedUnembedGain = 3.0;   // logit scale of decoded content

inline Model build_planted_model(const ModelConfig& config, bool with_bias_head = true) {
    config.validate();
    require(config.scheme == PositionScheme::nope,
            "planted model: requires the nope position scheme");
    require(config.vocab_size == kByteVocab, "planted model: requires the byte tokenizer vocab");
    require(config.d_model >= 3 * config.d_head + 8,
            "planted model: d_model too small for the fixture layout");
    require(config.n_layers >= 4, "planted model: needs at least 4 layers");

    const PlantedLayout layout = planted_layout(config);
    const int d = config.d_model;
    const int dh = config.d_head;

    Model m;
    m.config = config;
    const size_t dz = static_cast<size_t>(d);
    m.embedding.assign(static_cast<size_t>(config.vocab_size) * dz, 0.0f);
    m.layers.resize(static_cast<size_t>(config.n_layers));
    for (auto& lw : m.layers) {
        lw.attn_norm_gain.assign(dz, 1.0f);
        lw.wq.assign(dz * dz, 0.0f);
        lw.wk.assign(dz * dz, 0.0f);
        lw.wv.assign(dz * dz, 0.0f);
        lw.wo.assign(dz * dz, 0.0f);
        lw.mlp_norm_gain.assign(dz, 1.0f);
        lw.w_in.assign(static_cast<size_t>(config.d_ff) * dz, 0.0f);
        lw.w_out.assign(dz * static_cast<size_t>(config.d_ff), 0.0f);
    }
    m.final_norm_gain.assign(dz, 1.0f);
    m.unembed.assign(static_cast<size_t>(config.vocab_size) * dz, 0.0f);

    const std::vector<float> codes = planted_codes(layout.code_dim, config.seed);

    // embeddings: constant marker everywhere, BOS indicator, per-byte codes
    for (int tok = 0; tok < config.vocab_size; ++tok) {
        float* e = m.embedding.data() + static_cast<size_t>(tok) * dz;
        e[layout.const_channel - 1] = 1.0f;
        if (tok == kBosId) {
            e[layout.bos_channel - 1] = 1.0f;
        } else if (with_bias_head) {
            for (int i = 0; i < layout.code_dim; ++i)
                e[layout.content_begin - 1 + i] = static_cast<float>(
                    kPlantedContentScale * codes[static_cast<size_t>(tok) * layout.code_dim + i]);
        }
    }

    // plant head (layer 1, head 1): uniform attention over the prefix, value
    // reads the normalized BOS indicator, output lands in the planted channel
    {
        LayerWeights& lw = m.layers[static_cast<size_t>(layout.plant_layer - 1)];
        // gain chosen so the normalized BOS indicator reads exactly 1
        const float* bos_emb = m.embedding.data() + static_cast<size_t>(kBosId) * dz;
        double mean_sq = 0.0;
        for (int i = 0; i < d; ++i)
            mean_sq += static_cast<double>(bos_emb[i]) * bos_emb[i];
        mean_sq = mean_sq / d + static_cast<double>(detail::kNormEps);
        lw.attn_norm_gain[static_cast<size_t>(layout.bos_channel - 1)] =
            static_cast<float>(std::sqrt(mean_sq));
        lw.wv[0 * dz + (layout.bos_channel - 1)] = 1.0f;       // head 1, dim 0
        lw.wo[static_cast<size_t>(layout.planted_channel - 1) * dz + 0] = 1.0f;
    }

    if (with_bias_head) {
        LayerWeights& lw = m.layers[static_cast<size_t>(layout.bias_layer - 1)];
        // query from the constant channel, key from the planted channel
        lw.wq[0 * dz + (layout.const_channel - 1)] = 1.0f;
        lw.wk[0 * dz + (layout.planted_channel - 1)] = static_cast<float>(kPlantedKeyGain);
        // values copy the content block through head 1
        for (int i = 0; i < dh; ++i)
            lw.wv[static_cast<size_t>(i) * dz + (layout.content_begin - 1 + i)] = 1.0f;
        for (int i = 0; i < dh; ++i)
            lw.wo[static_cast<size_t>(layout.output_begin - 1 + i) * dz + i] = 1.0f;
        // unembedding decodes the attended content mix back to byte logits
        for (int tok = 0; tok < 256; ++tok) {
            float* u = m.unembed.data() + static_cast<size_t>(tok) * dz;
            for (int i = 0; i < layout.code_dim; ++i)
                u[layout.output_begin - 1 + i] = static_cast<float>(
                    kPlantedUnembedGain * codes[static_cast<size_t>(tok) * layout.code_dim + i]);
        }
    }
    return m;
}

}  // namespace poshid
