#pragma once

// Channel-scaling specification and the pure scale_hidden transform. The
// spliced attention path that consumes a spec is implemented in forward.hpp;
// apply_spec / ScaledModel live there too since they wrap the forward pass.

#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "poshid/common.hpp"
#include "poshid/model.hpp"

namespace poshid {

enum class TokenScope { last_token, last_k, all_tokens };

// Which channels to scale, by how much, over which layers, for which rows.
// Channels are 1-based, layer range inclusive 1-based.
struct ScalingSpec {
    std::vector<int> channels;
    double factor = 0.0;
    LayerRange layers;
    TokenScope scope = TokenScope::last_token;
    int last_k = 1;  // used when scope == last_k

    void validate(const ModelConfig& config) const {
        require(!channels.empty(), "scaling spec: channel list must be non-empty");
        std::set<int> seen;
        for (int t : channels) {
            require(t >= 1 && t <= config.d_model,
                    "scaling spec: channel " + std::to_string(t) + " outside [1," +
                        std::to_string(config.d_model) + "]");
            require(seen.insert(t).second, "scaling spec: duplicate channel");
        }
        layers.validate(config.n_layers, "scaling spec");
        if (scope == TokenScope::last_k)
            require(last_k >= 1, "scaling spec: last_k must be >= 1");
    }

    // Layers 1-2 and the final layer are reported as unstable choices rather
    // than rejected.
    bool touches_fragile_layers(const ModelConfig& config) const {
        return layers.lo <= 2 || layers.hi >= config.n_layers;
    }
};

// Default application band, mirroring the published per-depth presets
// (10..25 of 32 layers, 10..22 of 28) and scaling proportionally elsewhere.
inline LayerRange default_scaling_layers(int n_layers) {
    if (n_layers == 32) return {10, 25};
    if (n_layers == 28) return {10, 22};
    int lo = static_cast<int>(std::lround(n_layers * 10.0 / 32.0));
    int hi = static_cast<int>(std::lround(n_layers * 25.0 / 32.0));
    lo = std::clamp(lo, 2, n_layers);
    hi = std::clamp(hi, lo, n_layers);
    return {lo, hi};
}

// Multiply the listed channels of every vector by the factor; all other
// channels pass through untouched.
inline std::vector<std::vector<float>> scale_hidden(const std::vector<std::vector<float>>& hidden,
                                                    const ScalingSpec& spec) {
    std::vector<std::vector<float>> out = hidden;
    for (auto& row : out) {
        for (int t : spec.channels) {
            require(t >= 1 && t <= static_cast<int>(row.size()),
                    "scale_hidden: channel out of range");
            row[static_cast<size_t>(t - 1)] =
                static_cast<float>(row[static_cast<size_t>(t - 1)] * spec.factor);
        }
    }
    return out;
}

inline nlohmann::json scaling_spec_to_json(const ScalingSpec& spec) {
    nlohmann::json j;
    j["channels"] = spec.channels;
    j["factor"] = spec.factor;
    j["layers"] = {spec.layers.lo, spec.layers.hi};
    switch (spec.scope) {
        case TokenScope::last_token: j["scope"] = "last_token"; break;
        case TokenScope::all_tokens: j["scope"] = "all_tokens"; break;
        case TokenScope::last_k: j["scope"] = {{"last_k", spec.last_k}}; break;
    }
    return j;
}

inline ScalingSpec scaling_spec_from_json(const nlohmann::json& j) {
    ScalingSpec spec;
    spec.channels = j.at("channels").get<std::vector<int>>();
    spec.factor = j.at("factor").get<double>();
    const auto layers = j.at("layers");
    require(layers.is_array() && layers.size() == 2, "scaling spec: layers must be [lo, hi]");
    spec.layers = {layers[0].get<int>(), layers[1].get<int>()};
    const auto& scope = j.at("scope");
    if (scope.is_string()) {
        const std::string s = scope.get<std::string>();
        if (s == "last_token") spec.scope = TokenScope::last_token;
        else if (s == "all_tokens") spec.scope = TokenScope::all_tokens;
        else throw std::invalid_argument("scaling spec: unknown scope " + s);
    } else {
        spec.scope = TokenScope::last_k;
        spec.last_k = scope.at("last_k").get<int>();
    }
    return spec;
}

}  // namespace poshid
