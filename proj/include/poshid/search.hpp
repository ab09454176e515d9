#pragma once

// Positional-channel search: monotonicity/smoothness candidate screening
// over a hidden-state dump, then calibration-loss selection of the channel
// and scale factor. The exhaustive variant traverses every channel and is
// the oracle the heuristic is checked against at desk scale.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <future>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "poshid/common.hpp"
#include "poshid/numerics.hpp"
#include "poshid/probe.hpp"
#include "poshid/scaling.hpp"
#include "poshid/tasks.hpp"

namespace poshid {

struct SearchParams {
    int eps = 0;      // monotone-layer threshold; 0 = auto max(1, round(L/4))
    int top_k = 10;   // candidate count
    int window = 16;  // smoothing window
    int skip_prefix = 8;
    std::vector<double> factor_grid = {0.5, 0.0, -0.5, -1.0};
    std::vector<double> positions = {0.0, 0.5, 1.0};  // calibration gold depths
    double probe_factor = 0.0;      // factor used while ranking candidates
    LayerRange scaling_layers{0, 0};  // {0,0} = default_scaling_layers(L)
    bool normalize_smoothness = false;  // divide the score by series length

    int resolved_eps(int n_layers) const {
        if (eps > 0) return eps;
        return std::max(1, static_cast<int>(std::lround(n_layers / 4.0)));
    }
    LayerRange resolved_layers(int n_layers) const {
        if (scaling_layers.lo >= 1) return scaling_layers;
        return default_scaling_layers(n_layers);
    }
    void validate() const {
        require(top_k >= 1, "search params: top_k must be >= 1");
        require(window >= 1, "search params: window must be >= 1");
        require(skip_prefix >= 0, "search params: skip_prefix must be >= 0");
        require(!factor_grid.empty(), "search params: factor grid must be non-empty");
        require(!positions.empty(), "search params: calibration positions must be non-empty");
    }
};

struct ChannelProfile {
    int channel = 0;  // 1-based
    int monotone_layers = 0;  // c_t
    std::vector<Monotonicity> direction;  // per layer
    double mean_smoothness = 0.0;  // g_t over monotone layers; valid when c_t > 0

    Monotonicity majority_direction() const {
        int inc = 0, dec = 0;
        for (auto d : direction) {
            if (d == Monotonicity::increasing) ++inc;
            if (d == Monotonicity::decreasing) ++dec;
        }
        if (inc == 0 && dec == 0) return Monotonicity::none;
        return inc >= dec ? Monotonicity::increasing : Monotonicity::decreasing;
    }
};

struct SearchResult {
    bool found = false;
    std::string mode = "heuristic";  // or "exhaustive"
    std::vector<ChannelProfile> candidates;   // ranked, at most top_k
    std::vector<double> candidate_loss;       // aligned with candidates
    int chosen_channel = 0;                   // 1-based
    double chosen_factor = 0.0;
    std::vector<std::pair<double, double>> factor_losses;  // (factor, loss) in grid order
    std::vector<std::pair<int, double>> all_losses;        // exhaustive mode only
    double probe_factor = 0.0;
    int eps = 0;
    int top_k = 0;
};

// Discard the skip prefix and smooth with the configured window.
inline Series channel_series(const HiddenStateDump& dump, int layer, int channel,
                             const SearchParams& params) {
    require(layer >= 1 && layer <= dump.n_layers, "channel_series: layer out of range");
    require(channel >= 1 && channel <= dump.hidden_size, "channel_series: channel out of range");
    require(dump.seq_len - params.skip_prefix >= params.window + 4,
            "channel_series: sequence too short for skip prefix and window");
    Series raw(static_cast<size_t>(dump.seq_len - params.skip_prefix));
    for (int p = params.skip_prefix; p < dump.seq_len; ++p)
        raw[static_cast<size_t>(p - params.skip_prefix)] =
            static_cast<double>(dump.at(layer, p, channel));
    return sliding_mean(raw, params.window);
}

// Per-layer cubic-fit monotonicity plus mean smoothness over monotone layers
// (smoothness measured on the smoothed series).
inline ChannelProfile profile_channel(const HiddenStateDump& dump, int channel,
                                      const SearchParams& params) {
    ChannelProfile profile;
    profile.channel = channel;
    profile.direction.resize(static_cast<size_t>(dump.n_layers), Monotonicity::none);
    double smooth_sum = 0.0;
    for (int layer = 1; layer <= dump.n_layers; ++layer) {
        const Series series = channel_series(dump, layer, channel, params);
        const Monotonicity dir = fit_is_monotone(cubic_fit(series));
        profile.direction[static_cast<size_t>(layer - 1)] = dir;
        if (dir == Monotonicity::none) continue;
        ++profile.monotone_layers;
        double score = smoothness_score(series);
        if (params.normalize_smoothness) score /= static_cast<double>(series.size());
        smooth_sum += score;
    }
    if (profile.monotone_layers > 0)
        profile.mean_smoothness = smooth_sum / profile.monotone_layers;
    return profile;
}

// Channels with c_t > eps, ordered by ascending smoothness (ties to the
// lower channel index), truncated to top_k. Empty when nothing passes.
inline std::vector<ChannelProfile> candidate_channels(const HiddenStateDump& dump,
                                                      const SearchParams& params) {
    params.validate();
    dump.validate();
    const int eps = params.resolved_eps(dump.n_layers);
    std::vector<ChannelProfile> passing;
    for (int ch = 1; ch <= dump.hidden_size; ++ch) {
        ChannelProfile profile = profile_channel(dump, ch, params);
        if (profile.monotone_layers > eps) passing.push_back(std::move(profile));
    }
    std::sort(passing.begin(), passing.end(), [](const ChannelProfile& a, const ChannelProfile& b) {
        if (a.mean_smoothness != b.mean_smoothness) return a.mean_smoothness < b.mean_smoothness;
        return a.channel < b.channel;
    });
    if (static_cast<int>(passing.size()) > params.top_k) passing.resize(static_cast<size_t>(params.top_k));
    return passing;
}

namespace detail {

// Bounded deterministic parallel map: results land in input order.
template <typename Fn>
inline std::vector<double> parallel_map(int count, Fn&& fn) {
    std::vector<double> out(static_cast<size_t>(count), 0.0);
    const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
    const int workers = static_cast<int>(std::min<unsigned>(hw, 8));
    if (workers <= 1 || count <= 1) {
        for (int i = 0; i < count; ++i) out[static_cast<size_t>(i)] = fn(i);
        return out;
    }
    std::vector<std::future<void>> futures;
    std::atomic<int> next{0};
    for (int w = 0; w < workers; ++w) {
        futures.push_back(std::async(std::launch::async, [&]() {
            while (true) {
                const int i = next.fetch_add(1);
                if (i >= count) return;
                out[static_cast<size_t>(i)] = fn(i);
            }
        }));
    }
    for (auto& f : futures) f.get();
    return out;
}

}  // namespace detail

// Mean answer NLL over the calibration tasks with the gold pair re-placed at
// each depth in `positions`, scored under the scaled model. factor == 1
// reproduces the unscaled loss exactly.
inline double calibration_loss(const Model& model, const ScalingSpec& spec,
                               const std::vector<TaskInstance>& dataset,
                               const std::vector<double>& positions) {
    require(!dataset.empty(), "calibration_loss: empty dataset");
    require(!positions.empty(), "calibration_loss: empty position set");
    spec.validate(model.config);
    const int count = static_cast<int>(dataset.size() * positions.size());
    const std::vector<double> losses = detail::parallel_map(count, [&](int idx) {
        const size_t t = static_cast<size_t>(idx) / positions.size();
        const size_t p = static_cast<size_t>(idx) % positions.size();
        const TaskInstance placed = place_gold(dataset[t], positions[p]);
        return answer_nll(model, placed, &spec);
    });
    double total = 0.0;
    for (double l : losses) total += l;
    return total / count;
}

namespace detail {

struct LossEvaluator {
    const Model* model;
    const std::vector<TaskInstance>* dataset;
    const SearchParams* params;
    LayerRange layers;

    double loss_for(int channel, double factor) const {
        ScalingSpec spec;
        spec.channels = {channel};
        spec.factor = factor;
        spec.layers = layers;
        spec.scope = TokenScope::last_token;
        return calibration_loss(*model, spec, *dataset, params->positions);
    }
};

inline void finish_with_grid(SearchResult& result, const detail::LossEvaluator& eval,
                             const SearchParams& params) {
    result.factor_losses.clear();
    double best_loss = 0.0;
    bool first = true;
    for (double factor : params.factor_grid) {
        const double loss = eval.loss_for(result.chosen_channel, factor);
        result.factor_losses.emplace_back(factor, loss);
        if (first || loss < best_loss) {  // strict: ties keep the earlier grid entry
            best_loss = loss;
            result.chosen_factor = factor;
            first = false;
        }
    }
}

}  // namespace detail

// Algorithm: candidate channels by monotonicity and smoothness, per-candidate
// calibration loss at the probe factor, argmin channel, then a grid search
// over the scale factor at the chosen channel.
inline SearchResult search_positional_channel(const Model& model, const HiddenStateDump& dump,
                                              const std::vector<TaskInstance>& dataset,
                                              const SearchParams& params) {
    params.validate();
    require(dump.hidden_size == model.config.d_model,
            "search: dump hidden size does not match the model");
    SearchResult result;
    result.mode = "heuristic";
    result.eps = params.resolved_eps(dump.n_layers);
    result.top_k = params.top_k;
    result.probe_factor = params.probe_factor;

    result.candidates = candidate_channels(dump, params);
    if (result.candidates.empty()) return result;  // found stays false

    detail::LossEvaluator eval{&model, &dataset, &params,
                               params.resolved_layers(model.config.n_layers)};
    const int count = static_cast<int>(result.candidates.size());
    result.candidate_loss = detail::parallel_map(count, [&](int i) {
        return eval.loss_for(result.candidates[static_cast<size_t>(i)].channel,
                             params.probe_factor);
    });

    int best = 0;
    for (int i = 1; i < count; ++i) {
        const double li = result.candidate_loss[static_cast<size_t>(i)];
        const double lb = result.candidate_loss[static_cast<size_t>(best)];
        const int ci = result.candidates[static_cast<size_t>(i)].channel;
        const int cb = result.candidates[static_cast<size_t>(best)].channel;
        if (li < lb || (li == lb && ci < cb)) best = i;
    }
    result.chosen_channel = result.candidates[static_cast<size_t>(best)].channel;
    result.found = true;
    detail::finish_with_grid(result, eval, params);
    return result;
}

// Traverses every channel (the oracle path); refuses above 4096 channels
// unless forced. Reported candidates are the top_k channels by loss.
inline SearchResult exhaustive_search(const Model& model, const HiddenStateDump& dump,
                                      const std::vector<TaskInstance>& dataset,
                                      const SearchParams& params, bool force = false) {
    params.validate();
    require(dump.hidden_size == model.config.d_model,
            "search: dump hidden size does not match the model");
    if (dump.hidden_size > 4096 && !force)
        throw std::invalid_argument(
            "exhaustive_search: hidden size above 4096 refused (pass force to override)");

    SearchResult result;
    result.mode = "exhaustive";
    result.eps = params.resolved_eps(dump.n_layers);
    result.top_k = params.top_k;
    result.probe_factor = params.probe_factor;

    detail::LossEvaluator eval{&model, &dataset, &params,
                               params.resolved_layers(model.config.n_layers)};
    const std::vector<double> losses = detail::parallel_map(dump.hidden_size, [&](int i) {
        return eval.loss_for(i + 1, params.probe_factor);
    });

    std::vector<int> order(static_cast<size_t>(dump.hidden_size));
    for (int i = 0; i < dump.hidden_size; ++i) order[static_cast<size_t>(i)] = i;
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (losses[static_cast<size_t>(a)] != losses[static_cast<size_t>(b)])
            return losses[static_cast<size_t>(a)] < losses[static_cast<size_t>(b)];
        return a < b;
    });

    result.all_losses.reserve(static_cast<size_t>(dump.hidden_size));
    for (int i = 0; i < dump.hidden_size; ++i)
        result.all_losses.emplace_back(i + 1, losses[static_cast<size_t>(i)]);

    const int keep = std::min(params.top_k, dump.hidden_size);
    for (int i = 0; i < keep; ++i) {
        const int ch = order[static_cast<size_t>(i)] + 1;
        result.candidates.push_back(profile_channel(dump, ch, params));
        result.candidate_loss.push_back(losses[static_cast<size_t>(order[static_cast<size_t>(i)])]);
    }
    result.chosen_channel = order[0] + 1;
    result.found = true;
    detail::finish_with_grid(result, eval, params);
    return result;
}

// ---------------------------------------------------------------------------
// Result emission
// ---------------------------------------------------------------------------

inline nlohmann::json search_result_to_json(const SearchResult& result) {
    nlohmann::json j;
    j["found"] = result.found;
    j["mode"] = result.mode;
    j["eps"] = result.eps;
    j["top_k"] = result.top_k;
    j["probe_factor"] = result.probe_factor;
    nlohmann::json cands = nlohmann::json::array();
    for (size_t i = 0; i < result.candidates.size(); ++i) {
        const ChannelProfile& c = result.candidates[i];
        nlohmann::json jc;
        jc["channel"] = c.channel;
        jc["monotone_layers"] = c.monotone_layers;
        jc["direction_majority"] = to_string(c.majority_direction());
        jc["mean_smoothness"] = c.mean_smoothness;
        if (i < result.candidate_loss.size()) jc["loss"] = result.candidate_loss[i];
        cands.push_back(jc);
    }
    j["candidates"] = cands;
    if (result.found) {
        j["chosen_channel"] = result.chosen_channel;
        j["chosen_factor"] = result.chosen_factor;
        nlohmann::json fl = nlohmann::json::array();
        for (const auto& [factor, loss] : result.factor_losses)
            fl.push_back({{"factor", factor}, {"loss", loss}});
        j["factor_losses"] = fl;
    }
    return j;
}

// Ranking CSV: channel, c_t, direction_majority, g_t, loss.
inline std::string search_result_to_csv(const SearchResult& result) {
    std::string csv = "channel,c_t,direction_majority,g_t,loss\n";
    for (size_t i = 0; i < result.candidates.size(); ++i) {
        const ChannelProfile& c = result.candidates[i];
        csv += std::to_string(c.channel) + "," + std::to_string(c.monotone_layers) + "," +
               to_string(c.majority_direction()) + "," + format_double(c.mean_smoothness) + "," +
               (i < result.candidate_loss.size() ? format_double(result.candidate_loss[i])
                                                 : std::string("")) +
               "\n";
    }
    return csv;
}

}  // namespace poshid
