#pragma once

// Position-sweep evaluation, the canned perturbation experiments, and report
// emission (CSV / JSON / hand-rolled SVG). All emitted bytes are a pure
// function of the report content, so identical runs produce identical files.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "poshid/common.hpp"
#include "poshid/forward.hpp"
#include "poshid/model.hpp"
#include "poshid/probe.hpp"
#include "poshid/scaling.hpp"
#include "poshid/tasks.hpp"

namespace poshid {

struct DepthStats {
    double depth = 0.0;
    double accuracy = 0.0;
    double mean_nll = 0.0;
    double mean_attention = 0.0;
};

// One evaluated condition (baseline, a perturbation, or a scale factor).
struct SweepVariant {
    std::string name;
    std::vector<DepthStats> by_depth;
};

struct PositionSweepReport {
    std::vector<double> depths;
    std::vector<SweepVariant> variants;
    nlohmann::json metadata;  // model id, preset, params, seeds
    std::vector<std::vector<double>> heatmap;  // [layer][bucket] last-row attention
    int heatmap_buckets = 0;
};

// What a sweep evaluates: a model, optionally scaled, optionally perturbed
// with per-task overrides, optionally generated by a stand-in oracle (test
// use; bypasses the model for decoding).
struct EvalTarget {
    const Model* model = nullptr;
    std::optional<ScalingSpec> spec;
    std::function<ForwardOverrides(const TaskInstance&)> override_builder;
    std::function<std::string(const TaskInstance&)> generator_override;

    ForwardOverrides overrides_for(const TaskInstance& task) const {
        return override_builder ? override_builder(task) : ForwardOverrides{};
    }
};

namespace detail {

struct TaskOutcome {
    double correct = 0.0;
    double nll = 0.0;
    double attention = 0.0;
};

inline TaskOutcome evaluate_task(const EvalTarget& target, const TaskInstance& task,
                                 const LayerRange& probe_layers) {
    TaskOutcome outcome;
    if (target.generator_override) {
        const std::string generated = target.generator_override(task);
        outcome.correct = generated.find(task.answer) != std::string::npos ? 1.0 : 0.0;
        return outcome;
    }
    const ScalingSpec* spec = target.spec ? &*target.spec : nullptr;
    const ForwardOverrides ov = target.overrides_for(task);
    const std::string generated = greedy_decode(*target.model, task, spec, ov);
    outcome.correct = generated.find(task.answer) != std::string::npos ? 1.0 : 0.0;
    outcome.nll = answer_nll(*target.model, task, spec, ov);
    outcome.attention = gold_attention(*target.model, task, probe_layers, spec, ov);
    return outcome;
}

template <typename Fn>
inline void parallel_for(int count, Fn&& fn) {
    const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
    const int workers = static_cast<int>(std::min<unsigned>(hw, 8));
    if (workers <= 1 || count <= 1) {
        for (int i = 0; i < count; ++i) fn(i);
        return;
    }
    std::vector<std::future<void>> futures;
    std::atomic<int> next{0};
    for (int w = 0; w < workers; ++w) {
        futures.push_back(std::async(std::launch::async, [&]() {
            while (true) {
                const int i = next.fetch_add(1);
                if (i >= count) return;
                fn(i);
            }
        }));
    }
    for (auto& f : futures) f.get();
}

}  // namespace detail

// Evaluate one variant over per-depth task sets: greedy-decoding accuracy
// (answer containment), mean answer NLL, and mean attention to the gold
// segment at the probe layers. Aggregation is in fixed task order.
inline SweepVariant eval_position_sweep(const EvalTarget& target,
                                        const std::vector<std::vector<TaskInstance>>& tasks_by_depth,
                                        const std::vector<double>& depths,
                                        const LayerRange& probe_layers,
                                        const std::string& variant_name = "run") {
    require(tasks_by_depth.size() == depths.size(),
            "eval_position_sweep: one task set per depth required");
    for (const auto& set : tasks_by_depth)
        require(!set.empty(), "eval_position_sweep: empty task set");

    std::vector<std::pair<int, int>> units;  // (depth index, task index)
    for (size_t di = 0; di < depths.size(); ++di)
        for (size_t ti = 0; ti < tasks_by_depth[di].size(); ++ti)
            units.emplace_back(static_cast<int>(di), static_cast<int>(ti));

    std::vector<detail::TaskOutcome> outcomes(units.size());
    detail::parallel_for(static_cast<int>(units.size()), [&](int u) {
        const auto [di, ti] = units[static_cast<size_t>(u)];
        outcomes[static_cast<size_t>(u)] = detail::evaluate_task(
            target, tasks_by_depth[static_cast<size_t>(di)][static_cast<size_t>(ti)],
            probe_layers);
    });

    SweepVariant variant;
    variant.name = variant_name;
    variant.by_depth.resize(depths.size());
    std::vector<int> counts(depths.size(), 0);
    for (size_t di = 0; di < depths.size(); ++di)
        variant.by_depth[di].depth = depths[di];
    for (size_t u = 0; u < units.size(); ++u) {
        const auto [di, ti] = units[u];
        DepthStats& stats = variant.by_depth[static_cast<size_t>(di)];
        stats.accuracy += outcomes[u].correct;
        stats.mean_nll += outcomes[u].nll;
        stats.mean_attention += outcomes[u].attention;
        ++counts[static_cast<size_t>(di)];
    }
    for (size_t di = 0; di < depths.size(); ++di) {
        DepthStats& stats = variant.by_depth[di];
        stats.accuracy /= counts[di];
        stats.mean_nll /= counts[di];
        stats.mean_attention /= counts[di];
    }
    return variant;
}

// ---------------------------------------------------------------------------
// Experiment presets
// ---------------------------------------------------------------------------

struct PresetParams {
    int n_pairs = 50;          // analysis default; tests use smaller sets
    int tasks_per_depth = 10;
    std::vector<double> depths = {0.0, 0.25, 0.5, 0.75, 1.0};
    uint64_t seed = 1234;
    LayerRange modify_layers{0, 0};  // {0,0} = [2, min(8, L)] (crop preset)
    LayerRange probe_layers{0, 0};   // {0,0} = default_probe_layers(L)
    int offset_channel = 0;          // 0 = 213 when it fits, else the first channel
    double offset_delta = -0.3;
    double boost_factor = 2.0;
    std::vector<double> sweep_factors = {2.0, 1.0, 0.5, 0.0, -0.5, -1.0};
    ScalingSpec scaling;  // channel filled per preset for factor_sweep
    bool with_heatmap = true;

    LayerRange resolved_modify(int n_layers) const {
        if (modify_layers.lo >= 1) return modify_layers;
        return {std::min(2, n_layers), std::min(8, n_layers)};
    }
    LayerRange resolved_probe(int n_layers) const {
        if (probe_layers.lo >= 1) return probe_layers;
        return default_probe_layers(n_layers);
    }
    int resolved_offset_channel(int d_model) const {
        if (offset_channel >= 1) return offset_channel;
        return d_model >= 213 ? 213 : 1;
    }
};

inline const std::vector<std::string>& preset_names() {
    static const std::vector<std::string> names = {"crop_mask",      "pe_begin",
                                                   "pe_end",         "boost_gold",
                                                   "channel_offset", "factor_sweep"};
    return names;
}

namespace detail {

inline std::vector<std::vector<TaskInstance>> build_depth_tasks(const PresetParams& params) {
    std::vector<std::vector<TaskInstance>> tasks_by_depth;
    for (size_t di = 0; di < params.depths.size(); ++di) {
        std::vector<TaskInstance> tasks;
        for (int t = 0; t < params.tasks_per_depth; ++t)
            tasks.push_back(gen_kv_task(params.n_pairs, params.depths[di],
                                        mix_seed(params.seed, di * 1000 + t)));
        tasks_by_depth.push_back(std::move(tasks));
    }
    return tasks_by_depth;
}

// Head-mean attention of the last row per layer, bucketed over positions;
// rendered as the layer-by-position heatmap.
inline void fill_heatmap(PositionSweepReport& report, const Model& model,
                         const PresetParams& params) {
    if (!params.with_heatmap) return;
    const int buckets = 64;
    const TaskInstance task =
        gen_kv_task(params.n_pairs, 0.5, mix_seed(params.seed, 777));
    ForwardOverrides ov;
    for (int layer = 1; layer <= model.config.n_layers; ++layer)
        ov.capture_attention_layers.insert(layer);
    const ForwardResult res = forward(model, task.tokens, ov);
    const int n = res.seq_len;
    report.heatmap_buckets = buckets;
    report.heatmap.assign(static_cast<size_t>(model.config.n_layers),
                          std::vector<double>(static_cast<size_t>(buckets), 0.0));
    for (int layer = 1; layer <= model.config.n_layers; ++layer) {
        auto& row = report.heatmap[static_cast<size_t>(layer - 1)];
        for (int head = 1; head <= model.config.n_heads; ++head) {
            const auto& w = res.attention.at(layer, head);
            for (int j = 0; j < n; ++j) {
                const int b = std::min(buckets - 1, j * buckets / n);
                row[static_cast<size_t>(b)] +=
                    static_cast<double>(w[static_cast<size_t>(n - 1) * n + j]);
            }
        }
        for (auto& cell : row) cell /= model.config.n_heads;
    }
}

}  // namespace detail

// Runs a named perturbation experiment: a baseline sweep plus the preset's
// modified sweep(s), over the same task sets.
inline PositionSweepReport run_preset(const std::string& name, const Model& model,
                                      const PresetParams& params) {
    const bool known =
        std::find(preset_names().begin(), preset_names().end(), name) != preset_names().end();
    require(known, "unknown experiment preset: " + name);

    const ModelConfig& cfg = model.config;
    const LayerRange probe = params.resolved_probe(cfg.n_layers);
    const LayerRange modify = params.resolved_modify(cfg.n_layers);
    const auto tasks_by_depth = detail::build_depth_tasks(params);

    PositionSweepReport report;
    report.depths = params.depths;
    report.metadata["preset"] = name;
    report.metadata["model"] = model.id();
    report.metadata["seed"] = params.seed;
    report.metadata["n_pairs"] = params.n_pairs;
    report.metadata["tasks_per_depth"] = params.tasks_per_depth;
    report.metadata["probe_layers"] = {probe.lo, probe.hi};
    report.metadata["modify_layers"] = {modify.lo, modify.hi};

    EvalTarget baseline{&model, std::nullopt, nullptr, nullptr};
    report.variants.push_back(
        eval_position_sweep(baseline, tasks_by_depth, params.depths, probe, "baseline"));

    if (name == "crop_mask") {
        EvalTarget cropped{&model, std::nullopt,
                           [modify](const TaskInstance& task) {
                               ForwardOverrides ov;
                               ov.mask_override = crop_mask(
                                   task.prompt_tokens(), task.gold_segment, modify);
                               return ov;
                           },
                           nullptr};
        report.variants.push_back(
            eval_position_sweep(cropped, tasks_by_depth, params.depths, probe, "crop_mask"));
    } else if (name == "pe_begin" || name == "pe_end") {
        const bool to_begin = name == "pe_begin";
        EvalTarget shifted{&model, std::nullopt,
                           [to_begin](const TaskInstance& task) {
                               PositionShift shift;
                               shift.mode = to_begin ? PositionShift::Mode::to_beginning
                                                     : PositionShift::Mode::to_end;
                               const Segment& ref = to_begin ? task.pair_segments.front()
                                                             : task.pair_segments.back();
                               // the reference span must match the gold span
                               Segment sized = ref;
                               sized.end = sized.begin + task.gold_segment.size();
                               shift.reference = sized;
                               ForwardOverrides ov;
                               ov.position_ids = shift_position_ids(
                                   task.prompt_tokens(), task.gold_segment, shift);
                               return ov;
                           },
                           nullptr};
        report.variants.push_back(
            eval_position_sweep(shifted, tasks_by_depth, params.depths, probe, name));
    } else if (name == "boost_gold") {
        const double factor = params.boost_factor;
        const LayerRange all{1, cfg.n_layers};
        EvalTarget boosted{&model, std::nullopt,
                           [factor, all](const TaskInstance& task) {
                               ForwardOverrides ov;
                               ov.attention_boosts.push_back(
                                   boost_attention(task.gold_segment, factor, all));
                               return ov;
                           },
                           nullptr};
        report.variants.push_back(
            eval_position_sweep(boosted, tasks_by_depth, params.depths, probe, "boost_gold"));
        report.metadata["boost_factor"] = factor;
    } else if (name == "channel_offset") {
        const int channel = params.resolved_offset_channel(cfg.d_model);
        const double delta = params.offset_delta;
        const LayerRange band = probe;  // edit applied at the observation band
        EvalTarget offset{&model, std::nullopt,
                          [channel, delta, band](const TaskInstance& task) {
                              ForwardOverrides ov;
                              ov.channel_edits.push_back(
                                  channel_offset(task.gold_segment, channel, delta, band));
                              return ov;
                          },
                          nullptr};
        report.variants.push_back(
            eval_position_sweep(offset, tasks_by_depth, params.depths, probe, "channel_offset"));
        report.metadata["offset_channel"] = channel;
        report.metadata["offset_delta"] = delta;
    } else if (name == "factor_sweep") {
        ScalingSpec spec = params.scaling;
        if (spec.channels.empty()) spec.channels = {1};
        if (spec.layers.lo < 1) spec.layers = default_scaling_layers(cfg.n_layers);
        for (double factor : params.sweep_factors) {
            spec.factor = factor;
            spec.validate(cfg);
            EvalTarget scaled{&model, spec, nullptr, nullptr};
            report.variants.push_back(eval_position_sweep(scaled, tasks_by_depth, params.depths,
                                                          probe,
                                                          "s=" + format_double(factor)));
        }
        report.metadata["sweep_channels"] = spec.channels;
        report.metadata["sweep_factors"] = params.sweep_factors;
    }

    detail::fill_heatmap(report, model, params);
    return report;
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

inline nlohmann::json report_to_json(const PositionSweepReport& report) {
    nlohmann::json j;
    j["depths"] = report.depths;
    j["metadata"] = report.metadata;
    nlohmann::json variants = nlohmann::json::array();
    for (const auto& variant : report.variants) {
        nlohmann::json v;
        v["name"] = variant.name;
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& stats : variant.by_depth) {
            rows.push_back({{"depth", stats.depth},
                            {"accuracy", stats.accuracy},
                            {"mean_answer_nll", stats.mean_nll},
                            {"mean_attention_to_gold", stats.mean_attention}});
        }
        v["by_depth"] = rows;
        variants.push_back(v);
    }
    j["variants"] = variants;
    if (report.heatmap_buckets > 0) {
        j["heatmap_buckets"] = report.heatmap_buckets;
        j["heatmap"] = report.heatmap;
    }
    return j;
}

inline PositionSweepReport report_from_json(const nlohmann::json& j) {
    PositionSweepReport report;
    report.depths = j.at("depths").get<std::vector<double>>();
    report.metadata = j.value("metadata", nlohmann::json::object());
    for (const auto& v : j.at("variants")) {
        SweepVariant variant;
        variant.name = v.at("name").get<std::string>();
        for (const auto& row : v.at("by_depth")) {
            DepthStats stats;
            stats.depth = row.at("depth").get<double>();
            stats.accuracy = row.at("accuracy").get<double>();
            stats.mean_nll = row.at("mean_answer_nll").get<double>();
            stats.mean_attention = row.at("mean_attention_to_gold").get<double>();
            variant.by_depth.push_back(stats);
        }
        report.variants.push_back(std::move(variant));
    }
    if (j.contains("heatmap")) {
        report.heatmap_buckets = j.at("heatmap_buckets").get<int>();
        report.heatmap = j.at("heatmap").get<std::vector<std::vector<double>>>();
    }
    return report;
}

inline std::string report_to_csv(const PositionSweepReport& report) {
    std::string csv = "variant,depth,accuracy,mean_answer_nll,mean_attention_to_gold\n";
    for (const auto& variant : report.variants) {
        for (const auto& stats : variant.by_depth) {
            csv += variant.name + "," + format_double(stats.depth) + "," +
                   format_double(stats.accuracy) + "," + format_double(stats.mean_nll) + "," +
                   format_double(stats.mean_attention) + "\n";
        }
    }
    return csv;
}

namespace detail {

inline const char* svg_palette(size_t i) {
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                   "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};
    return colors[i % 8];
}

// Minimal line chart: one polyline per variant over the depth axis.
inline std::string svg_curve(const PositionSweepReport& report, const std::string& metric) {
    const double width = 640.0, height = 400.0, pad = 48.0;
    double lo = 1e300, hi = -1e300;
    auto value_of = [&](const DepthStats& s) {
        return metric == "accuracy" ? s.accuracy
                                    : (metric == "nll" ? s.mean_nll : s.mean_attention);
    };
    for (const auto& variant : report.variants)
        for (const auto& s : variant.by_depth) {
            lo = std::min(lo, value_of(s));
            hi = std::max(hi, value_of(s));
        }
    if (hi <= lo) hi = lo + 1.0;

    std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" +
                      format_double(width) + "\" height=\"" + format_double(height) + "\">\n";
    svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg += "<text x=\"" + format_double(width / 2) + "\" y=\"20\" text-anchor=\"middle\">" +
           metric + " vs gold depth</text>\n";
    // axes
    svg += "<line x1=\"" + format_double(pad) + "\" y1=\"" + format_double(height - pad) +
           "\" x2=\"" + format_double(width - pad) + "\" y2=\"" + format_double(height - pad) +
           "\" stroke=\"black\"/>\n";
    svg += "<line x1=\"" + format_double(pad) + "\" y1=\"" + format_double(pad) + "\" x2=\"" +
           format_double(pad) + "\" y2=\"" + format_double(height - pad) +
           "\" stroke=\"black\"/>\n";
    for (size_t vi = 0; vi < report.variants.size(); ++vi) {
        const auto& variant = report.variants[vi];
        std::string points;
        for (const auto& s : variant.by_depth) {
            const double px = pad + s.depth * (width - 2 * pad);
            const double py =
                height - pad - (value_of(s) - lo) / (hi - lo) * (height - 2 * pad);
            points += format_double(px) + "," + format_double(py) + " ";
        }
        svg += "<polyline fill=\"none\" stroke=\"" + std::string(svg_palette(vi)) +
               "\" stroke-width=\"2\" points=\"" + points + "\"/>\n";
        svg += "<text x=\"" + format_double(width - pad + 4) + "\" y=\"" +
               format_double(pad + 16.0 * static_cast<double>(vi)) + "\" fill=\"" +
               svg_palette(vi) + "\" font-size=\"11\">" + variant.name + "</text>\n";
    }
    svg += "</svg>\n";
    return svg;
}

// Heatmap: layer rows by position buckets, grayscale-to-blue ramp.
inline std::string svg_heatmap(const PositionSweepReport& report) {
    const int layers = static_cast<int>(report.heatmap.size());
    const int buckets = report.heatmap_buckets;
    const double cell_w = 9.0, cell_h = 18.0, pad = 40.0;
    const double width = pad * 2 + cell_w * buckets;
    const double height = pad * 2 + cell_h * layers;
    double hi = 0.0;
    for (const auto& row : report.heatmap)
        for (double vv : row) hi = std::max(hi, vv);
    if (hi <= 0.0) hi = 1.0;

    std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" +
                      format_double(width) + "\" height=\"" + format_double(height) + "\">\n";
    svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg += "<text x=\"" + format_double(width / 2) +
           "\" y=\"20\" text-anchor=\"middle\">last-row attention, layer by position</text>\n";
    for (int layer = 0; layer < layers; ++layer) {
        for (int b = 0; b < buckets; ++b) {
            const double v = report.heatmap[static_cast<size_t>(layer)][static_cast<size_t>(b)] / hi;
            const int shade = static_cast<int>(255.0 - v * 255.0);
            svg += "<rect x=\"" + format_double(pad + b * cell_w) + "\" y=\"" +
                   format_double(pad + layer * cell_h) + "\" width=\"" + format_double(cell_w) +
                   "\" height=\"" + format_double(cell_h) + "\" fill=\"rgb(" +
                   std::to_string(shade) + "," + std::to_string(shade) + ",255)\"/>\n";
        }
        svg += "<text x=\"8\" y=\"" + format_double(pad + layer * cell_h + cell_h - 4) +
               "\" font-size=\"11\">L" + std::to_string(layer + 1) + "</text>\n";
    }
    svg += "</svg>\n";
    return svg;
}

inline void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw std::runtime_error("failed writing: " + path);
}

}  // namespace detail

// Writes the requested formats into out_dir and returns the file paths.
// csv -> report.csv, json -> report.json, svg -> accuracy/attention curves
// plus the heatmap when present.
inline std::vector<std::string> emit_report(const PositionSweepReport& report,
                                            const std::string& out_dir,
                                            const std::set<std::string>& formats = {"csv", "json",
                                                                                    "svg"}) {
    for (const auto& f : formats)
        require(f == "csv" || f == "json" || f == "svg", "emit_report: unknown format " + f);
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw std::runtime_error("cannot create output directory " + out_dir + ": " +
                                     ec.message());
    std::vector<std::string> written;
    if (formats.count("csv")) {
        const std::string path = out_dir + "/report.csv";
        detail::write_file(path, report_to_csv(report));
        written.push_back(path);
    }
    if (formats.count("json")) {
        const std::string path = out_dir + "/report.json";
        detail::write_file(path, report_to_json(report).dump(2) + "\n");
        written.push_back(path);
    }
    if (formats.count("svg")) {
        const std::string acc = out_dir + "/curve_accuracy.svg";
        detail::write_file(acc, detail::svg_curve(report, "accuracy"));
        written.push_back(acc);
        const std::string attn = out_dir + "/curve_attention.svg";
        detail::write_file(attn, detail::svg_curve(report, "attention"));
        written.push_back(attn);
        if (report.heatmap_buckets > 0) {
            const std::string heat = out_dir + "/heatmap.svg";
            detail::write_file(heat, detail::svg_heatmap(report));
            written.push_back(heat);
        }
    }
    return written;
}

}  // namespace poshid
