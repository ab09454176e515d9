#pragma once

// Synthetic key-value retrieval tasks, answer scoring and greedy decoding.
//
// Prompt layout (byte-exact):
//   Json data:\n{"k1": "v1", "k2": "v2", ...}\n\nThe value of key "<gold>" is "
// Keys and values are 20-character lowercase alphanumeric strings drawn
// deterministically from the task seed. Token ids are the BOS-prefixed
// prompt bytes, so gold token spans are prompt character spans shifted by 1.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "poshid/common.hpp"
#include "poshid/forward.hpp"
#include "poshid/model.hpp"
#include "poshid/probe.hpp"
#include "poshid/rng.hpp"
#include "poshid/scaling.hpp"
#include "poshid/tokenizer.hpp"

namespace poshid {

constexpr int kKvStringLength = 20;

struct TaskInstance {
    int n_pairs = 0;
    std::vector<std::pair<std::string, std::string>> pairs;
    int gold_index = 0;
    double gold_depth = 0.0;
    std::string prompt;
    std::string answer;
    std::vector<int> tokens;             // BOS + prompt bytes
    Segment gold_segment;                // token span of the gold pair
    std::vector<Segment> pair_segments;  // token span per pair, in order
    std::vector<double> depths = {0.0, 0.25, 0.5, 0.75, 1.0};  // standard position set
    uint64_t seed = 0;

    int prompt_tokens() const { return static_cast<int>(tokens.size()); }
};

namespace detail {

inline std::string random_kv_string(GaussianRng& rng) {
    static const char alphabet[] = "abcdefghijklmnopqrstuvwxyz0123456789";
    std::string s(kKvStringLength, 'a');
    for (auto& ch : s) ch = alphabet[rng.below(36)];
    return s;
}

// Renders the prompt and records per-pair token spans (from the opening
// quote of the key through the closing quote of the value).
inline void render_task(TaskInstance& task) {
    const auto& gold = task.pairs[static_cast<size_t>(task.gold_index)];
    std::string prompt = "Json data:\n{";
    task.pair_segments.clear();
    for (size_t i = 0; i < task.pairs.size(); ++i) {
        if (i > 0) prompt += ", ";
        const int begin_char = static_cast<int>(prompt.size());
        prompt += "\"" + task.pairs[i].first + "\": \"" + task.pairs[i].second + "\"";
        const int end_char = static_cast<int>(prompt.size());
        // +1 converts prompt character offsets to BOS-prefixed token indices
        Segment seg{begin_char + 1, end_char + 1, "KV #" + std::to_string(i + 1)};
        task.pair_segments.push_back(seg);
    }
    prompt += "}\n\nThe value of key \"" + gold.first + "\" is \"";
    task.prompt = prompt;
    task.answer = gold.second;
    task.tokens = encode(prompt);
    task.gold_segment = task.pair_segments[static_cast<size_t>(task.gold_index)];
    task.gold_segment.label = "gold KV";
}

}  // namespace detail

inline int gold_index_for_depth(double depth, int n_pairs) {
    return static_cast<int>(std::lround(depth * (n_pairs - 1)));
}

inline TaskInstance gen_kv_task(int n_pairs, double gold_depth, uint64_t seed) {
    require(n_pairs >= 2, "gen_kv_task: need at least 2 pairs");
    require(gold_depth >= 0.0 && gold_depth <= 1.0, "gen_kv_task: depth must be in [0, 1]");

    TaskInstance task;
    task.n_pairs = n_pairs;
    task.seed = seed;
    task.gold_depth = gold_depth;
    task.gold_index = gold_index_for_depth(gold_depth, n_pairs);

    GaussianRng rng(mix_seed(seed, 17));  // task-generation stream
    std::set<std::string> used;
    for (int i = 0; i < n_pairs; ++i) {
        std::string key = detail::random_kv_string(rng);
        while (!used.insert(key).second) key = detail::random_kv_string(rng);
        task.pairs.emplace_back(std::move(key), detail::random_kv_string(rng));
    }
    detail::render_task(task);
    return task;
}

// Same pairs and gold key, with the gold pair moved to the index matching
// `depth`; everything is re-rendered deterministically.
inline TaskInstance place_gold(const TaskInstance& task, double depth) {
    require(depth >= 0.0 && depth <= 1.0, "place_gold: depth must be in [0, 1]");
    TaskInstance moved = task;
    auto gold = moved.pairs[static_cast<size_t>(moved.gold_index)];
    moved.pairs.erase(moved.pairs.begin() + moved.gold_index);
    const int new_index = gold_index_for_depth(depth, moved.n_pairs);
    moved.pairs.insert(moved.pairs.begin() + new_index, std::move(gold));
    moved.gold_index = new_index;
    moved.gold_depth = depth;
    detail::render_task(moved);
    return moved;
}

// ---------------------------------------------------------------------------
// Scoring and decoding
// ---------------------------------------------------------------------------

// Rows that predict the answer tokens when the answer is appended to the
// prompt: the final prompt token predicts answer byte 0, and so on.
inline std::vector<int> answer_rows(const TaskInstance& task) {
    std::vector<int> rows;
    const int prompt_len = task.prompt_tokens();
    for (size_t k = 0; k < task.answer.size(); ++k)
        rows.push_back(prompt_len - 1 + static_cast<int>(k));
    return rows;
}

inline std::vector<int> full_sequence(const TaskInstance& task) {
    std::vector<int> seq = task.tokens;
    for (unsigned char ch : task.answer) seq.push_back(static_cast<int>(ch));
    return seq;
}

inline double log_softmax_at(const std::vector<float>& logits, int index) {
    double max_logit = -1e300;
    for (float v : logits) max_logit = std::max(max_logit, static_cast<double>(v));
    double denom = 0.0;
    for (float v : logits) denom += std::exp(static_cast<double>(v) - max_logit);
    return static_cast<double>(logits[static_cast<size_t>(index)]) - max_logit - std::log(denom);
}

// Mean negative log-likelihood of the answer bytes, each scored as the last
// token of its prefix (exactly what greedy decoding would see). `spec`, if
// given, scores under the scaled model.
inline double answer_nll(const Model& model, const TaskInstance& task,
                         const ScalingSpec* spec = nullptr,
                         const ForwardOverrides& overrides = {}) {
    require(!task.answer.empty(), "answer_nll: task has an empty answer");
    const std::vector<int> seq = full_sequence(task);
    const std::vector<int> rows = answer_rows(task);
    const auto logits = score_rows(model, seq, rows, spec, overrides);
    double total = 0.0;
    for (size_t k = 0; k < task.answer.size(); ++k) {
        const int target = static_cast<int>(static_cast<unsigned char>(task.answer[k]));
        total -= log_softmax_at(logits.at(rows[k]), target);
    }
    return total / static_cast<double>(task.answer.size());
}

// Pads a position-id override out to a longer (decoded) sequence; ids beyond
// the original prompt continue the natural 0..n-1 numbering.
inline ForwardOverrides extend_overrides(const ForwardOverrides& overrides, int new_len) {
    ForwardOverrides ov = overrides;
    if (ov.position_ids) {
        auto& ids = *ov.position_ids;
        for (int i = static_cast<int>(ids.size()); i < new_len; ++i) ids.push_back(i);
    }
    return ov;
}

// Greedy decoding of up to max_new tokens (answer length + 4 when -1).
// Each step re-runs the forward on the grown sequence; ties pick the lowest
// token id.
inline std::string greedy_decode(const Model& model, const TaskInstance& task,
                                 const ScalingSpec* spec = nullptr,
                                 const ForwardOverrides& overrides = {}, int max_new = -1) {
    if (max_new < 0) max_new = static_cast<int>(task.answer.size()) + 4;
    std::vector<int> seq = task.tokens;
    std::string out;
    for (int step = 0; step < max_new; ++step) {
        const ForwardOverrides ov = extend_overrides(overrides, static_cast<int>(seq.size()));
        const ForwardResult res = spec ? forward_scaled(model, *spec, seq, ov)
                                       : forward(model, seq, ov);
        const float* row = res.logits_row(res.seq_len - 1);
        int best = 0;
        for (int t = 1; t < res.vocab_size; ++t)
            if (row[t] > row[best]) best = t;
        if (best == kBosId) break;  // degenerate; BOS never appears in answers
        out.push_back(static_cast<char>(static_cast<unsigned char>(best)));
        seq.push_back(best);
    }
    return out;
}

// Attention to the gold segment measured on the prompt forward (head-mean
// over the probe band), under the same spec/overrides as evaluation.
inline double gold_attention(const Model& model, const TaskInstance& task,
                             const LayerRange& probe_layers,
                             const ScalingSpec* spec = nullptr,
                             const ForwardOverrides& overrides = {}) {
    ForwardOverrides ov = overrides;
    std::set<int> layers;
    for (int layer = probe_layers.lo; layer <= probe_layers.hi; ++layer) {
        layers.insert(layer);
        ov.capture_attention_layers.insert(layer);
    }
    const ForwardResult res = spec ? forward_scaled(model, *spec, task.tokens, ov)
                                   : forward(model, task.tokens, ov);
    std::set<int> heads;
    for (int h = 1; h <= model.config.n_heads; ++h) heads.insert(h);
    return attention_to_segment(res.attention, task.gold_segment, layers, heads);
}

// ---------------------------------------------------------------------------
// JSON round trip
// ---------------------------------------------------------------------------

inline nlohmann::json task_to_json(const TaskInstance& task) {
    nlohmann::json j;
    j["n_pairs"] = task.n_pairs;
    nlohmann::json pairs = nlohmann::json::array();
    for (const auto& kv : task.pairs) pairs.push_back({kv.first, kv.second});
    j["pairs"] = pairs;
    j["gold_index"] = task.gold_index;
    j["gold_depth"] = task.gold_depth;
    j["prompt"] = task.prompt;
    j["answer"] = task.answer;
    j["gold_segment"] = {task.gold_segment.begin, task.gold_segment.end};
    j["depths"] = task.depths;
    j["seed"] = task.seed;
    return j;
}

inline TaskInstance task_from_json(const nlohmann::json& j) {
    TaskInstance task;
    task.n_pairs = j.at("n_pairs").get<int>();
    for (const auto& kv : j.at("pairs"))
        task.pairs.emplace_back(kv[0].get<std::string>(), kv[1].get<std::string>());
    require(static_cast<int>(task.pairs.size()) == task.n_pairs,
            "task json: pair count mismatch");
    task.gold_index = j.at("gold_index").get<int>();
    require(task.gold_index >= 0 && task.gold_index < task.n_pairs,
            "task json: gold index out of range");
    task.gold_depth = j.at("gold_depth").get<double>();
    task.depths = j.at("depths").get<std::vector<double>>();
    task.seed = j.at("seed").get<uint64_t>();
    detail::render_task(task);
    require(task.prompt == j.at("prompt").get<std::string>(),
            "task json: prompt does not match its pairs");
    require(task.answer == j.at("answer").get<std::string>(),
            "task json: answer does not match the gold pair");
    return task;
}

}  // namespace poshid
