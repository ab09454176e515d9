#pragma once

// Instrumented forward pass of the decoder stack, declarative overrides,
// attention/hidden captures, and the spliced attention path that recomputes
// designated rows from channel-scaled hidden states.
//
// Pipeline per layer (pre-norm residual):
//   channel edits -> hidden capture -> attn norm -> q/k/v -> position
//   encoding -> masked softmax -> boosts -> attention capture -> output
//   projection -> residual add -> mlp norm -> mlp -> residual add
// Hidden captures therefore see applied channel edits, and attention
// captures record the weights actually used (post-boost, post-splice).
//
// Row recomputation under a ScalingSpec follows the combined-attention rule:
// the query of a designated row and all keys are re-projected from hidden
// states with the spec's channels scaled (position encoding applied after
// projection); values stay unscaled; the designated row's softmax runs over
// its full prefix with no mask term. Rows outside the scope are never
// touched, so their outputs stay bit-identical to the unmodified pass.

#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <utility>
#include <vector>

#include "poshid/common.hpp"
#include "poshid/model.hpp"
#include "poshid/scaling.hpp"

namespace poshid {

struct ChannelEdit {
    enum class Kind { add, scale };
    LayerRange layers;
    int token_begin = 0;
    int token_end = 0;  // exclusive
    int channel = 1;    // 1-based
    Kind kind = Kind::add;
    double amount = 0.0;
};

struct AttentionBoost {
    LayerRange layers;
    Segment segment;
    double factor = 1.0;
    bool renormalize = true;
};

// The predicate fully replaces the causal mask for the covered layers; a
// causal predicate must therefore re-impose col <= row itself (crop_mask
// does).
struct MaskOverride {
    LayerRange layers;
    std::function<bool(int row, int col)> allows;
    std::string description;
};

struct ForwardOverrides {
    std::optional<MaskOverride> mask_override;
    std::optional<std::vector<int>> position_ids;  // one id per token
    std::vector<ChannelEdit> channel_edits;
    std::vector<AttentionBoost> attention_boosts;
    std::set<int> capture_hidden;            // 1-based layers
    std::set<int> capture_attention_layers;  // 1-based layers
    std::set<int> capture_attention_heads;   // 1-based heads; empty = all
    std::optional<std::vector<std::vector<float>>> embedded_input;

    void validate(const ModelConfig& config, int seq_len) const {
        if (mask_override) {
            mask_override->layers.validate(config.n_layers, "mask override");
            require(static_cast<bool>(mask_override->allows), "mask override: empty predicate");
        }
        if (position_ids) {
            require(static_cast<int>(position_ids->size()) == seq_len,
                    "position id override: need one id per token");
            for (int id : *position_ids)
                require(id >= 0 && id < config.max_seq,
                        "position id override: id outside [0, max_seq)");
        }
        for (const auto& edit : channel_edits) {
            edit.layers.validate(config.n_layers, "channel edit");
            require(edit.channel >= 1 && edit.channel <= config.d_model,
                    "channel edit: channel outside [1, d_model]");
            require(edit.token_begin >= 0 && edit.token_end > edit.token_begin &&
                        edit.token_end <= seq_len,
                    "channel edit: token range invalid");
        }
        for (const auto& boost : attention_boosts) {
            boost.layers.validate(config.n_layers, "attention boost");
            boost.segment.validate(seq_len, "attention boost");
            require(boost.factor > 0.0, "attention boost: factor must be positive");
        }
        for (int layer : capture_hidden)
            require(layer >= 1 && layer <= config.n_layers, "capture_hidden: layer out of range");
        for (int layer : capture_attention_layers)
            require(layer >= 1 && layer <= config.n_layers,
                    "capture_attention: layer out of range");
        for (int head : capture_attention_heads)
            require(head >= 1 && head <= config.n_heads, "capture_attention: head out of range");
        if (embedded_input) {
            require(!embedded_input->empty(), "embedded input: empty sequence");
            for (const auto& row : *embedded_input)
                require(static_cast<int>(row.size()) == config.d_model,
                        "embedded input: row width must equal d_model");
        }
    }
};

// Post-softmax attention weights for the requested (layer, head) pairs,
// stored as row-major seq x seq matrices.
struct AttentionCapture {
    int seq_len = 0;
    std::map<std::pair<int, int>, std::vector<float>> weights;  // (layer, head) 1-based

    bool has(int layer, int head) const { return weights.count({layer, head}) > 0; }
    const std::vector<float>& at(int layer, int head) const {
        auto it = weights.find({layer, head});
        require(it != weights.end(), "attention capture: layer " + std::to_string(layer) +
                                         " head " + std::to_string(head) + " was not captured");
        return it->second;
    }
    float value(int layer, int head, int row, int col) const {
        return at(layer, head)[static_cast<size_t>(row) * seq_len + col];
    }
    double row_sum(int layer, int head, int row) const {
        const auto& w = at(layer, head);
        double acc = 0.0;
        for (int j = 0; j < seq_len; ++j) acc += w[static_cast<size_t>(row) * seq_len + j];
        return acc;
    }
};

struct ForwardResult {
    int seq_len = 0;
    int vocab_size = 0;
    std::vector<float> logits;                 // [seq][vocab]
    std::map<int, std::vector<float>> hidden;  // layer -> [seq][d_model] residual input
    AttentionCapture attention;

    const float* logits_row(int row) const {
        return logits.data() + static_cast<size_t>(row) * vocab_size;
    }
};

namespace detail {

constexpr float kNormEps = 1e-6f;

inline void rms_norm_row(const float* x, const float* gain, float* out, int d) {
    double mean_sq = 0.0;
    for (int i = 0; i < d; ++i) mean_sq += static_cast<double>(x[i]) * x[i];
    mean_sq = mean_sq / d + static_cast<double>(kNormEps);
    const float inv = static_cast<float>(1.0 / std::sqrt(mean_sq));
    for (int i = 0; i < d; ++i) out[i] = x[i] * inv * gain[i];
}

// y = W x with W row-major [out_dim][in_dim]
inline void matvec(const float* w, const float* x, float* y, int out_dim, int in_dim) {
    for (int o = 0; o < out_dim; ++o) {
        const float* row = w + static_cast<size_t>(o) * in_dim;
        float acc = 0.0f;
        for (int i = 0; i < in_dim; ++i) acc += row[i] * x[i];
        y[o] = acc;
    }
}

inline float dot(const float* a, const float* b, int n) {
    float acc = 0.0f;
    for (int i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

// ALiBi head slopes: geometric sequence for power-of-two head counts with the
// standard interleaved extension otherwise.
inline std::vector<double> alibi_slopes(int n_heads) {
    auto pow2_slopes = [](int n) {
        std::vector<double> s(static_cast<size_t>(n));
        const double start = std::pow(2.0, -8.0 / n);
        double cur = start;
        for (int i = 0; i < n; ++i, cur *= start) s[static_cast<size_t>(i)] = cur;
        return s;
    };
    if ((n_heads & (n_heads - 1)) == 0) return pow2_slopes(n_heads);
    int closest = 1;
    while (closest * 2 <= n_heads) closest *= 2;
    std::vector<double> slopes = pow2_slopes(closest);
    const std::vector<double> extra = pow2_slopes(closest * 2);
    for (size_t i = 0; slopes.size() < static_cast<size_t>(n_heads); i += 2)
        slopes.push_back(extra[i]);
    return slopes;
}

struct RopeTable {
    int half = 0;
    std::vector<float> cos_v, sin_v;  // [seq][half]

    void build(const ModelConfig& config, const std::vector<int>& pos_ids) {
        if (config.scheme != PositionScheme::rope) return;
        require(config.d_head % 2 == 0, "rope requires an even head dimension");
        half = config.d_head / 2;
        const int n = static_cast<int>(pos_ids.size());
        cos_v.resize(static_cast<size_t>(n) * half);
        sin_v.resize(static_cast<size_t>(n) * half);
        for (int p = 0; p < n; ++p) {
            for (int j = 0; j < half; ++j) {
                const double theta =
                    pos_ids[static_cast<size_t>(p)] *
                    std::pow(config.rope_base, -2.0 * j / static_cast<double>(config.d_head));
                cos_v[static_cast<size_t>(p) * half + j] = static_cast<float>(std::cos(theta));
                sin_v[static_cast<size_t>(p) * half + j] = static_cast<float>(std::sin(theta));
            }
        }
    }

    void apply(float* head_vec, int row) const {
        const float* c = cos_v.data() + static_cast<size_t>(row) * half;
        const float* s = sin_v.data() + static_cast<size_t>(row) * half;
        for (int j = 0; j < half; ++j) {
            const float a = head_vec[j];
            const float b = head_vec[j + half];
            head_vec[j] = a * c[j] - b * s[j];
            head_vec[j + half] = a * s[j] + b * c[j];
        }
    }
};

// State fixed for the duration of one forward call.
struct RunContext {
    const Model* model = nullptr;
    const ForwardOverrides* overrides = nullptr;
    int n = 0;
    std::vector<int> pos_ids;
    std::vector<double> slopes;  // alibi, per head
    RopeTable rope;

    const ModelConfig& config() const { return model->config; }

    bool allows(int layer, int row, int col) const {
        const auto& mo = overrides->mask_override;
        if (mo && mo->layers.contains(layer)) return mo->allows(row, col);
        return col <= row;
    }
};

// One attention row for one head: scores, masked softmax, boosts, value mix.
// `own_k` / `own_v`, when set, replace column `own_col` of the shared k/v
// buffers (used by private-stream rows).
struct RowAttention {
    std::vector<double> scores;
    std::vector<float> weights;

    void compute(const RunContext& ctx, int layer, int row, int cols, bool use_mask,
                 const float* q_row, const std::vector<float>& k, int h,
                 const float* own_k = nullptr, int own_col = -1) {
        const int dh = ctx.config().d_head;
        const int d = ctx.config().d_model;
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
        scores.assign(static_cast<size_t>(cols), 0.0);
        weights.assign(static_cast<size_t>(cols), 0.0f);
        const float* qh = q_row + static_cast<size_t>(h) * dh;
        double max_score = -1e300;
        bool any = false;
        for (int j = 0; j < cols; ++j) {
            if (use_mask && !ctx.allows(layer, row, j)) {
                scores[static_cast<size_t>(j)] = -1e300;
                continue;
            }
            const float* kh = (own_k && j == own_col)
                                  ? own_k + static_cast<size_t>(h) * dh
                                  : k.data() + static_cast<size_t>(j) * d + static_cast<size_t>(h) * dh;
            double s = static_cast<double>(dot(qh, kh, dh)) * inv_sqrt;
            if (ctx.config().scheme == PositionScheme::alibi)
                s -= ctx.slopes[static_cast<size_t>(h)] *
                     (ctx.pos_ids[static_cast<size_t>(row)] - ctx.pos_ids[static_cast<size_t>(j)]);
            scores[static_cast<size_t>(j)] = s;
            max_score = std::max(max_score, s);
            any = true;
        }
        require(any, "attention: mask override leaves row " + std::to_string(row) +
                         " with no visible column in layer " + std::to_string(layer));
        double denom = 0.0;
        for (int j = 0; j < cols; ++j) {
            if (scores[static_cast<size_t>(j)] <= -1e299) continue;
            denom += std::exp(scores[static_cast<size_t>(j)] - max_score);
        }
        for (int j = 0; j < cols; ++j) {
            if (scores[static_cast<size_t>(j)] <= -1e299) continue;
            weights[static_cast<size_t>(j)] =
                static_cast<float>(std::exp(scores[static_cast<size_t>(j)] - max_score) / denom);
        }
    }

    void apply_boosts(const RunContext& ctx, int layer) {
        for (const auto& boost : ctx.overrides->attention_boosts) {
            if (!boost.layers.contains(layer)) continue;
            double sum = 0.0;
            for (size_t j = 0; j < weights.size(); ++j) {
                if (boost.segment.contains(static_cast<int>(j)))
                    weights[j] = static_cast<float>(weights[j] * boost.factor);
                sum += weights[j];
            }
            if (boost.renormalize && sum > 0.0) {
                for (auto& w : weights) w = static_cast<float>(w / sum);
            }
        }
    }

    void mix_values(const std::vector<float>& v, int d, int h, int dh, float* z_out,
                    const float* own_v = nullptr, int own_col = -1) const {
        for (int t = 0; t < dh; ++t) z_out[t] = 0.0f;
        for (size_t j = 0; j < weights.size(); ++j) {
            const float w = weights[j];
            if (w == 0.0f) continue;
            const float* vh = (own_v && static_cast<int>(j) == own_col)
                                  ? own_v + static_cast<size_t>(h) * dh
                                  : v.data() + j * static_cast<size_t>(d) + static_cast<size_t>(h) * dh;
            for (int t = 0; t < dh; ++t) z_out[t] += w * vh[t];
        }
    }
};

// Scales the spec channels of one hidden row into `out` (width d).
inline void scale_channels_row(const float* x, const ScalingSpec& spec, float* out, int d) {
    for (int i = 0; i < d; ++i) out[i] = x[i];
    for (int t : spec.channels) out[t - 1] = static_cast<float>(out[t - 1] * spec.factor);
}

struct Engine {
    RunContext ctx;
    const ScalingSpec* spec = nullptr;
    bool incremental = false;       // spliced rows keep private streams
    std::vector<int> spliced_rows;  // incremental mode: rows to score

    std::vector<float> x;  // base residual stream [n][d]
    std::vector<std::vector<float>> mod_x;
    std::vector<bool> diverged;

    ForwardResult result;

    void run(const Model& model, const std::vector<int>& tokens, const ForwardOverrides& ov) {
        const ModelConfig& cfg = model.config;
        cfg.validate();
        const bool embedded = ov.embedded_input.has_value();
        const int n = embedded ? static_cast<int>(ov.embedded_input->size())
                               : static_cast<int>(tokens.size());
        require(n >= 1, "forward: empty input");
        require(n <= cfg.max_seq, "forward: sequence longer than max_seq");
        ov.validate(cfg, n);
        if (!embedded)
            for (int id : tokens)
                require(id >= 0 && id < cfg.vocab_size, "forward: token id out of range");
        if (spec) spec->validate(cfg);
        for (int r : spliced_rows) require(r >= 0 && r < n, "score_rows: row out of range");

        ctx.model = &model;
        ctx.overrides = &ov;
        ctx.n = n;
        ctx.pos_ids.resize(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) ctx.pos_ids[static_cast<size_t>(i)] = i;
        if (ov.position_ids) ctx.pos_ids = *ov.position_ids;
        if (cfg.scheme == PositionScheme::alibi) ctx.slopes = alibi_slopes(cfg.n_heads);
        if (cfg.scheme == PositionScheme::rope) ctx.rope.build(cfg, ctx.pos_ids);

        const int d = cfg.d_model;
        x.assign(static_cast<size_t>(n) * d, 0.0f);
        if (embedded) {
            for (int i = 0; i < n; ++i)
                for (int c = 0; c < d; ++c)
                    x[static_cast<size_t>(i) * d + c] =
                        (*ov.embedded_input)[static_cast<size_t>(i)][static_cast<size_t>(c)];
        } else {
            for (int i = 0; i < n; ++i) {
                const float* e = model.embedding.data() +
                                 static_cast<size_t>(tokens[static_cast<size_t>(i)]) * d;
                std::copy(e, e + d, x.begin() + static_cast<size_t>(i) * d);
            }
        }

        if (incremental) {
            mod_x.assign(spliced_rows.size(), {});
            diverged.assign(spliced_rows.size(), false);
        }

        result.seq_len = n;
        result.vocab_size = cfg.vocab_size;
        for (int layer = 1; layer <= cfg.n_layers; ++layer) run_layer(layer);
        finish_logits();
    }

  private:
    const LayerWeights& weights(int layer) const {
        return ctx.model->layers[static_cast<size_t>(layer - 1)];
    }

    void apply_channel_edits(int layer) {
        const int d = ctx.config().d_model;
        for (const auto& edit : ctx.overrides->channel_edits) {
            if (!edit.layers.contains(layer)) continue;
            for (int tok = edit.token_begin; tok < edit.token_end; ++tok) {
                float& cell = x[static_cast<size_t>(tok) * d + (edit.channel - 1)];
                cell = edit.kind == ChannelEdit::Kind::add
                           ? static_cast<float>(cell + edit.amount)
                           : static_cast<float>(cell * edit.amount);
                for (size_t ri = 0; ri < spliced_rows.size(); ++ri) {
                    if (!incremental || !diverged[ri] || spliced_rows[ri] != tok) continue;
                    float& mc = mod_x[ri][static_cast<size_t>(edit.channel - 1)];
                    mc = edit.kind == ChannelEdit::Kind::add
                             ? static_cast<float>(mc + edit.amount)
                             : static_cast<float>(mc * edit.amount);
                }
            }
        }
    }

    void capture_hidden(int layer) {
        if (!ctx.overrides->capture_hidden.count(layer)) return;
        result.hidden[layer] = x;  // residual input of this layer, post-edit
    }

    bool head_captured(int layer, int head) const {
        const auto& ov = *ctx.overrides;
        if (!ov.capture_attention_layers.count(layer)) return false;
        return ov.capture_attention_heads.empty() || ov.capture_attention_heads.count(head) > 0;
    }

    std::vector<float>& capture_slot(int layer, int head) {
        auto key = std::make_pair(layer, head);
        auto it = result.attention.weights.find(key);
        if (it == result.attention.weights.end()) {
            it = result.attention.weights
                     .emplace(key, std::vector<float>(static_cast<size_t>(ctx.n) * ctx.n, 0.0f))
                     .first;
        }
        return it->second;
    }

    void rope_all_heads(float* vec, int row) const {
        if (ctx.config().scheme != PositionScheme::rope) return;
        const int dh = ctx.config().d_head;
        for (int h = 0; h < ctx.config().n_heads; ++h)
            ctx.rope.apply(vec + static_cast<size_t>(h) * dh, row);
    }

    // Attention output (after W^O) for one row against prepared k/v buffers.
    void attend_row(int layer, int row, int cols, bool use_mask, const float* q_row,
                    const std::vector<float>& k, const std::vector<float>& v, float* out,
                    bool record_capture, const float* own_k = nullptr,
                    const float* own_v = nullptr, int own_col = -1) {
        const ModelConfig& cfg = ctx.config();
        const int d = cfg.d_model;
        const int dh = cfg.d_head;
        std::vector<float> z(static_cast<size_t>(d), 0.0f);
        RowAttention attn;
        for (int h = 0; h < cfg.n_heads; ++h) {
            attn.compute(ctx, layer, row, cols, use_mask, q_row, k, h, own_k, own_col);
            attn.apply_boosts(ctx, layer);
            if (record_capture && head_captured(layer, h + 1)) {
                std::vector<float>& slot = capture_slot(layer, h + 1);
                float* dst = slot.data() + static_cast<size_t>(row) * ctx.n;
                for (int j = 0; j < ctx.n; ++j) dst[j] = 0.0f;
                for (int j = 0; j < cols; ++j) dst[j] = attn.weights[static_cast<size_t>(j)];
            }
            attn.mix_values(v, d, h, dh, z.data() + static_cast<size_t>(h) * dh, own_v, own_col);
        }
        matvec(weights(layer).wo.data(), z.data(), out, d, d);
    }

    void mlp_row(const LayerWeights& lw, const float* row_in, float* add_out) const {
        const ModelConfig& cfg = ctx.config();
        const int d = cfg.d_model;
        const int ff = cfg.d_ff;
        std::vector<float> normed(static_cast<size_t>(d));
        rms_norm_row(row_in, lw.mlp_norm_gain.data(), normed.data(), d);
        std::vector<float> hidden(static_cast<size_t>(ff));
        matvec(lw.w_in.data(), normed.data(), hidden.data(), ff, d);
        for (int i = 0; i < ff; ++i) {
            const float h = hidden[static_cast<size_t>(i)];
            hidden[static_cast<size_t>(i)] = h / (1.0f + std::exp(-h));  // silu
        }
        matvec(lw.w_out.data(), hidden.data(), add_out, d, ff);
    }

    bool layer_in_spec(int layer) const { return spec && spec->layers.contains(layer); }

    std::vector<int> plain_spliced_rows() const {
        switch (spec->scope) {
            case TokenScope::last_token: return {ctx.n - 1};
            case TokenScope::last_k: {
                std::vector<int> rows;
                for (int r = std::max(0, ctx.n - spec->last_k); r < ctx.n; ++r) rows.push_back(r);
                return rows;
            }
            case TokenScope::all_tokens: {
                std::vector<int> rows(static_cast<size_t>(ctx.n));
                for (int r = 0; r < ctx.n; ++r) rows[static_cast<size_t>(r)] = r;
                return rows;
            }
        }
        return {};
    }

    // Scaled-and-normalized projection of one hidden row: fills k (and
    // optionally q) re-encoded at position `row`.
    void project_scaled(const LayerWeights& lw, const float* hidden_row, int row, float* k_out,
                        float* q_out) const {
        const int d = ctx.config().d_model;
        std::vector<float> scaled(static_cast<size_t>(d));
        std::vector<float> normed(static_cast<size_t>(d));
        scale_channels_row(hidden_row, *spec, scaled.data(), d);
        rms_norm_row(scaled.data(), lw.attn_norm_gain.data(), normed.data(), d);
        matvec(lw.wk.data(), normed.data(), k_out, d, d);
        rope_all_heads(k_out, row);
        if (q_out) {
            matvec(lw.wq.data(), normed.data(), q_out, d, d);
            rope_all_heads(q_out, row);
        }
    }

    void run_layer(int layer) {
        const ModelConfig& cfg = ctx.config();
        const int n = ctx.n;
        const int d = cfg.d_model;
        const LayerWeights& lw = weights(layer);

        apply_channel_edits(layer);
        capture_hidden(layer);

        std::vector<float> normed(static_cast<size_t>(n) * d);
        std::vector<float> q(static_cast<size_t>(n) * d);
        std::vector<float> k(static_cast<size_t>(n) * d);
        std::vector<float> v(static_cast<size_t>(n) * d);
        for (int i = 0; i < n; ++i) {
            const size_t off = static_cast<size_t>(i) * d;
            rms_norm_row(x.data() + off, lw.attn_norm_gain.data(), normed.data() + off, d);
            matvec(lw.wq.data(), normed.data() + off, q.data() + off, d, d);
            matvec(lw.wk.data(), normed.data() + off, k.data() + off, d, d);
            matvec(lw.wv.data(), normed.data() + off, v.data() + off, d, d);
            rope_all_heads(q.data() + off, i);
            rope_all_heads(k.data() + off, i);
        }

        std::vector<float> attn_out(static_cast<size_t>(n) * d);
        for (int i = 0; i < n; ++i)
            attend_row(layer, i, i + 1, /*use_mask=*/true, q.data() + static_cast<size_t>(i) * d,
                       k, v, attn_out.data() + static_cast<size_t>(i) * d,
                       /*record_capture=*/true);

        // shared scaled keys for every column, built once per layer in band
        std::vector<float> scaled_k;
        if (spec && layer_in_spec(layer)) {
            scaled_k.resize(static_cast<size_t>(n) * d);
            for (int j = 0; j < n; ++j)
                project_scaled(lw, x.data() + static_cast<size_t>(j) * d, j,
                               scaled_k.data() + static_cast<size_t>(j) * d, nullptr);
        }

        if (spec && !incremental && layer_in_spec(layer)) {
            std::vector<float> qbar(static_cast<size_t>(d));
            std::vector<float> k_own(static_cast<size_t>(d));
            for (int r : plain_spliced_rows()) {
                // the shared buffer already reflects this row's stream entry
                project_scaled(lw, x.data() + static_cast<size_t>(r) * d, r, k_own.data(),
                               qbar.data());
                attend_row(layer, r, r + 1, /*use_mask=*/false, qbar.data(), scaled_k, v,
                           attn_out.data() + static_cast<size_t>(r) * d,
                           /*record_capture=*/true);
            }
        }

        if (incremental) run_incremental_rows(layer, k, v, scaled_k);

        std::vector<float> mlp_add(static_cast<size_t>(d));
        for (int i = 0; i < n; ++i) {
            const size_t off = static_cast<size_t>(i) * d;
            for (int c = 0; c < d; ++c) x[off + c] += attn_out[off + c];
            mlp_row(lw, x.data() + off, mlp_add.data());
            for (int c = 0; c < d; ++c) x[off + c] += mlp_add[static_cast<size_t>(c)];
        }
    }

    // Incremental-equivalent scoring: each spliced row r behaves exactly as
    // if the model had been run on the prefix 0..r with r as the final
    // token. The base stream is never modified; each row's private stream
    // diverges at the first layer of the spec band.
    void run_incremental_rows(int layer, const std::vector<float>& k, const std::vector<float>& v,
                              const std::vector<float>& scaled_k) {
        const ModelConfig& cfg = ctx.config();
        const int d = cfg.d_model;
        const LayerWeights& lw = weights(layer);
        const bool in_band = layer_in_spec(layer);

        std::vector<float> row_attn(static_cast<size_t>(d));
        std::vector<float> mlp_add(static_cast<size_t>(d));
        std::vector<float> qbar(static_cast<size_t>(d));
        std::vector<float> k_own(static_cast<size_t>(d));
        std::vector<float> v_own(static_cast<size_t>(d));
        std::vector<float> own_norm(static_cast<size_t>(d));

        for (size_t ri = 0; ri < spliced_rows.size(); ++ri) {
            const int r = spliced_rows[ri];
            if (!diverged[ri]) {
                if (!in_band) continue;  // still identical to the base row
                mod_x[ri].assign(x.begin() + static_cast<size_t>(r) * d,
                                 x.begin() + static_cast<size_t>(r + 1) * d);
                diverged[ri] = true;
            }
            const float* own = mod_x[ri].data();

            if (in_band) {
                // scaled query/own-key from the private stream; own value
                // (column r) from the private stream, unscaled
                project_scaled(lw, own, r, k_own.data(), qbar.data());
                rms_norm_row(own, lw.attn_norm_gain.data(), own_norm.data(), d);
                matvec(lw.wv.data(), own_norm.data(), v_own.data(), d, d);
                attend_row(layer, r, r + 1, /*use_mask=*/false, qbar.data(), scaled_k, v,
                           row_attn.data(), /*record_capture=*/false, k_own.data(), v_own.data(),
                           r);
            } else {
                rms_norm_row(own, lw.attn_norm_gain.data(), own_norm.data(), d);
                matvec(lw.wq.data(), own_norm.data(), qbar.data(), d, d);
                rope_all_heads(qbar.data(), r);
                matvec(lw.wk.data(), own_norm.data(), k_own.data(), d, d);
                rope_all_heads(k_own.data(), r);
                matvec(lw.wv.data(), own_norm.data(), v_own.data(), d, d);
                attend_row(layer, r, r + 1, /*use_mask=*/true, qbar.data(), k, v, row_attn.data(),
                           /*record_capture=*/false, k_own.data(), v_own.data(), r);
            }
            for (int c = 0; c < d; ++c) mod_x[ri][static_cast<size_t>(c)] += row_attn[static_cast<size_t>(c)];
            mlp_row(lw, mod_x[ri].data(), mlp_add.data());
            for (int c = 0; c < d; ++c) mod_x[ri][static_cast<size_t>(c)] += mlp_add[static_cast<size_t>(c)];
        }
    }

    void finish_logits() {
        const ModelConfig& cfg = ctx.config();
        const int n = ctx.n;
        const int d = cfg.d_model;
        const int vocab = cfg.vocab_size;
        result.logits.assign(static_cast<size_t>(n) * vocab, 0.0f);
        std::vector<float> normed(static_cast<size_t>(d));
        for (int i = 0; i < n; ++i) {
            const float* row = x.data() + static_cast<size_t>(i) * d;
            if (incremental) {
                for (size_t ri = 0; ri < spliced_rows.size(); ++ri)
                    if (spliced_rows[ri] == i && diverged[ri]) row = mod_x[ri].data();
            }
            rms_norm_row(row, ctx.model->final_norm_gain.data(), normed.data(), d);
            matvec(ctx.model->unembed.data(), normed.data(),
                   result.logits.data() + static_cast<size_t>(i) * vocab, vocab, d);
        }
    }
};

}  // namespace detail

inline ForwardResult forward(const Model& model, const std::vector<int>& tokens,
                             const ForwardOverrides& overrides = {}) {
    detail::Engine engine;
    engine.run(model, tokens, overrides);
    return std::move(engine.result);
}

// Forward pass with spliced attention rows per the spec's token scope.
inline ForwardResult forward_scaled(const Model& model, const ScalingSpec& spec,
                                    const std::vector<int>& tokens,
                                    const ForwardOverrides& overrides = {}) {
    detail::Engine engine;
    engine.spec = &spec;
    engine.run(model, tokens, overrides);
    return std::move(engine.result);
}

// Logits for each requested row scored as if that row were the final token
// of its prefix (greedy-decoding semantics, step by step). With a spec the
// scope must be last_token; one pass then reproduces per-prefix forwards
// exactly via private row streams. Without a spec this is a plain forward
// read at the requested rows.
inline std::map<int, std::vector<float>> score_rows(const Model& model,
                                                    const std::vector<int>& tokens,
                                                    const std::vector<int>& rows,
                                                    const ScalingSpec* spec = nullptr,
                                                    const ForwardOverrides& overrides = {}) {
    std::map<int, std::vector<float>> out;
    if (spec) {
        require(spec->scope == TokenScope::last_token,
                "score_rows: incremental scoring is defined for last_token scope");
        detail::Engine engine;
        engine.spec = spec;
        engine.incremental = true;
        engine.spliced_rows = rows;
        engine.run(model, tokens, overrides);
        const int vocab = model.config.vocab_size;
        for (int r : rows) {
            const float* lr = engine.result.logits.data() + static_cast<size_t>(r) * vocab;
            out[r] = std::vector<float>(lr, lr + vocab);
        }
        return out;
    }
    const ForwardResult res = forward(model, tokens, overrides);
    const int vocab = model.config.vocab_size;
    for (int r : rows) {
        require(r >= 0 && r < res.seq_len, "score_rows: row out of range");
        const float* lr = res.logits.data() + static_cast<size_t>(r) * vocab;
        out[r] = std::vector<float>(lr, lr + vocab);
    }
    return out;
}

// Immutable view of a model with a scaling spec attached; forwards through
// the spliced attention path. The underlying model is not copied.
struct ScaledModel {
    const Model* base = nullptr;
    ScalingSpec spec;

    const ModelConfig& config() const { return base->config; }

    ForwardResult forward(const std::vector<int>& tokens,
                          const ForwardOverrides& overrides = {}) const {
        return forward_scaled(*base, spec, tokens, overrides);
    }

    std::map<int, std::vector<float>> score(const std::vector<int>& tokens,
                                            const std::vector<int>& rows) const {
        return score_rows(*base, tokens, rows, &spec);
    }
};

inline ScaledModel apply_spec(const Model& model, const ScalingSpec& spec) {
    spec.validate(model.config);
    if (spec.touches_fragile_layers(model.config))
        std::fprintf(stderr,
                     "poshid: warning: scaling layers [%d,%d] touch the first two or final "
                     "layer; outputs may be unstable\n",
                     spec.layers.lo, spec.layers.hi);
    return ScaledModel{&model, spec};
}

}  // namespace poshid
