#pragma once

// One memory-augmented step per segment: extract hidden states with the frozen
// backbone, read from memory, inject the decoded read through a gated residual,
// score with the frozen LM head, then write the segment's original encoding
// back into memory. Episodes fold the step over segments; the memory state is
// the only thing that crosses a segment boundary.

#include <algorithm>
#include <optional>
#include <span>
#include <vector>

#include "gmem/backbone.hpp"
#include "gmem/memory_bank.hpp"

namespace gmem {

struct LoopOptions {
    UpdateRule rule = UpdateRule::gated;
    bool inject = true;           // false: injection gate forced closed
    std::size_t bptt_window = 0;  // 0: backprop through every segment

    static LoopOptions vanilla() { return {UpdateRule::frozen, false, 0}; }
};

struct GateStats {
    double mean = 0.0;
    double min = 0.0;
    double max = 0.0;

    static GateStats of(const Tensor& g) {
        GateStats s{0.0, g[0], g[0]};
        for (double v : g.values()) {
            s.mean += v;
            s.min = std::min(s.min, v);
            s.max = std::max(s.max, v);
        }
        s.mean /= static_cast<double>(g.size());
        return s;
    }
};

/// Gated residual injection: H_enh = H + sigmoid([H;D(R)]·W_i + b_i) ⊙ ([H;D(R)]·W_f + b_f).
class Injection {
public:
    Injection(std::size_t hidden_dim, std::uint64_t seed) {
        const std::size_t d = hidden_dim;
        Rng rng(seed);
        fuse_w_ = Parameter("inject.fuse.w", random_normal({2 * d, d}, 0.5 / std::sqrt(2.0 * double(d)), rng));
        fuse_b_ = Parameter("inject.fuse.b", Tensor({d}));
        gate_w_ = Parameter("inject.gate.w", random_normal({2 * d, d}, 0.5 / std::sqrt(2.0 * double(d)), rng));
        gate_b_ = Parameter("inject.gate.b", Tensor({d}));
    }

    struct Output {
        Var enhanced;
        Var gate;
    };

    Output apply(Tape& t, Var hidden, Var decoded) {
        Var cat = ad::concat_cols(hidden, decoded);
        Var fused = ad::add_row(ad::matmul(cat, t.param(fuse_w_)), t.param(fuse_b_));
        Var gate = ad::sigmoid(ad::add_row(ad::matmul(cat, t.param(gate_w_)), t.param(gate_b_)));
        return {ad::add(hidden, ad::mul(gate, fused)), gate};
    }

    ParamRefs parameters() { return {&fuse_w_, &fuse_b_, &gate_w_, &gate_b_}; }

    Parameter& gate_bias() noexcept { return gate_b_; }

private:
    Parameter fuse_w_, fuse_b_, gate_w_, gate_b_;
};

/// Everything one step recorded on the tape.
struct StepTrace {
    Var logits;                   // [T×V]
    Var memory;                   // M_new
    Var scores;                   // s as [1×S]
    Var update_gate;              // g [S×D_m]
    Var retrieval_attention;      // [T×S]
    Var consolidation_attention;  // [S×T]
    Var attended;                 // M_attended
};

struct EpisodeTrace {
    std::vector<StepTrace> steps;
    Var final_memory;
};

struct StepOutput {
    Tensor logits;
    Tensor memory;
    SlotScores scores;
    GateStats gate_stats;
    Tensor retrieval_attention;
};

struct EpisodeOutput {
    std::vector<Tensor> logits;
    Tensor final_memory;
    std::vector<SlotScores> scores;
};

struct ModelConfig {
    BackboneConfig backbone;
    MemoryConfig memory;
    double max_param_ratio = 0.0;  // > 0: reject memory modules larger than this fraction of the backbone
};

/// Frozen backbone + trainable memory bank + injection layer.
class GMemModel {
public:
    explicit GMemModel(const ModelConfig& cfg)
        : backbone_(cfg.backbone),
          memory_(cfg.memory, cfg.backbone.hidden_dim),
          injection_(cfg.backbone.hidden_dim, derive_seed(cfg.memory.seed, 1)) {
        check_ratio(cfg.max_param_ratio);
    }

    GMemModel(Backbone backbone, const MemoryConfig& mem, double max_param_ratio = 0.0)
        : backbone_(std::move(backbone)),
          memory_(mem, backbone_.hidden_dim()),
          injection_(backbone_.hidden_dim(), derive_seed(mem.seed, 1)) {
        check_ratio(max_param_ratio);
    }

    Backbone& backbone() noexcept { return backbone_; }
    const Backbone& backbone() const noexcept { return backbone_; }
    MemoryBank& memory() noexcept { return memory_; }
    Injection& injection() noexcept { return injection_; }

    /// All trainable parameters (memory bank then injection), fixed order.
    ParamRefs trainable_parameters() {
        ParamRefs out = memory_.parameters();
        for (Parameter* p : injection_.parameters()) out.push_back(p);
        return out;
    }

    std::size_t trainable_parameter_count() {
        std::size_t n = 0;
        for (Parameter* p : trainable_parameters()) n += p->value.size();
        return n;
    }

    /// Memory-module parameters as a fraction of backbone parameters.
    double parameter_ratio() {
        return static_cast<double>(trainable_parameter_count()) / static_cast<double>(backbone_.parameter_count());
    }

    void check_ratio(double limit) {
        if (limit > 0.0 && parameter_ratio() >= limit) {
            throw ConfigError("memory module has " + std::to_string(trainable_parameter_count()) + " parameters, " +
                              std::to_string(100.0 * parameter_ratio()) + "% of the backbone (limit " +
                              std::to_string(100.0 * limit) + "%)");
        }
    }

    /// One segment. `hidden` is the backbone's output for `tokens`.
    StepTrace step(Tape& t, const Tensor& hidden, Var memory, const LoopOptions& opt = {}) {
        Var h = t.constant(hidden);
        Var encoded = memory_.encode(t, h);
        Retrieval read = memory_.retrieve(t, memory, encoded);
        Var enhanced = h;
        if (opt.inject) enhanced = injection_.apply(t, h, memory_.decode(t, read.read)).enhanced;
        Var logits = backbone_.lm_head(t, enhanced);
        Consolidation write = memory_.consolidate(t, memory, encoded, opt.rule);
        return {logits,         write.memory,    MemoryBank::importance_scores(read.logits), write.gate,
                read.attention, write.attention, write.attended};
    }

    StepTrace step(Tape& t, std::span<const TokenId> tokens, Var memory, const LoopOptions& opt = {}) {
        return step(t, backbone_.extract_hidden_states(tokens), memory, opt);
    }

    /// Folds `step` over the segments starting from the learned initial slots.
    /// `hidden`, when given, holds precomputed backbone states per segment.
    EpisodeTrace run_episode(Tape& t, std::span<const Segment> segments, const LoopOptions& opt = {},
                             const std::vector<Tensor>* hidden = nullptr) {
        if (segments.empty()) throw InputError("run_episode: episode has no segments");
        if (hidden && hidden->size() != segments.size()) throw InputError("run_episode: hidden cache size mismatch");
        EpisodeTrace out;
        Var mem = memory_.initial_state(t);
        for (std::size_t k = 0; k < segments.size(); ++k) {
            if (opt.bptt_window > 0 && k > 0 && k % opt.bptt_window == 0) mem = t.detach(mem);
            StepTrace s = hidden ? step(t, (*hidden)[k], mem, opt) : step(t, segments[k], mem, opt);
            mem = s.memory;
            out.steps.push_back(s);
        }
        out.final_memory = mem;
        return out;
    }

    StepOutput step(std::span<const TokenId> tokens, const Tensor& memory, const LoopOptions& opt = {}) {
        Tape t(false);
        StepTrace s = step(t, tokens, t.constant(memory), opt);
        return {s.logits.value(), s.memory.value(), MemoryBank::scores_from(s.scores.value()),
                GateStats::of(s.update_gate.value()), s.retrieval_attention.value()};
    }

    EpisodeOutput run_episode(std::span<const Segment> segments, const LoopOptions& opt = {},
                              const std::vector<Tensor>* hidden = nullptr) {
        Tape t(false);
        EpisodeTrace tr = run_episode(t, segments, opt, hidden);
        EpisodeOutput out;
        for (const auto& s : tr.steps) {
            out.logits.push_back(s.logits.value());
            out.scores.push_back(MemoryBank::scores_from(s.scores.value()));
        }
        out.final_memory = tr.final_memory.value();
        return out;
    }

    std::vector<Tensor> hidden_states(std::span<const Segment> segments) const {
        std::vector<Tensor> out;
        out.reserve(segments.size());
        for (const auto& s : segments) out.push_back(backbone_.extract_hidden_states(s));
        return out;
    }

private:
    Backbone backbone_;
    MemoryBank memory_;
    Injection injection_;
};

}  // namespace gmem
