#pragma once

// Drivers shared by the command-line tool and the acceptance suite: building
// a (possibly pretrained) backbone, train-then-evaluate runs, the slot-count
// ablation and the full-model gradient check.

#include <algorithm>
#include <chrono>
#include <random>
#include <string>
#include <vector>

#include "gmem/config.hpp"
#include "gmem/evaluate.hpp"
#include "gmem/gradcheck.hpp"
#include "gmem/pretrain.hpp"

namespace gmem {

/// The configured backbone, pretrained first when pretrain_steps > 0.
inline Backbone build_backbone(const RunConfig& cfg) {
    Backbone bb(cfg.model.backbone);
    pretrain_backbone(bb, cfg.pretrain, cfg.task);
    return bb;
}

inline DatasetSplits build_data(const RunConfig& cfg) { return generate_task(cfg.task); }

struct RunResult {
    EvalReport report;
    std::vector<MetricsRow> log;
    double train_seconds = 0.0;
    std::size_t param_count = 0;
};

/// Trains a fresh memory module on `backbone` and evaluates it on `test` with
/// the configured update rule.
inline RunResult train_and_evaluate(const RunConfig& cfg, const Backbone& backbone, const Dataset& train, const Dataset& test) {
    GMemModel model(backbone, cfg.model.memory, cfg.model.max_param_ratio);
    RunResult r;
    r.param_count = model.trainable_parameter_count();
    const auto t0 = std::chrono::steady_clock::now();
    Trainer trainer(model, train, cfg.train);
    r.log = trainer.run();
    r.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r.report = evaluate(model, test, cfg.train.loop);
    return r;
}

struct AblationRow {
    std::size_t slots = 0;
    double em = 0.0;
    double f1 = 0.0;
    double train_seconds = 0.0;
    std::size_t param_count = 0;
    std::vector<double> em_per_seed;
};

inline constexpr const char* kAblationHeader = "slots,em,f1,train_seconds,param_count";

inline std::string format_ablation(const AblationRow& r) {
    std::ostringstream os;
    os.precision(17);
    os << r.slots << ',' << r.em << ',' << r.f1 << ',';
    os.precision(6);
    os << r.train_seconds << ',' << r.param_count;
    return os.str();
}

/// One model per (S, seed); seed i offsets memory_seed and shuffle_seed by i,
/// identically for every S. Rows come back sorted by S.
inline std::vector<AblationRow> ablate_slots(const RunConfig& cfg, const Backbone& backbone, const DatasetSplits& data,
                                             std::vector<std::size_t> slots, std::size_t seeds,
                                             const std::function<void(const AblationRow&)>& on_row = {}) {
    if (slots.empty()) throw ConfigError("ablation needs at least one slot count");
    if (seeds == 0) throw ConfigError("ablation needs at least one seed");
    std::sort(slots.begin(), slots.end());
    slots.erase(std::unique(slots.begin(), slots.end()), slots.end());
    std::vector<AblationRow> rows;
    for (std::size_t s : slots) {
        AblationRow row;
        row.slots = s;
        for (std::size_t i = 0; i < seeds; ++i) {
            RunConfig c = cfg;
            c.model.memory.slots = s;
            c.model.memory.seed = cfg.model.memory.seed + i;
            c.train.shuffle_seed = cfg.train.shuffle_seed + i;
            RunResult r = train_and_evaluate(c, backbone, data.train, data.test);
            row.em_per_seed.push_back(r.report.exact_match);
            row.em += r.report.exact_match / static_cast<double>(seeds);
            row.f1 += r.report.token_f1 / static_cast<double>(seeds);
            row.train_seconds += r.train_seconds / static_cast<double>(seeds);
            row.param_count = r.param_count;
        }
        if (on_row) on_row(row);
        rows.push_back(std::move(row));
    }
    return rows;
}

/// The smallest configuration used for finite-difference checks.
inline RunConfig gradcheck_config() {
    RunConfig c;
    c.model.backbone.vocab_size = c.task.vocab_size = 16;
    c.model.backbone.hidden_dim = 16;
    c.model.backbone.max_segment_len = c.task.max_segment_len = 8;
    c.model.memory.slots = 4;
    c.model.memory.memory_dim = 8;
    c.task.entities = 4;
    c.task.relations = 2;
    c.task.hops = 1;
    c.task.distractors = 1;
    c.train.supervision = Supervision::lm;
    c.train.weights = {0.1, 0.1};
    return c;
}

struct GradCheckReport {
    std::vector<GradCheckRow> rows;
    bool pass = true;
};

/// Analytic gradients of the total loss on one random two-segment episode
/// against central differences, per trainable tensor. `corrupt` names a
/// tensor whose analytic gradient is deliberately scaled by 1.01.
inline GradCheckReport run_gradcheck(const RunConfig& cfg, const std::string& corrupt = {}, double eps = 1e-5,
                                     double rel_tol = 1e-4, double abs_floor = 1e-7) {
    GMemModel model(cfg.model);
    Rng rng(derive_seed(cfg.task.seed, 0x6763));
    std::uniform_int_distribution<TokenId> tok(0, static_cast<TokenId>(cfg.model.backbone.vocab_size - 1));
    SyntheticExample ex;
    for (int s = 0; s < 2; ++s) {
        Segment seg(cfg.model.backbone.max_segment_len);
        for (auto& t : seg) t = tok(rng);
        ex.segments.push_back(std::move(seg));
    }
    ex.answer_positions = {ex.segments.back().size() - 1};
    ex.answer_tokens = {ex.segments.back().back()};

    const ParamRefs params = model.trainable_parameters();
    if (!corrupt.empty() &&
        std::none_of(params.begin(), params.end(), [&](const Parameter* p) { return p->name == corrupt; })) {
        throw ConfigError("no trainable tensor named '" + corrupt + "'");
    }
    for (Parameter* p : params) p->zero_grad();
    {
        Tape t;
        EpisodeObjective o = episode_objective(model, t, ex, nullptr, cfg.train);
        t.backward(o.total);
    }
    auto objective = [&] {
        Tape t(false);
        return episode_objective(model, t, ex, nullptr, cfg.train).total.value().item();
    };
    const std::vector<Tensor> numeric = finite_difference_grad(objective, params, eps);

    GradCheckReport report;
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor analytic = params[k]->grad;
        if (params[k]->name == corrupt) analytic = kernel::scale(analytic, 1.01);
        report.rows.push_back(compare_gradient(params[k]->name, analytic, numeric[k], rel_tol, abs_floor));
        report.pass = report.pass && report.rows.back().pass;
    }
    return report;
}

}  // namespace gmem
