#pragma once

// Optional short pretraining of the backbone before it is frozen. Segments are
// drawn from the task's own token distribution (fact segments, random tokens,
// bare query segments) and the memory is not involved. Two objectives are
// summed:
//   - next-token loss at the answer position of bare query segments, so the
//     memory-free model guesses among entities instead of emitting reserved
//     tokens;
//   - lag reconstruction: temporary linear heads recover token t−k from the
//     final state at t (k < lags), giving every state a readable summary of
//     its local context. The heads are discarded afterwards.

#include <algorithm>
#include <cmath>
#include <vector>

#include "gmem/backbone.hpp"
#include "gmem/losses.hpp"
#include "gmem/optimizer.hpp"
#include "gmem/tasks.hpp"

namespace gmem {

struct PretrainConfig {
    std::size_t steps = 1000;  // 0 keeps the random initialisation
    std::size_t batch_size = 16;
    double lr = 3e-3;
    std::size_t lags = 3;
    double query_fraction = 0.25;  // share of bare query segments
    std::uint64_t seed = 5;
};

struct PretrainSample {
    Segment tokens;
    std::vector<std::size_t> answers;  // positions whose token is a next-token target
};

/// As many facts over fresh entities as fit, like a full distractor segment.
inline PretrainSample fact_segment(const TaskConfig& task, std::size_t max_len, Rng& rng) {
    const std::size_t k = std::max<std::size_t>(1, std::min<std::size_t>((max_len - 1) / 3, task.entities / 2));
    std::uniform_int_distribution<std::size_t> rel(0, task.relations - 1);
    std::set<TokenId> used;
    PretrainSample s;
    for (std::size_t i = 0; i < k; ++i) {
        auto pair = detail::draw_entities(task, rng, 2, used);
        detail::append_fact(s.tokens, {pair[0], task.relation(rel(rng)), pair[1]});
    }
    s.tokens.push_back(tok::sep);
    return s;
}

/// Tokens drawn uniformly from the whole vocabulary.
inline PretrainSample random_segment(const TaskConfig& task, std::size_t max_len, Rng& rng) {
    std::uniform_int_distribution<std::size_t> len(1, max_len);
    std::uniform_int_distribution<TokenId> tok(0, static_cast<TokenId>(task.vocab_size - 1));
    PretrainSample s;
    s.tokens.resize(len(rng));
    for (auto& t : s.tokens) t = tok(rng);
    return s;
}

struct PretrainReport {
    double answer_loss = 0.0;  // means over the last 10% of steps
    double lag_loss = 0.0;
};

inline PretrainReport pretrain_backbone(Backbone& backbone, const PretrainConfig& cfg, const TaskConfig& task) {
    PretrainReport report;
    if (cfg.steps == 0) return report;
    task.validate();
    if (task.vocab_size != backbone.vocab_size()) throw ConfigError("pretraining task vocabulary differs from the backbone's");
    if (cfg.batch_size == 0) throw ConfigError("pretraining batch_size must be positive");
    const std::size_t max_len = backbone.config().max_segment_len;
    TaskConfig qcfg = task;
    qcfg.train_examples = std::max<std::size_t>(256, cfg.steps);
    qcfg.test_examples = 0;
    qcfg.seed = derive_seed(cfg.seed, 17);
    const Dataset queries = generate_task(qcfg).train;

    Rng rng(cfg.seed);
    const std::size_t d = backbone.hidden_dim(), v = backbone.vocab_size();
    std::vector<Parameter> heads;
    for (std::size_t k = 0; k < cfg.lags; ++k) {
        heads.emplace_back("pretrain.lag" + std::to_string(k), random_normal({d, v}, 1.0 / std::sqrt(double(d)), rng));
    }
    backbone.set_trainable(true);
    ParamRefs params = backbone.parameters();
    for (auto& h : heads) params.push_back(&h);
    Adam adam(params, {cfg.lr, 0.9, 0.999, 1e-8, 1.0});

    std::uniform_real_distribution<double> mix(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> qpick(0, queries.size() - 1);
    const double inv_b = 1.0 / static_cast<double>(cfg.batch_size);
    const std::size_t tail_from = cfg.steps - std::max<std::size_t>(1, cfg.steps / 10);
    std::size_t tail_answer = 0, tail_lag = 0;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        adam.zero_grad();
        for (std::size_t b = 0; b < cfg.batch_size; ++b) {
            const double u = mix(rng);
            PretrainSample s;
            if (u < cfg.query_fraction) {
                const auto& ex = queries[qpick(rng)];
                s.tokens = ex.segments.back();
                s.answers = ex.answer_positions;
            } else if (u < cfg.query_fraction + 0.5 * (1.0 - cfg.query_fraction)) {
                s = fact_segment(task, max_len, rng);
            } else {
                s = random_segment(task, max_len, rng);
            }
            Tape tape;
            Var hidden = backbone.hidden_states(tape, s.tokens);
            std::vector<Var> parts;
            for (std::size_t k = 0; k < cfg.lags && k < s.tokens.size(); ++k) {
                std::vector<std::size_t> rows, targets;
                for (std::size_t t = k; t < s.tokens.size(); ++t) {
                    rows.push_back(t);
                    targets.push_back(static_cast<std::size_t>(s.tokens[t - k]));
                }
                parts.push_back(ad::cross_entropy(ad::matmul(hidden, tape.param(heads[k])), rows, targets));
                if (step >= tail_from) {
                    report.lag_loss += parts.back().value().item();
                    ++tail_lag;
                }
            }
            if (!s.answers.empty()) {
                std::vector<std::size_t> rows, targets;
                for (std::size_t p : s.answers) {
                    rows.push_back(p - 1);
                    targets.push_back(static_cast<std::size_t>(s.tokens[p]));
                }
                parts.push_back(ad::cross_entropy(backbone.lm_head(tape, hidden), rows, targets));
                if (step >= tail_from) {
                    report.answer_loss += parts.back().value().item();
                    ++tail_answer;
                }
            }
            const std::vector<double> ones(parts.size(), 1.0);
            tape.backward(ad::linear_combination(parts, ones), inv_b);
        }
        adam.step();
    }
    backbone.set_trainable(false);
    if (tail_answer) report.answer_loss /= static_cast<double>(tail_answer);
    if (tail_lag) report.lag_loss /= static_cast<double>(tail_lag);
    for (const Parameter* p : backbone.parameters()) {
        if (!p->value.all_finite()) throw NumericalError("backbone pretraining diverged in " + p->name);
    }
    return report;
}

}  // namespace gmem
