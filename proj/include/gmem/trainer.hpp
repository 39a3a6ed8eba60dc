#pragma once

// Optimisation of the memory module against the composite objective. The
// backbone stays frozen; its hidden states are computed once per example and
// reused for every step.

#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <vector>

#include "gmem/losses.hpp"
#include "gmem/memory_loop.hpp"
#include "gmem/optimizer.hpp"
#include "gmem/tasks.hpp"

namespace gmem {

enum class Supervision {
    answer,  // answer tokens of the query segment only
    lm,      // every next-token position of every segment
};

inline Supervision parse_supervision(std::string_view s) {
    if (s == "answer") return Supervision::answer;
    if (s == "lm") return Supervision::lm;
    throw ConfigError("unknown supervision '" + std::string(s) + "' (expected answer|lm)");
}

inline const char* to_string(Supervision s) { return s == Supervision::answer ? "answer" : "lm"; }

struct TrainConfig {
    std::size_t steps = 2000;
    std::size_t batch_size = 16;
    AdamConfig adam;
    LossWeights weights;
    Supervision supervision = Supervision::answer;
    LoopOptions loop;
    std::uint64_t shuffle_seed = 3;
};

struct MetricsRow {
    std::uint64_t step = 0;
    double clm = 0.0, sparsity = 0.0, entropy = 0.0, total = 0.0;
    double slot_entropy = 0.0, gate_mean = 0.0, answer_acc = 0.0;
};

inline constexpr const char* kMetricsHeader = "step,clm,sparsity,entropy,total,slot_entropy,gate_mean,answer_acc";

inline std::string format_metrics(const MetricsRow& r) {
    std::ostringstream os;
    os.precision(17);
    os << r.step << ',' << r.clm << ',' << r.sparsity << ',' << r.entropy << ',' << r.total << ',' << r.slot_entropy << ','
       << r.gate_mean << ',' << r.answer_acc;
    return os.str();
}

/// Shannon entropy −Σ p ln p.
inline double shannon_entropy(const Tensor& p) {
    double h = 0.0;
    for (double v : p.values())
        if (v > 0.0) h -= v * std::log(v);
    return h;
}

inline std::size_t argmax_row(const Tensor& logits, std::size_t row) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < logits.cols(); ++j)
        if (logits(row, j) > logits(row, best)) best = j;
    return best;
}

/// Everything the objective needs from one episode.
struct EpisodeObjective {
    Var total, clm, sparsity, entropy;
    Tensor mean_scores;  // s averaged over segments, length S
    double gate_mean = 0.0;
    std::size_t correct = 0, answers = 0;
    EpisodeTrace trace;
};

inline EpisodeObjective episode_objective(GMemModel& model, Tape& t, const SyntheticExample& ex,
                                          const std::vector<Tensor>* hidden, const TrainConfig& cfg) {
    EpisodeObjective out;
    out.trace = model.run_episode(t, ex.segments, cfg.loop, hidden);
    const auto& steps = out.trace.steps;

    const Tensor& final_logits = steps.back().logits.value();
    for (std::size_t i = 0; i < ex.answer_positions.size(); ++i) {
        const std::size_t p = ex.answer_positions[i];
        if (argmax_row(final_logits, p - 1) == static_cast<std::size_t>(ex.answer_tokens[i])) ++out.correct;
        ++out.answers;
    }

    if (cfg.supervision == Supervision::answer) {
        const Segment& q = ex.segments.back();
        std::vector<TokenId> targets(q.size(), 0);
        std::vector<bool> mask(q.size(), false);
        for (std::size_t i = 0; i < ex.answer_positions.size(); ++i) {
            targets[ex.answer_positions[i] - 1] = ex.answer_tokens[i];
            mask[ex.answer_positions[i] - 1] = true;
        }
        out.clm = clm_loss(steps.back().logits, targets, mask);
    } else {
        std::vector<Var> parts;
        std::vector<double> weights;
        double n = 0.0;
        for (std::size_t k = 0; k < steps.size(); ++k) {
            if (ex.segments[k].size() < 2) continue;
            auto [targets, mask] = next_token_targets(ex.segments[k]);
            parts.push_back(clm_loss(steps[k].logits, targets, mask));
            weights.push_back(static_cast<double>(ex.segments[k].size() - 1));
            n += weights.back();
        }
        if (parts.empty()) throw InputError("lm supervision: no segment has two or more tokens");
        for (auto& w : weights) w /= n;
        out.clm = ad::linear_combination(parts, weights);
    }

    std::vector<Var> scores;
    double gsum = 0.0;
    std::size_t gcount = 0;
    for (const auto& s : steps) {
        scores.push_back(s.scores);
        for (double g : s.update_gate.value().values()) gsum += g;
        gcount += s.update_gate.value().size();
    }
    Var mean_scores = ad::mean(scores);
    out.mean_scores = mean_scores.value().reshaped({mean_scores.value().size()});
    out.sparsity = sparsity_loss(mean_scores);
    out.entropy = entropy_loss(mean_scores);
    out.total = total_loss(out.clm, out.sparsity, out.entropy, cfg.weights);
    out.gate_mean = gsum / static_cast<double>(gcount);
    return out;
}

/// Names the first non-finite tensor among an episode's recorded outputs.
inline std::string first_non_finite(const EpisodeObjective& o) {
    for (std::size_t k = 0; k < o.trace.steps.size(); ++k) {
        const StepTrace& s = o.trace.steps[k];
        const std::pair<const char*, Var> named[] = {{"logits", s.logits},
                                                     {"memory", s.memory},
                                                     {"update_gate", s.update_gate},
                                                     {"slot_scores", s.scores}};
        for (const auto& [name, v] : named)
            if (!v.value().all_finite()) return std::string(name) + " at segment " + std::to_string(k);
    }
    if (!o.clm.value().all_finite()) return "clm loss";
    if (!o.total.value().all_finite()) return "total loss";
    return {};
}

inline void check_dataset(const Dataset& data, const Backbone& backbone) {
    if (data.empty()) throw ConfigError("dataset is empty");
    for (const auto& ex : data) {
        for (const auto& seg : ex.segments) {
            if (seg.empty() || seg.size() > backbone.config().max_segment_len) {
                throw ConfigError("dataset segment length " + std::to_string(seg.size()) + " incompatible with max_segment_len " +
                                  std::to_string(backbone.config().max_segment_len));
            }
            for (TokenId tk : seg) {
                if (tk < 0 || static_cast<std::size_t>(tk) >= backbone.vocab_size()) {
                    throw ConfigError("dataset token " + std::to_string(tk) + " outside model vocabulary");
                }
            }
        }
    }
}

/// Precomputed frozen-backbone states for every segment of every example.
using HiddenCache = std::vector<std::vector<Tensor>>;

inline HiddenCache build_hidden_cache(const GMemModel& model, const Dataset& data) {
    HiddenCache cache;
    cache.reserve(data.size());
    for (const auto& ex : data) cache.push_back(model.hidden_states(ex.segments));
    return cache;
}

class Trainer {
public:
    Trainer(GMemModel&, Dataset&&, TrainConfig) = delete;
    Trainer(GMemModel& model, const Dataset& train, TrainConfig cfg)
        : model_(model), data_(train), cfg_(cfg), adam_(model.trainable_parameters(), cfg.adam) {
        cfg_.weights.validate();
        if (cfg_.batch_size == 0) throw ConfigError("batch_size must be positive");
        if (model.backbone().trainable()) throw ContractError("backbone must be frozen before memory training");
        check_dataset(data_, model.backbone());
        hidden_ = build_hidden_cache(model_, data_);
    }

    Adam& optimizer() noexcept { return adam_; }
    std::uint64_t step() const noexcept { return adam_.steps_taken(); }
    const TrainConfig& config() const noexcept { return cfg_; }

    /// Dataset index of the b-th episode of optimizer step `step` (0-based).
    /// Epoch permutations derive from (shuffle_seed, epoch) only, so a
    /// resumed run sees the same order.
    std::size_t sample_index(std::uint64_t step, std::size_t b) {
        const std::uint64_t j = step * cfg_.batch_size + b;
        const std::uint64_t epoch = j / data_.size();
        auto it = perms_.find(epoch);
        if (it == perms_.end()) {
            if (perms_.size() > 4) perms_.clear();
            std::vector<std::size_t> perm(data_.size());
            std::iota(perm.begin(), perm.end(), 0);
            Rng rng(derive_seed(cfg_.shuffle_seed, epoch));
            std::shuffle(perm.begin(), perm.end(), rng);
            it = perms_.emplace(epoch, std::move(perm)).first;
        }
        return it->second[j % data_.size()];
    }

    MetricsRow train_step() {
        adam_.zero_grad();
        const std::uint64_t s = adam_.steps_taken();
        const double inv_b = 1.0 / static_cast<double>(cfg_.batch_size);
        MetricsRow row;
        Tensor mean_p({model_.memory().slots()});
        double gate_sum = 0.0;
        std::size_t correct = 0, answers = 0;
        for (std::size_t b = 0; b < cfg_.batch_size; ++b) {
            const std::size_t idx = sample_index(s, b);
            Tape tape;
            EpisodeObjective o = episode_objective(model_, tape, data_[idx], &hidden_[idx], cfg_);
            if (std::string bad = first_non_finite(o); !bad.empty()) {
                throw NumericalError("non-finite " + bad + " at step " + std::to_string(s + 1) + " (example " +
                                     std::to_string(idx) + ")");
            }
            tape.backward(o.total, inv_b);
            row.clm += o.clm.value().item() * inv_b;
            row.sparsity += o.sparsity.value().item() * inv_b;
            row.entropy += o.entropy.value().item() * inv_b;
            row.total += o.total.value().item() * inv_b;
            kernel::add_into(mean_p, kernel::scale(MemoryBank::scores_from(o.mean_scores).p, inv_b));
            gate_sum += o.gate_mean * inv_b;
            correct += o.correct;
            answers += o.answers;
        }
        if (!std::isfinite(adam_.grad_norm())) throw NumericalError("non-finite gradient at step " + std::to_string(s + 1));
        adam_.step();
        for (Parameter* p : adam_.parameters()) {
            if (!p->value.all_finite()) throw NumericalError("non-finite parameter " + p->name + " after step " + std::to_string(s + 1));
        }
        row.step = adam_.steps_taken();
        row.slot_entropy = shannon_entropy(mean_p);
        row.gate_mean = gate_sum;
        row.answer_acc = answers ? static_cast<double>(correct) / static_cast<double>(answers) : 0.0;
        return row;
    }

    /// Trains until `cfg.steps` optimizer steps have been taken in total.
    std::vector<MetricsRow> run(const std::function<void(const MetricsRow&)>& on_step = {}) {
        std::vector<MetricsRow> log;
        while (adam_.steps_taken() < cfg_.steps) {
            log.push_back(train_step());
            if (on_step) on_step(log.back());
        }
        return log;
    }

private:
    GMemModel& model_;
    const Dataset& data_;
    TrainConfig cfg_;
    Adam adam_;
    HiddenCache hidden_;
    std::map<std::uint64_t, std::vector<std::size_t>> perms_;
};

}  // namespace gmem
