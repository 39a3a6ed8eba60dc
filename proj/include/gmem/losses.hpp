#pragma once

// Composite objective: next-token cross-entropy through the frozen head, an L1
// penalty on slot importance scores, and the negative entropy of their softmax.

#include <span>
#include <vector>

#include "gmem/autodiff.hpp"
#include "gmem/memory_bank.hpp"
#include "gmem/util.hpp"

namespace gmem {

struct LossWeights {
    double sparsity = 0.01;
    double entropy = 0.01;

    void validate() const {
        if (!(sparsity >= 0.0) || !(entropy >= 0.0)) throw ConfigError("loss weights must be non-negative");
    }
};

struct LossBreakdown {
    double clm = 0.0;
    double sparsity = 0.0;
    double entropy = 0.0;
    double total = 0.0;
    LossWeights weights;
};

/// Mean negative log-likelihood of `targets[t]` under row t of `logits`, over
/// rows where `mask[t]` is set.
inline Var clm_loss(Var logits, std::span<const TokenId> targets, const std::vector<bool>& mask) {
    const Tensor& lv = logits.value();
    if (lv.rank() != 2 || targets.size() != lv.rows() || mask.size() != lv.rows()) {
        throw DimensionError("clm_loss: logits " + shape_str(lv.shape()) + " vs " + std::to_string(targets.size()) +
                             " targets / " + std::to_string(mask.size()) + " mask entries");
    }
    std::vector<std::size_t> rows, ids;
    for (std::size_t t = 0; t < mask.size(); ++t) {
        if (!mask[t]) continue;
        if (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= lv.cols()) throw InputError("clm_loss: target id out of range");
        rows.push_back(t);
        ids.push_back(static_cast<std::size_t>(targets[t]));
    }
    if (rows.empty()) throw InputError("clm_loss: mask selects no positions");
    return ad::cross_entropy(logits, rows, ids);
}

inline double clm_loss(const Tensor& logits, std::span<const TokenId> targets, const std::vector<bool>& mask) {
    Tape t(false);
    return clm_loss(t.constant(logits), targets, mask).value().item();
}

/// Targets for plain LM training of a segment: row t predicts token t+1; the
/// last row has no target and is masked out.
inline std::pair<std::vector<TokenId>, std::vector<bool>> next_token_targets(std::span<const TokenId> tokens) {
    if (tokens.size() < 2) throw InputError("next-token targets need T >= 2");
    std::vector<TokenId> targets(tokens.size(), 0);
    std::vector<bool> mask(tokens.size(), false);
    for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
        targets[t] = tokens[t + 1];
        mask[t] = true;
    }
    return {targets, mask};
}

/// (1/S) Σ |s_i|
inline Var sparsity_loss(Var scores) { return ad::mean_abs(scores); }

inline double sparsity_loss(const SlotScores& s) {
    Tape t(false);
    return sparsity_loss(t.constant(s.s)).value().item();
}

/// Σ p_i ln p_i where p = softmax(s); lies in [−ln S, 0].
inline Var entropy_loss(Var scores) {
    const Tensor& sv = scores.value();
    Var row = sv.rank() == 2 && sv.rows() == 1 ? scores : ad::reshape(scores, {1, sv.size()});
    return ad::sum_p_log_p(ad::softmax_rows(row));
}

inline double entropy_loss(const SlotScores& s) {
    double acc = 0.0;
    for (double v : s.p.values())
        if (v > 0.0) acc += v * std::log(v);
    return acc;
}

inline LossBreakdown total_loss(double clm, double sparsity, double entropy, const LossWeights& w) {
    w.validate();
    return {clm, sparsity, entropy, clm + w.sparsity * sparsity + w.entropy * entropy, w};
}

inline Var total_loss(Var clm, Var sparsity, Var entropy, const LossWeights& w) {
    w.validate();
    const Var parts[] = {clm, sparsity, entropy};
    const double coeffs[] = {1.0, w.sparsity, w.entropy};
    return ad::linear_combination(parts, coeffs);
}

}  // namespace gmem
