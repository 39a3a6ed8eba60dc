#pragma once

#include <map>
#include <span>
#include <vector>

#include "gmem/trainer.hpp"

namespace gmem {

/// Harmonic mean of multiset token precision and recall.
inline double token_f1(std::span<const TokenId> predicted, std::span<const TokenId> gold) {
    if (predicted.empty() || gold.empty()) return predicted.empty() && gold.empty() ? 1.0 : 0.0;
    std::map<TokenId, int> counts;
    for (TokenId g : gold) ++counts[g];
    std::size_t overlap = 0;
    for (TokenId p : predicted) {
        auto it = counts.find(p);
        if (it != counts.end() && it->second > 0) {
            --it->second;
            ++overlap;
        }
    }
    if (overlap == 0) return 0.0;
    const double precision = static_cast<double>(overlap) / static_cast<double>(predicted.size());
    const double recall = static_cast<double>(overlap) / static_cast<double>(gold.size());
    return 2.0 * precision * recall / (precision + recall);
}

struct EvalReport {
    std::size_t examples = 0;
    double exact_match = 0.0;
    double token_f1 = 0.0;
    std::map<std::size_t, double> per_hop;  // hop count → exact match
    double slot_entropy = 0.0;              // entropy of p averaged over episodes
    double mean_abs_score = 0.0;            // mean |s_i| over episodes and slots
    std::vector<std::vector<TokenId>> predictions;
};

/// Aggregates per-example predictions into EM / token F1 / per-hop EM.
inline EvalReport score_predictions(const Dataset& data, const std::vector<std::vector<TokenId>>& predictions) {
    if (predictions.size() != data.size()) throw DimensionError("score_predictions: prediction count mismatch");
    EvalReport r;
    r.examples = data.size();
    std::map<std::size_t, std::pair<std::size_t, std::size_t>> hop_counts;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const bool em = predictions[i] == data[i].answer_tokens;
        r.exact_match += em ? 1.0 : 0.0;
        r.token_f1 += token_f1(predictions[i], data[i].answer_tokens);
        auto& hc = hop_counts[data[i].hops()];
        hc.first += em ? 1 : 0;
        ++hc.second;
    }
    if (!data.empty()) {
        r.exact_match /= static_cast<double>(data.size());
        r.token_f1 /= static_cast<double>(data.size());
    }
    for (const auto& [h, c] : hop_counts) r.per_hop[h] = static_cast<double>(c.first) / static_cast<double>(c.second);
    r.predictions = predictions;
    return r;
}

/// Greedy argmax at every answer position of the query segment.
inline EvalReport evaluate(GMemModel& model, const Dataset& data, const LoopOptions& opt = {}) {
    check_dataset(data, model.backbone());
    std::vector<std::vector<TokenId>> predictions;
    predictions.reserve(data.size());
    Tensor mean_p({model.memory().slots()});
    double abs_sum = 0.0;
    for (const auto& ex : data) {
        EpisodeOutput out = model.run_episode(ex.segments, opt);
        std::vector<TokenId> pred;
        for (std::size_t p : ex.answer_positions) pred.push_back(static_cast<TokenId>(argmax_row(out.logits.back(), p - 1)));
        predictions.push_back(std::move(pred));

        Tensor s({model.memory().slots()});
        for (const auto& sc : out.scores) kernel::add_into(s, sc.s);
        s = kernel::scale(s, 1.0 / static_cast<double>(out.scores.size()));
        kernel::add_into(mean_p, MemoryBank::scores_from(s).p);
        for (double v : s.values()) abs_sum += std::abs(v);
    }
    EvalReport r = score_predictions(data, predictions);
    if (!data.empty()) {
        r.slot_entropy = shannon_entropy(kernel::scale(mean_p, 1.0 / static_cast<double>(data.size())));
        r.mean_abs_score = abs_sum / static_cast<double>(data.size() * model.memory().slots());
    }
    return r;
}

}  // namespace gmem
