#pragma once

// Flat `key = value` run configuration. Every key has a default; unknown or
// repeated keys are errors. `to_text` writes every key in a fixed order and is
// the snapshot stored in checkpoints.

#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "gmem/memory_loop.hpp"
#include "gmem/pretrain.hpp"
#include "gmem/tasks.hpp"
#include "gmem/trainer.hpp"

namespace gmem {

inline UpdateRule parse_update_rule(std::string_view s) {
    if (s == "gated") return UpdateRule::gated;
    if (s == "overwrite") return UpdateRule::overwrite;
    if (s == "frozen") return UpdateRule::frozen;
    throw ConfigError("unknown update_rule '" + std::string(s) + "' (expected gated|overwrite|frozen)");
}

struct RunConfig {
    ModelConfig model;
    PretrainConfig pretrain;
    TaskConfig task;
    TrainConfig train;
    std::size_t checkpoint_every = 0;  // 0: final checkpoint only
    std::string out_dir = "runs/default";

    void validate() const {
        if (task.vocab_size != model.backbone.vocab_size || task.max_segment_len != model.backbone.max_segment_len) {
            throw ConfigError("task and backbone disagree on vocab_size or max_segment_len");
        }
        task.validate();
        train.weights.validate();
        if (train.batch_size == 0) throw ConfigError("batch_size must be positive");
        if (!(train.adam.lr > 0.0)) throw ConfigError("lr must be positive");
        if (!(train.adam.beta1 >= 0.0 && train.adam.beta1 < 1.0 && train.adam.beta2 >= 0.0 && train.adam.beta2 < 1.0)) {
            throw ConfigError("adam betas must lie in [0, 1)");
        }
        if (pretrain.steps > 0 && pretrain.batch_size == 0) throw ConfigError("pretrain_batch_size must be positive");
        if (!(pretrain.query_fraction >= 0.0 && pretrain.query_fraction <= 1.0)) {
            throw ConfigError("pretrain_query_fraction must lie in [0, 1]");
        }
        if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
    }
};

namespace detail {

struct ConfigKey {
    std::string key;
    std::string doc;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, std::string_view)> set;
};

inline std::string format_value(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, end);
}
template <class T>
    requires std::is_integral_v<T>
std::string format_value(T v) {
    return std::to_string(v);
}

template <class T>
T parse_value(std::string_view key, std::string_view text) {
    T v{};
    auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || end != text.data() + text.size()) {
        throw ConfigError("bad value '" + std::string(text) + "' for key '" + std::string(key) + "'");
    }
    if constexpr (std::is_floating_point_v<T>) {
        if (!std::isfinite(v)) throw ConfigError("non-finite value for key '" + std::string(key) + "'");
    }
    return v;
}

template <class T, class Access>
ConfigKey field(std::string key, std::string doc, Access access) {
    return {key, std::move(doc), [access](const RunConfig& c) { return format_value(access(const_cast<RunConfig&>(c))); },
            [access, key](RunConfig& c, std::string_view v) { access(c) = parse_value<T>(key, v); }};
}

inline const std::vector<ConfigKey>& config_keys() {
    using R = RunConfig;
    static const std::vector<ConfigKey> keys = {
        // backbone
        {"vocab_size", "token vocabulary V (backbone and task)", [](const R& c) { return format_value(c.model.backbone.vocab_size); },
         [](R& c, std::string_view v) { c.model.backbone.vocab_size = c.task.vocab_size = parse_value<std::size_t>("vocab_size", v); }},
        field<std::size_t>("hidden_dim", "backbone hidden size D", [](R& c) -> auto& { return c.model.backbone.hidden_dim; }),
        field<std::size_t>("layers", "backbone transformer layers L", [](R& c) -> auto& { return c.model.backbone.layers; }),
        field<std::size_t>("heads", "backbone attention heads", [](R& c) -> auto& { return c.model.backbone.heads; }),
        {"max_segment_len", "longest segment T_max (backbone and task)",
         [](const R& c) { return format_value(c.model.backbone.max_segment_len); },
         [](R& c, std::string_view v) {
             c.model.backbone.max_segment_len = c.task.max_segment_len = parse_value<std::size_t>("max_segment_len", v);
         }},
        field<double>("backbone_init_std", "std of backbone attention/MLP weights at init", [](R& c) -> auto& { return c.model.backbone.init_std; }),
        field<std::uint64_t>("backbone_seed", "backbone weight seed", [](R& c) -> auto& { return c.model.backbone.seed; }),
        // backbone pretraining
        field<std::size_t>("pretrain_steps", "backbone pretraining steps before freezing (0 = random backbone)",
                           [](R& c) -> auto& { return c.pretrain.steps; }),
        field<std::size_t>("pretrain_batch_size", "segments per pretraining step", [](R& c) -> auto& { return c.pretrain.batch_size; }),
        field<double>("pretrain_lr", "pretraining learning rate", [](R& c) -> auto& { return c.pretrain.lr; }),
        field<std::size_t>("pretrain_lags", "context lags reconstructed during pretraining", [](R& c) -> auto& { return c.pretrain.lags; }),
        field<double>("pretrain_query_fraction", "share of bare query segments in pretraining", [](R& c) -> auto& { return c.pretrain.query_fraction; }),
        field<std::uint64_t>("pretrain_seed", "pretraining sample seed", [](R& c) -> auto& { return c.pretrain.seed; }),
        // memory
        field<std::size_t>("slots", "memory slots S", [](R& c) -> auto& { return c.model.memory.slots; }),
        field<std::size_t>("memory_dim", "memory width D_m", [](R& c) -> auto& { return c.model.memory.memory_dim; }),
        field<std::size_t>("memory_heads", "attention heads in the memory read/write paths", [](R& c) -> auto& { return c.model.memory.heads; }),
        field<double>("memory_init_std", "std of the initial slots M0", [](R& c) -> auto& { return c.model.memory.init_std; }),
        field<std::uint64_t>("memory_seed", "memory and injection weight seed", [](R& c) -> auto& { return c.model.memory.seed; }),
        field<double>("max_param_ratio", "reject memory modules at or above this fraction of the backbone (0 = off)",
                      [](R& c) -> auto& { return c.model.max_param_ratio; }),
        // task
        {"task", "bridge | relation | copy", [](const R& c) { return std::string(to_string(c.task.kind)); },
         [](R& c, std::string_view v) { c.task.kind = parse_task_kind(v); }},
        field<std::size_t>("entities", "entity vocabulary size", [](R& c) -> auto& { return c.task.entities; }),
        field<std::size_t>("relations", "relation vocabulary size", [](R& c) -> auto& { return c.task.relations; }),
        field<std::size_t>("hops", "bridge hops (1-3)", [](R& c) -> auto& { return c.task.hops; }),
        field<std::size_t>("distractors", "distractor facts per distracted segment", [](R& c) -> auto& { return c.task.distractors; }),
        field<std::size_t>("filler_segments", "filler segments before the query", [](R& c) -> auto& { return c.task.filler_segments; }),
        field<std::size_t>("filler_len", "tokens per filler segment", [](R& c) -> auto& { return c.task.filler_len; }),
        field<std::size_t>("train_examples", "training examples", [](R& c) -> auto& { return c.task.train_examples; }),
        field<std::size_t>("test_examples", "test examples", [](R& c) -> auto& { return c.task.test_examples; }),
        field<std::uint64_t>("data_seed", "dataset seed", [](R& c) -> auto& { return c.task.seed; }),
        field<std::uint64_t>("split_seed", "held-out pair seed (relation task)", [](R& c) -> auto& { return c.task.split_seed; }),
        field<double>("heldout_fraction", "share of held-out subject-relation pairs", [](R& c) -> auto& { return c.task.heldout_fraction; }),
        // training
        field<std::size_t>("steps", "optimizer steps", [](R& c) -> auto& { return c.train.steps; }),
        field<std::size_t>("batch_size", "episodes per step", [](R& c) -> auto& { return c.train.batch_size; }),
        field<double>("lr", "Adam learning rate", [](R& c) -> auto& { return c.train.adam.lr; }),
        field<double>("beta1", "Adam first-moment decay", [](R& c) -> auto& { return c.train.adam.beta1; }),
        field<double>("beta2", "Adam second-moment decay", [](R& c) -> auto& { return c.train.adam.beta2; }),
        field<double>("adam_eps", "Adam epsilon", [](R& c) -> auto& { return c.train.adam.eps; }),
        field<double>("clip_norm", "global gradient-norm clip (<= 0 disables)", [](R& c) -> auto& { return c.train.adam.clip_norm; }),
        field<double>("lambda_sparsity", "weight of the slot sparsity penalty", [](R& c) -> auto& { return c.train.weights.sparsity; }),
        field<double>("lambda_entropy", "weight of the slot entropy penalty", [](R& c) -> auto& { return c.train.weights.entropy; }),
        {"supervision", "answer | lm", [](const R& c) { return std::string(to_string(c.train.supervision)); },
         [](R& c, std::string_view v) { c.train.supervision = parse_supervision(v); }},
        {"update_rule", "gated | overwrite | frozen", [](const R& c) { return std::string(to_string(c.train.loop.rule)); },
         [](R& c, std::string_view v) { c.train.loop.rule = parse_update_rule(v); }},
        field<std::size_t>("bptt_window", "segments per truncated-backprop window (0 = full episode)",
                           [](R& c) -> auto& { return c.train.loop.bptt_window; }),
        field<std::uint64_t>("shuffle_seed", "mini-batch order seed", [](R& c) -> auto& { return c.train.shuffle_seed; }),
        field<std::size_t>("checkpoint_every", "steps between intermediate checkpoints (0 = final only)",
                           [](R& c) -> auto& { return c.checkpoint_every; }),
        // output
        {"out_dir", "output directory", [](const R& c) { return c.out_dir; },
         [](R& c, std::string_view v) { c.out_dir = std::string(v); }},
    };
    return keys;
}

inline std::string_view trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace detail

/// Applies `key = value` to `cfg`; throws ConfigError for unknown keys or bad values.
inline void set_config_value(RunConfig& cfg, std::string_view key, std::string_view value) {
    for (const auto& k : detail::config_keys()) {
        if (k.key == key) {
            k.set(cfg, value);
            return;
        }
    }
    throw ConfigError("unknown config key '" + std::string(key) + "'");
}

inline std::string get_config_value(const RunConfig& cfg, std::string_view key) {
    for (const auto& k : detail::config_keys())
        if (k.key == key) return k.get(cfg);
    throw ConfigError("unknown config key '" + std::string(key) + "'");
}

/// Parses config text on top of the defaults.
inline RunConfig parse_config(std::string_view text) {
    RunConfig cfg;
    std::set<std::string, std::less<>> seen;
    std::size_t line_no = 0;
    while (!text.empty()) {
        const auto nl = text.find('\n');
        std::string_view line = text.substr(0, nl);
        text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
        const std::string_view key = detail::trim(line.substr(0, eq));
        const std::string_view value = detail::trim(line.substr(eq + 1));
        if (key.empty() || value.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key or value");
        if (!seen.insert(std::string(key)).second) {
            throw ConfigError("line " + std::to_string(line_no) + ": duplicate key '" + std::string(key) + "'");
        }
        try {
            set_config_value(cfg, key, value);
        } catch (const ConfigError& e) {
            throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    cfg.validate();
    return cfg;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

/// Every key in canonical order; parse_config(to_text(c)) reproduces c.
inline std::string to_text(const RunConfig& cfg) {
    std::string out;
    for (const auto& k : detail::config_keys()) out += k.key + " = " + k.get(cfg) + "\n";
    return out;
}

/// to_text without out_dir: the part of a configuration that determines a
/// run's results. Stored in checkpoints.
inline std::string snapshot_text(const RunConfig& cfg) {
    std::string out;
    for (const auto& k : detail::config_keys()) {
        if (k.key != "out_dir") out += k.key + " = " + k.get(cfg) + "\n";
    }
    return out;
}

/// Like to_text, with each key's description as a comment above it.
inline std::string documented_defaults() {
    const RunConfig defaults;
    std::string out;
    for (const auto& k : detail::config_keys()) out += "# " + k.doc + "\n" + k.key + " = " + k.get(defaults) + "\n";
    return out;
}

}  // namespace gmem
