#pragma once

// A small pre-LN causal transformer that plays the role of the frozen language
// model: it turns one segment of tokens into final-layer hidden states and owns
// the (tied) language-modelling head. Positions are learned and restart at 0 in
// every segment, so the backbone never sees across a segment boundary.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gmem/autodiff.hpp"
#include "gmem/util.hpp"

namespace gmem {

struct BackboneConfig {
    std::size_t vocab_size = 64;
    std::size_t hidden_dim = 32;
    std::size_t layers = 2;
    std::size_t heads = 2;
    std::size_t max_segment_len = 16;
    double init_std = 0.02;  // attention and MLP weights
    std::uint64_t seed = 1;
};

class Backbone {
public:
    explicit Backbone(const BackboneConfig& cfg) : cfg_(cfg) {
        if (cfg.vocab_size == 0 || cfg.hidden_dim == 0 || cfg.layers == 0 || cfg.heads == 0 || cfg.max_segment_len == 0) {
            throw ConfigError("backbone dimensions must be positive");
        }
        if (cfg.hidden_dim % cfg.heads != 0) throw ConfigError("hidden_dim must be divisible by heads");
        const std::size_t d = cfg.hidden_dim;
        const double resid_std = cfg.init_std / std::sqrt(2.0 * static_cast<double>(cfg.layers));
        Rng rng(cfg.seed);
        auto frozen = [](std::string name, Tensor v) { return Parameter(std::move(name), std::move(v), false); };

        tok_emb_ = frozen("backbone.tok_emb", random_normal({cfg.vocab_size, d}, 1.0 / std::sqrt(double(d)), rng));
        pos_emb_ = frozen("backbone.pos_emb", random_normal({cfg.max_segment_len, d}, 0.1, rng));
        for (std::size_t l = 0; l < cfg.layers; ++l) {
            const std::string p = "backbone.l" + std::to_string(l) + ".";
            Layer layer;
            layer.ln1_gain = frozen(p + "ln1.gain", Tensor({d}, 1.0));
            layer.ln1_bias = frozen(p + "ln1.bias", Tensor({d}));
            layer.wq = frozen(p + "attn.wq", random_normal({d, d}, cfg.init_std, rng));
            layer.wk = frozen(p + "attn.wk", random_normal({d, d}, cfg.init_std, rng));
            layer.wv = frozen(p + "attn.wv", random_normal({d, d}, cfg.init_std, rng));
            layer.wo = frozen(p + "attn.wo", random_normal({d, d}, resid_std, rng));
            layer.ln2_gain = frozen(p + "ln2.gain", Tensor({d}, 1.0));
            layer.ln2_bias = frozen(p + "ln2.bias", Tensor({d}));
            layer.w1 = frozen(p + "mlp.w1", random_normal({d, 4 * d}, cfg.init_std, rng));
            layer.b1 = frozen(p + "mlp.b1", Tensor({4 * d}));
            layer.w2 = frozen(p + "mlp.w2", random_normal({4 * d, d}, resid_std, rng));
            layer.b2 = frozen(p + "mlp.b2", Tensor({d}));
            layers_.push_back(std::move(layer));
        }
        lnf_gain_ = frozen("backbone.lnf.gain", Tensor({d}, 1.0));
        lnf_bias_ = frozen("backbone.lnf.bias", Tensor({d}));
        lm_bias_ = frozen("backbone.lm_head.bias", Tensor({cfg.vocab_size}));
    }

    Backbone(const Backbone&) = default;
    Backbone& operator=(const Backbone&) = default;
    Backbone(Backbone&&) = default;
    Backbone& operator=(Backbone&&) = default;

    const BackboneConfig& config() const noexcept { return cfg_; }
    std::size_t hidden_dim() const noexcept { return cfg_.hidden_dim; }
    std::size_t vocab_size() const noexcept { return cfg_.vocab_size; }

    void validate(std::span<const TokenId> tokens) const {
        if (tokens.empty()) throw InputError("segment must contain at least one token");
        if (tokens.size() > cfg_.max_segment_len) {
            throw InputError("segment length " + std::to_string(tokens.size()) + " exceeds max_segment_len " +
                             std::to_string(cfg_.max_segment_len));
        }
        for (auto t : tokens) {
            if (t < 0 || static_cast<std::size_t>(t) >= cfg_.vocab_size) {
                throw InputError("token id " + std::to_string(t) + " outside [0, " + std::to_string(cfg_.vocab_size) + ")");
            }
        }
    }

    /// Final-layer hidden states [T×D]. Recorded on `tape`, so gradients reach
    /// the backbone only while it is temporarily unfrozen (pretraining).
    Var hidden_states(Tape& tape, std::span<const TokenId> tokens) const {
        validate(tokens);
        auto P = [&](const Parameter& p) { return leaf(tape, p); };
        const std::size_t T = tokens.size();
        std::vector<std::size_t> ids(tokens.begin(), tokens.end());
        std::vector<std::size_t> pos(T);
        for (std::size_t i = 0; i < T; ++i) pos[i] = i;

        Var x = ad::add(ad::gather_rows(P(tok_emb_), ids), ad::gather_rows(P(pos_emb_), pos));
        const std::size_t dh = cfg_.hidden_dim / cfg_.heads;
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
        for (const Layer& layer : layers_) {
            Var h = ad::layernorm_rows(x, P(layer.ln1_gain), P(layer.ln1_bias));
            Var q = ad::matmul(h, P(layer.wq));
            Var k = ad::matmul(h, P(layer.wk));
            Var v = ad::matmul(h, P(layer.wv));
            std::vector<Var> heads;
            for (std::size_t hd = 0; hd < cfg_.heads; ++hd) {
                const std::size_t b = hd * dh, e = b + dh;
                Var scores = ad::scale(ad::matmul_nt(ad::slice_cols(q, b, e), ad::slice_cols(k, b, e)), inv_sqrt);
                heads.push_back(ad::matmul(ad::causal_softmax_rows(scores), ad::slice_cols(v, b, e)));
            }
            Var attn = cfg_.heads == 1 ? heads[0] : ad::concat_cols(heads);
            x = ad::add(x, ad::matmul(attn, P(layer.wo)));
            Var h2 = ad::layernorm_rows(x, P(layer.ln2_gain), P(layer.ln2_bias));
            Var mlp = ad::add_row(ad::matmul(ad::gelu(ad::add_row(ad::matmul(h2, P(layer.w1)), P(layer.b1))), P(layer.w2)),
                                  P(layer.b2));
            x = ad::add(x, mlp);
        }
        return ad::layernorm_rows(x, P(lnf_gain_), P(lnf_bias_));
    }

    Tensor extract_hidden_states(std::span<const TokenId> tokens) const {
        Tape tape(false);
        return hidden_states(tape, tokens).value();
    }

    /// logits = hidden · tok_embᵀ + bias. Gradients flow to `hidden` even though
    /// the head's own weights are frozen.
    Var lm_head(Tape& tape, Var hidden) const {
        const Tensor& h = hidden.value();
        if (h.rank() != 2 || h.cols() != cfg_.hidden_dim) {
            throw DimensionError("lm_head: expected [Tx" + std::to_string(cfg_.hidden_dim) + "], got " + shape_str(h.shape()));
        }
        return ad::add_row(ad::matmul_nt(hidden, leaf(tape, tok_emb_)), leaf(tape, lm_bias_));
    }

    Tensor lm_head(const Tensor& hidden) const {
        Tape tape(false);
        return lm_head(tape, tape.constant(hidden)).value();
    }

    Tensor vanilla_logits(std::span<const TokenId> tokens) const { return lm_head(extract_hidden_states(tokens)); }

    /// Every parameter in a fixed order (also the checkpoint order).
    ParamRefs parameters() {
        ParamRefs out{&tok_emb_, &pos_emb_};
        for (Layer& l : layers_) {
            for (Parameter* p : {&l.ln1_gain, &l.ln1_bias, &l.wq, &l.wk, &l.wv, &l.wo, &l.ln2_gain, &l.ln2_bias, &l.w1,
                                 &l.b1, &l.w2, &l.b2})
                out.push_back(p);
        }
        out.push_back(&lnf_gain_);
        out.push_back(&lnf_bias_);
        out.push_back(&lm_bias_);
        return out;
    }

    std::vector<const Parameter*> parameters() const {
        auto refs = const_cast<Backbone*>(this)->parameters();
        return {refs.begin(), refs.end()};
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const Parameter* p : parameters()) n += p->value.size();
        return n;
    }

    /// Fingerprint of all weight bytes; constant while frozen.
    std::uint64_t fingerprint() const {
        Fnv1a h;
        for (const Parameter* p : parameters()) {
            h.update(p->name);
            h.update(p->value);
        }
        return h.digest();
    }

    /// Only the pretraining phase flips this on; it must be off again before
    /// the memory module trains.
    void set_trainable(bool on) {
        for (Parameter* p : parameters()) {
            p->trainable = on;
            if (on) p->zero_grad();
        }
        trainable_ = on;
    }
    bool trainable() const noexcept { return trainable_; }

private:
    struct Layer {
        Parameter ln1_gain, ln1_bias, wq, wk, wv, wo, ln2_gain, ln2_bias, w1, b1, w2, b2;
    };

    Var leaf(Tape& tape, const Parameter& p) const {
        return trainable_ ? tape.param(const_cast<Parameter&>(p)) : tape.constant(p.value);
    }

    BackboneConfig cfg_;
    Parameter tok_emb_, pos_emb_;
    std::vector<Layer> layers_;
    Parameter lnf_gain_, lnf_bias_, lm_bias_;
    bool trainable_ = false;
};

}  // namespace gmem
