#pragma once

// The trainable latent memory bank: S slots of width D_m, an encoder/decoder
// pair translating between backbone hidden size and memory width, a
// slots-as-queries cross-attention write path with a GRU-style elementwise
// gate, and a hidden-states-as-queries read path.

#include <cmath>
#include <string>
#include <vector>

#include "gmem/autodiff.hpp"
#include "gmem/util.hpp"

namespace gmem {

/// How consolidation combines the old slots with the attended summary.
enum class UpdateRule {
    gated,      // M_new = (1 − g) ⊙ M_old + g ⊙ M_attended
    overwrite,  // g ≡ 1: M_new = M_attended (ungated baseline)
    frozen,     // g ≡ 0: M_new = M_old (memory disabled)
};

inline const char* to_string(UpdateRule r) {
    switch (r) {
        case UpdateRule::gated: return "gated";
        case UpdateRule::overwrite: return "overwrite";
        case UpdateRule::frozen: return "frozen";
    }
    return "?";
}

struct MemoryConfig {
    std::size_t slots = 16;
    std::size_t memory_dim = 32;
    std::size_t heads = 1;
    double init_std = 1.0;  // spread of the learnable initial slots M₀
    std::uint64_t seed = 2;
};

struct SlotScores {
    Tensor s;  // raw importance per slot
    Tensor p;  // softmax(s)
};

/// Recorded outputs of one consolidation.
struct Consolidation {
    Var memory;     // M_new [S×D_m]
    Var gate;       // g [S×D_m]
    Var attention;  // A [S×T] (head-averaged when heads > 1)
    Var attended;   // M_attended [S×D_m]
};

struct Retrieval {
    Var read;       // R [T×D_m]
    Var logits;     // pre-softmax scores [T×S] (head-averaged when heads > 1)
    Var attention;  // softmax weights [T×S] (head-averaged)
};

class MemoryBank {
public:
    MemoryBank(const MemoryConfig& cfg, std::size_t hidden_dim) : cfg_(cfg), hidden_dim_(hidden_dim) {
        if (cfg.slots < 1 || cfg.memory_dim < 1) throw ConfigError("memory bank needs slots >= 1 and memory_dim >= 1");
        if (cfg.heads < 1 || cfg.memory_dim % cfg.heads != 0) throw ConfigError("memory_dim must be divisible by memory heads");
        if (hidden_dim < 1) throw ConfigError("hidden_dim must be positive");
        if (!(cfg.init_std >= 0.0)) throw ConfigError("memory init_std must be non-negative");
        const std::size_t d = hidden_dim, m = cfg.memory_dim;
        Rng rng(cfg.seed);
        auto w = [&](std::string name, std::size_t in, std::size_t out) {
            return Parameter("memory." + std::move(name), random_normal({in, out}, 1.0 / std::sqrt(double(in)), rng));
        };
        auto b = [](std::string name, std::size_t n) { return Parameter("memory." + std::move(name), Tensor({n})); };

        init_slots_ = Parameter("memory.init_slots", random_normal({cfg.slots, m}, cfg.init_std, rng));
        enc_w1_ = w("encoder.w1", d, m);
        enc_b1_ = b("encoder.b1", m);
        enc_w2_ = w("encoder.w2", m, m);
        enc_b2_ = b("encoder.b2", m);
        dec_w1_ = w("decoder.w1", m, m);
        dec_b1_ = b("decoder.b1", m);
        dec_w2_ = w("decoder.w2", m, d);
        dec_b2_ = b("decoder.b2", d);
        wq_ = w("write.wq", m, m);
        wk_ = w("write.wk", m, m);
        wv_ = w("write.wv", m, m);
        gate_w_ = w("gate.w", 2 * m, m);
        gate_b_ = b("gate.b", m);
        rq_ = w("read.wq", m, m);
        rk_ = w("read.wk", m, m);
        rv_ = w("read.wv", m, m);
    }

    const MemoryConfig& config() const noexcept { return cfg_; }
    std::size_t slots() const noexcept { return cfg_.slots; }
    std::size_t memory_dim() const noexcept { return cfg_.memory_dim; }
    std::size_t hidden_dim() const noexcept { return hidden_dim_; }

    Var initial_state(Tape& t) { return t.param(init_slots_); }

    /// H [T×D] → E [T×D_m]: tanh hidden layer, linear output.
    Var encode(Tape& t, Var hidden) {
        require_cols(hidden, hidden_dim_, "encode");
        Var h1 = ad::tanh(ad::add_row(ad::matmul(hidden, t.param(enc_w1_)), t.param(enc_b1_)));
        return ad::add_row(ad::matmul(h1, t.param(enc_w2_)), t.param(enc_b2_));
    }

    /// R [T×D_m] → [T×D]
    Var decode(Tape& t, Var read) {
        require_cols(read, cfg_.memory_dim, "decode");
        Var h1 = ad::tanh(ad::add_row(ad::matmul(read, t.param(dec_w1_)), t.param(dec_b1_)));
        return ad::add_row(ad::matmul(h1, t.param(dec_w2_)), t.param(dec_b2_));
    }

    /// Write path. Slots query the encoded segment; the gate blends the
    /// attended summary into the old slots.
    Consolidation consolidate(Tape& t, Var old_memory, Var encoded, UpdateRule rule = UpdateRule::gated) {
        require_shape(old_memory, cfg_.slots, cfg_.memory_dim, "consolidate(memory)");
        require_cols(encoded, cfg_.memory_dim, "consolidate(encoded)");
        auto [attended, attention] = attend(ad::matmul(old_memory, t.param(wq_)), ad::matmul(encoded, t.param(wk_)),
                                            ad::matmul(encoded, t.param(wv_)));
        switch (rule) {
            case UpdateRule::frozen:
                return {old_memory, t.constant(Tensor(old_memory.shape(), 0.0)), attention, attended};
            case UpdateRule::overwrite:
                return {attended, t.constant(Tensor(old_memory.shape(), 1.0)), attention, attended};
            case UpdateRule::gated: break;
        }
        Var gate = ad::sigmoid(ad::add_row(ad::matmul(ad::concat_cols(old_memory, attended), t.param(gate_w_)), t.param(gate_b_)));
        return {ad::gated_update(old_memory, attended, gate), gate, attention, attended};
    }

    /// Read path. Encoded hidden states query the slots.
    Retrieval retrieve(Tape& t, Var memory, Var encoded) {
        require_shape(memory, cfg_.slots, cfg_.memory_dim, "retrieve(memory)");
        require_cols(encoded, cfg_.memory_dim, "retrieve(encoded)");
        Var q = ad::matmul(encoded, t.param(rq_));
        Var k = ad::matmul(memory, t.param(rk_));
        Var v = ad::matmul(memory, t.param(rv_));
        const std::size_t dh = cfg_.memory_dim / cfg_.heads;
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
        std::vector<Var> reads, logits, weights;
        for (std::size_t h = 0; h < cfg_.heads; ++h) {
            auto [qh, kh, vh] = head_slices(q, k, v, h, dh);
            Var lg = ad::scale(ad::matmul_nt(qh, kh), inv_sqrt);
            Var a = ad::softmax_rows(lg);
            reads.push_back(ad::matmul(a, vh));
            logits.push_back(lg);
            weights.push_back(a);
        }
        if (cfg_.heads == 1) return {reads[0], logits[0], weights[0]};
        return {ad::concat_cols(reads), ad::mean(logits), ad::mean(weights)};
    }

    /// s_i = mean over query positions of the pre-softmax retrieval logit for
    /// slot i; p = softmax(s). Returned as a 1×S row so callers can keep
    /// differentiating through it.
    static Var importance_scores(Var retrieval_logits) {
        const Tensor& lg = retrieval_logits.value();
        kernel::require_matrix(lg, "importance_scores");
        return ad::reshape(ad::mean_rows(retrieval_logits), {1, lg.cols()});
    }

    static SlotScores scores_from(const Tensor& s) {
        Tensor row = s.reshaped({1, s.size()});
        return {s.reshaped({s.size()}), kernel::softmax_rows(row).reshaped({s.size()})};
    }

    ParamRefs parameters() {
        return {&init_slots_, &enc_w1_, &enc_b1_, &enc_w2_, &enc_b2_, &dec_w1_, &dec_b1_, &dec_w2_, &dec_b2_,
                &wq_,         &wk_,     &wv_,     &gate_w_, &gate_b_, &rq_,     &rk_,     &rv_};
    }

    std::vector<const Parameter*> parameters() const {
        auto refs = const_cast<MemoryBank*>(this)->parameters();
        return {refs.begin(), refs.end()};
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const Parameter* p : parameters()) n += p->value.size();
        return n;
    }

    Parameter& init_slots() noexcept { return init_slots_; }
    Parameter& gate_weight() noexcept { return gate_w_; }
    Parameter& gate_bias() noexcept { return gate_b_; }
    Parameter& write_query() noexcept { return wq_; }
    Parameter& write_key() noexcept { return wk_; }
    Parameter& write_value() noexcept { return wv_; }
    Parameter& read_query() noexcept { return rq_; }
    Parameter& read_key() noexcept { return rk_; }
    Parameter& read_value() noexcept { return rv_; }

private:
    static void require_cols(Var x, std::size_t cols, const char* op) {
        const Tensor& v = x.value();
        if (v.rank() != 2 || v.cols() != cols) {
            throw DimensionError(std::string(op) + ": expected last dim " + std::to_string(cols) + ", got " + shape_str(v.shape()));
        }
    }
    static void require_shape(Var x, std::size_t r, std::size_t c, const char* op) {
        if (x.value().shape() != Shape{r, c}) {
            throw DimensionError(std::string(op) + ": expected " + shape_str({r, c}) + ", got " + shape_str(x.value().shape()));
        }
    }

    std::tuple<Var, Var, Var> head_slices(Var q, Var k, Var v, std::size_t h, std::size_t dh) const {
        if (cfg_.heads == 1) return {q, k, v};
        const std::size_t b = h * dh, e = b + dh;
        return {ad::slice_cols(q, b, e), ad::slice_cols(k, b, e), ad::slice_cols(v, b, e)};
    }

    // softmax(q kᵀ / √d_h) v per head; returns (output, head-averaged weights).
    std::pair<Var, Var> attend(Var q, Var k, Var v) const {
        const std::size_t dh = cfg_.memory_dim / cfg_.heads;
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
        std::vector<Var> outs, weights;
        for (std::size_t h = 0; h < cfg_.heads; ++h) {
            auto [qh, kh, vh] = head_slices(q, k, v, h, dh);
            Var a = ad::softmax_rows(ad::scale(ad::matmul_nt(qh, kh), inv_sqrt));
            outs.push_back(ad::matmul(a, vh));
            weights.push_back(a);
        }
        if (cfg_.heads == 1) return {outs[0], weights[0]};
        return {ad::concat_cols(outs), ad::mean(weights)};
    }

    MemoryConfig cfg_;
    std::size_t hidden_dim_;
    Parameter init_slots_;
    Parameter enc_w1_, enc_b1_, enc_w2_, enc_b2_;
    Parameter dec_w1_, dec_b1_, dec_w2_, dec_b2_;
    Parameter wq_, wk_, wv_;
    Parameter gate_w_, gate_b_;
    Parameter rq_, rk_, rv_;
};

}  // namespace gmem
