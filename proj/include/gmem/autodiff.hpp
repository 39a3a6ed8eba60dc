#pragma once

// Tape-based reverse-mode differentiation over whole tensors.
//
// Values are computed eagerly when an op is recorded; a backward closure is
// stored only when at least one input needs a gradient, so forward passes over
// frozen weights cost little more than the raw kernels.

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "gmem/tensor.hpp"

namespace gmem {

/// A named weight tensor with its accumulated gradient.
///
/// Frozen parameters (`trainable == false`) never have gradients routed to
/// them and are skipped by optimizers; their values must stay bit-identical.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    bool trainable = true;

    Parameter() = default;
    Parameter(std::string n, Tensor v, bool train = true)
        : name(std::move(n)), value(std::move(v)), grad(value.shape()), trainable(train) {}

    void zero_grad() { std::fill(grad.values().begin(), grad.values().end(), 0.0); }
};

using ParamRefs = std::vector<Parameter*>;

class Tape;

/// Handle to a value recorded on a tape.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
};

class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::size_t self)>;

    Tape() { nodes_.reserve(256); }
    /// A tape with gradients disabled records values only.
    explicit Tape(bool enable_grad) : Tape() { grad_enabled_ = enable_grad; }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor t) { return push(std::move(t), false, nullptr, nullptr); }

    Var param(Parameter& p) { return push(p.value, grad_enabled_ && p.trainable, nullptr, &p); }
    Var param(const Parameter& p) { return constant(p.value); }

    /// Same value, gradient flow cut.
    Var detach(Var v) { return constant(value(v.id)); }

    Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
        bool needs = false;
        for (const auto& in : inputs) needs = needs || nodes_[in.id].needs_grad;
        return push(std::move(value), needs, needs ? std::move(fn) : nullptr, nullptr);
    }

    Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
        bool needs = false;
        for (const auto& in : inputs) needs = needs || nodes_[in.id].needs_grad;
        return push(std::move(value), needs, needs ? std::move(fn) : nullptr, nullptr);
    }

    const Tensor& value(std::size_t id) const { return nodes_[id].value; }
    const Tensor& grad(std::size_t id) const { return nodes_[id].grad; }
    bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
    std::size_t size() const noexcept { return nodes_.size(); }

    void accumulate(std::size_t id, const Tensor& g) {
        Node& n = nodes_[id];
        if (!n.needs_grad) return;
        if (n.grad.empty()) {
            n.grad = g;
        } else {
            kernel::add_into(n.grad, g);
        }
    }

    template <class F>
    void accumulate_with(std::size_t id, F make) {
        if (nodes_[id].needs_grad) accumulate(id, make());
    }

    /// Reverse sweep from a scalar loss. Gradients are added (scaled by
    /// `seed`) into the `grad` field of every trainable Parameter reached.
    void backward(Var loss, double seed = 1.0) {
        if (loss.tape != this) throw ContractError("backward: loss recorded on a different tape");
        if (value(loss.id).size() != 1) {
            throw ContractError("backward: loss must be a scalar, got " + shape_str(value(loss.id).shape()));
        }
        if (!nodes_[loss.id].needs_grad) return;
        nodes_[loss.id].grad = Tensor(value(loss.id).shape(), seed);
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (n.grad.empty()) continue;
            if (n.backward) n.backward(*this, i);
            if (n.param && n.param->trainable) kernel::add_into(n.param->grad, n.grad);
        }
    }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool needs_grad = false;
        BackwardFn backward;
        Parameter* param = nullptr;
    };

    Var push(Tensor value, bool needs, BackwardFn fn, Parameter* p) {
        nodes_.push_back(Node{std::move(value), Tensor{}, needs, std::move(fn), p});
        return Var{this, nodes_.size() - 1};
    }

    std::vector<Node> nodes_;
    bool grad_enabled_ = true;
};

inline const Tensor& Var::value() const { return tape->value(id); }

namespace ad {

inline Tape& tape_of(Var a, Var b) {
    if (a.tape != b.tape) throw ContractError("operands recorded on different tapes");
    return *a.tape;
}

inline Var matmul(Var a, Var b) {
    Tape& t = tape_of(a, b);
    return t.record(kernel::matmul(a.value(), b.value()), {a, b}, [a = a.id, b = b.id](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        t.accumulate_with(a, [&] { return kernel::matmul_nt(g, t.value(b)); });
        t.accumulate_with(b, [&] { return kernel::matmul_tn(t.value(a), g); });
    });
}

// a · bᵀ
inline Var matmul_nt(Var a, Var b) {
    Tape& t = tape_of(a, b);
    return t.record(kernel::matmul_nt(a.value(), b.value()), {a, b}, [a = a.id, b = b.id](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        t.accumulate_with(a, [&] { return kernel::matmul(g, t.value(b)); });
        t.accumulate_with(b, [&] { return kernel::matmul_tn(g, t.value(a)); });
    });
}

inline Var add(Var a, Var b) {
    Tape& t = tape_of(a, b);
    return t.record(kernel::add(a.value(), b.value()), {a, b}, [a = a.id, b = b.id](Tape& t, std::size_t self) {
        t.accumulate(a, t.grad(self));
        t.accumulate(b, t.grad(self));
    });
}

inline Var mul(Var a, Var b) {
    Tape& t = tape_of(a, b);
    return t.record(kernel::mul(a.value(), b.value()), {a, b}, [a = a.id, b = b.id](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        t.accumulate_with(a, [&] { return kernel::mul(g, t.value(b)); });
        t.accumulate_with(b, [&] { return kernel::mul(g, t.value(a)); });
    });
}

inline Var scale(Var a, double c) {
    return a.tape->record(kernel::scale(a.value(), c), {a}, [a = a.id, c](Tape& t, std::size_t self) {
        t.accumulate(a, kernel::scale(t.grad(self), c));
    });
}

inline Var add_row(Var x, Var bias) {
    Tape& t = tape_of(x, bias);
    return t.record(kernel::add_row(x.value(), bias.value()), {x, bias},
                    [x = x.id, b = bias.id](Tape& t, std::size_t self) {
                        const Tensor& g = t.grad(self);
                        t.accumulate(x, g);
                        t.accumulate_with(b, [&] { return kernel::sum_rows(g).reshaped(t.value(b).shape()); });
                    });
}

inline Var sigmoid(Var x) {
    return x.tape->record(kernel::sigmoid(x.value()), {x}, [x = x.id](Tape& t, std::size_t self) {
        const Tensor& y = t.value(self);
        Tensor d = t.grad(self);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] *= y[i] * (1.0 - y[i]);
        t.accumulate(x, d);
    });
}

inline Var tanh(Var x) {
    return x.tape->record(kernel::tanh(x.value()), {x}, [x = x.id](Tape& t, std::size_t self) {
        const Tensor& y = t.value(self);
        Tensor d = t.grad(self);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] *= 1.0 - y[i] * y[i];
        t.accumulate(x, d);
    });
}

inline Var gelu(Var x) {
    return x.tape->record(kernel::gelu(x.value()), {x}, [x = x.id](Tape& t, std::size_t self) {
        const Tensor& in = t.value(x);
        Tensor d = t.grad(self);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] *= kernel::gelu_grad(in[i]);
        t.accumulate(x, d);
    });
}

inline Var softmax_rows(Var x) {
    return x.tape->record(kernel::softmax_rows(x.value()), {x}, [x = x.id](Tape& t, std::size_t self) {
        t.accumulate(x, kernel::softmax_rows_backward(t.value(self), t.grad(self)));
    });
}

inline Var causal_softmax_rows(Var x) {
    // Masked entries are exactly zero in the output, so the generic softmax
    // backward already yields zero gradient there.
    return x.tape->record(kernel::causal_softmax_rows(x.value()), {x}, [x = x.id](Tape& t, std::size_t self) {
        t.accumulate(x, kernel::softmax_rows_backward(t.value(self), t.grad(self)));
    });
}

inline Var layernorm_rows(Var x, Var gain, Var bias) {
    Tape& t = tape_of(x, gain);
    auto cache = std::make_shared<kernel::LayerNormCache>();
    Tensor y = kernel::layernorm_rows(x.value(), gain.value(), bias.value(), cache.get());
    return t.record(std::move(y), {x, gain, bias},
                    [x = x.id, gn = gain.id, bs = bias.id, cache](Tape& t, std::size_t self) {
                        const Tensor& g = t.grad(self);
                        const Tensor& gv = t.value(gn);
                        const Tensor& xhat = cache->xhat;
                        const std::size_t m = g.rows(), n = g.cols();
                        t.accumulate_with(gn, [&] {
                            Tensor d(gv.shape());
                            for (std::size_t i = 0; i < m; ++i)
                                for (std::size_t j = 0; j < n; ++j) d[j] += g(i, j) * xhat(i, j);
                            return d;
                        });
                        t.accumulate_with(bs, [&] { return kernel::sum_rows(g).reshaped(t.value(bs).shape()); });
                        t.accumulate_with(x, [&] {
                            Tensor dx({m, n});
                            const double inv_n = 1.0 / static_cast<double>(n);
                            for (std::size_t i = 0; i < m; ++i) {
                                double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                                for (std::size_t j = 0; j < n; ++j) {
                                    const double dxh = g(i, j) * gv[j];
                                    mean_dxhat += dxh;
                                    mean_dxhat_xhat += dxh * xhat(i, j);
                                }
                                mean_dxhat *= inv_n;
                                mean_dxhat_xhat *= inv_n;
                                for (std::size_t j = 0; j < n; ++j) {
                                    const double dxh = g(i, j) * gv[j];
                                    dx(i, j) = cache->rstd[i] * (dxh - mean_dxhat - xhat(i, j) * mean_dxhat_xhat);
                                }
                            }
                            return dx;
                        });
                    });
}

inline Var concat_cols(Var a, Var b) {
    Tape& t = tape_of(a, b);
    const std::size_t na = a.value().cols();
    return t.record(kernel::concat_cols(a.value(), b.value()), {a, b},
                    [a = a.id, b = b.id, na](Tape& t, std::size_t self) {
                        const Tensor& g = t.grad(self);
                        t.accumulate_with(a, [&] { return kernel::slice_cols(g, 0, na); });
                        t.accumulate_with(b, [&] { return kernel::slice_cols(g, na, g.cols()); });
                    });
}

inline Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw DimensionError("concat_last_dim: no inputs");
    Tensor out = parts[0].value();
    for (std::size_t i = 1; i < parts.size(); ++i) out = kernel::concat_cols(out, parts[i].value());
    std::vector<std::size_t> ids, widths;
    for (const auto& p : parts) {
        ids.push_back(p.id);
        widths.push_back(p.value().cols());
    }
    return parts[0].tape->record(std::move(out), parts, [ids, widths](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        std::size_t off = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            t.accumulate_with(ids[k], [&] { return kernel::slice_cols(g, off, off + widths[k]); });
            off += widths[k];
        }
    });
}

inline Var slice_cols(Var a, std::size_t begin, std::size_t end) {
    const Shape full = a.value().shape();
    return a.tape->record(kernel::slice_cols(a.value(), begin, end), {a},
                          [a = a.id, begin, full](Tape& t, std::size_t self) {
                              const Tensor& g = t.grad(self);
                              Tensor d(full);
                              for (std::size_t i = 0; i < g.rows(); ++i)
                                  for (std::size_t j = 0; j < g.cols(); ++j) d(i, begin + j) = g(i, j);
                              t.accumulate(a, d);
                          });
}

/// Rows of `table` selected by `ids`.
inline Var gather_rows(Var table, std::span<const std::size_t> ids) {
    const Tensor& tv = table.value();
    kernel::require_matrix(tv, "gather_rows");
    const std::size_t n = tv.cols();
    Tensor out({ids.size(), n});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= tv.rows()) throw InputError("gather_rows: row " + std::to_string(ids[i]) + " out of range");
        std::copy_n(tv.data() + ids[i] * n, n, out.data() + i * n);
    }
    std::vector<std::size_t> idv(ids.begin(), ids.end());
    return table.tape->record(std::move(out), {table}, [tb = table.id, idv, n](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        Tensor d(t.value(tb).shape());
        for (std::size_t i = 0; i < idv.size(); ++i)
            for (std::size_t j = 0; j < n; ++j) d(idv[i], j) += g(i, j);
        t.accumulate(tb, d);
    });
}

/// (1 − g) ⊙ old + g ⊙ attended
inline Var gated_update(Var old, Var attended, Var gate) {
    Tape& t = tape_of(old, attended);
    kernel::require_same_shape(old.value(), attended.value(), "gated_update");
    kernel::require_same_shape(old.value(), gate.value(), "gated_update");
    Tensor out(old.shape());
    const Tensor &o = old.value(), &a = attended.value(), &g = gate.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - g[i]) * o[i] + g[i] * a[i];
    return t.record(std::move(out), {old, attended, gate},
                    [o = old.id, a = attended.id, gt = gate.id](Tape& t, std::size_t self) {
                        const Tensor& d = t.grad(self);
                        const Tensor& g = t.value(gt);
                        t.accumulate_with(o, [&] {
                            Tensor r = d;
                            for (std::size_t i = 0; i < r.size(); ++i) r[i] *= 1.0 - g[i];
                            return r;
                        });
                        t.accumulate_with(a, [&] { return kernel::mul(d, g); });
                        t.accumulate_with(gt, [&] {
                            Tensor r = d;
                            const Tensor &ov = t.value(o), &av = t.value(a);
                            for (std::size_t i = 0; i < r.size(); ++i) r[i] *= av[i] - ov[i];
                            return r;
                        });
                    });
}

inline Var reshape(Var x, Shape shape) {
    return x.tape->record(x.value().reshaped(std::move(shape)), {x}, [x = x.id](Tape& t, std::size_t self) {
        t.accumulate(x, t.grad(self).reshaped(t.value(x).shape()));
    });
}

/// Column means of a matrix, returned as a vector of length cols.
inline Var mean_rows(Var x) {
    const Tensor& xv = x.value();
    kernel::require_matrix(xv, "mean_rows");
    const double inv = 1.0 / static_cast<double>(xv.rows());
    Tensor out = kernel::scale(kernel::sum_rows(xv), inv);
    return x.tape->record(std::move(out), {x}, [x = x.id, inv](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Shape& s = t.value(x).shape();
        Tensor d(s);
        for (std::size_t i = 0; i < s[0]; ++i)
            for (std::size_t j = 0; j < s[1]; ++j) d(i, j) = g[j] * inv;
        t.accumulate(x, d);
    });
}

inline Var sum(Var x) {
    double acc = 0.0;
    for (double v : x.value().values()) acc += v;
    return x.tape->record(Tensor::scalar(acc), {x}, [x = x.id](Tape& t, std::size_t self) {
        t.accumulate(x, Tensor(t.value(x).shape(), t.grad(self)[0]));
    });
}

inline Var sum_squares(Var x) {
    double acc = 0.0;
    for (double v : x.value().values()) acc += v * v;
    return x.tape->record(Tensor::scalar(acc), {x}, [x = x.id](Tape& t, std::size_t self) {
        t.accumulate(x, kernel::scale(t.value(x), 2.0 * t.grad(self)[0]));
    });
}

/// mean |x_i|
inline Var mean_abs(Var x) {
    const Tensor& xv = x.value();
    double acc = 0.0;
    for (double v : xv.values()) acc += std::abs(v);
    const double inv = 1.0 / static_cast<double>(xv.size());
    return x.tape->record(Tensor::scalar(acc * inv), {x}, [x = x.id, inv](Tape& t, std::size_t self) {
        const Tensor& xv = t.value(x);
        const double g = t.grad(self)[0] * inv;
        Tensor d(xv.shape());
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = xv[i] > 0 ? g : (xv[i] < 0 ? -g : 0.0);
        t.accumulate(x, d);
    });
}

/// Σ p_i ln p_i with 0·ln 0 := 0.
inline Var sum_p_log_p(Var p) {
    const Tensor& pv = p.value();
    double acc = 0.0;
    for (double v : pv.values())
        if (v > 0.0) acc += v * std::log(v);
    return p.tape->record(Tensor::scalar(acc), {p}, [p = p.id](Tape& t, std::size_t self) {
        const Tensor& pv = t.value(p);
        const double g = t.grad(self)[0];
        Tensor d(pv.shape());
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = pv[i] > 0.0 ? g * (std::log(pv[i]) + 1.0) : 0.0;
        t.accumulate(p, d);
    });
}

/// Σ_k c_k · x_k over same-shaped inputs.
inline Var linear_combination(std::span<const Var> xs, std::span<const double> coeffs) {
    if (xs.empty() || xs.size() != coeffs.size()) throw DimensionError("linear_combination: bad arity");
    Tensor out(xs[0].shape());
    for (std::size_t k = 0; k < xs.size(); ++k) {
        const Tensor& v = xs[k].value();
        kernel::require_same_shape(out, v, "linear_combination");
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += coeffs[k] * v[i];
    }
    std::vector<std::size_t> ids;
    for (const auto& x : xs) ids.push_back(x.id);
    std::vector<double> cs(coeffs.begin(), coeffs.end());
    return xs[0].tape->record(std::move(out), xs, [ids, cs](Tape& t, std::size_t self) {
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (cs[k] == 0.0) continue;
            t.accumulate_with(ids[k], [&] { return kernel::scale(t.grad(self), cs[k]); });
        }
    });
}

inline Var mean(std::span<const Var> xs) {
    std::vector<double> cs(xs.size(), 1.0 / static_cast<double>(xs.size()));
    return linear_combination(xs, cs);
}

/// Mean over selected rows of −log softmax(logits)[row, target].
inline Var cross_entropy(Var logits, std::span<const std::size_t> rows, std::span<const std::size_t> targets) {
    const Tensor& lv = logits.value();
    kernel::require_matrix(lv, "cross_entropy");
    if (rows.size() != targets.size() || rows.empty()) throw InputError("cross_entropy: no supervised rows");
    const std::size_t n = lv.cols();
    Tensor probs({rows.size(), n});
    double loss = 0.0;
    for (std::size_t k = 0; k < rows.size(); ++k) {
        const std::size_t r = rows[k];
        if (r >= lv.rows() || targets[k] >= n) throw InputError("cross_entropy: row/target out of range");
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, lv(r, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) sum += std::exp(lv(r, j) - mx);
        const double lse = mx + std::log(sum);
        loss += lse - lv(r, targets[k]);
        for (std::size_t j = 0; j < n; ++j) probs(k, j) = std::exp(lv(r, j) - lse);
    }
    const double inv = 1.0 / static_cast<double>(rows.size());
    std::vector<std::size_t> rv(rows.begin(), rows.end()), tv(targets.begin(), targets.end());
    return logits.tape->record(Tensor::scalar(loss * inv), {logits},
                               [l = logits.id, rv, tv, probs = std::move(probs), inv](Tape& t, std::size_t self) {
                                   const double g = t.grad(self)[0] * inv;
                                   Tensor d(t.value(l).shape());
                                   for (std::size_t k = 0; k < rv.size(); ++k) {
                                       for (std::size_t j = 0; j < d.cols(); ++j) d(rv[k], j) += g * probs(k, j);
                                       d(rv[k], tv[k]) -= g;
                                   }
                                   t.accumulate(l, d);
                               });
}

}  // namespace ad
}  // namespace gmem
