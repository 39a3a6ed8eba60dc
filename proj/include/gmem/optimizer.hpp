#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "gmem/autodiff.hpp"

namespace gmem {

struct AdamConfig {
    double lr = 3e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 1.0;  // <= 0 disables clipping
};

/// Adam with bias correction and global-norm gradient clipping. Frozen
/// parameters are skipped entirely.
class Adam {
public:
    Adam(ParamRefs params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        for (Parameter* p : params_) {
            m_.emplace_back(p->value.shape());
            v_.emplace_back(p->value.shape());
        }
    }

    void zero_grad() {
        for (Parameter* p : params_) p->zero_grad();
    }

    double grad_norm() const {
        double sq = 0.0;
        for (const Parameter* p : params_) {
            if (!p->trainable) continue;
            for (double g : p->grad.values()) sq += g * g;
        }
        return std::sqrt(sq);
    }

    /// Applies one update and returns the pre-clip gradient norm.
    double step() {
        const double norm = grad_norm();
        const double scale = (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t k = 0; k < params_.size(); ++k) {
            Parameter& p = *params_[k];
            if (!p.trainable) continue;
            Tensor& m = m_[k];
            Tensor& v = v_[k];
            for (std::size_t i = 0; i < p.value.size(); ++i) {
                const double g = p.grad[i] * scale;
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
                p.value[i] -= cfg_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
            }
        }
        return norm;
    }

    std::uint64_t steps_taken() const noexcept { return t_; }
    void set_steps_taken(std::uint64_t t) noexcept { t_ = t; }
    const ParamRefs& parameters() const noexcept { return params_; }
    std::vector<Tensor>& first_moments() noexcept { return m_; }
    std::vector<Tensor>& second_moments() noexcept { return v_; }
    const std::vector<Tensor>& first_moments() const noexcept { return m_; }
    const std::vector<Tensor>& second_moments() const noexcept { return v_; }
    const AdamConfig& config() const noexcept { return cfg_; }

private:
    ParamRefs params_;
    AdamConfig cfg_;
    std::vector<Tensor> m_, v_;
    std::uint64_t t_ = 0;
};

}  // namespace gmem
