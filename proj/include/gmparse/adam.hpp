#pragma once

#include "gmparse/autodiff.hpp"

namespace gmparse {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam with bias correction. Moment buffers are keyed by position in the
// parameter list, which therefore must stay stable across steps.
template <class T>
class Adam {
public:
    Adam(std::vector<ad::Parameter<T>*> params, AdamConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
        if (cfg_.lr <= 0) throw ValueError("adam: learning rate must be positive");
        m_.reserve(params_.size());
        v_.reserve(params_.size());
        for (auto* p : params_) {
            m_.emplace_back(p->size(), T(0));
            v_.emplace_back(p->size(), T(0));
        }
    }

    void step() {
        ++t_;
        const T b1 = T(cfg_.beta1), b2 = T(cfg_.beta2);
        const T c1 = T(1) - T(std::pow(cfg_.beta1, t_));
        const T c2 = T(1) - T(std::pow(cfg_.beta2, t_));
        const T lr = T(cfg_.lr), eps = T(cfg_.eps);
        for (std::size_t pi = 0; pi < params_.size(); ++pi) {
            auto& p = *params_[pi];
            for (std::size_t i = 0; i < p.size(); ++i) {
                const T g = p.grad.data[i];
                m_[pi][i] = b1 * m_[pi][i] + (T(1) - b1) * g;
                v_[pi][i] = b2 * v_[pi][i] + (T(1) - b2) * g * g;
                const T mh = m_[pi][i] / c1, vh = v_[pi][i] / c2;
                p.value.data[i] -= lr * mh / (std::sqrt(vh) + eps);
            }
        }
    }

    void zero_grad() {
        for (auto* p : params_) std::fill(p->grad.data.begin(), p->grad.data.end(), T(0));
    }

    long long step_count() const { return t_; }
    const AdamConfig& config() const { return cfg_; }

private:
    std::vector<ad::Parameter<T>*> params_;
    AdamConfig cfg_;
    std::vector<std::vector<T>> m_, v_;
    long long t_ = 0;
};

}  // namespace gmparse
