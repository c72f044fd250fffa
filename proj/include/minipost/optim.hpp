#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "minipost/autodiff.hpp"

namespace minipost {

// AdamW with decoupled weight decay: the decay term scales the parameter
// directly and never enters the moment estimates.
template <typename Scalar>
struct AdamWConfig {
    Scalar beta1 = Scalar(0.9);
    Scalar beta2 = Scalar(0.999);
    Scalar eps = Scalar(1e-8);
    Scalar weight_decay = Scalar(0.01);
};

template <typename Scalar>
class AdamW {
public:
    AdamW(std::vector<Parameter<Scalar>*> params, AdamWConfig<Scalar> cfg = {})
        : params_(std::move(params)), cfg_(cfg) {
        m_.reserve(params_.size());
        v_.reserve(params_.size());
        for (auto* p : params_) {
            m_.push_back(MatX<Scalar>::Zero(p->data.rows(), p->data.cols()));
            v_.push_back(MatX<Scalar>::Zero(p->data.rows(), p->data.cols()));
        }
    }

    // One update from the gradients currently held in the parameters.
    void step(Scalar lr) {
        ++t_;
        const Scalar bc1 = Scalar(1) - std::pow(cfg_.beta1, Scalar(t_));
        const Scalar bc2 = Scalar(1) - std::pow(cfg_.beta2, Scalar(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = *params_[i];
            const auto& g = p.grad;
            m_[i] = cfg_.beta1 * m_[i] + (Scalar(1) - cfg_.beta1) * g;
            v_[i].array() = cfg_.beta2 * v_[i].array() +
                            (Scalar(1) - cfg_.beta2) * g.array().square();
            if (cfg_.weight_decay != Scalar(0)) {
                p.data -= lr * cfg_.weight_decay * p.data;
            }
            p.data.array() -= lr * (m_[i].array() / bc1) /
                              ((v_[i].array() / bc2).sqrt() + cfg_.eps);
        }
    }

    void zero_grad() {
        for (auto* p : params_) p->zero_grad();
    }

    long steps_taken() const { return t_; }
    const AdamWConfig<Scalar>& config() const { return cfg_; }

private:
    std::vector<Parameter<Scalar>*> params_;
    AdamWConfig<Scalar> cfg_;
    std::vector<MatX<Scalar>> m_, v_;
    long t_ = 0;
};

// Scales all gradients so the global L2 norm is at most max_norm.
// Returns the pre-clip norm. max_norm <= 0 disables clipping.
template <typename Scalar>
Scalar clip_grad_norm(const std::vector<Parameter<Scalar>*>& params,
                      Scalar max_norm) {
    Scalar sq = Scalar(0);
    for (const auto* p : params) {
        sq += p->grad.squaredNorm();
    }
    const Scalar norm = std::sqrt(sq);
    if (max_norm > Scalar(0) && norm > max_norm) {
        const Scalar s = max_norm / norm;
        for (auto* p : const_cast<std::vector<Parameter<Scalar>*>&>(params)) {
            p->grad *= s;
        }
    }
    return norm;
}

}  // namespace minipost
