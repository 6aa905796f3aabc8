#pragma once

#include "padapt/config.hpp"
#include "padapt/tensor.hpp"

#include <cmath>
#include <vector>

namespace padapt {

// Adam with decoupled weight decay. Owns first/second moment buffers for a
// fixed parameter list; update order is the construction order (deterministic).
class AdamW {
public:
    AdamW(std::vector<Tensor> params, const TrainConfig& hp)
        : params_(std::move(params)), hp_(hp) {
        for (const Tensor& p : params_) {
            m_.emplace_back(p.numel(), 0.0f);
            v_.emplace_back(p.numel(), 0.0f);
        }
    }

    // Clips the global grad norm over all owned params, then updates them.
    void step() {
        ++t_;
        clip_grads();
        const double bc1 = 1.0 - std::pow(static_cast<double>(hp_.beta1), t_);
        const double bc2 = 1.0 - std::pow(static_cast<double>(hp_.beta2), t_);
        for (size_t i = 0; i < params_.size(); ++i) {
            Tensor& p = params_[i];
            if (!p.has_grad()) continue;
            float* w = p.data();
            const float* g = p.grad();
            float* m = m_[i].data();
            float* v = v_[i].data();
            const int64_t n = p.numel();
            for (int64_t j = 0; j < n; ++j) {
                m[j] = hp_.beta1 * m[j] + (1.0f - hp_.beta1) * g[j];
                v[j] = hp_.beta2 * v[j] + (1.0f - hp_.beta2) * g[j] * g[j];
                const float mhat = m[j] / static_cast<float>(bc1);
                const float vhat = v[j] / static_cast<float>(bc2);
                w[j] -= hp_.lr * (mhat / (std::sqrt(vhat) + hp_.eps) + hp_.weight_decay * w[j]);
            }
        }
    }

    void zero_grads() {
        for (Tensor& p : params_) p.zero_grad();
    }

    const std::vector<Tensor>& params() const { return params_; }

private:
    void clip_grads() {
        if (hp_.clip_norm <= 0.0f) return;
        double sq = 0.0;
        for (const Tensor& p : params_) {
            if (!p.has_grad()) continue;
            for (int64_t j = 0; j < p.numel(); ++j) {
                const double g = p.grad()[j];
                sq += g * g;
            }
        }
        const double norm = std::sqrt(sq);
        if (norm <= hp_.clip_norm) return;
        const float s = static_cast<float>(hp_.clip_norm / norm);
        for (Tensor& p : params_) {
            if (!p.has_grad()) continue;
            for (int64_t j = 0; j < p.numel(); ++j) p.grad()[j] *= s;
        }
    }

    std::vector<Tensor> params_;
    TrainConfig hp_;
    std::vector<std::vector<float>> m_, v_;
    int64_t t_ = 0;
};

}  // namespace padapt
