#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "unigen/core/tensor.hpp"

namespace unigen::pipe {

// Cosine decay with linear warmup over the leading fraction of the run.
inline double cosine_lr(int64_t step, int64_t total_steps, double base_lr, double warmup_ratio) {
    core::require(total_steps >= 1 && step >= 0 && step < total_steps, "cosine_lr: bad step");
    core::require(warmup_ratio >= 0.0 && warmup_ratio < 1.0, "cosine_lr: bad warmup ratio");
    const int64_t warmup = static_cast<int64_t>(warmup_ratio * static_cast<double>(total_steps));
    if (step < warmup) return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
    const double progress = warmup == total_steps
                                ? 1.0
                                : static_cast<double>(step - warmup) /
                                      static_cast<double>(total_steps - warmup);
    return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

// One tensor to update: the optimizer is agnostic to whether it came from the
// unified model or the tokenizer; names key the moment estimates.
template <class T>
struct OptSlot {
    std::string name;
    core::Tensor<T>* value = nullptr;
    const core::Tensor<T>* grad = nullptr;  // nullptr: no gradient this step
};

// Adam with decoupled weight decay.
template <class T>
class AdamW {
public:
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.0;

    struct Moments {
        std::vector<T> m, v;
    };

    void step(std::vector<OptSlot<T>>& slots, double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
        for (auto& slot : slots) {
            if (!slot.grad) continue;
            core::require_same_shape(slot.value->shape, slot.grad->shape, "adamw");
            auto& mo = state_[slot.name];
            if (mo.m.empty()) {
                mo.m.assign(slot.value->v.size(), T(0));
                mo.v.assign(slot.value->v.size(), T(0));
            }
            core::require(mo.m.size() == slot.value->v.size(), "adamw: state shape drift for " + slot.name);
            T* w = slot.value->data();
            const T* g = slot.grad->data();
            for (size_t i = 0; i < slot.value->v.size(); ++i) {
                const double gi = static_cast<double>(g[i]);
                const double m = beta1 * static_cast<double>(mo.m[i]) + (1.0 - beta1) * gi;
                const double v = beta2 * static_cast<double>(mo.v[i]) + (1.0 - beta2) * gi * gi;
                mo.m[i] = static_cast<T>(m);
                mo.v[i] = static_cast<T>(v);
                const double mhat = m / bc1, vhat = v / bc2;
                double wi = static_cast<double>(w[i]);
                wi -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * wi);
                w[i] = static_cast<T>(wi);
            }
        }
    }

    int64_t step_count() const { return t_; }
    const std::unordered_map<std::string, Moments>& state() const { return state_; }
    void restore(int64_t t, std::unordered_map<std::string, Moments> state) {
        t_ = t;
        state_ = std::move(state);
    }
    void reset() {
        t_ = 0;
        state_.clear();
    }

private:
    int64_t t_ = 0;
    std::unordered_map<std::string, Moments> state_;
};

}  // namespace unigen::pipe
