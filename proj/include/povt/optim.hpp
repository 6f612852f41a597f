#pragma once

#include "povt/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <vector>

namespace povt {

// Adam over a fixed parameter list. Callers own the schedule: set_lr before
// step when warming up. step() consumes .grad and zeroes it.
class Adam {
public:
    Adam(std::vector<Tensor> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (const auto& p : params_) {
            slots_.push_back({std::vector<double>(static_cast<size_t>(p.size()), 0.0),
                              std::vector<double>(static_cast<size_t>(p.size()), 0.0)});
        }
    }

    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }
    int64_t step_count() const { return t_; }
    const std::vector<Tensor>& params() const { return params_; }

    // Scales all grads so the global L2 norm is at most max_norm; returns the
    // pre-clip norm.
    double clip_global_norm(double max_norm) {
        double sq = 0.0;
        for (auto& p : params_) {
            if (!p.has_grad()) continue;
            for (double g : p.grad()) sq += g * g;
        }
        const double norm = std::sqrt(sq);
        if (norm > max_norm && norm > 0.0) {
            const double s = max_norm / norm;
            for (auto& p : params_) {
                if (!p.has_grad()) continue;
                double* g = p.grad_data();
                for (int64_t i = 0; i < p.size(); ++i) g[i] *= s;
            }
        }
        return norm;
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (size_t k = 0; k < params_.size(); ++k) {
            Tensor& p = params_[k];
            if (!p.has_grad()) continue;
            const double* g = p.grad().data();
            auto& m = slots_[k].m;
            auto& v = slots_[k].v;
            double* x = p.data();
            for (int64_t i = 0; i < p.size(); ++i) {
                m[static_cast<size_t>(i)] = beta1_ * m[static_cast<size_t>(i)] + (1.0 - beta1_) * g[i];
                v[static_cast<size_t>(i)] = beta2_ * v[static_cast<size_t>(i)] + (1.0 - beta2_) * g[i] * g[i];
                const double mh = m[static_cast<size_t>(i)] / bc1;
                const double vh = v[static_cast<size_t>(i)] / bc2;
                x[i] -= lr_ * mh / (std::sqrt(vh) + eps_);
            }
        }
        zero_grad();
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

private:
    struct Slot {
        std::vector<double> m, v;
    };
    std::vector<Tensor> params_;
    std::vector<Slot> slots_;
    double lr_, beta1_, beta2_, eps_;
    int64_t t_ = 0;
};

} // namespace povt
