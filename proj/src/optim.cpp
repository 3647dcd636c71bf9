#include "unfoldir/optim.hpp"

#include <cmath>

namespace unfoldir::nn {

AdamW::AdamW(std::vector<Parameter> params) : params_(std::move(params)) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
        m_[i].assign(params_[i].values().size(), 0.0);
        v_[i].assign(params_[i].values().size(), 0.0);
    }
}

void AdamW::zero_grad() {
    for (auto& p : params_) {
        p.node->ensure_grad();
        std::fill(p.node->grad.begin(), p.node->grad.end(), 0.0);
    }
}

void AdamW::step(double lr) {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
        Parameter& p = params_[i];
        if (!p.trainable) continue;
        p.node->ensure_grad();
        auto& val = p.node->val;
        auto& grad = p.node->grad;
        auto& m = m_[i];
        auto& v = v_[i];
        for (size_t j = 0; j < val.size(); ++j) {
            m[j] = beta1 * m[j] + (1.0 - beta1) * grad[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * grad[j] * grad[j];
            double mhat = m[j] / bc1;
            double vhat = v[j] / bc2;
            val[j] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * val[j]);
        }
    }
}

double LrSchedule::at(int64_t step) const {
    if (warmup_steps > 0 && step < warmup_steps)
        return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
    if (step >= total_steps || total_steps <= warmup_steps) return floor;
    double p = static_cast<double>(step - warmup_steps) /
               static_cast<double>(total_steps - warmup_steps);
    return floor + (peak - floor) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * p));
}

}  // namespace unfoldir::nn
