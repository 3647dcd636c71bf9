#pragma once

#include <string>
#include <vector>

#include "unfoldir/layers.hpp"
#include "unfoldir/tensor.hpp"

namespace unfoldir {

enum class ProxMode { learned, soft_threshold, identity };

struct ProxConfig {
    ProxMode mode = ProxMode::learned;
    double threshold = 0.0;  // rho*lambda, soft_threshold mode only

    void validate() const;
};

double soft_threshold_scalar(double z, double t);

// Stack of transformer blocks acting as the learned proximal operator.
struct ProxStack {
    std::vector<nn::TransformerBlock> blocks;

    static ProxStack make(nn::ParamRegistry& reg, const std::string& prefix, int64_t channels,
                          int heads, int count, nn::Rng& rng, bool zero_out);
    nn::Tensor operator()(const nn::Tensor& x) const;
};

// learned -> block stack; soft_threshold -> sign(z)*max(|z|-t,0); identity -> z
nn::Tensor pmm_forward(const nn::Tensor& z, const ProxConfig& cfg, const ProxStack* learned);

}  // namespace unfoldir
