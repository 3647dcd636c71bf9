#include "unfoldir/prox.hpp"

#include <cmath>

namespace unfoldir {

void ProxConfig::validate() const {
    if (mode == ProxMode::soft_threshold) {
        if (threshold < 0) throw ValueError("ProxConfig: threshold must be >= 0");
    } else if (threshold != 0.0) {
        throw ValueError("ProxConfig: threshold only valid in soft_threshold mode");
    }
}

double soft_threshold_scalar(double z, double t) {
    if (z > t) return z - t;
    if (z < -t) return z + t;
    return 0.0;
}

ProxStack ProxStack::make(nn::ParamRegistry& reg, const std::string& prefix, int64_t channels,
                          int heads, int count, nn::Rng& rng, bool zero_out) {
    if (count < 1) throw ValueError("ProxStack: needs at least one block");
    ProxStack s;
    for (int i = 0; i < count; ++i)
        s.blocks.push_back(nn::TransformerBlock::make(reg, prefix + ".b" + std::to_string(i),
                                                      channels, heads, rng, zero_out));
    return s;
}

nn::Tensor ProxStack::operator()(const nn::Tensor& x) const {
    nn::Tensor h = x;
    for (const auto& b : blocks) h = b(h);
    return h;
}

nn::Tensor pmm_forward(const nn::Tensor& z, const ProxConfig& cfg, const ProxStack* learned) {
    cfg.validate();
    switch (cfg.mode) {
        case ProxMode::identity: return z;
        case ProxMode::soft_threshold: return nn::soft_threshold_op(z, cfg.threshold);
        case ProxMode::learned:
            if (!learned || learned->blocks.empty())
                throw ValueError("pmm_forward: learned mode needs at least one block");
            return (*learned)(z);
    }
    throw ValueError("pmm_forward: bad mode");
}

}  // namespace unfoldir
