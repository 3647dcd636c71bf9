#pragma once

#include <cstdint>
#include <vector>

#include "unfoldir/tensor.hpp"

namespace unfoldir::nn {

struct AdamW {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;

    explicit AdamW(std::vector<Parameter> params);

    void zero_grad();
    void step(double lr);

private:
    std::vector<Parameter> params_;
    std::vector<std::vector<double>> m_, v_;
    int64_t t_ = 0;
};

// Linear ramp 0 -> peak over warmup_steps, then cosine to `floor` at
// total_steps; clamped to `floor` past the end.
struct LrSchedule {
    double peak = 2e-4;
    double floor = 1e-6;
    int64_t warmup_steps = 0;
    int64_t total_steps = 1;

    double at(int64_t step) const;
};

}  // namespace unfoldir::nn
