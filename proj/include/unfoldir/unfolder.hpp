#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "unfoldir/grad_step.hpp"
#include "unfoldir/image.hpp"
#include "unfoldir/prox.hpp"
#include "unfoldir/tensor.hpp"

namespace unfoldir {

struct ModelConfig {
    int levels = 2;
    int stages = 4;
    int64_t base_channels = 16;
    std::vector<int> pmm_blocks = {2, 2};  // per level
    int64_t m_keys = 5;
    int64_t embed_dim = 64;
    double rho_init = 0.5;
    bool identity_init = true;  // zero residual branches; restore == identity at init
    std::string transition = "strided_conv";  // or "pixel_shuffle"
    bool residual_output = false;
    bool per_stage_keys = false;
    bool learned_constant_embedding = false;  // replaces d_I by a learned vector
    uint64_t seed = 1;

    void validate() const;
    std::vector<int> stage_levels() const;  // U-walk, 0-indexed levels
    int64_t channels_at(int level) const { return base_channels << level; }
    int heads_at(int level) const {
        int64_t c = channels_at(level);
        return static_cast<int>(c / 16 > 0 ? c / 16 : 1);
    }
    std::string describe() const;  // canonical text, hashed into checkpoints
};

// K-stage, multi-level unfolding restorer: 1x1 level transforms in and
// out, per-level degraded inputs, U-walk of gradient-step + proximal
// stages with skip fusion on the way back up.
class UnfoldingModel {
public:
    explicit UnfoldingModel(ModelConfig cfg);

    const ModelConfig& config() const { return cfg_; }
    nn::ParamRegistry& params() { return reg_; }
    const nn::ParamRegistry& params() const { return reg_; }

    nn::Tensor project(const nn::Tensor& y3) const;
    nn::Tensor back_project(const nn::Tensor& x) const;
    // Encoder-side per-level degraded inputs, ylv[0] = project output.
    std::vector<nn::Tensor> level_inputs(const nn::Tensor& y1) const;

    // d: (N,embed_dim); may be undefined when the model carries a learned
    // constant embedding. Output is (N,3,H,W), unclamped.
    nn::Tensor forward(const nn::Tensor& y3, const nn::Tensor& d) const;
    // First-stage PhiT(Phi(x)-y) mapped back to 3 channels.
    nn::Tensor first_stage_residual(const nn::Tensor& y3, const nn::Tensor& d) const;

    Image restore(const Image& y, const std::vector<double>& d_embedding) const;
    Image restore(const Image& y) const;

    const std::vector<int>& stage_levels() const { return stage_levels_; }
    const KeyBank& bank_for(int stage) const;
    const GradStep& step(int stage) const { return steps_[stage]; }
    const ProxStack& pmm(int stage) const { return pmms_[stage]; }

    void save(const std::string& path, std::map<std::string, std::string> header) const;
    std::map<std::string, std::string> load(const std::string& path);

private:
    ModelConfig cfg_;
    nn::ParamRegistry reg_;
    nn::Conv2d project_, back_project_;
    std::vector<nn::Conv2d> y_down_, y_up_, x_down_, x_up_, fuse_;
    std::vector<KeyBank> banks_;
    std::vector<GradStep> steps_;
    std::vector<ProxStack> pmms_;
    nn::Parameter d_const_;
    std::vector<int> stage_levels_;

    nn::Tensor apply_down(const nn::Conv2d& conv, const nn::Tensor& x) const;
    nn::Tensor apply_up(const nn::Conv2d& conv, const nn::Tensor& x) const;
    nn::Tensor embedding_for(const nn::Tensor& d, int64_t batch) const;
};

// Debug-skeleton run of the unfolding loop: single level, no level
// transforms, Phi bound to an explicit matrix and PhiT to its transpose,
// prox in soft-threshold mode. Returns all K iterates.
std::vector<std::vector<double>> ista_mode_forward(const std::vector<double>& phi_rowmajor,
                                                   int64_t m, int64_t n,
                                                   const std::vector<double>& y, double rho,
                                                   double lam, int stages,
                                                   const std::vector<double>& x0);

}  // namespace unfoldir
