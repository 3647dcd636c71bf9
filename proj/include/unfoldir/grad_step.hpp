#pragma once

#include <string>
#include <vector>

#include "unfoldir/layers.hpp"
#include "unfoldir/tensor.hpp"

namespace unfoldir {

// Per-level bank of learnable key vectors mixed by a softmaxed projection
// of the degradation embedding.
struct KeyBank {
    nn::Parameter keys;  // (M, C) channel descriptors
    nn::Linear proj;     // D -> M

    static KeyBank make(nn::ParamRegistry& reg, const std::string& prefix, int64_t m_keys,
                        int64_t channels, int64_t embed_dim, nn::Rng& rng);

    nn::Tensor retrieval_weights(const nn::Tensor& d) const;  // (N,M), softmaxed
    nn::Tensor retrieve(const nn::Tensor& d) const;           // (N,C)
};

enum class PhiMode { learned, identity, explicit_matrix };

// One gradient-descent step z = x - rho * PhiT(Phi(x) - y). In learned
// mode Phi is key-conditioned cross channel-attention and PhiT a self
// channel-attention; the debug modes bind Phi/PhiT to the identity or to
// an explicit dense matrix so the skeleton can be checked against a
// classical solver.
struct GradStep {
    PhiMode mode = PhiMode::learned;

    nn::CrossChannelAttention phi;
    nn::SelfChannelAttention phi_t;
    nn::Parameter rho_raw;  // softplus-parameterized, strictly positive

    nn::Tensor phi_mat;    // (m,n), explicit mode
    nn::Tensor phi_mat_t;  // (n,m)
    double rho_fixed = 1.0;

    static GradStep make_learned(nn::ParamRegistry& reg, const std::string& prefix,
                                 int64_t channels, int heads, double rho_init, nn::Rng& rng,
                                 bool zero_out);
    static GradStep make_identity(double rho);
    static GradStep make_explicit(const std::vector<double>& phi_rowmajor, int64_t m, int64_t n,
                                  double rho);

    double rho_value() const;
    nn::Tensor rho_tensor() const;

    // PhiT(Phi(x) - y); key_vec (N,C) is required in learned mode
    nn::Tensor residual(const nn::Tensor& x, const nn::Tensor& y,
                        const nn::Tensor& key_vec) const;
    nn::Tensor operator()(const nn::Tensor& x, const nn::Tensor& y,
                          const nn::Tensor& key_vec) const;
};

}  // namespace unfoldir
