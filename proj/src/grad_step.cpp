#include "unfoldir/grad_step.hpp"

#include <cmath>

namespace unfoldir {

using nn::Tensor;

KeyBank KeyBank::make(nn::ParamRegistry& reg, const std::string& prefix, int64_t m_keys,
                      int64_t channels, int64_t embed_dim, nn::Rng& rng) {
    if (m_keys < 1) throw ValueError("KeyBank: m_keys must be >= 1");
    KeyBank b;
    b.keys = reg.add(prefix + ".keys", {m_keys, channels},
                     nn::normal_init(rng, m_keys * channels, 1.0 / std::sqrt((double)channels)));
    b.proj = nn::Linear::make(reg, prefix + ".proj", embed_dim, m_keys, true, rng);
    return b;
}

Tensor KeyBank::retrieval_weights(const Tensor& d) const {
    if (d.ndim() != 2 || d.dim(1) != proj.w.node->shape[1])
        throw ValueError("KeyBank: embedding width mismatch");
    return nn::softmax_lastdim(proj(d));
}

Tensor KeyBank::retrieve(const Tensor& d) const {
    Tensor w = retrieval_weights(d);        // (N,M)
    return nn::matmul(w, keys.tensor());    // (N,C)
}

namespace {

double softplus_inverse(double y) {
    // y = log(1+e^x)  =>  x = log(e^y - 1)
    if (y > 30.0) return y;
    return std::log(std::expm1(y));
}

}  // namespace

GradStep GradStep::make_learned(nn::ParamRegistry& reg, const std::string& prefix,
                                int64_t channels, int heads, double rho_init, nn::Rng& rng,
                                bool zero_out) {
    if (rho_init <= 0) throw ValueError("GradStep: rho_init must be > 0");
    GradStep s;
    s.mode = PhiMode::learned;
    s.phi = nn::CrossChannelAttention::make(reg, prefix + ".phi", channels, heads, rng, zero_out);
    s.phi_t = nn::SelfChannelAttention::make(reg, prefix + ".phi_t", channels, heads, rng, zero_out);
    s.rho_raw = reg.add(prefix + ".rho_raw", {1}, {softplus_inverse(rho_init)});
    return s;
}

GradStep GradStep::make_identity(double rho) {
    GradStep s;
    s.mode = PhiMode::identity;
    s.rho_fixed = rho;
    return s;
}

GradStep GradStep::make_explicit(const std::vector<double>& phi_rowmajor, int64_t m, int64_t n,
                                 double rho) {
    if (static_cast<int64_t>(phi_rowmajor.size()) != m * n)
        throw ValueError("GradStep: explicit matrix size mismatch");
    GradStep s;
    s.mode = PhiMode::explicit_matrix;
    s.rho_fixed = rho;
    s.phi_mat = Tensor::from_data({m, n}, phi_rowmajor);
    std::vector<double> t(static_cast<size_t>(m) * n);
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) t[j * m + i] = phi_rowmajor[i * n + j];
    s.phi_mat_t = Tensor::from_data({n, m}, std::move(t));
    return s;
}

double GradStep::rho_value() const {
    if (mode != PhiMode::learned) return rho_fixed;
    double x = rho_raw.values()[0];
    return x > 30.0 ? x : std::log1p(std::exp(x));
}

Tensor GradStep::rho_tensor() const {
    if (mode == PhiMode::learned) return nn::softplus_op(rho_raw.tensor());
    return Tensor::from_data({1}, {rho_fixed});
}

Tensor GradStep::residual(const Tensor& x, const Tensor& y, const Tensor& key_vec) const {
    Tensor phix;
    switch (mode) {
        case PhiMode::learned:
            if (!key_vec.defined()) throw ValueError("GradStep: learned mode needs a key");
            phix = phi(x, key_vec);
            break;
        case PhiMode::identity: phix = x; break;
        case PhiMode::explicit_matrix: phix = nn::matmul(phi_mat, x); break;
    }
    if (phix.shape() != y.shape()) throw ValueError("GradStep: transformed x / y shape mismatch");
    Tensor r = nn::sub(phix, y);
    switch (mode) {
        case PhiMode::learned: return phi_t(r);
        case PhiMode::identity: return r;
        case PhiMode::explicit_matrix: return nn::matmul(phi_mat_t, r);
    }
    throw ValueError("GradStep: bad mode");
}

Tensor GradStep::operator()(const Tensor& x, const Tensor& y, const Tensor& key_vec) const {
    Tensor r = residual(x, y, key_vec);
    return nn::sub(x, nn::mul_scalar_tensor(r, rho_tensor()));
}

}  // namespace unfoldir
