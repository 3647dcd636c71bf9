#pragma once

#include <string>
#include <vector>

#include "unfoldir/tensor.hpp"

namespace unfoldir::nn {

std::vector<double> normal_init(Rng& rng, int64_t n, double stddev);

struct Conv2d {
    Parameter w, b;
    int stride = 1, pad = 0, groups = 1;

    // gain scales the fan-in init; gain 0 zero-initializes the weight.
    static Conv2d make(ParamRegistry& reg, const std::string& name, int64_t cin, int64_t cout,
                       int k, int stride, int pad, int groups, bool bias, Rng& rng,
                       double gain = 1.0);
    Tensor operator()(const Tensor& x) const;
    bool defined() const { return w.defined(); }
};

struct Linear {
    Parameter w, b;

    static Linear make(ParamRegistry& reg, const std::string& name, int64_t in, int64_t out,
                       bool bias, Rng& rng, double gain = 1.0);
    Tensor operator()(const Tensor& x) const;
    bool defined() const { return w.defined(); }
};

struct LayerNormC {  // over channels at each spatial position
    Parameter gamma, beta;
    double eps = 1e-5;

    static LayerNormC make(ParamRegistry& reg, const std::string& name, int64_t channels);
    Tensor operator()(const Tensor& x) const;
};

struct LayerNormVec {  // over the last dim of (N,D)
    Parameter gamma, beta;
    double eps = 1e-5;

    static LayerNormVec make(ParamRegistry& reg, const std::string& name, int64_t dim);
    Tensor operator()(const Tensor& x) const;
};

// Three linear layers with layer normalization and GELU between them,
// width-preserving (D -> D).
struct AdapterMlp {
    Linear l1, l2, l3;
    LayerNormVec n1, n2;

    static AdapterMlp make(ParamRegistry& reg, const std::string& prefix, int64_t dim, Rng& rng);
    Tensor operator()(const Tensor& x) const;
};

// Channel-wise transposed attention: per head the C/heads x C/heads map of
// L2-normalized channel descriptors, scaled by a learnable temperature.
// If capture is non-null the post-softmax attention is copied out.
Tensor channel_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& temp,
                         int heads, std::vector<double>* capture = nullptr);

struct SelfChannelAttention {
    Conv2d qkv_point, qkv_depth, out_proj;
    Parameter temp;
    int heads = 1;

    static SelfChannelAttention make(ParamRegistry& reg, const std::string& prefix, int64_t c,
                                     int heads, Rng& rng, bool zero_out);
    Tensor operator()(const Tensor& x, std::vector<double>* capture = nullptr) const;
};

struct CrossChannelAttention {
    Conv2d q_point, q_depth, k_point, k_depth, v_point, v_depth, out_proj;
    Parameter temp;
    int heads = 1;

    static CrossChannelAttention make(ParamRegistry& reg, const std::string& prefix, int64_t c,
                                      int heads, Rng& rng, bool zero_out);
    // key_vec: (N,C), broadcast over space before its projections
    Tensor operator()(const Tensor& x, const Tensor& key_vec,
                      std::vector<double>* capture = nullptr) const;
};

// Two parallel 1x1-then-3x3-depthwise paths, GELU gate, elementwise
// product, 1x1 projection back to C.
struct GatedFeedForward {
    LayerNormC ln;
    Conv2d expand_point, expand_depth, proj;
    int64_t hidden = 0;

    static GatedFeedForward make(ParamRegistry& reg, const std::string& prefix, int64_t c,
                                 Rng& rng, bool zero_out);
    Tensor operator()(const Tensor& x) const;
};

struct TransformerBlock {
    LayerNormC ln;
    SelfChannelAttention attn;
    GatedFeedForward ffn;

    static TransformerBlock make(ParamRegistry& reg, const std::string& prefix, int64_t c,
                                 int heads, Rng& rng, bool zero_out);
    Tensor operator()(const Tensor& x, std::vector<double>* capture = nullptr) const;
};

}  // namespace unfoldir::nn
