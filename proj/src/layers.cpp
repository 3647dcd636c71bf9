#include "unfoldir/layers.hpp"

#include <cmath>

namespace unfoldir::nn {

std::vector<double> normal_init(Rng& rng, int64_t n, double stddev) {
    std::vector<double> v(n);
    for (double& x : v) x = rng.gaussian(0.0, stddev);
    return v;
}

Conv2d Conv2d::make(ParamRegistry& reg, const std::string& name, int64_t cin, int64_t cout, int k,
                    int stride, int pad, int groups, bool bias, Rng& rng, double gain) {
    Conv2d c;
    c.stride = stride;
    c.pad = pad;
    c.groups = groups;
    int64_t fan_in = (cin / groups) * k * k;
    double stddev = gain == 0.0 ? 0.0 : gain / std::sqrt(static_cast<double>(fan_in));
    std::vector<double> init = gain == 0.0
                                   ? std::vector<double>(cout * (cin / groups) * k * k, 0.0)
                                   : normal_init(rng, cout * (cin / groups) * k * k, stddev);
    c.w = reg.add(name + ".w", {cout, cin / groups, k, k}, std::move(init));
    if (bias) c.b = reg.add(name + ".b", {cout}, std::vector<double>(cout, 0.0));
    return c;
}

Tensor Conv2d::operator()(const Tensor& x) const {
    return conv2d(x, w.tensor(), b.defined() ? b.tensor() : Tensor(), stride, pad, groups);
}

Linear Linear::make(ParamRegistry& reg, const std::string& name, int64_t in, int64_t out,
                    bool bias, Rng& rng, double gain) {
    Linear l;
    double stddev = gain == 0.0 ? 0.0 : gain / std::sqrt(static_cast<double>(in));
    std::vector<double> init = gain == 0.0 ? std::vector<double>(in * out, 0.0)
                                           : normal_init(rng, in * out, stddev);
    l.w = reg.add(name + ".w", {out, in}, std::move(init));
    if (bias) l.b = reg.add(name + ".b", {out}, std::vector<double>(out, 0.0));
    return l;
}

Tensor Linear::operator()(const Tensor& x) const {
    return linear_op(x, w.tensor(), b.defined() ? b.tensor() : Tensor());
}

LayerNormC LayerNormC::make(ParamRegistry& reg, const std::string& name, int64_t channels) {
    LayerNormC n;
    n.gamma = reg.add(name + ".gamma", {channels}, std::vector<double>(channels, 1.0));
    n.beta = reg.add(name + ".beta", {channels}, std::vector<double>(channels, 0.0));
    return n;
}

Tensor LayerNormC::operator()(const Tensor& x) const {
    return layer_norm_channels(x, gamma.tensor(), beta.tensor(), eps);
}

LayerNormVec LayerNormVec::make(ParamRegistry& reg, const std::string& name, int64_t dim) {
    LayerNormVec n;
    n.gamma = reg.add(name + ".gamma", {dim}, std::vector<double>(dim, 1.0));
    n.beta = reg.add(name + ".beta", {dim}, std::vector<double>(dim, 0.0));
    return n;
}

Tensor LayerNormVec::operator()(const Tensor& x) const {
    return layer_norm_lastdim(x, gamma.tensor(), beta.tensor(), eps);
}

AdapterMlp AdapterMlp::make(ParamRegistry& reg, const std::string& prefix, int64_t dim, Rng& rng) {
    AdapterMlp m;
    m.l1 = Linear::make(reg, prefix + ".l1", dim, dim, true, rng);
    m.n1 = LayerNormVec::make(reg, prefix + ".n1", dim);
    m.l2 = Linear::make(reg, prefix + ".l2", dim, dim, true, rng);
    m.n2 = LayerNormVec::make(reg, prefix + ".n2", dim);
    m.l3 = Linear::make(reg, prefix + ".l3", dim, dim, true, rng);
    return m;
}

Tensor AdapterMlp::operator()(const Tensor& x) const {
    Tensor h = gelu(n1(l1(x)));
    h = gelu(n2(l2(h)));
    return l3(h);
}

Tensor channel_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& temp,
                         int heads, std::vector<double>* capture) {
    if (q.ndim() != 4) throw ValueError("channel_attention: needs NCHW");
    int64_t N = q.dim(0), C = q.dim(1), H = q.dim(2), W = q.dim(3);
    if (C % heads != 0) throw ValueError("channel_attention: heads must divide channels");
    if (q.shape() != k.shape() || q.shape() != v.shape())
        throw ValueError("channel_attention: q/k/v shape mismatch");
    int64_t ch = C / heads, HW = H * W;
    Tensor q3 = reshape(q, {N * heads, ch, HW});
    Tensor k3 = reshape(k, {N * heads, ch, HW});
    Tensor v3 = reshape(v, {N * heads, ch, HW});
    Tensor logits = bmm_nt(l2_normalize_lastdim(q3), l2_normalize_lastdim(k3));
    logits = scale_by_head(logits, temp, heads);
    Tensor attn = softmax_lastdim(logits);
    if (capture) *capture = attn.data();
    Tensor out = bmm(attn, v3);
    return reshape(out, {N, C, H, W});
}

SelfChannelAttention SelfChannelAttention::make(ParamRegistry& reg, const std::string& prefix,
                                                int64_t c, int heads, Rng& rng, bool zero_out) {
    SelfChannelAttention a;
    a.heads = heads;
    a.qkv_point = Conv2d::make(reg, prefix + ".qkv_point", c, 3 * c, 1, 1, 0, 1, false, rng);
    a.qkv_depth = Conv2d::make(reg, prefix + ".qkv_depth", 3 * c, 3 * c, 3, 1, 1,
                               static_cast<int>(3 * c), false, rng);
    a.out_proj =
        Conv2d::make(reg, prefix + ".out_proj", c, c, 1, 1, 0, 1, false, rng, zero_out ? 0.0 : 1.0);
    a.temp = reg.add(prefix + ".temp", {heads}, std::vector<double>(heads, 1.0));
    return a;
}

Tensor SelfChannelAttention::operator()(const Tensor& x, std::vector<double>* capture) const {
    int64_t c = x.dim(1);
    Tensor qkv = qkv_depth(qkv_point(x));
    Tensor q = slice_channels(qkv, 0, c);
    Tensor k = slice_channels(qkv, c, 2 * c);
    Tensor v = slice_channels(qkv, 2 * c, 3 * c);
    return out_proj(channel_attention(q, k, v, temp.tensor(), heads, capture));
}

CrossChannelAttention CrossChannelAttention::make(ParamRegistry& reg, const std::string& prefix,
                                                  int64_t c, int heads, Rng& rng, bool zero_out) {
    CrossChannelAttention a;
    a.heads = heads;
    a.q_point = Conv2d::make(reg, prefix + ".q_point", c, c, 1, 1, 0, 1, false, rng);
    a.q_depth =
        Conv2d::make(reg, prefix + ".q_depth", c, c, 3, 1, 1, static_cast<int>(c), false, rng);
    a.k_point = Conv2d::make(reg, prefix + ".k_point", c, c, 1, 1, 0, 1, false, rng);
    a.k_depth =
        Conv2d::make(reg, prefix + ".k_depth", c, c, 3, 1, 1, static_cast<int>(c), false, rng);
    a.v_point = Conv2d::make(reg, prefix + ".v_point", c, c, 1, 1, 0, 1, false, rng);
    a.v_depth =
        Conv2d::make(reg, prefix + ".v_depth", c, c, 3, 1, 1, static_cast<int>(c), false, rng);
    a.out_proj =
        Conv2d::make(reg, prefix + ".out_proj", c, c, 1, 1, 0, 1, false, rng, zero_out ? 0.0 : 1.0);
    a.temp = reg.add(prefix + ".temp", {heads}, std::vector<double>(heads, 1.0));
    return a;
}

Tensor CrossChannelAttention::operator()(const Tensor& x, const Tensor& key_vec,
                                         std::vector<double>* capture) const {
    Tensor key_map = broadcast_vector_to_map(key_vec, x.dim(2), x.dim(3));
    Tensor q = q_depth(q_point(x));
    Tensor k = k_depth(k_point(key_map));
    Tensor v = v_depth(v_point(x));
    return out_proj(channel_attention(q, k, v, temp.tensor(), heads, capture));
}

GatedFeedForward GatedFeedForward::make(ParamRegistry& reg, const std::string& prefix, int64_t c,
                                        Rng& rng, bool zero_out) {
    GatedFeedForward f;
    f.hidden = static_cast<int64_t>(std::llround(2.66 * c));
    f.ln = LayerNormC::make(reg, prefix + ".ln", c);
    f.expand_point =
        Conv2d::make(reg, prefix + ".expand_point", c, 2 * f.hidden, 1, 1, 0, 1, false, rng);
    f.expand_depth = Conv2d::make(reg, prefix + ".expand_depth", 2 * f.hidden, 2 * f.hidden, 3, 1,
                                  1, static_cast<int>(2 * f.hidden), false, rng);
    f.proj =
        Conv2d::make(reg, prefix + ".proj", f.hidden, c, 1, 1, 0, 1, false, rng, zero_out ? 0.0 : 1.0);
    return f;
}

Tensor GatedFeedForward::operator()(const Tensor& x) const {
    Tensor h = expand_depth(expand_point(ln(x)));
    Tensor gate = slice_channels(h, 0, hidden);
    Tensor val = slice_channels(h, hidden, 2 * hidden);
    return proj(mul(gelu(gate), val));
}

TransformerBlock TransformerBlock::make(ParamRegistry& reg, const std::string& prefix, int64_t c,
                                        int heads, Rng& rng, bool zero_out) {
    TransformerBlock b;
    b.ln = LayerNormC::make(reg, prefix + ".ln", c);
    b.attn = SelfChannelAttention::make(reg, prefix + ".attn", c, heads, rng, zero_out);
    b.ffn = GatedFeedForward::make(reg, prefix + ".ffn", c, rng, zero_out);
    return b;
}

Tensor TransformerBlock::operator()(const Tensor& x, std::vector<double>* capture) const {
    Tensor y = add(x, attn(ln(x), capture));
    return add(y, ffn(y));
}

}  // namespace unfoldir::nn
