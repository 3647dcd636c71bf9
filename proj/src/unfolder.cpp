#include "unfoldir/unfolder.hpp"

#include <cmath>
#include <sstream>

#include "unfoldir/dataset.hpp"

namespace unfoldir {

using nn::Tensor;

void ModelConfig::validate() const {
    if (levels < 1) throw ConfigError("model: levels must be >= 1");
    if (base_channels < 3) throw ConfigError("model: base_channels must be >= 3");
    int min_stages = levels == 1 ? 1 : 2 * levels - 1;
    if (stages < min_stages)
        throw ConfigError("model: stages must be >= " + std::to_string(min_stages) +
                          " for a U-walk over " + std::to_string(levels) + " levels");
    if (static_cast<int>(pmm_blocks.size()) != levels)
        throw ConfigError("model: pmm_blocks must list one count per level");
    for (int b : pmm_blocks)
        if (b < 1) throw ConfigError("model: pmm_blocks entries must be >= 1");
    if (m_keys < 1) throw ConfigError("model: m_keys must be >= 1");
    if (embed_dim < 1) throw ConfigError("model: embed_dim must be >= 1");
    if (rho_init <= 0) throw ConfigError("model: rho_init must be > 0");
    if (transition != "strided_conv" && transition != "pixel_shuffle")
        throw ConfigError("model: unknown transition '" + transition + "'");
}

std::vector<int> ModelConfig::stage_levels() const {
    // descend 0..levels-1, hold extra stages at the deepest level, ascend back
    std::vector<int> walk;
    for (int l = 0; l < levels; ++l) walk.push_back(l);
    int extra = stages - (levels == 1 ? 1 : 2 * levels - 1);
    for (int e = 0; e < extra; ++e) walk.push_back(levels - 1);
    for (int l = levels - 2; l >= 0; --l) walk.push_back(l);
    return walk;
}

std::string ModelConfig::describe() const {
    std::ostringstream os;
    os << "levels=" << levels << ";stages=" << stages << ";base_channels=" << base_channels
       << ";pmm_blocks=";
    for (size_t i = 0; i < pmm_blocks.size(); ++i) os << (i ? "," : "") << pmm_blocks[i];
    os << ";m_keys=" << m_keys << ";embed_dim=" << embed_dim << ";rho_init=" << rho_init
       << ";identity_init=" << identity_init << ";transition=" << transition
       << ";residual_output=" << residual_output << ";per_stage_keys=" << per_stage_keys
       << ";learned_constant_embedding=" << learned_constant_embedding;
    return os.str();
}

namespace {

// C1 x 3 with orthonormal columns (Gram-Schmidt on a seeded Gaussian block)
std::vector<double> orthonormal_columns(int64_t c1, nn::Rng& rng) {
    std::vector<std::vector<double>> cols(3, std::vector<double>(c1));
    for (auto& col : cols)
        for (double& v : col) v = rng.gaussian();
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < i; ++j) {
            double dot = 0;
            for (int64_t r = 0; r < c1; ++r) dot += cols[i][r] * cols[j][r];
            for (int64_t r = 0; r < c1; ++r) cols[i][r] -= dot * cols[j][r];
        }
        double norm = 0;
        for (int64_t r = 0; r < c1; ++r) norm += cols[i][r] * cols[i][r];
        norm = std::sqrt(norm);
        for (int64_t r = 0; r < c1; ++r) cols[i][r] /= norm;
    }
    std::vector<double> w(static_cast<size_t>(c1) * 3);
    for (int64_t r = 0; r < c1; ++r)
        for (int i = 0; i < 3; ++i) w[r * 3 + i] = cols[i][r];
    return w;  // row-major (C1,3)
}

}  // namespace

UnfoldingModel::UnfoldingModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    stage_levels_ = cfg_.stage_levels();
    nn::Rng rng(mix_seed(cfg_.seed, 0x6d6f64656cULL));
    int64_t c1 = cfg_.base_channels;
    bool zero_out = cfg_.identity_init;

    // orthonormal-initialized level transforms: back_project . project == id
    std::vector<double> w = orthonormal_columns(c1, rng);  // (C1,3)
    project_.stride = 1;
    project_.pad = 0;
    project_.groups = 1;
    project_.w = reg_.add("project.w", {c1, 3, 1, 1}, w);
    std::vector<double> wt(w.size());
    for (int64_t r = 0; r < c1; ++r)
        for (int i = 0; i < 3; ++i) wt[i * c1 + r] = w[r * 3 + i];
    back_project_.stride = 1;
    back_project_.pad = 0;
    back_project_.groups = 1;
    back_project_.w = reg_.add("back_project.w", {3, c1, 1, 1}, wt);

    for (int l = 0; l + 1 < cfg_.levels; ++l) {
        int64_t cl = cfg_.channels_at(l), cn = cfg_.channels_at(l + 1);
        std::string lv = "level" + std::to_string(l);
        if (cfg_.transition == "strided_conv") {
            y_down_.push_back(
                nn::Conv2d::make(reg_, lv + ".y_down", cl, cn, 3, 2, 1, 1, false, rng));
            x_down_.push_back(
                nn::Conv2d::make(reg_, lv + ".x_down", cl, cn, 3, 2, 1, 1, false, rng));
            y_up_.push_back(nn::Conv2d::make(reg_, lv + ".y_up", cn, cl, 1, 1, 0, 1, false, rng));
            x_up_.push_back(nn::Conv2d::make(reg_, lv + ".x_up", cn, cl, 1, 1, 0, 1, false, rng));
        } else {  // pixel_shuffle
            y_down_.push_back(
                nn::Conv2d::make(reg_, lv + ".y_down", 4 * cl, cn, 1, 1, 0, 1, false, rng));
            x_down_.push_back(
                nn::Conv2d::make(reg_, lv + ".x_down", 4 * cl, cn, 1, 1, 0, 1, false, rng));
            y_up_.push_back(
                nn::Conv2d::make(reg_, lv + ".y_up", cn, 4 * cl, 1, 1, 0, 1, false, rng));
            x_up_.push_back(
                nn::Conv2d::make(reg_, lv + ".x_up", cn, 4 * cl, 1, 1, 0, 1, false, rng));
        }
        // skip fusion (2C -> C); [I | 0] keeps the encoder path at init
        std::vector<double> fw(static_cast<size_t>(cl) * 2 * cl, 0.0);
        if (cfg_.identity_init) {
            for (int64_t c = 0; c < cl; ++c) fw[c * 2 * cl + c] = 1.0;
        } else {
            nn::Rng frng(mix_seed(cfg_.seed, 0xf05eULL + l));
            for (double& v : fw) v = frng.gaussian(0.0, 1.0 / std::sqrt(2.0 * cl));
        }
        nn::Conv2d fuse;
        fuse.stride = 1;
        fuse.pad = 0;
        fuse.groups = 1;
        fuse.w = reg_.add(lv + ".fuse.w", {cl, 2 * cl, 1, 1}, fw);
        fuse_.push_back(fuse);
    }

    if (!cfg_.per_stage_keys)
        for (int l = 0; l < cfg_.levels; ++l)
            banks_.push_back(KeyBank::make(reg_, "level" + std::to_string(l) + ".bank",
                                           cfg_.m_keys, cfg_.channels_at(l), cfg_.embed_dim, rng));

    for (int s = 0; s < cfg_.stages; ++s) {
        int l = stage_levels_[s];
        int64_t c = cfg_.channels_at(l);
        int heads = cfg_.heads_at(l);
        std::string st = "stage" + std::to_string(s);
        if (cfg_.per_stage_keys)
            banks_.push_back(
                KeyBank::make(reg_, st + ".bank", cfg_.m_keys, c, cfg_.embed_dim, rng));
        steps_.push_back(
            GradStep::make_learned(reg_, st + ".gdm", c, heads, cfg_.rho_init, rng, zero_out));
        pmms_.push_back(
            ProxStack::make(reg_, st + ".pmm", c, heads, cfg_.pmm_blocks[l], rng, zero_out));
    }

    if (cfg_.learned_constant_embedding)
        d_const_ = reg_.add("d_const", {1, cfg_.embed_dim},
                            nn::normal_init(rng, cfg_.embed_dim,
                                            1.0 / std::sqrt((double)cfg_.embed_dim)));
}

const KeyBank& UnfoldingModel::bank_for(int stage) const {
    if (cfg_.per_stage_keys) return banks_[stage];
    return banks_[stage_levels_[stage]];
}

Tensor UnfoldingModel::project(const Tensor& y3) const {
    if (y3.ndim() != 4 || y3.dim(1) != 3) throw ValueError("project: needs (N,3,H,W)");
    return project_(y3);
}

Tensor UnfoldingModel::back_project(const Tensor& x) const {
    if (x.ndim() != 4 || x.dim(1) != cfg_.base_channels)
        throw ValueError("back_project: channel count mismatch");
    return back_project_(x);
}

Tensor UnfoldingModel::apply_down(const nn::Conv2d& conv, const Tensor& x) const {
    if (cfg_.transition == "strided_conv") return conv(x);
    return conv(nn::pixel_unshuffle2(x));
}

Tensor UnfoldingModel::apply_up(const nn::Conv2d& conv, const Tensor& x) const {
    if (cfg_.transition == "strided_conv") return conv(nn::nearest_upsample2(x));
    return nn::pixel_shuffle2(conv(x));
}

std::vector<Tensor> UnfoldingModel::level_inputs(const Tensor& y1) const {
    std::vector<Tensor> ylv{y1};
    for (int l = 0; l + 1 < cfg_.levels; ++l) ylv.push_back(apply_down(y_down_[l], ylv.back()));
    return ylv;
}

Tensor UnfoldingModel::embedding_for(const Tensor& d, int64_t batch) const {
    if (cfg_.learned_constant_embedding) return nn::repeat_rows(d_const_.tensor(), batch);
    if (!d.defined()) throw ValueError("forward: model requires a degradation embedding");
    if (d.ndim() != 2 || d.dim(0) != batch || d.dim(1) != cfg_.embed_dim)
        throw ValueError("forward: embedding shape mismatch");
    return d;
}

Tensor UnfoldingModel::forward(const Tensor& y3, const Tensor& d) const {
    if (y3.ndim() != 4 || y3.dim(1) != 3) throw ValueError("forward: needs (N,3,H,W)");
    int64_t N = y3.dim(0), H = y3.dim(2), W = y3.dim(3);
    int64_t div = 1LL << (cfg_.levels - 1);
    if (H % div != 0 || W % div != 0)
        throw ValueError("forward: spatial size must be divisible by 2^(levels-1)");
    Tensor demb = embedding_for(d, N);

    Tensor y1 = project(y3);
    std::vector<Tensor> ylv = level_inputs(y1);
    std::vector<Tensor> ycur = ylv;
    std::vector<Tensor> skip(cfg_.levels);
    Tensor x = y1;
    int cur = 0;
    for (int s = 0; s < cfg_.stages; ++s) {
        int L = stage_levels_[s];
        while (cur < L) {
            skip[cur] = x;
            x = apply_down(x_down_[cur], x);
            ++cur;
        }
        while (cur > L) {
            Tensor up = apply_up(x_up_[cur - 1], x);
            x = fuse_[cur - 1](nn::concat_channels(skip[cur - 1], up));
            ycur[cur - 1] = nn::add(ylv[cur - 1], apply_up(y_up_[cur - 1], ycur[cur]));
            --cur;
        }
        // shape law at every stage boundary
        if (x.dim(1) != cfg_.channels_at(L) || x.dim(2) != H >> L || x.dim(3) != W >> L)
            throw ValueError("forward: stage shape law violated");
        Tensor key = bank_for(s).retrieve(demb);
        Tensor z = steps_[s](x, ycur[L], key);
        x = pmms_[s](z);
    }
    if (cur != 0) throw ValueError("forward: walk did not return to level 0");
    Tensor out = back_project(x);
    if (cfg_.residual_output) out = nn::add(y3, out);
    return out;
}

Tensor UnfoldingModel::first_stage_residual(const Tensor& y3, const Tensor& d) const {
    if (y3.ndim() != 4 || y3.dim(1) != 3) throw ValueError("needs (N,3,H,W)");
    Tensor demb = embedding_for(d, y3.dim(0));
    Tensor y1 = project(y3);
    Tensor key = bank_for(0).retrieve(demb);
    Tensor r = steps_[0].residual(y1, y1, key);
    return back_project_(r);
}

Image UnfoldingModel::restore(const Image& y, const std::vector<double>& d_embedding) const {
    nn::NoGradGuard ng;
    Tensor t = image_to_tensor(y);
    Tensor d = Tensor::from_data({1, static_cast<int64_t>(d_embedding.size())}, d_embedding);
    return tensor_to_image(forward(t, d));
}

Image UnfoldingModel::restore(const Image& y) const {
    nn::NoGradGuard ng;
    if (!cfg_.learned_constant_embedding)
        throw ValueError("restore: model requires a degradation embedding");
    return tensor_to_image(forward(image_to_tensor(y), Tensor()));
}

void UnfoldingModel::save(const std::string& path,
                          std::map<std::string, std::string> header) const {
    header["kind"] = "restorer";
    header["config"] = cfg_.describe();
    header["config_hash"] = to_hex(fnv1a(cfg_.describe()));
    reg_.save(path, header);
}

std::map<std::string, std::string> UnfoldingModel::load(const std::string& path) {
    auto header = reg_.load(path);
    auto it = header.find("config");
    if (it != header.end() && it->second != cfg_.describe())
        throw IoError("checkpoint was trained with a different model config");
    return header;
}

std::vector<std::vector<double>> ista_mode_forward(const std::vector<double>& phi_rowmajor,
                                                   int64_t m, int64_t n,
                                                   const std::vector<double>& y, double rho,
                                                   double lam, int stages,
                                                   const std::vector<double>& x0) {
    if (rho <= 0) throw ValueError("ista_mode_forward: rho must be > 0");
    if (lam < 0) throw ValueError("ista_mode_forward: lam must be >= 0");
    if (static_cast<int64_t>(y.size()) != m || static_cast<int64_t>(x0.size()) != n)
        throw ValueError("ista_mode_forward: vector size mismatch");
    nn::NoGradGuard ng;
    GradStep step = GradStep::make_explicit(phi_rowmajor, m, n, rho);
    ProxConfig prox;
    prox.mode = ProxMode::soft_threshold;
    prox.threshold = rho * lam;
    Tensor x = Tensor::from_data({n, 1}, x0);
    Tensor yt = Tensor::from_data({m, 1}, y);
    std::vector<std::vector<double>> iterates;
    for (int k = 0; k < stages; ++k) {
        Tensor z = step(x, yt, Tensor());
        x = pmm_forward(z, prox, nullptr);
        iterates.push_back(x.data());
    }
    return iterates;
}

}  // namespace unfoldir
