#include "unfoldir/encoder.hpp"

#include <algorithm>
#include <cmath>

#include "unfoldir/optim.hpp"

namespace unfoldir {

using nn::Tensor;

DegradationEncoder::DegradationEncoder(EncoderConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
    if (cfg_.labels.empty()) throw ConfigError("encoder: empty label set");
    if (cfg_.kind_order.size() != cfg_.labels.size())
        throw ConfigError("encoder: kind_order and labels must align");
    if (cfg_.tau_init <= 0) throw ConfigError("encoder: tau_init must be > 0");
    if (cfg_.gamma <= 0) throw ConfigError("encoder: gamma must be > 0");

    Rng rng(mix_seed(seed, 0x656e63ULL));
    int64_t D = cfg_.dim;
    c1_ = nn::Conv2d::make(reg_, "backbone.c1", 3, 16, 3, 2, 1, 1, true, rng);
    c2_ = nn::Conv2d::make(reg_, "backbone.c2", 16, 32, 3, 2, 1, 1, true, rng);
    c3_ = nn::Conv2d::make(reg_, "backbone.c3", 32, 64, 3, 2, 1, 1, true, rng);
    c4_ = nn::Conv2d::make(reg_, "backbone.c4", 64, 64, 3, 2, 1, 1, true, rng);
    head_ = nn::Linear::make(reg_, "backbone.head", 64, D, true, rng);
    img_adapter_ = nn::AdapterMlp::make(reg_, "img_adapter", D, rng);
    txt_adapter_ = nn::AdapterMlp::make(reg_, "txt_adapter", D, rng);
    int64_t M = static_cast<int64_t>(cfg_.labels.size());
    label_table_ =
        reg_.add("labels.table", {M, D}, nn::normal_init(rng, M * D, 1.0 / std::sqrt((double)D)));
    log_tau_ = reg_.add("labels.log_tau", {1}, {std::log(cfg_.tau_init)});
}

Tensor DegradationEncoder::encode_batch(const Tensor& imgs) const {
    if (imgs.ndim() != 4 || imgs.dim(1) != 3) throw ValueError("encode_batch: needs (N,3,H,W)");
    if (imgs.dim(2) < EncoderConfig::kMinImage || imgs.dim(3) < EncoderConfig::kMinImage)
        throw ValueError("encode_batch: image below minimum size");
    Tensor h = gelu(c1_(imgs));
    h = gelu(c2_(h));
    h = gelu(c3_(h));
    h = gelu(c4_(h));
    Tensor pooled = nn::global_avg_pool(h);  // (N,64)
    Tensor e = img_adapter_(head_(pooled));  // (N,D)
    return nn::l2_normalize_lastdim(e, 1e-12);
}

std::vector<double> DegradationEncoder::encode_image(const Image& img) const {
    nn::NoGradGuard ng;
    Tensor t = image_to_tensor(img);
    return encode_batch(t).data();
}

Tensor DegradationEncoder::label_embeddings() const { return txt_adapter_(label_table_.tensor()); }

std::vector<double> DegradationEncoder::score_labels_from_embedding(
    const std::vector<double>& embedding, double gamma_override) const {
    nn::NoGradGuard ng;
    double gamma = gamma_override > 0 ? gamma_override : cfg_.gamma;
    if (gamma <= 0) throw ValueError("score_labels: gamma must be > 0");
    int64_t M = static_cast<int64_t>(cfg_.labels.size());
    int64_t D = cfg_.dim;
    if (static_cast<int64_t>(embedding.size()) != D)
        throw ValueError("score_labels: embedding width mismatch");
    Tensor lab = nn::l2_normalize_lastdim(label_embeddings(), 1e-12);  // (M,D)
    Tensor e = Tensor::from_data({1, D}, embedding);
    Tensor cos = nn::matmul_nt(e, lab);  // (1,M); rows are unit-norm
    Tensor s = nn::softmax_lastdim(nn::mul(cos, gamma));
    std::vector<double> out(s.data().begin(), s.data().begin() + M);
    return out;
}

std::vector<double> DegradationEncoder::score_labels(const Image& img,
                                                     double gamma_override) const {
    return score_labels_from_embedding(encode_image(img), gamma_override);
}

Tensor DegradationEncoder::contrastive_loss(const Tensor& imgs,
                                            const std::vector<int>& label_idx) const {
    int64_t B = imgs.dim(0);
    if (B < 1) throw ValueError("contrastive_loss: empty batch");
    if (static_cast<int64_t>(label_idx.size()) != B)
        throw ValueError("contrastive_loss: label count mismatch");
    Tensor img_emb = encode_batch(imgs);                             // (B,D) unit
    Tensor txt = nn::gather_rows(label_embeddings(), label_idx);     // (B,D)
    Tensor txt_emb = nn::l2_normalize_lastdim(txt, 1e-12);           // (B,D) unit
    Tensor cos = nn::matmul_nt(img_emb, txt_emb);                    // (B,B)
    Tensor tau = nn::exp_op(log_tau_.tensor());
    Tensor logits = nn::mul_scalar_tensor(cos, tau);
    std::vector<int> diag(B);
    for (int64_t i = 0; i < B; ++i) diag[i] = static_cast<int>(i);
    return nn::cross_entropy_rows(logits, diag);
}

int DegradationEncoder::label_index_for(Kind k) const {
    for (size_t i = 0; i < cfg_.kind_order.size(); ++i)
        if (cfg_.kind_order[i] == k) return static_cast<int>(i);
    throw ValueError(std::string("no label configured for kind ") + kind_name(k));
}

std::vector<nn::Parameter> DegradationEncoder::backbone_params() const {
    std::vector<nn::Parameter> out;
    for (const auto& p : reg_.all())
        if (p.name().rfind("backbone.", 0) == 0) out.push_back(p);
    return out;
}

std::vector<nn::Parameter> DegradationEncoder::head_params() const {
    std::vector<nn::Parameter> out;
    for (const auto& p : reg_.all())
        if (p.name().rfind("backbone.", 0) != 0) out.push_back(p);
    return out;
}

double DegradationEncoder::temperature() const { return std::exp(log_tau_.values()[0]); }

void DegradationEncoder::save(const std::string& path,
                              std::map<std::string, std::string> header) const {
    header["kind"] = "encoder";
    header["dim"] = std::to_string(cfg_.dim);
    header["labels"] = std::to_string(cfg_.labels.size());
    reg_.save(path, header);
}

std::map<std::string, std::string> DegradationEncoder::load(const std::string& path) {
    return reg_.load(path);
}

double classification_accuracy(const DegradationEncoder& enc, const LoadedDataset& ds,
                               const std::vector<size_t>& indices) {
    if (indices.empty()) return 0.0;
    int correct = 0;
    for (size_t idx : indices) {
        const LoadedPair& item = ds.items[idx];
        Image img = bytes_to_image(item.degraded, item.height, item.width);
        std::vector<double> s = enc.score_labels(img);
        int argmax = static_cast<int>(std::max_element(s.begin(), s.end()) - s.begin());
        if (argmax == enc.label_index_for(item.kind)) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(indices.size());
}

FinetuneResult finetune_encoder(DegradationEncoder& enc, const DatasetManifest& manifest,
                                const std::string& root, const FinetuneOptions& opt) {
    LoadedDataset ds = LoadedDataset::from_manifest(manifest, root, /*load_clean=*/false);
    {
        std::vector<bool> seen(enc.config().labels.size(), false);
        size_t distinct = 0;
        for (const auto& item : ds.items) {
            int li = enc.label_index_for(item.kind);
            if (!seen[li]) {
                seen[li] = true;
                ++distinct;
            }
        }
        if (distinct < 2)
            throw ValueError("finetune_encoder: need at least two degradation kinds");
    }
    std::vector<size_t> train_idx, val_idx;
    split_train_val(ds, train_idx, val_idx);
    if (train_idx.empty()) throw ValueError("finetune_encoder: empty training split");

    nn::AdamW opt_backbone(enc.backbone_params());
    nn::AdamW opt_head(enc.head_params());
    opt_backbone.weight_decay = opt.weight_decay;
    opt_head.weight_decay = opt.weight_decay;

    int64_t steps_per_epoch =
        (static_cast<int64_t>(train_idx.size()) + opt.batch_size - 1) / opt.batch_size;
    nn::LrSchedule sched;
    sched.peak = opt.lr;
    sched.warmup_steps = 0;
    sched.total_steps = std::max<int64_t>(1, steps_per_epoch * opt.epochs);

    FinetuneResult result;
    int64_t step = 0;
    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        bool warm = epoch < opt.warm_epochs;
        Rng order_rng(mix_seed(opt.seed, 0xe0000 + epoch));
        std::vector<size_t> order = train_idx;
        order_rng.shuffle(order);

        double epoch_loss = 0.0;
        int64_t batches = 0;
        for (size_t pos = 0; pos < order.size(); pos += opt.batch_size) {
            size_t end = std::min(order.size(), pos + opt.batch_size);
            std::vector<size_t> batch_idx(order.begin() + pos, order.begin() + end);
            Rng crop_rng(mix_seed(opt.seed, 0xc0000 + step));
            Batch batch = make_batch(ds, batch_idx, opt.crop, crop_rng, opt.flip_h, opt.flip_v,
                                     /*with_clean=*/false);
            std::vector<int> labels;
            for (Kind k : batch.kinds) labels.push_back(enc.label_index_for(k));

            opt_backbone.zero_grad();
            opt_head.zero_grad();
            Tensor loss = enc.contrastive_loss(batch.degraded, labels);
            loss.backward();
            double lr = sched.at(step);
            if (warm) opt_backbone.step(lr);
            opt_head.step(lr);
            epoch_loss += loss.item();
            ++batches;
            ++step;
        }
        result.loss_curve.push_back(batches ? epoch_loss / batches : 0.0);
    }
    result.steps = step;
    result.holdout_accuracy = classification_accuracy(enc, ds, val_idx);
    return result;
}

}  // namespace unfoldir
