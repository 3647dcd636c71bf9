#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "unfoldir/dataset.hpp"
#include "unfoldir/image.hpp"
#include "unfoldir/layers.hpp"
#include "unfoldir/tensor.hpp"

namespace unfoldir {

struct EncoderConfig {
    int64_t dim = 64;  // embedding width D
    std::vector<std::string> labels;
    std::vector<Kind> kind_order;  // kind_order[i] maps to labels[i]
    double gamma = 100.0;          // scoring sharpness
    double tau_init = 10.0;        // contrastive temperature init
    static constexpr int kMinImage = 16;
};

// Toy vision-language degradation encoder: a small strided-conv image
// backbone plus a learnable label-embedding table standing in for a text
// encoder, with an adapter MLP in front of each. Swappable for a real
// pretrained encoder behind the same surface.
class DegradationEncoder {
public:
    DegradationEncoder(EncoderConfig cfg, uint64_t seed);

    // (N,3,H,W) in [0,1] -> unit-norm (N,D)
    nn::Tensor encode_batch(const nn::Tensor& imgs) const;
    std::vector<double> encode_image(const Image& img) const;

    nn::Tensor label_embeddings() const;  // (M,D), pre-normalization
    // softmax over labels of gamma * cos(E_I(img), E_T(label_i))
    std::vector<double> score_labels(const Image& img, double gamma_override = -1.0) const;
    std::vector<double> score_labels_from_embedding(const std::vector<double>& embedding,
                                                    double gamma_override = -1.0) const;

    // Batch-denominator contrastive objective over image/label pairs.
    nn::Tensor contrastive_loss(const nn::Tensor& imgs, const std::vector<int>& label_idx) const;

    int label_index_for(Kind k) const;

    nn::ParamRegistry& params() { return reg_; }
    const nn::ParamRegistry& params() const { return reg_; }
    std::vector<nn::Parameter> backbone_params() const;
    std::vector<nn::Parameter> head_params() const;  // adapters + labels + temperature
    const EncoderConfig& config() const { return cfg_; }
    double temperature() const;

    void save(const std::string& path, std::map<std::string, std::string> header) const;
    std::map<std::string, std::string> load(const std::string& path);

private:
    EncoderConfig cfg_;
    nn::ParamRegistry reg_;
    nn::Conv2d c1_, c2_, c3_, c4_;
    nn::Linear head_;
    nn::AdapterMlp img_adapter_, txt_adapter_;
    nn::Parameter label_table_;  // (M,D)
    nn::Parameter log_tau_;      // temperature in log-space
};

struct FinetuneOptions {
    int epochs = 30;
    int warm_epochs = 15;  // backbone trains during warm phase, frozen after
    double lr = 1e-3;
    double weight_decay = 0.0;
    int batch_size = 16;
    int crop = 32;
    bool flip_h = true, flip_v = true;
    uint64_t seed = 1;
};

struct FinetuneResult {
    std::vector<double> loss_curve;  // per-epoch mean training loss
    double holdout_accuracy = 0.0;   // argmax of score_labels on the val split
    int64_t steps = 0;
};

// Contrastive fine-tuning on the degraded halves of a dataset. Requires at
// least two degradation kinds.
FinetuneResult finetune_encoder(DegradationEncoder& enc, const DatasetManifest& manifest,
                                const std::string& root, const FinetuneOptions& opt);

// argmax-score classification accuracy over the given items
double classification_accuracy(const DegradationEncoder& enc, const LoadedDataset& ds,
                               const std::vector<size_t>& indices);

}  // namespace unfoldir
