#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "unfoldir/degrade.hpp"
#include "unfoldir/tensor.hpp"

namespace unfoldir {

// In-memory dataset: 8-bit pixel buffers straight from the PNGs.
struct LoadedPair {
    std::vector<uint8_t> clean;     // HWC, empty when not loaded
    std::vector<uint8_t> degraded;  // HWC
    int height = 0, width = 0;
    Kind kind = Kind::noise;
    size_t record_index = 0;
};

struct LoadedDataset {
    std::vector<LoadedPair> items;

    static LoadedDataset from_manifest(const DatasetManifest& manifest, const std::string& root,
                                       bool load_clean);
};

// Deterministic 10% validation split keyed on the record index.
bool is_validation_record(size_t record_index);
void split_train_val(const LoadedDataset& ds, std::vector<size_t>& train_idx,
                     std::vector<size_t>& val_idx);

struct CropSpec {
    int y0 = 0, x0 = 0;
    bool flip_h = false, flip_v = false;
};

CropSpec sample_crop(Rng& rng, int h, int w, int crop, bool allow_flip_h, bool allow_flip_v);

// Writes one HWC byte buffer into an NCHW double slice (3*crop*crop),
// applying the crop window and flips; values scaled to [0,1].
void write_crop(const std::vector<uint8_t>& hwc, int h, int w, const CropSpec& spec, int crop,
                double* dst);

// Assembles aligned clean/degraded batches: the same CropSpec is applied
// to both members of each pair.
struct Batch {
    nn::Tensor clean;     // (B,3,crop,crop)
    nn::Tensor degraded;  // (B,3,crop,crop)
    std::vector<Kind> kinds;
};
Batch make_batch(const LoadedDataset& ds, const std::vector<size_t>& indices, int crop, Rng& rng,
                 bool allow_flip_h, bool allow_flip_v, bool with_clean);

nn::Tensor image_to_tensor(const Image& img);  // (1,3,H,W)
Image tensor_to_image(const nn::Tensor& t);    // clamps to [0,1]
Image bytes_to_image(const std::vector<uint8_t>& hwc, int h, int w);

}  // namespace unfoldir
