#include "unfoldir/dataset.hpp"

#include <filesystem>

namespace fs = std::filesystem;

namespace unfoldir {

LoadedDataset LoadedDataset::from_manifest(const DatasetManifest& manifest,
                                           const std::string& root, bool load_clean) {
    LoadedDataset ds;
    ds.items.reserve(manifest.records.size());
    for (size_t i = 0; i < manifest.records.size(); ++i) {
        const ManifestRecord& r = manifest.records[i];
        LoadedPair p;
        Image degraded = load_png((fs::path(root) / r.degraded_path).string());
        p.height = degraded.height;
        p.width = degraded.width;
        p.degraded = to_bytes(degraded);
        if (load_clean) {
            Image clean = load_png((fs::path(root) / r.clean_path).string());
            if (!clean.same_shape(degraded))
                throw IoError("clean/degraded shape mismatch at record " + std::to_string(i));
            p.clean = to_bytes(clean);
        }
        p.kind = r.kind;
        p.record_index = i;
        ds.items.push_back(std::move(p));
    }
    return ds;
}

bool is_validation_record(size_t record_index) {
    return splitmix64(static_cast<uint64_t>(record_index) ^ 0x76616cULL) % 10 == 0;
}

void split_train_val(const LoadedDataset& ds, std::vector<size_t>& train_idx,
                     std::vector<size_t>& val_idx) {
    train_idx.clear();
    val_idx.clear();
    for (size_t i = 0; i < ds.items.size(); ++i)
        (is_validation_record(ds.items[i].record_index) ? val_idx : train_idx).push_back(i);
}

CropSpec sample_crop(Rng& rng, int h, int w, int crop, bool allow_flip_h, bool allow_flip_v) {
    if (crop > h || crop > w) throw ValueError("crop larger than image");
    CropSpec s;
    s.y0 = static_cast<int>(rng.next_below(h - crop + 1));
    s.x0 = static_cast<int>(rng.next_below(w - crop + 1));
    s.flip_h = allow_flip_h && rng.next_below(2) == 1;
    s.flip_v = allow_flip_v && rng.next_below(2) == 1;
    return s;
}

void write_crop(const std::vector<uint8_t>& hwc, int h, int w, const CropSpec& spec, int crop,
                double* dst) {
    (void)h;
    for (int y = 0; y < crop; ++y) {
        int sy = spec.flip_v ? spec.y0 + crop - 1 - y : spec.y0 + y;
        for (int x = 0; x < crop; ++x) {
            int sx = spec.flip_h ? spec.x0 + crop - 1 - x : spec.x0 + x;
            const uint8_t* px = hwc.data() + (static_cast<size_t>(sy) * w + sx) * 3;
            for (int c = 0; c < 3; ++c)
                dst[static_cast<size_t>(c) * crop * crop + static_cast<size_t>(y) * crop + x] =
                    px[c] / 255.0;
        }
    }
}

Batch make_batch(const LoadedDataset& ds, const std::vector<size_t>& indices, int crop, Rng& rng,
                 bool allow_flip_h, bool allow_flip_v, bool with_clean) {
    int64_t B = static_cast<int64_t>(indices.size());
    int64_t plane = 3LL * crop * crop;
    std::vector<double> deg(B * plane), cln(with_clean ? B * plane : 0);
    Batch batch;
    for (int64_t i = 0; i < B; ++i) {
        const LoadedPair& item = ds.items[indices[i]];
        CropSpec spec = sample_crop(rng, item.height, item.width, crop, allow_flip_h, allow_flip_v);
        write_crop(item.degraded, item.height, item.width, spec, crop, deg.data() + i * plane);
        if (with_clean)
            write_crop(item.clean, item.height, item.width, spec, crop, cln.data() + i * plane);
        batch.kinds.push_back(item.kind);
    }
    batch.degraded = nn::Tensor::from_data({B, 3, crop, crop}, std::move(deg));
    if (with_clean) batch.clean = nn::Tensor::from_data({B, 3, crop, crop}, std::move(cln));
    return batch;
}

nn::Tensor image_to_tensor(const Image& img) {
    std::vector<double> v(img.pixels.size());
    int64_t hw = static_cast<int64_t>(img.height) * img.width;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c)
                v[c * hw + static_cast<int64_t>(y) * img.width + x] = img.at(y, x, c);
    return nn::Tensor::from_data({1, 3, img.height, img.width}, std::move(v));
}

Image tensor_to_image(const nn::Tensor& t) {
    if (t.ndim() != 4 || t.dim(0) != 1 || t.dim(1) != 3)
        throw ValueError("tensor_to_image: needs (1,3,H,W)");
    int h = static_cast<int>(t.dim(2)), w = static_cast<int>(t.dim(3));
    Image img(h, w);
    const double* p = t.data().data();
    int64_t hw = static_cast<int64_t>(h) * w;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(y, x, c) = clamp01(p[c * hw + static_cast<int64_t>(y) * w + x]);
    return img;
}

Image bytes_to_image(const std::vector<uint8_t>& hwc, int h, int w) {
    return from_bytes(hwc, h, w);
}

}  // namespace unfoldir
