#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "unfoldir/image.hpp"

namespace unfoldir {

enum class Kind { noise, blur, haze, rain, lowlight };

const char* kind_name(Kind k);
Kind kind_from_name(const std::string& name);
std::vector<Kind> parse_kinds(const std::string& comma_list);

// Degradation type + named scalar parameters + RNG seed. Parameter names:
//   noise:    sigma (8-bit units)
//   blur:     kernel_radius, kernel_sigma
//   haze:     airlight in [0,1], transmission in (0,1]
//   rain:     streak_count, streak_length_px, streak_angle_deg, streak_intensity
//   lowlight: gamma >= 1, gain in (0,1]
struct DegradationSpec {
    Kind kind = Kind::noise;
    std::map<std::string, double> params;
    uint64_t seed = 0;

    double get(const std::string& name) const;
    void validate() const;
};

Image apply_noise(const Image& img, double sigma, uint64_t seed);
Image apply_blur(const Image& img, int kernel_radius, double kernel_sigma);
Image apply_haze(const Image& img, double airlight, double transmission);
Image apply_rain(const Image& img, const DegradationSpec& spec);
Image apply_lowlight(const Image& img, double gamma, double gain);

// Dispatch on spec.kind.
Image apply_degradation(const Image& img, const DegradationSpec& spec);

std::vector<double> gaussian_kernel_1d(int radius, double sigma);

// Seeded clean-image source: multi-scale smoothed-noise texture overlaid
// with sharp-edged shapes, so blur/deblur has structure to act on.
Image procedural_texture(int height, int width, uint64_t seed);

// Uniform sampling ranges per parameter for one degradation kind.
struct KindDistribution {
    Kind kind = Kind::noise;
    std::map<std::string, std::pair<double, double>> ranges;

    DegradationSpec sample(uint64_t seed) const;
    static KindDistribution defaults(Kind k);
};

struct ManifestRecord {
    std::string clean_path;
    std::string degraded_path;
    Kind kind = Kind::noise;
    std::map<std::string, double> params;
    uint64_t seed = 0;
};

struct DatasetManifest {
    std::vector<ManifestRecord> records;
    uint64_t dataset_seed = 0;
};

// Writes clean/degraded PNG pairs under out_dir (clean/, degraded/) plus
// out_dir/manifest.txt. clean_source may be "procedural" or a directory of
// PNGs. Kinds are drawn round-robin from `specs` in the given order; every
// record's RNG derives from hash(dataset_seed, record_index).
DatasetManifest generate_dataset(const std::string& clean_source,
                                 const std::vector<KindDistribution>& specs, int count,
                                 uint64_t dataset_seed, const std::string& out_dir,
                                 int image_size);

std::string manifest_to_text(const DatasetManifest& m);
void save_manifest(const DatasetManifest& m, const std::string& path);
DatasetManifest load_manifest(const std::string& path);

}  // namespace unfoldir
