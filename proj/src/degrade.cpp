#include "unfoldir/degrade.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "unfoldir/common.hpp"

namespace fs = std::filesystem;

namespace unfoldir {

const char* kind_name(Kind k) {
    switch (k) {
        case Kind::noise: return "noise";
        case Kind::blur: return "blur";
        case Kind::haze: return "haze";
        case Kind::rain: return "rain";
        case Kind::lowlight: return "lowlight";
    }
    return "?";
}

Kind kind_from_name(const std::string& name) {
    if (name == "noise") return Kind::noise;
    if (name == "blur") return Kind::blur;
    if (name == "haze") return Kind::haze;
    if (name == "rain") return Kind::rain;
    if (name == "lowlight") return Kind::lowlight;
    throw ValueError("unknown degradation kind: " + name);
}

std::vector<Kind> parse_kinds(const std::string& comma_list) {
    std::vector<Kind> kinds;
    std::stringstream ss(comma_list);
    std::string item;
    while (std::getline(ss, item, ',')) {
        size_t a = item.find_first_not_of(" \t");
        size_t b = item.find_last_not_of(" \t");
        if (a == std::string::npos) continue;
        kinds.push_back(kind_from_name(item.substr(a, b - a + 1)));
    }
    if (kinds.empty()) throw ValueError("empty kind list");
    return kinds;
}

double DegradationSpec::get(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end())
        throw ValueError(std::string("missing parameter '") + name + "' for kind " +
                         kind_name(kind));
    return it->second;
}

void DegradationSpec::validate() const {
    switch (kind) {
        case Kind::noise:
            if (get("sigma") < 0) throw ValueError("noise sigma must be >= 0");
            break;
        case Kind::blur: {
            double r = get("kernel_radius");
            if (r < 0) throw ValueError("blur kernel_radius must be >= 0");
            if (r > 0 && get("kernel_sigma") <= 0)
                throw ValueError("blur kernel_sigma must be > 0 for positive radius");
            break;
        }
        case Kind::haze: {
            double a = get("airlight"), t = get("transmission");
            if (a < 0 || a > 1) throw ValueError("haze airlight must be in [0,1]");
            if (t <= 0 || t > 1) throw ValueError("haze transmission must be in (0,1]");
            break;
        }
        case Kind::rain:
            if (get("streak_count") < 0) throw ValueError("rain streak_count must be >= 0");
            if (get("streak_length_px") < 0) throw ValueError("rain streak_length_px must be >= 0");
            if (get("streak_intensity") < 0) throw ValueError("rain streak_intensity must be >= 0");
            get("streak_angle_deg");
            break;
        case Kind::lowlight: {
            double g = get("gamma"), gn = get("gain");
            if (g < 1) throw ValueError("lowlight gamma must be >= 1");
            if (gn <= 0 || gn > 1) throw ValueError("lowlight gain must be in (0,1]");
            break;
        }
    }
}

Image apply_noise(const Image& img, double sigma, uint64_t seed) {
    if (sigma < 0) throw ValueError("noise sigma must be >= 0");
    if (sigma == 0) return img;
    Rng rng(mix_seed(seed, 0x6e6f697365ULL));
    double std01 = sigma / 255.0;
    Image out = img;
    for (double& v : out.pixels) v = clamp01(v + rng.gaussian(0.0, std01));
    return out;
}

std::vector<double> gaussian_kernel_1d(int radius, double sigma) {
    if (radius < 0) throw ValueError("kernel_radius must be >= 0");
    if (radius == 0) return {1.0};
    if (sigma <= 0) throw ValueError("kernel_sigma must be > 0 for positive radius");
    std::vector<double> k(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
        k[i + radius] = v;
        sum += v;
    }
    for (double& v : k) v /= sum;
    return k;
}

namespace {

// reflect-101 border index: [-1] -> [1], [n] -> [n-2]
inline int reflect_index(int i, int n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) {
        if (i < 0) i = -i;
        if (i >= n) i = 2 * n - 2 - i;
    }
    return i;
}

}  // namespace

Image apply_blur(const Image& img, int kernel_radius, double kernel_sigma) {
    std::vector<double> k = gaussian_kernel_1d(kernel_radius, kernel_sigma);
    if (kernel_radius == 0) return img;
    int r = kernel_radius;
    Image tmp(img.height, img.width);
    // horizontal pass
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) {
                double acc = 0.0;
                for (int i = -r; i <= r; ++i)
                    acc += k[i + r] * img.at(y, reflect_index(x + i, img.width), c);
                tmp.at(y, x, c) = acc;
            }
    // vertical pass
    Image out(img.height, img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) {
                double acc = 0.0;
                for (int i = -r; i <= r; ++i)
                    acc += k[i + r] * tmp.at(reflect_index(y + i, img.height), x, c);
                out.at(y, x, c) = clamp01(acc);
            }
    return out;
}

Image apply_haze(const Image& img, double airlight, double transmission) {
    if (airlight < 0 || airlight > 1) throw ValueError("haze airlight must be in [0,1]");
    if (transmission <= 0 || transmission > 1)
        throw ValueError("haze transmission must be in (0,1]");
    Image out = img;
    double bias = airlight * (1.0 - transmission);
    for (double& v : out.pixels) v = clamp01(v * transmission + bias);
    return out;
}

Image apply_rain(const Image& img, const DegradationSpec& spec) {
    if (spec.kind != Kind::rain) throw ValueError("apply_rain requires a rain spec");
    spec.validate();
    int count = static_cast<int>(std::llround(spec.get("streak_count")));
    double length = spec.get("streak_length_px");
    double angle = spec.get("streak_angle_deg") * 3.14159265358979323846 / 180.0;
    double intensity = spec.get("streak_intensity");
    if (count == 0 || intensity == 0.0 || length <= 0.0) return img;

    Rng rng(mix_seed(spec.seed, 0x7261696eULL));
    std::vector<double> mask(static_cast<size_t>(img.height) * img.width, 0.0);
    double dx = std::sin(angle);
    double dy = std::cos(angle);  // streaks run mostly downward
    for (int s = 0; s < count; ++s) {
        double x0 = rng.uniform(0.0, img.width - 1.0);
        double y0 = rng.uniform(0.0, img.height - 1.0);
        for (double t = 0.0; t <= length; t += 0.5) {
            double px = x0 + t * dx;
            double py = y0 + t * dy;
            int ix = static_cast<int>(std::floor(px));
            int iy = static_cast<int>(std::floor(py));
            double fx = px - ix;
            double fy = py - iy;
            const double w[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
            const int ox[4] = {0, 1, 0, 1};
            const int oy[4] = {0, 0, 1, 1};
            for (int q = 0; q < 4; ++q) {
                int xx = ix + ox[q], yy = iy + oy[q];
                if (xx < 0 || yy < 0 || xx >= img.width || yy >= img.height) continue;
                double& m = mask[static_cast<size_t>(yy) * img.width + xx];
                m = std::max(m, w[q] * intensity);
            }
        }
    }
    Image out = img;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            double m = mask[static_cast<size_t>(y) * img.width + x];
            if (m == 0.0) continue;
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = clamp01(out.at(y, x, c) + m);
        }
    return out;
}

Image apply_lowlight(const Image& img, double gamma, double gain) {
    if (gamma < 1) throw ValueError("lowlight gamma must be >= 1");
    if (gain <= 0 || gain > 1) throw ValueError("lowlight gain must be in (0,1]");
    Image out = img;
    for (double& v : out.pixels) v = clamp01(gain * std::pow(v, gamma));
    return out;
}

Image apply_degradation(const Image& img, const DegradationSpec& spec) {
    spec.validate();
    switch (spec.kind) {
        case Kind::noise: return apply_noise(img, spec.get("sigma"), spec.seed);
        case Kind::blur:
            return apply_blur(img, static_cast<int>(std::llround(spec.get("kernel_radius"))),
                              spec.get("kernel_sigma"));
        case Kind::haze: return apply_haze(img, spec.get("airlight"), spec.get("transmission"));
        case Kind::rain: return apply_rain(img, spec);
        case Kind::lowlight: return apply_lowlight(img, spec.get("gamma"), spec.get("gain"));
    }
    throw ValueError("unknown kind");
}

Image procedural_texture(int height, int width, uint64_t seed) {
    Rng rng(mix_seed(seed, 0x746578ULL));
    std::vector<double> lum(static_cast<size_t>(height) * width, 0.0);

    // multi-scale smoothed value noise
    const int grids[4] = {4, 8, 16, 32};
    const double weights[4] = {1.0, 0.55, 0.3, 0.15};
    for (int o = 0; o < 4; ++o) {
        int g = grids[o];
        std::vector<double> grid(static_cast<size_t>(g + 1) * (g + 1));
        for (double& v : grid) v = rng.uniform();
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x) {
                double gy = static_cast<double>(y) / height * g;
                double gx = static_cast<double>(x) / width * g;
                int iy = static_cast<int>(gy), ix = static_cast<int>(gx);
                double fy = gy - iy, fx = gx - ix;
                auto at = [&](int yy, int xx) { return grid[static_cast<size_t>(yy) * (g + 1) + xx]; };
                double v = at(iy, ix) * (1 - fy) * (1 - fx) + at(iy, ix + 1) * (1 - fy) * fx +
                           at(iy + 1, ix) * fy * (1 - fx) + at(iy + 1, ix + 1) * fy * fx;
                lum[static_cast<size_t>(y) * width + x] += weights[o] * (v - 0.5);
            }
    }
    double lo = 1e9, hi = -1e9;
    for (double v : lum) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    double span = std::max(hi - lo, 1e-9);

    Image img(height, width);
    double tint[3] = {rng.uniform(-0.06, 0.06), rng.uniform(-0.06, 0.06), rng.uniform(-0.06, 0.06)};
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            double v = 0.12 + 0.76 * (lum[static_cast<size_t>(y) * width + x] - lo) / span;
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = clamp01(v + tint[c]);
        }

    // sharp-edged shapes: rectangles and disks in flat colors
    int n_shapes = 3 + static_cast<int>(rng.next_below(4));
    for (int s = 0; s < n_shapes; ++s) {
        double col[3] = {rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95)};
        double alpha = rng.uniform(0.65, 1.0);
        bool disk = rng.next_below(2) == 0;
        if (disk) {
            double cx = rng.uniform(0.0, width - 1.0);
            double cy = rng.uniform(0.0, height - 1.0);
            double rad = rng.uniform(0.06, 0.22) * std::min(height, width);
            for (int y = 0; y < height; ++y)
                for (int x = 0; x < width; ++x)
                    if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= rad * rad)
                        for (int c = 0; c < 3; ++c)
                            img.at(y, x, c) = clamp01((1 - alpha) * img.at(y, x, c) + alpha * col[c]);
        } else {
            int x0 = static_cast<int>(rng.next_below(width));
            int y0 = static_cast<int>(rng.next_below(height));
            int w = 2 + static_cast<int>(rng.next_below(std::max(2, width / 3)));
            int h = 2 + static_cast<int>(rng.next_below(std::max(2, height / 3)));
            for (int y = y0; y < std::min(height, y0 + h); ++y)
                for (int x = x0; x < std::min(width, x0 + w); ++x)
                    for (int c = 0; c < 3; ++c)
                        img.at(y, x, c) = clamp01((1 - alpha) * img.at(y, x, c) + alpha * col[c]);
        }
    }
    return img;
}

DegradationSpec KindDistribution::sample(uint64_t seed) const {
    Rng rng(mix_seed(seed, 0x73616d70ULL));
    DegradationSpec spec;
    spec.kind = kind;
    spec.seed = seed;
    for (const auto& [name, range] : ranges) {
        double v = rng.uniform(range.first, range.second);
        if (name == "streak_count" || name == "kernel_radius") v = std::round(v);
        spec.params[name] = v;
    }
    spec.validate();
    return spec;
}

KindDistribution KindDistribution::defaults(Kind k) {
    KindDistribution d;
    d.kind = k;
    switch (k) {
        case Kind::noise: d.ranges = {{"sigma", {15, 50}}}; break;
        case Kind::blur:
            d.ranges = {{"kernel_radius", {2, 2}}, {"kernel_sigma", {0.9, 1.3}}};
            break;
        case Kind::haze:
            d.ranges = {{"airlight", {0.7, 0.9}}, {"transmission", {0.45, 0.8}}};
            break;
        case Kind::rain:
            d.ranges = {{"streak_count", {40, 60}},
                        {"streak_length_px", {8, 12}},
                        {"streak_angle_deg", {-25, 25}},
                        {"streak_intensity", {0.2, 0.35}}};
            break;
        case Kind::lowlight:
            d.ranges = {{"gamma", {1.6, 2.4}}, {"gain", {0.4, 0.7}}};
            break;
    }
    return d;
}

namespace {

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::vector<std::string> list_pngs(const std::string& dir) {
    std::vector<std::string> files;
    if (!fs::is_directory(dir)) throw IoError("clean source is not a directory: " + dir);
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw IoError("no PNG files in clean source: " + dir);
    return files;
}

}  // namespace

DatasetManifest generate_dataset(const std::string& clean_source,
                                 const std::vector<KindDistribution>& specs, int count,
                                 uint64_t dataset_seed, const std::string& out_dir,
                                 int image_size) {
    if (count <= 0) throw ValueError("dataset count must be > 0");
    if (specs.empty()) throw ValueError("need at least one degradation spec");
    bool procedural = clean_source.empty() || clean_source == "procedural";
    std::vector<std::string> source_files;
    if (!procedural) source_files = list_pngs(clean_source);

    std::error_code ec;
    fs::create_directories(fs::path(out_dir) / "clean", ec);
    fs::create_directories(fs::path(out_dir) / "degraded", ec);
    if (!fs::is_directory(fs::path(out_dir) / "clean"))
        throw IoError("cannot create output directory: " + out_dir);

    DatasetManifest manifest;
    manifest.dataset_seed = dataset_seed;
    for (int i = 0; i < count; ++i) {
        uint64_t rec_seed = mix_seed(dataset_seed, static_cast<uint64_t>(i));
        const KindDistribution& dist = specs[i % specs.size()];
        DegradationSpec spec = dist.sample(rec_seed);

        Image clean;
        if (procedural) {
            clean = procedural_texture(image_size, image_size, mix_seed(rec_seed, 0x636c65616eULL));
        } else {
            const std::string& src = source_files[i % source_files.size()];
            Image full = load_png(src);
            if (full.height < image_size || full.width < image_size)
                throw IoError("source image smaller than requested size: " + src);
            int y0 = (full.height - image_size) / 2;
            int x0 = (full.width - image_size) / 2;
            clean = crop(full, y0, x0, image_size, image_size);
        }
        Image degraded = apply_degradation(clean, spec);

        char name[32];
        std::snprintf(name, sizeof(name), "%05d.png", i);
        std::string clean_rel = std::string("clean/") + name;
        std::string degraded_rel = std::string("degraded/") + name;
        save_png(clean, (fs::path(out_dir) / clean_rel).string());
        save_png(degraded, (fs::path(out_dir) / degraded_rel).string());

        ManifestRecord rec;
        rec.clean_path = clean_rel;
        rec.degraded_path = degraded_rel;
        rec.kind = spec.kind;
        rec.params = spec.params;
        rec.seed = rec_seed;
        manifest.records.push_back(std::move(rec));
    }
    save_manifest(manifest, (fs::path(out_dir) / "manifest.txt").string());
    return manifest;
}

std::string manifest_to_text(const DatasetManifest& m) {
    std::ostringstream os;
    os << "dataset_seed\t" << m.dataset_seed << "\n";
    for (const auto& r : m.records) {
        os << r.clean_path << "\t" << r.degraded_path << "\t" << kind_name(r.kind) << "\t";
        bool first = true;
        for (const auto& [k, v] : r.params) {
            if (!first) os << ",";
            os << k << "=" << format_double(v);
            first = false;
        }
        os << "\t" << r.seed << "\n";
    }
    return os.str();
}

void save_manifest(const DatasetManifest& m, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write manifest: " + path);
    f << manifest_to_text(m);
}

DatasetManifest load_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read manifest: " + path);
    DatasetManifest m;
    std::string line;
    if (!std::getline(f, line)) throw IoError("empty manifest: " + path);
    {
        std::istringstream is(line);
        std::string tag;
        is >> tag >> m.dataset_seed;
        if (tag != "dataset_seed") throw IoError("bad manifest header: " + path);
    }
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string field;
        while (std::getline(ss, field, '\t')) fields.push_back(field);
        if (fields.size() != 5) throw IoError("bad manifest record: " + line);
        ManifestRecord r;
        r.clean_path = fields[0];
        r.degraded_path = fields[1];
        r.kind = kind_from_name(fields[2]);
        std::stringstream ps(fields[3]);
        std::string kv;
        while (std::getline(ps, kv, ',')) {
            size_t eq = kv.find('=');
            if (eq == std::string::npos) throw IoError("bad manifest params: " + line);
            r.params[kv.substr(0, eq)] = std::stod(kv.substr(eq + 1));
        }
        r.seed = std::stoull(fields[4]);
        m.records.push_back(std::move(r));
    }
    return m;
}

}  // namespace unfoldir
