#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace unfoldir {

// H x W x 3 real image with values in [0,1], stored row-major HWC.
struct Image {
    int height = 0;
    int width = 0;
    std::vector<double> pixels;  // size height*width*3

    Image() = default;
    Image(int h, int w, double fill = 0.0)
        : height(h), width(w), pixels(static_cast<size_t>(h) * w * 3, fill) {}

    double& at(int y, int x, int c) {
        return pixels[(static_cast<size_t>(y) * width + x) * 3 + c];
    }
    double at(int y, int x, int c) const {
        return pixels[(static_cast<size_t>(y) * width + x) * 3 + c];
    }
    size_t size() const { return pixels.size(); }
    bool same_shape(const Image& o) const { return height == o.height && width == o.width; }
};

inline double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

void clamp_image(Image& img);

// 8-bit quantization used by the PNG interface: round(v*255) and v/255.
uint8_t to_byte(double v);
std::vector<uint8_t> to_bytes(const Image& img);
Image from_bytes(const std::vector<uint8_t>& data, int h, int w);

Image load_png(const std::string& path);
void save_png(const Image& img, const std::string& path);

Image crop(const Image& img, int y0, int x0, int h, int w);
Image flip_horizontal(const Image& img);
Image flip_vertical(const Image& img);

double max_abs_diff(const Image& a, const Image& b);
double mean_abs_diff(const Image& a, const Image& b);

}  // namespace unfoldir
