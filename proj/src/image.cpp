#include "unfoldir/image.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>

#include "unfoldir/common.hpp"

namespace unfoldir {

void clamp_image(Image& img) {
    for (double& v : img.pixels) v = clamp01(v);
}

uint8_t to_byte(double v) {
    double r = std::round(clamp01(v) * 255.0);
    return static_cast<uint8_t>(r);
}

std::vector<uint8_t> to_bytes(const Image& img) {
    std::vector<uint8_t> out(img.pixels.size());
    for (size_t i = 0; i < img.pixels.size(); ++i) out[i] = to_byte(img.pixels[i]);
    return out;
}

Image from_bytes(const std::vector<uint8_t>& data, int h, int w) {
    Image img(h, w);
    for (size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = data[i] / 255.0;
    return img;
}

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

Image load_png(const std::string& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("cannot open PNG for reading: " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("png_create_info_struct failed");
    }
    std::vector<uint8_t> raw;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("libpng failed while reading " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    png_uint_32 w = png_get_image_width(png, info);
    png_uint_32 h = png_get_image_height(png, info);
    png_byte color = png_get_color_type(png, info);
    png_byte depth = png_get_bit_depth(png, info);

    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);

    raw.resize(static_cast<size_t>(h) * w * 3);
    rows.resize(h);
    for (png_uint_32 y = 0; y < h; ++y) rows[y] = raw.data() + static_cast<size_t>(y) * w * 3;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    return from_bytes(raw, static_cast<int>(h), static_cast<int>(w));
}

void save_png(const Image& img, const std::string& path) {
    if (img.height <= 0 || img.width <= 0) throw ValueError("cannot save empty image");
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("cannot open PNG for writing: " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("png_create_info_struct failed");
    }
    std::vector<uint8_t> raw = to_bytes(img);
    std::vector<png_bytep> rows(img.height);
    for (int y = 0; y < img.height; ++y)
        rows[y] = raw.data() + static_cast<size_t>(y) * img.width * 3;

    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng failed while writing " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Image crop(const Image& img, int y0, int x0, int h, int w) {
    if (y0 < 0 || x0 < 0 || y0 + h > img.height || x0 + w > img.width)
        throw ValueError("crop window out of bounds");
    Image out(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y0 + y, x0 + x, c);
    return out;
}

Image flip_horizontal(const Image& img) {
    Image out(img.height, img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y, img.width - 1 - x, c);
    return out;
}

Image flip_vertical(const Image& img) {
    Image out(img.height, img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(img.height - 1 - y, x, c);
    return out;
}

double max_abs_diff(const Image& a, const Image& b) {
    if (!a.same_shape(b)) throw ValueError("image shape mismatch");
    double m = 0.0;
    for (size_t i = 0; i < a.pixels.size(); ++i)
        m = std::max(m, std::fabs(a.pixels[i] - b.pixels[i]));
    return m;
}

double mean_abs_diff(const Image& a, const Image& b) {
    if (!a.same_shape(b)) throw ValueError("image shape mismatch");
    double s = 0.0;
    for (size_t i = 0; i < a.pixels.size(); ++i) s += std::fabs(a.pixels[i] - b.pixels[i]);
    return s / static_cast<double>(a.pixels.size());
}

}  // namespace unfoldir
