#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fan/tensor.hpp"

namespace fan {

// 8-bit RGB raster, row-major.
struct Image {
    int width = 0, height = 0;
    std::vector<std::uint8_t> pixels;  // width*height*3

    Image() = default;
    Image(int w, int h) : width(w), height(h), pixels(std::size_t(w) * h * 3, 0) {}

    std::uint8_t& at(int x, int y, int c) {
        return pixels[(std::size_t(y) * width + x) * 3 + c];
    }
    std::uint8_t at(int x, int y, int c) const {
        return pixels[(std::size_t(y) * width + x) * 3 + c];
    }
    bool operator==(const Image& o) const = default;
};

Image read_png(const std::string& path);
void write_png(const std::string& path, const Image& img);

// Binary PGM (P5), for attention-map dumps.
void write_pgm(const std::string& path, const std::vector<std::uint8_t>& gray, int width,
               int height);

Image resize_bilinear(const Image& img, int new_w, int new_h);

// Zero-pads on the right/bottom so both dims are multiples of `multiple`.
Image pad_to_multiple(const Image& img, int multiple);

// [3,H,W] tensor with values in [0,1].
Tensor image_to_tensor(const Image& img);

}  // namespace fan
