#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "neti/common.hpp"

namespace neti {

// RGB image with float channels in [0, 1], row-major, interleaved.
struct Image {
    int width = 0;
    int height = 0;
    std::vector<float> rgb;

    Image() = default;
    Image(int w, int h) : width(w), height(h), rgb(static_cast<size_t>(w) * h * 3, 0.0f) {}

    float* pixel(int x, int y) { return rgb.data() + (static_cast<size_t>(y) * width + x) * 3; }
    const float* pixel(int x, int y) const {
        return rgb.data() + (static_cast<size_t>(y) * width + x) * 3;
    }
};

// Binary PPM (P6), 8 bits per channel. Encoding rounds to nearest and
// clamps, so a written image re-reads to within 1/255 per channel.
std::vector<uint8_t> encode_ppm(const Image& img);
Image decode_ppm(const std::vector<uint8_t>& bytes, const std::string& context);
void write_ppm(const std::string& path, const Image& img);
Image read_ppm(const std::string& path);

double mean_abs_diff(const Image& a, const Image& b);
double psnr(const Image& a, const Image& b);

} // namespace neti
