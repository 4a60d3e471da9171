#include "neti/image.hpp"

#include "neti/weightfile.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace neti {

namespace {

uint8_t quantize(float v) {
    const float c = std::clamp(v, 0.0f, 1.0f);
    return static_cast<uint8_t>(std::lround(c * 255.0f));
}

} // namespace

std::vector<uint8_t> encode_ppm(const Image& img) {
    require(img.width > 0 && img.height > 0, "encode_ppm: empty image");
    char header[64];
    const int hlen = std::snprintf(header, sizeof(header), "P6\n%d %d\n255\n", img.width,
                                   img.height);
    std::vector<uint8_t> out(header, header + hlen);
    out.reserve(out.size() + img.rgb.size());
    for (float v : img.rgb) {
        out.push_back(quantize(v));
    }
    return out;
}

Image decode_ppm(const std::vector<uint8_t>& bytes, const std::string& context) {
    size_t pos = 0;
    auto token = [&]() -> std::string {
        while (pos < bytes.size() && std::isspace(bytes[pos])) {
            ++pos;
        }
        if (pos < bytes.size() && bytes[pos] == '#') {
            while (pos < bytes.size() && bytes[pos] != '\n') {
                ++pos;
            }
            while (pos < bytes.size() && std::isspace(bytes[pos])) {
                ++pos;
            }
        }
        std::string t;
        while (pos < bytes.size() && !std::isspace(bytes[pos])) {
            t.push_back(static_cast<char>(bytes[pos++]));
        }
        return t;
    };
    if (token() != "P6") {
        fail(context, ": not a binary PPM (P6) file");
    }
    const std::string ws = token();
    const std::string hs = token();
    const std::string ms = token();
    if (ws.empty() || hs.empty() || ms.empty()) {
        fail(context, ": malformed PPM header");
    }
    const int w = std::stoi(ws);
    const int h = std::stoi(hs);
    const int maxval = std::stoi(ms);
    if (w <= 0 || h <= 0 || maxval != 255) {
        fail(context, ": unsupported PPM geometry ", w, "x", h, " maxval ", maxval);
    }
    ++pos; // single whitespace after maxval
    const size_t need = static_cast<size_t>(w) * h * 3;
    if (bytes.size() - pos < need) {
        fail(context, ": PPM payload truncated");
    }
    Image img(w, h);
    for (size_t i = 0; i < need; ++i) {
        img.rgb[i] = static_cast<float>(bytes[pos + i]) / 255.0f;
    }
    return img;
}

void write_ppm(const std::string& path, const Image& img) {
    const std::vector<uint8_t> bytes = encode_ppm(img);
    write_bytes_atomic(path, bytes.data(), bytes.size());
}

Image read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        fail("cannot open image '", path, "'");
    }
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
    return decode_ppm(bytes, path);
}

double mean_abs_diff(const Image& a, const Image& b) {
    require(a.width == b.width && a.height == b.height, "mean_abs_diff: size mismatch");
    double s = 0.0;
    for (size_t i = 0; i < a.rgb.size(); ++i) {
        s += std::abs(static_cast<double>(a.rgb[i]) - static_cast<double>(b.rgb[i]));
    }
    return s / static_cast<double>(a.rgb.size());
}

double psnr(const Image& a, const Image& b) {
    require(a.width == b.width && a.height == b.height, "psnr: size mismatch");
    double mse = 0.0;
    for (size_t i = 0; i < a.rgb.size(); ++i) {
        const double d = static_cast<double>(a.rgb[i]) - static_cast<double>(b.rgb[i]);
        mse += d * d;
    }
    mse /= static_cast<double>(a.rgb.size());
    if (mse == 0.0) {
        return 99.0; // identical images; cap rather than return infinity
    }
    return 10.0 * std::log10(1.0 / mse);
}

} // namespace neti
