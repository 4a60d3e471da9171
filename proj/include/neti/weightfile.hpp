#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "neti/common.hpp"
#include "neti/tensor.hpp"

namespace neti {

// Checkpoint container: named float32 sections with explicit shapes.
//
// Byte layout (all integers little-endian):
//   "NETI"                      4-byte magic
//   u32 version (currently 1)
//   u32 section_count
//   per section:
//     u16 name_len, name bytes
//     u8  rank, then rank x u32 dims
//     f32 payload, prod(dims) values
//   32-byte SHA-256 of everything above
//
// Writes go to a temp file in the same directory and are renamed into
// place, so a crash mid-write never leaves a truncated file at the target
// path. Loads verify magic, version, structure, and checksum.
struct WeightSection {
    std::string name;
    std::vector<uint32_t> dims;
    std::vector<float> data;

    size_t expected_count() const {
        size_t n = 1;
        for (uint32_t d : dims) {
            n *= d;
        }
        return n;
    }
};

constexpr uint32_t kWeightFileVersion = 1;

// Shared atomic file helpers (write-temp-then-rename; parent directories
// created on demand).
void write_bytes_atomic(const std::string& path, const uint8_t* data, size_t len);
void write_text_atomic(const std::string& path, const std::string& text);
std::string read_text_file(const std::string& path);

std::vector<uint8_t> encode_weight_sections(const std::vector<WeightSection>& sections);
std::vector<WeightSection> decode_weight_sections(const uint8_t* bytes, size_t len);

void save_weight_file(const std::string& path, const std::vector<WeightSection>& sections);
std::vector<WeightSection> load_weight_file(const std::string& path);

const WeightSection& find_section(const std::vector<WeightSection>& sections,
                                  const std::string& name);
bool has_section(const std::vector<WeightSection>& sections, const std::string& name);

// Strict schema check: every expected name present, nothing extra.
void check_section_names(const std::vector<WeightSection>& sections,
                         const std::vector<std::string>& expected, const std::string& context);

template <typename T>
WeightSection section_from_tensor(const std::string& name, const Tensor<T>& t) {
    WeightSection s;
    s.name = name;
    s.dims = {static_cast<uint32_t>(t.rows), static_cast<uint32_t>(t.cols)};
    s.data.resize(t.numel());
    for (size_t i = 0; i < t.numel(); ++i) {
        s.data[i] = static_cast<float>(t.data[i]);
    }
    return s;
}

template <typename T>
void tensor_from_section(const WeightSection& s, Tensor<T>& t) {
    require(s.dims.size() == 2, "section '", s.name, "': expected rank 2, got ", s.dims.size());
    require(static_cast<int>(s.dims[0]) == t.rows && static_cast<int>(s.dims[1]) == t.cols,
            "section '", s.name, "': shape ", s.dims[0], "x", s.dims[1], " does not match ",
            t.rows, "x", t.cols);
    for (size_t i = 0; i < t.numel(); ++i) {
        t.data[i] = static_cast<T>(s.data[i]);
    }
}

} // namespace neti
