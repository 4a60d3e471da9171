#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace neti {

// Incremental SHA-256 (FIPS 180-4). Self-contained so checksummed file
// formats do not pull in a crypto dependency.
class Sha256 {
public:
    Sha256() { reset(); }

    void reset();
    void update(const void* data, size_t len);
    std::array<uint8_t, 32> finish();

    static std::array<uint8_t, 32> digest(const void* data, size_t len);
    static std::string hex(const std::array<uint8_t, 32>& d);
    static std::string hex_digest(const void* data, size_t len);

private:
    void process_block(const uint8_t* block);

    std::array<uint32_t, 8> state_;
    uint64_t total_len_ = 0;
    std::array<uint8_t, 64> buf_;
    size_t buf_len_ = 0;
};

} // namespace neti
