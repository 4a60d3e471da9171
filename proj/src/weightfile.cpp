#include "neti/weightfile.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "neti/sha256.hpp"

namespace neti {

namespace {

constexpr char kMagic[4] = {'N', 'E', 'T', 'I'};

void put_u16(std::vector<uint8_t>& out, uint16_t v) {
    out.push_back(static_cast<uint8_t>(v));
    out.push_back(static_cast<uint8_t>(v >> 8));
}

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }
}

void put_f32(std::vector<uint8_t>& out, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

struct Reader {
    const uint8_t* p;
    size_t len;
    size_t pos = 0;

    void need(size_t n, const char* what) {
        if (pos + n > len) {
            fail("weight file truncated while reading ", what);
        }
    }

    uint8_t u8(const char* what) {
        need(1, what);
        return p[pos++];
    }

    uint16_t u16(const char* what) {
        need(2, what);
        uint16_t v = static_cast<uint16_t>(p[pos]) | (static_cast<uint16_t>(p[pos + 1]) << 8);
        pos += 2;
        return v;
    }

    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<uint32_t>(p[pos + i]) << (8 * i);
        }
        pos += 4;
        return v;
    }

    float f32(const char* what) {
        const uint32_t bits = u32(what);
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
};

} // namespace

std::vector<uint8_t> encode_weight_sections(const std::vector<WeightSection>& sections) {
    std::vector<uint8_t> out;
    out.insert(out.end(), kMagic, kMagic + 4);
    put_u32(out, kWeightFileVersion);
    put_u32(out, static_cast<uint32_t>(sections.size()));
    for (const WeightSection& s : sections) {
        require(s.name.size() <= UINT16_MAX, "section name too long");
        require(s.data.size() == s.expected_count(), "section '", s.name, "': payload has ",
                s.data.size(), " values but dims imply ", s.expected_count());
        put_u16(out, static_cast<uint16_t>(s.name.size()));
        out.insert(out.end(), s.name.begin(), s.name.end());
        out.push_back(static_cast<uint8_t>(s.dims.size()));
        for (uint32_t d : s.dims) {
            put_u32(out, d);
        }
        for (float v : s.data) {
            put_f32(out, v);
        }
    }
    const auto digest = Sha256::digest(out.data(), out.size());
    out.insert(out.end(), digest.begin(), digest.end());
    return out;
}

std::vector<WeightSection> decode_weight_sections(const uint8_t* bytes, size_t len) {
    if (len < 4 + 4 + 4 + 32) {
        fail("weight file too small to be valid (", len, " bytes)");
    }
    if (std::memcmp(bytes, kMagic, 4) != 0) {
        fail("weight file has bad magic (not a weight checkpoint)");
    }
    const auto expect = Sha256::digest(bytes, len - 32);
    if (std::memcmp(expect.data(), bytes + len - 32, 32) != 0) {
        fail("weight file checksum mismatch (corrupt or edited file)");
    }
    Reader r{bytes, len - 32, 4};
    const uint32_t version = r.u32("version");
    if (version != kWeightFileVersion) {
        fail("weight file version ", version, " unsupported (expected ", kWeightFileVersion, ")");
    }
    const uint32_t count = r.u32("section count");
    std::vector<WeightSection> sections;
    sections.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        WeightSection s;
        const uint16_t name_len = r.u16("section name length");
        r.need(name_len, "section name");
        s.name.assign(reinterpret_cast<const char*>(r.p + r.pos), name_len);
        r.pos += name_len;
        const uint8_t rank = r.u8("section rank");
        s.dims.resize(rank);
        size_t n = 1;
        for (uint8_t d = 0; d < rank; ++d) {
            s.dims[d] = r.u32("section dims");
            n *= s.dims[d];
        }
        if (n > (1u << 28)) {
            fail("section '", s.name, "' implausibly large (", n, " values)");
        }
        s.data.resize(n);
        for (size_t j = 0; j < n; ++j) {
            s.data[j] = r.f32("section payload");
        }
        sections.push_back(std::move(s));
    }
    if (r.pos != r.len) {
        fail("weight file has ", r.len - r.pos, " trailing bytes after last section");
    }
    return sections;
}

void write_bytes_atomic(const std::string& path, const uint8_t* data, size_t len) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    if (target.has_parent_path()) {
        fs::create_directories(target.parent_path());
    }
    const fs::path tmp = target.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) {
            fail("cannot open '", tmp.string(), "' for writing");
        }
        f.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(len));
        if (!f) {
            fail("short write to '", tmp.string(), "'");
        }
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) {
        fs::remove(tmp);
        fail("cannot move '", tmp.string(), "' into place: ", ec.message());
    }
}

void write_text_atomic(const std::string& path, const std::string& text) {
    write_bytes_atomic(path, reinterpret_cast<const uint8_t*>(text.data()), text.size());
}

std::string read_text_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    require(is.good(), "cannot open '", path, "' for reading");
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    require(!is.bad(), "failed reading '", path, "'");
    return text;
}

void save_weight_file(const std::string& path, const std::vector<WeightSection>& sections) {
    const std::vector<uint8_t> bytes = encode_weight_sections(sections);
    write_bytes_atomic(path, bytes.data(), bytes.size());
}

std::vector<WeightSection> load_weight_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        fail("cannot open weight file '", path, "'");
    }
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
    return decode_weight_sections(bytes.data(), bytes.size());
}

const WeightSection& find_section(const std::vector<WeightSection>& sections,
                                  const std::string& name) {
    for (const WeightSection& s : sections) {
        if (s.name == name) {
            return s;
        }
    }
    fail("weight file is missing section '", name, "'");
}

bool has_section(const std::vector<WeightSection>& sections, const std::string& name) {
    for (const WeightSection& s : sections) {
        if (s.name == name) {
            return true;
        }
    }
    return false;
}

void check_section_names(const std::vector<WeightSection>& sections,
                         const std::vector<std::string>& expected, const std::string& context) {
    std::set<std::string> want(expected.begin(), expected.end());
    std::set<std::string> have;
    for (const WeightSection& s : sections) {
        if (!have.insert(s.name).second) {
            fail(context, ": duplicate section '", s.name, "'");
        }
        if (!want.count(s.name)) {
            fail(context, ": unknown section '", s.name, "'");
        }
    }
    for (const std::string& w : want) {
        if (!have.count(w)) {
            fail(context, ": missing section '", w, "'");
        }
    }
}

} // namespace neti
