#include "dwc/tensor.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <memory>

namespace dwc {

namespace {

constexpr char kVolumeMagic[4] = {'D', 'W', 'C', 'V'};
constexpr uint16_t kVolumeVersion = 1;

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void put_u16(std::FILE* f, uint16_t v) {
    const unsigned char b[2] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>(v >> 8)};
    std::fwrite(b, 1, 2, f);
}

void put_u32(std::FILE* f, uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    std::fwrite(b, 1, 4, f);
}

uint16_t get_u16(std::FILE* f) {
    unsigned char b[2];
    if (std::fread(b, 1, 2, f) != 2) throw std::runtime_error("volume file truncated");
    return static_cast<uint16_t>(b[0] | (b[1] << 8));
}

uint32_t get_u32(std::FILE* f) {
    unsigned char b[4];
    if (std::fread(b, 1, 4, f) != 4) throw std::runtime_error("volume file truncated");
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
    return v;
}

} // namespace

void write_volume(const Volume& v, const std::string& path) {
    const std::string tmp = path + ".tmp";
    {
        FilePtr f(std::fopen(tmp.c_str(), "wb"));
        if (!f) throw std::runtime_error("cannot open for writing: " + tmp);
        std::fwrite(kVolumeMagic, 1, 4, f.get());
        put_u16(f.get(), kVolumeVersion);
        put_u16(f.get(), 0); // dtype: float32
        put_u32(f.get(), static_cast<uint32_t>(v.nx));
        put_u32(f.get(), static_cast<uint32_t>(v.ny));
        put_u32(f.get(), static_cast<uint32_t>(v.nz));
        static_assert(sizeof(float) == 4);
        if (!v.data.empty() &&
            std::fwrite(v.data.data(), sizeof(float), v.data.size(), f.get()) != v.data.size())
            throw std::runtime_error("short write: " + tmp);
        if (std::fflush(f.get()) != 0) throw std::runtime_error("flush failed: " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

Volume read_volume(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw std::runtime_error("cannot open volume file: " + path);
    char magic[4];
    if (std::fread(magic, 1, 4, f.get()) != 4 || std::memcmp(magic, kVolumeMagic, 4) != 0)
        throw std::runtime_error("not a DWCV volume file: " + path);
    const uint16_t version = get_u16(f.get());
    if (version != kVolumeVersion)
        throw std::runtime_error("unsupported DWCV version " + std::to_string(version) + " in " + path);
    const uint16_t dtype = get_u16(f.get());
    if (dtype != 0) throw std::runtime_error("unsupported DWCV dtype " + std::to_string(dtype) + " in " + path);
    const uint32_t nx = get_u32(f.get()), ny = get_u32(f.get()), nz = get_u32(f.get());
    Volume v(static_cast<int>(nx), static_cast<int>(ny), static_cast<int>(nz));
    if (std::fread(v.data.data(), sizeof(float), v.data.size(), f.get()) != v.data.size())
        throw std::runtime_error("volume file truncated: " + path);
    return v;
}

} // namespace dwc
