#include "dwc/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <memory>

namespace dwc {

namespace {

constexpr std::uint16_t kFormatVersion = 1;

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void fail(CheckpointError::Code code, const std::string& what) {
    throw CheckpointError(code, what);
}

void write_bytes(std::FILE* f, const void* p, size_t n) {
    if (std::fwrite(p, 1, n, f) != n) fail(CheckpointError::Code::io, "checkpoint: short write");
}

void put_u16(std::FILE* f, std::uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>(v >> 8)};
    write_bytes(f, b, 2);
}

void put_u32(std::FILE* f, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    write_bytes(f, b, 4);
}

void put_f32_array(std::FILE* f, const std::vector<float>& a) {
    static_assert(sizeof(float) == 4);
    if constexpr (std::endian::native == std::endian::little) {
        write_bytes(f, a.data(), a.size() * 4);
    } else {
        for (float v : a) {
            std::uint32_t u;
            std::memcpy(&u, &v, 4);
            put_u32(f, u);
        }
    }
}

void read_bytes(std::FILE* f, void* p, size_t n, const char* what) {
    if (std::fread(p, 1, n, f) != n)
        fail(CheckpointError::Code::truncated, std::string("checkpoint: truncated in ") + what);
}

std::uint16_t get_u16(std::FILE* f, const char* what) {
    unsigned char b[2];
    read_bytes(f, b, 2, what);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint32_t get_u32(std::FILE* f, const char* what) {
    unsigned char b[4];
    read_bytes(f, b, 4, what);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void get_f32_array(std::FILE* f, std::vector<float>& a, size_t n, const char* what) {
    a.resize(n);
    static_assert(sizeof(float) == 4);
    if constexpr (std::endian::native == std::endian::little) {
        read_bytes(f, a.data(), n * 4, what);
    } else {
        for (size_t i = 0; i < n; ++i) {
            const std::uint32_t u = get_u32(f, what);
            std::memcpy(&a[i], &u, 4);
        }
    }
}

std::string kind_name(SiteCheckpoint::Kind k) {
    return k == SiteCheckpoint::Kind::map_point ? "map-point" : "variational";
}

SiteCheckpoint::Kind parse_kind(const std::string& s) {
    if (s == "map-point") return SiteCheckpoint::Kind::map_point;
    if (s == "variational") return SiteCheckpoint::Kind::variational;
    fail(CheckpointError::Code::shape_mismatch, "checkpoint: unknown kind '" + s + "'");
}

} // namespace

void SiteCheckpoint::validate() const {
    try {
        spec.validate();
    } catch (const std::invalid_argument& e) {
        fail(CheckpointError::Code::shape_mismatch, e.what());
    }
    if (provenance.empty())
        fail(CheckpointError::Code::shape_mismatch, "checkpoint: empty provenance");
    if (records.size() != 2 * spec.layers.size())
        fail(CheckpointError::Code::shape_mismatch,
             "checkpoint: expected two records per layer, got " + std::to_string(records.size()));
    for (size_t i = 0; i < spec.layers.size(); ++i) {
        const auto& k = records[2 * i];
        const auto& b = records[2 * i + 1];
        const std::string base = "layer" + std::to_string(i);
        const auto& l = spec.layers[i];
        const std::vector<std::uint32_t> kdims{
            static_cast<std::uint32_t>(l.filters),
            static_cast<std::uint32_t>(spec.layer_in_channels(i)),
            static_cast<std::uint32_t>(2 * l.half_x + 1),
            static_cast<std::uint32_t>(2 * l.half_y + 1),
            static_cast<std::uint32_t>(2 * l.half_z + 1)};
        if (k.name != base + ".kernel" || k.dims != kdims || k.mu.size() != spec.kernel_count(i))
            fail(CheckpointError::Code::shape_mismatch,
                 "checkpoint: bad kernel record for " + base);
        if (b.name != base + ".bias" ||
            b.dims != std::vector<std::uint32_t>{static_cast<std::uint32_t>(l.filters)} ||
            b.mu.size() != spec.bias_count(i))
            fail(CheckpointError::Code::shape_mismatch, "checkpoint: bad bias record for " + base);
        for (const auto* r : {&k, &b}) {
            if (kind == Kind::map_point) {
                if (!r->sigma.empty())
                    fail(CheckpointError::Code::shape_mismatch,
                         "checkpoint: point checkpoint carries sigma arrays");
            } else {
                if (r->sigma.size() != r->mu.size())
                    fail(CheckpointError::Code::shape_mismatch,
                         "checkpoint: sigma shaped unlike mu in " + r->name);
                for (float s : r->sigma)
                    if (!(s > 0.0f) || !std::isfinite(s))
                        fail(CheckpointError::Code::shape_mismatch,
                             "checkpoint: non-positive sigma in " + r->name);
            }
            for (float m : r->mu)
                if (!std::isfinite(m))
                    fail(CheckpointError::Code::shape_mismatch,
                         "checkpoint: non-finite mu in " + r->name);
        }
    }
}

TensorRecord& SiteCheckpoint::record(const std::string& name) {
    for (auto& r : records)
        if (r.name == name) return r;
    fail(CheckpointError::Code::shape_mismatch, "checkpoint: no record named " + name);
}

const TensorRecord& SiteCheckpoint::record(const std::string& name) const {
    return const_cast<SiteCheckpoint*>(this)->record(name);
}

SiteCheckpoint make_checkpoint(const NetworkSpec& spec, SiteCheckpoint::Kind kind,
                               std::vector<std::string> provenance) {
    spec.validate();
    SiteCheckpoint ck;
    ck.spec = spec;
    ck.kind = kind;
    ck.provenance = std::move(provenance);
    for (size_t i = 0; i < spec.layers.size(); ++i) {
        const auto& l = spec.layers[i];
        const std::string base = "layer" + std::to_string(i);
        TensorRecord kernel;
        kernel.name = base + ".kernel";
        kernel.dims = {static_cast<std::uint32_t>(l.filters),
                       static_cast<std::uint32_t>(spec.layer_in_channels(i)),
                       static_cast<std::uint32_t>(2 * l.half_x + 1),
                       static_cast<std::uint32_t>(2 * l.half_y + 1),
                       static_cast<std::uint32_t>(2 * l.half_z + 1)};
        kernel.mu.assign(spec.kernel_count(i), 0.0f);
        TensorRecord bias;
        bias.name = base + ".bias";
        bias.dims = {static_cast<std::uint32_t>(l.filters)};
        bias.mu.assign(spec.bias_count(i), 0.0f);
        if (kind == SiteCheckpoint::Kind::variational) {
            kernel.sigma.assign(kernel.mu.size(), 1.0f);
            bias.sigma.assign(bias.mu.size(), 1.0f);
        }
        ck.records.push_back(std::move(kernel));
        ck.records.push_back(std::move(bias));
    }
    return ck;
}

SiteCheckpoint scalar_prior_like(const NetworkSpec& spec, float mu0, float sigma0) {
    auto ck = make_checkpoint(spec, SiteCheckpoint::Kind::variational, {"prior"});
    for (auto& r : ck.records) {
        std::fill(r.mu.begin(), r.mu.end(), mu0);
        std::fill(r.sigma.begin(), r.sigma.end(), sigma0);
    }
    return ck;
}

SiteCheckpoint to_variational(const SiteCheckpoint& ck, float sigma) {
    if (ck.kind == SiteCheckpoint::Kind::variational) return ck;
    SiteCheckpoint out = ck;
    out.kind = SiteCheckpoint::Kind::variational;
    for (auto& r : out.records) r.sigma.assign(r.mu.size(), sigma);
    return out;
}

void write_checkpoint(const SiteCheckpoint& ck, const std::string& path) {
    ck.validate();
    const std::string tmp = path + ".tmp";
    {
        FilePtr f(std::fopen(tmp.c_str(), "wb"));
        if (!f) fail(CheckpointError::Code::io, "checkpoint: cannot open " + tmp);
        write_bytes(f.get(), "DWCK", 4);
        put_u16(f.get(), kFormatVersion);
        nlohmann::json meta = {{"spec", ck.spec},
                               {"provenance", ck.provenance},
                               {"kind", kind_name(ck.kind)}};
        const std::string m = meta.dump();
        put_u32(f.get(), static_cast<std::uint32_t>(m.size()));
        write_bytes(f.get(), m.data(), m.size());
        put_u32(f.get(), static_cast<std::uint32_t>(ck.records.size()));
        for (const auto& r : ck.records) {
            put_u32(f.get(), static_cast<std::uint32_t>(r.name.size()));
            write_bytes(f.get(), r.name.data(), r.name.size());
            put_u32(f.get(), static_cast<std::uint32_t>(r.dims.size()));
            for (auto d : r.dims) put_u32(f.get(), d);
            put_f32_array(f.get(), r.mu);
            if (ck.kind == SiteCheckpoint::Kind::variational) put_f32_array(f.get(), r.sigma);
        }
        if (std::fflush(f.get()) != 0) fail(CheckpointError::Code::io, "checkpoint: flush failed");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) fail(CheckpointError::Code::io, "checkpoint: rename failed: " + ec.message());
}

SiteCheckpoint read_checkpoint(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) fail(CheckpointError::Code::io, "checkpoint: cannot open " + path);
    char magic[4];
    read_bytes(f.get(), magic, 4, "magic");
    if (std::memcmp(magic, "DWCK", 4) != 0)
        fail(CheckpointError::Code::bad_magic, "checkpoint: bad magic in " + path);
    const std::uint16_t version = get_u16(f.get(), "version");
    if (version != kFormatVersion)
        fail(CheckpointError::Code::version_mismatch,
             "checkpoint: file version " + std::to_string(version) + ", supported version " +
                 std::to_string(kFormatVersion));

    const std::uint32_t meta_len = get_u32(f.get(), "metadata length");
    if (meta_len > (1u << 26))
        fail(CheckpointError::Code::truncated, "checkpoint: implausible metadata length");
    std::string meta(meta_len, '\0');
    read_bytes(f.get(), meta.data(), meta_len, "metadata");

    SiteCheckpoint ck;
    try {
        const auto j = nlohmann::json::parse(meta);
        ck.spec = j.at("spec").get<NetworkSpec>();
        ck.provenance = j.at("provenance").get<std::vector<std::string>>();
        ck.kind = parse_kind(j.at("kind").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        fail(CheckpointError::Code::shape_mismatch,
             std::string("checkpoint: bad metadata: ") + e.what());
    }

    const std::uint32_t n_records = get_u32(f.get(), "record count");
    ck.records.resize(n_records);
    for (auto& r : ck.records) {
        const std::uint32_t name_len = get_u32(f.get(), "record name");
        if (name_len > (1u << 16))
            fail(CheckpointError::Code::truncated, "checkpoint: implausible record name length");
        r.name.resize(name_len);
        read_bytes(f.get(), r.name.data(), name_len, "record name");
        const std::uint32_t ndim = get_u32(f.get(), "record dims");
        r.dims.resize(ndim);
        for (auto& d : r.dims) d = get_u32(f.get(), "record dims");
        get_f32_array(f.get(), r.mu, r.size(), r.name.c_str());
        if (ck.kind == SiteCheckpoint::Kind::variational)
            get_f32_array(f.get(), r.sigma, r.size(), r.name.c_str());
    }
    // trailing garbage is as corrupt as a short file
    unsigned char extra;
    if (std::fread(&extra, 1, 1, f.get()) == 1)
        fail(CheckpointError::Code::truncated, "checkpoint: trailing bytes in " + path);
    ck.validate();
    return ck;
}

} // namespace dwc
