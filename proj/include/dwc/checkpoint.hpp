#pragma once

// Portable checkpoint exchanged between sites: network spec + provenance in a
// JSON metadata block, then raw little-endian f32 mu/sigma arrays per layer.
// Layout (all integers little-endian):
//   "DWCK"  magic
//   u16     format version (currently 1)
//   u32     metadata byte length, then that many bytes of UTF-8 JSON
//           {"spec": ..., "provenance": [...], "kind": "map-point"|"variational"}
//   u32     record count, then per record:
//     u32 name length, name bytes
//     u32 ndim, u32 dims[ndim]
//     f32 mu[prod(dims)]
//     f32 sigma[prod(dims)]      (omitted when kind = map-point)

#include <cstdint>
#include <string>
#include <vector>

#include "dwc/netspec.hpp"

namespace dwc {

class CheckpointError : public std::runtime_error {
public:
    enum class Code { bad_magic, version_mismatch, truncated, shape_mismatch, io };

    CheckpointError(Code code, const std::string& what)
        : std::runtime_error(what), code_(code) {}
    Code code() const { return code_; }

private:
    Code code_;
};

struct TensorRecord {
    std::string name;
    std::vector<std::uint32_t> dims;
    std::vector<float> mu;
    std::vector<float> sigma; // empty for map-point checkpoints

    size_t size() const {
        size_t n = 1;
        for (auto d : dims) n *= d;
        return n;
    }
};

struct SiteCheckpoint {
    enum class Kind { map_point, variational };

    NetworkSpec spec;
    std::vector<std::string> provenance;
    Kind kind = Kind::variational;
    std::vector<TensorRecord> records; // layerN.kernel, layerN.bias per layer

    // Shape/positivity/provenance invariants; throws CheckpointError with
    // code shape_mismatch on violation.
    void validate() const;

    TensorRecord& record(const std::string& name);
    const TensorRecord& record(const std::string& name) const;
};

// Allocates the record skeleton (zero mu, zero/empty sigma) for a spec.
SiteCheckpoint make_checkpoint(const NetworkSpec& spec, SiteCheckpoint::Kind kind,
                               std::vector<std::string> provenance);

// Broadcast scalar prior shaped like `spec` (mu0/sigma0 in every entry).
SiteCheckpoint scalar_prior_like(const NetworkSpec& spec, float mu0 = 0.0f, float sigma0 = 1.0f);

// Point checkpoint -> factorized posterior with a constant sigma everywhere,
// used when a MAP solution seeds a variational prior.
SiteCheckpoint to_variational(const SiteCheckpoint& ck, float sigma = 1.0f);

void write_checkpoint(const SiteCheckpoint& ck, const std::string& path);
SiteCheckpoint read_checkpoint(const std::string& path);

} // namespace dwc
