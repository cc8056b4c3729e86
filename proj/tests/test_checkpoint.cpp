#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "dwc/checkpoint.hpp"
#include "dwc/rng.hpp"

using dwc::CheckpointError;
using dwc::SiteCheckpoint;

namespace fs = std::filesystem;

namespace {

SiteCheckpoint random_ck(uint64_t seed, SiteCheckpoint::Kind kind) {
    auto spec = dwc::NetworkSpec::with_dilations(3, 2, 1, {1, 2});
    auto ck = dwc::make_checkpoint(spec, kind, {"siteA", "siteB"});
    dwc::CounterRng rng(seed);
    size_t idx = 0;
    for (auto& r : ck.records)
        for (size_t i = 0; i < r.mu.size(); ++i, ++idx) {
            r.mu[i] = static_cast<float>(rng.normal(idx));
            if (kind == SiteCheckpoint::Kind::variational)
                r.sigma[i] = static_cast<float>(0.05 + rng.uniform(40000 + idx));
        }
    return ck;
}

struct TempDir {
    fs::path dir;
    TempDir() : dir(fs::temp_directory_path() / "dwc_ck_test") { fs::create_directories(dir); }
    ~TempDir() { fs::remove_all(dir); }
    std::string file(const char* name) const { return (dir / name).string(); }
};

void corrupt_byte(const std::string& path, std::streamoff off, char value) {
    std::fstream fio(path, std::ios::in | std::ios::out | std::ios::binary);
    fio.seekp(off);
    fio.put(value);
}

} // namespace

TEST_CASE("checkpoint round trip is bitwise for both kinds") {
    TempDir tmp;
    for (auto kind : {SiteCheckpoint::Kind::variational, SiteCheckpoint::Kind::map_point}) {
        auto ck = random_ck(kind == SiteCheckpoint::Kind::variational ? 1 : 2, kind);
        const auto path = tmp.file("rt.dwck");
        dwc::write_checkpoint(ck, path);
        auto r = dwc::read_checkpoint(path);
        CHECK(r.spec == ck.spec);
        CHECK(r.provenance == ck.provenance);
        CHECK(r.kind == ck.kind);
        REQUIRE(r.records.size() == ck.records.size());
        for (size_t i = 0; i < r.records.size(); ++i) {
            CHECK(r.records[i].name == ck.records[i].name);
            CHECK(r.records[i].dims == ck.records[i].dims);
            CHECK(r.records[i].mu == ck.records[i].mu);
            CHECK(r.records[i].sigma == ck.records[i].sigma);
        }
    }
}

TEST_CASE("bad magic is its own failure") {
    TempDir tmp;
    const auto path = tmp.file("magic.dwck");
    dwc::write_checkpoint(random_ck(3, SiteCheckpoint::Kind::variational), path);
    corrupt_byte(path, 0, 'X');
    try {
        dwc::read_checkpoint(path);
        FAIL("expected a bad-magic failure");
    } catch (const CheckpointError& e) {
        CHECK(e.code() == CheckpointError::Code::bad_magic);
    }
}

TEST_CASE("version mismatch names both versions") {
    TempDir tmp;
    const auto path = tmp.file("ver.dwck");
    dwc::write_checkpoint(random_ck(4, SiteCheckpoint::Kind::variational), path);
    corrupt_byte(path, 4, 9); // little-endian u16 version right after the magic
    try {
        dwc::read_checkpoint(path);
        FAIL("expected a version-mismatch failure");
    } catch (const CheckpointError& e) {
        CHECK(e.code() == CheckpointError::Code::version_mismatch);
        const std::string msg = e.what();
        CHECK(msg.find('9') != std::string::npos);
        CHECK(msg.find('1') != std::string::npos);
    }
}

TEST_CASE("truncation mid-array never yields a partial checkpoint") {
    TempDir tmp;
    const auto path = tmp.file("trunc.dwck");
    dwc::write_checkpoint(random_ck(5, SiteCheckpoint::Kind::variational), path);
    const auto full = fs::file_size(path);
    for (auto keep : {full - 3, full / 2, full / 4}) {
        fs::resize_file(path, keep);
        try {
            dwc::read_checkpoint(path);
            FAIL("expected a truncation failure");
        } catch (const CheckpointError& e) {
            CHECK(e.code() == CheckpointError::Code::truncated);
        }
    }
}

TEST_CASE("trailing bytes are rejected") {
    TempDir tmp;
    const auto path = tmp.file("tail.dwck");
    dwc::write_checkpoint(random_ck(6, SiteCheckpoint::Kind::variational), path);
    std::ofstream(path, std::ios::app | std::ios::binary) << "zz";
    try {
        dwc::read_checkpoint(path);
        FAIL("expected a failure on trailing bytes");
    } catch (const CheckpointError& e) {
        CHECK(e.code() == CheckpointError::Code::truncated);
    }
}

TEST_CASE("tampered record name surfaces as a shape failure") {
    TempDir tmp;
    const auto path = tmp.file("name.dwck");
    auto ck = random_ck(7, SiteCheckpoint::Kind::variational);
    dwc::write_checkpoint(ck, path);
    // locate the first record name: header + metadata + record count + name length
    nlohmann::json meta = {{"spec", ck.spec},
                           {"provenance", ck.provenance},
                           {"kind", "variational"}};
    const auto meta_len = meta.dump().size();
    const std::streamoff name_off = 4 + 2 + 4 + static_cast<std::streamoff>(meta_len) + 4 + 4;
    corrupt_byte(path, name_off, 'X');
    try {
        dwc::read_checkpoint(path);
        FAIL("expected a shape failure");
    } catch (const CheckpointError& e) {
        CHECK(e.code() == CheckpointError::Code::shape_mismatch);
    }
}

TEST_CASE("missing file reports an io failure") {
    try {
        dwc::read_checkpoint("/nonexistent/nowhere.dwck");
        FAIL("expected an io failure");
    } catch (const CheckpointError& e) {
        CHECK(e.code() == CheckpointError::Code::io);
    }
}

TEST_CASE("writing an invalid checkpoint is refused") {
    TempDir tmp;
    auto ck = random_ck(8, SiteCheckpoint::Kind::variational);
    ck.records[0].sigma[0] = -1.0f;
    CHECK_THROWS_AS(dwc::write_checkpoint(ck, tmp.file("bad.dwck")), CheckpointError);
    ck = random_ck(9, SiteCheckpoint::Kind::variational);
    ck.provenance.clear();
    CHECK_THROWS_AS(dwc::write_checkpoint(ck, tmp.file("bad2.dwck")), CheckpointError);
}

TEST_CASE("point checkpoints gain a constant sigma when promoted") {
    auto point = random_ck(10, SiteCheckpoint::Kind::map_point);
    auto div = dwc::to_variational(point, 0.25f);
    CHECK(div.kind == SiteCheckpoint::Kind::variational);
    for (size_t i = 0; i < div.records.size(); ++i) {
        CHECK(div.records[i].mu == point.records[i].mu);
        for (float s : div.records[i].sigma) CHECK(s == 0.25f);
    }
    // already-variational input passes through unchanged
    auto var = random_ck(11, SiteCheckpoint::Kind::variational);
    auto same = dwc::to_variational(var, 0.5f);
    CHECK(same.records[0].sigma == var.records[0].sigma);
}

TEST_CASE("skeleton checkpoints carry one kernel and one bias record per layer") {
    auto spec = dwc::NetworkSpec::mini();
    auto ck = dwc::make_checkpoint(spec, SiteCheckpoint::Kind::variational, {"x"});
    REQUIRE(ck.records.size() == 2 * spec.layers.size());
    for (size_t i = 0; i < spec.layers.size(); ++i) {
        CHECK(ck.records[2 * i].mu.size() == spec.kernel_count(i));
        CHECK(ck.records[2 * i + 1].mu.size() == spec.bias_count(i));
    }
    // the scalar prior fills every entry
    auto prior = dwc::scalar_prior_like(spec);
    for (const auto& r : prior.records)
        for (size_t i = 0; i < r.mu.size(); ++i) {
            CHECK(r.mu[i] == 0.0f);
            CHECK(r.sigma[i] == 1.0f);
        }
}
