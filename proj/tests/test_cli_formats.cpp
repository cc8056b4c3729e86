#include <doctest.h>

#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dwc/experiment.hpp"
#include "dwc/tensor.hpp"

using dwc::DataManifest;
using dwc::ExperimentPlan;
using dwc::KvMap;
using dwc::NetworkSpec;
using dwc::TrainConfig;

namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path dir;
    TempDir()
        : dir(fs::temp_directory_path() / ("dwc_fmt_test_" + std::to_string(::getpid()))) {
        fs::create_directories(dir);
    }
    ~TempDir() { fs::remove_all(dir); }
    std::string file(const char* name) const { return (dir / name).string(); }
};

} // namespace

TEST_CASE("kv files round-trip and tolerate comments") {
    TempDir tmp;
    KvMap kv{{"alpha", "1"}, {"beta.gamma", "-0.5"}, {"name", "spaced value"}};
    dwc::write_kv(tmp.file("a.txt"), kv);
    CHECK(dwc::read_kv(tmp.file("a.txt")) == kv);

    std::ofstream out(tmp.file("b.txt"));
    out << "# leading comment\n\n  lr =  0.25 \nbatch=4\n";
    out.close();
    const KvMap read = dwc::read_kv(tmp.file("b.txt"));
    CHECK(read.at("lr") == "0.25");
    CHECK(read.at("batch") == "4");
    CHECK(read.size() == 2);
}

TEST_CASE("kv reader rejects garbage") {
    TempDir tmp;
    CHECK_THROWS_AS(dwc::read_kv(tmp.file("missing.txt")), std::runtime_error);
    std::ofstream(tmp.file("bad.txt")) << "this line has no separator\n";
    CHECK_THROWS_AS(dwc::read_kv(tmp.file("bad.txt")), std::runtime_error);
}

TEST_CASE("train config survives the kv round trip") {
    TrainConfig cfg;
    cfg.lr = 0.004;
    cfg.batch = 7;
    cfg.dataset_size = 123;
    cfg.max_steps = 456;
    cfg.window = 13;
    cfg.window_tol = 0.0375;
    cfg.seed = 0xdeadbeefcafeULL;
    cfg.mc_samples = 3;
    cfg.data_weight = 9;

    const TrainConfig back = dwc::train_config_from_kv(dwc::train_config_to_kv(cfg));
    CHECK(back.lr == cfg.lr);
    CHECK(back.batch == cfg.batch);
    CHECK(back.dataset_size == cfg.dataset_size);
    CHECK(back.max_steps == cfg.max_steps);
    CHECK(back.window == cfg.window);
    CHECK(back.window_tol == cfg.window_tol);
    CHECK(back.seed == cfg.seed);
    CHECK(back.mc_samples == cfg.mc_samples);
    CHECK(back.data_weight == cfg.data_weight);
}

TEST_CASE("train config kv applies on top of a base and rejects unknowns") {
    TrainConfig base;
    base.lr = 0.5;
    base.batch = 11;
    const TrainConfig merged = dwc::train_config_from_kv({{"lr", "0.125"}}, base);
    CHECK(merged.lr == 0.125);
    CHECK(merged.batch == 11);

    CHECK_THROWS_AS(dwc::train_config_from_kv({{"learning_rate", "1"}}),
                    std::invalid_argument);
    CHECK_THROWS_AS(dwc::train_config_from_kv({{"lr", "fast"}}), std::invalid_argument);
    CHECK_THROWS_AS(dwc::train_config_from_kv({{"batch", "4x"}}), std::invalid_argument);
}

TEST_CASE("network spec survives the kv round trip") {
    const NetworkSpec spec = NetworkSpec::mini(8, 3, 2);
    const NetworkSpec back = dwc::network_spec_from_kv(dwc::network_spec_to_kv(spec));
    CHECK(back == spec);
    CHECK_THROWS_AS(dwc::network_spec_from_kv({{"widths", "1,2"}}), std::invalid_argument);
}

TEST_CASE("plan kv round-trips exactly") {
    const ExperimentPlan plan = ExperimentPlan::defaults(7);
    const KvMap kv = plan.to_kv();

    ExperimentPlan other = ExperimentPlan::defaults(999);
    other.apply_kv(kv);
    CHECK(other.to_kv() == kv);
    other.validate();
}

TEST_CASE("plan kv: seed rebuilds, single keys override, unknowns throw") {
    ExperimentPlan plan = ExperimentPlan::defaults(1);

    // seed alone re-derives the whole roster
    plan.apply_kv({{"seed", "2"}});
    CHECK(plan.to_kv() == ExperimentPlan::defaults(2).to_kv());

    // a single profile key moves without disturbing its neighbours
    const double before = plan.sites[1].profile.gamma;
    plan.apply_kv({{"site.N.noise", "0.125"}});
    CHECK(plan.sites[1].profile.noise == 0.125);
    CHECK(plan.sites[1].profile.gamma == before);

    plan.apply_kv({{"site.N.order", "4,3,2,1,0"}});
    CHECK(plan.sites[1].profile.order == std::vector<int>({4, 3, 2, 1, 0}));
    plan.apply_kv({{"site.N.order", ""}}); // empty list restores the identity map
    CHECK(plan.sites[1].profile.order.empty());

    CHECK_THROWS_AS(plan.apply_kv({{"site.N.colour", "blue"}}), std::invalid_argument);
    CHECK_THROWS_AS(plan.apply_kv({{"wibble", "1"}}), std::invalid_argument);

    // condition.* lines in a written plan file are documentation, not state
    plan.apply_kv({{"condition.h_map", "anything"}});
}

TEST_CASE("plan kv can redefine the site roster") {
    ExperimentPlan plan = ExperimentPlan::defaults(3);
    plan.apply_kv({{"sites", "A,B"},
                   {"site.A.volumes", "3"},
                   {"site.A.test", "1"},
                   {"site.B.volumes", "2"},
                   {"site.B.test", "1"},
                   {"held", ""}});
    REQUIRE(plan.sites.size() == 2);
    CHECK(plan.sites[0].profile.id == "A");
    CHECK(plan.sites[1].profile.id == "B");
    CHECK(plan.held_out.empty());
    // fresh ids get their own derived site seeds
    CHECK(plan.sites[0].profile.seed != plan.sites[1].profile.seed);
    plan.validate();
}

TEST_CASE("plan validation catches roster mistakes") {
    ExperimentPlan plan = ExperimentPlan::defaults(4);

    ExperimentPlan dup = plan;
    dup.sites[1].profile.id = "h"; // collides with H case-insensitively
    CHECK_THROWS_AS(dup.validate(), std::invalid_argument);

    ExperimentPlan starved = plan;
    starved.sites[0].test = starved.sites[0].profile.volumes;
    CHECK_THROWS_AS(starved.validate(), std::invalid_argument);

    ExperimentPlan lopsided = plan;
    lopsided.geometry.tile = 10; // does not divide 16
    CHECK_THROWS_AS(lopsided.validate(), std::invalid_argument);

    ExperimentPlan shuffled = plan;
    shuffled.sites[1].profile.order = {0, 1, 2}; // must cover all five classes
    CHECK_THROWS_AS(shuffled.validate(), std::invalid_argument);

    ExperimentPlan mismatched = plan;
    mismatched.spec = NetworkSpec::mini(8, 3);
    CHECK_THROWS_AS(mismatched.validate(), std::invalid_argument);
}

TEST_CASE("site data lands on disk and the manifest reads back") {
    TempDir tmp;
    ExperimentPlan plan = ExperimentPlan::defaults(11);
    plan.geometry.side = 8;
    plan.geometry.tile = 8;
    plan.geometry.classes = 3;
    plan.spec = NetworkSpec::mini(4, 3);
    // fresh ids: reusing a default id would drag its five-class band order
    // into this three-class plan
    plan.apply_kv({{"sites", "P,Q"},
                   {"site.P.volumes", "3"},
                   {"site.P.test", "1"},
                   {"site.Q.volumes", "2"},
                   {"site.Q.test", "1"},
                   {"held", "x"},
                   {"held.x.volumes", "1"}});

    const DataManifest written = dwc::write_site_data(plan, tmp.file("data"));
    const DataManifest m = dwc::read_manifest(tmp.file("data/manifest.json"));

    CHECK(m.geometry.side == 8);
    CHECK(m.geometry.classes == 3);
    REQUIRE(m.sites.size() == 2);
    REQUIRE(m.held_out.size() == 1);
    CHECK(m.sites[0].profile.id == written.sites[0].profile.id);
    REQUIRE(m.sites[0].volumes.size() == 3);
    CHECK(m.sites[0].volumes[0].split == "train");
    CHECK(m.sites[0].volumes[2].split == "test");
    CHECK(m.held_out[0].volumes[0].split == "eval");

    // paths are manifest-relative and point at real volumes
    const fs::path root = fs::path(tmp.file("data"));
    for (const auto& site : m.sites)
        for (const auto& vol : site.volumes) {
            const dwc::Volume img = dwc::read_volume((root / vol.image).string());
            const dwc::Volume lab = dwc::read_volume((root / vol.labels).string());
            CHECK(img.nx == 8);
            CHECK(lab.nx == 8);
        }

    // the manifest itself round-trips exactly
    dwc::write_manifest(m, tmp.file("copy.json"));
    const DataManifest again = dwc::read_manifest(tmp.file("copy.json"));
    CHECK(again.sites[1].volumes[1].image == m.sites[1].volumes[1].image);
    CHECK(again.geometry.seed == m.geometry.seed);
}
