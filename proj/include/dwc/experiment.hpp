#pragma once

// Experiment orchestration: the site roster, the condition graph (per-site
// point training, pooled ceiling, ensemble, variational base net, sequential
// posteriors in both site orders, consolidation, consolidation + fine-tune),
// evaluation over test and held-out volumes, and report emission.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dwc/checkpoint.hpp"
#include "dwc/eval.hpp"
#include "dwc/network.hpp"
#include "dwc/sites.hpp"

namespace dwc {

// ---------------------------------------------------------------------------
// Human-readable key=value config files ("key = value" lines, '#' comments).

using KvMap = std::map<std::string, std::string>;

KvMap read_kv(const std::string& path);
void write_kv(const std::string& path, const KvMap& kv);

// keys: lr, batch, dataset_size, max_steps, window, window_tol, seed,
// mc_samples, data_weight; unknown keys are rejected
TrainConfig train_config_from_kv(const KvMap& kv, const TrainConfig& base = {});
KvMap train_config_to_kv(const TrainConfig& cfg);

// keys: in_channels, classes, filters, dilations (comma-separated)
NetworkSpec network_spec_from_kv(const KvMap& kv);
KvMap network_spec_to_kv(const NetworkSpec& spec);

// ---------------------------------------------------------------------------
// Plan: everything needed to reproduce one full run from a single seed.

struct PlanSite {
    SiteProfile profile;
    int test = 1; // tail volumes held for testing
};

struct ExperimentPlan {
    SiteGeometry geometry;
    NetworkSpec spec;
    std::vector<PlanSite> sites;        // ordered largest first; front site is
                                        // the variational base and fine-tune site
    std::vector<SiteProfile> held_out;  // evaluation-only, one volume each
    TrainConfig map_cfg, var_cfg, ft_cfg;
    int eval_mc = 10;
    std::uint64_t seed = 0;

    // four unequally sized sites plus a four-profile held-out pool, all
    // sub-seeds derived from `seed`
    static ExperimentPlan defaults(std::uint64_t seed);

    void validate() const;
    int tiles_per_volume() const;

    // prefixed key=value form: geometry.*, net.*, map.*, var.*, ft.*,
    // site.<id>.*, held.<id>.*, eval_mc, seed; condition.* lines are
    // informative output and ignored on read
    KvMap to_kv() const;
    void apply_kv(const KvMap& kv);
};

// ---------------------------------------------------------------------------
// Dataset manifest: volume files on disk plus split membership.

struct ManifestVolume {
    int id = 0;
    std::string split; // "train" | "test" | "eval"
    std::string image, labels; // paths relative to the manifest
};

struct ManifestSite {
    SiteProfile profile;
    std::vector<ManifestVolume> volumes;
};

struct DataManifest {
    SiteGeometry geometry;
    std::vector<ManifestSite> sites;
    std::vector<ManifestSite> held_out;
};

void to_json(nlohmann::json& j, const SiteProfile& p);
void from_json(const nlohmann::json& j, SiteProfile& p);
void to_json(nlohmann::json& j, const SiteGeometry& g);
void from_json(const nlohmann::json& j, SiteGeometry& g);
void to_json(nlohmann::json& j, const DataManifest& m);
void from_json(const nlohmann::json& j, DataManifest& m);

// generate every volume, write DWCV pairs under dir/<site id>/ and the
// manifest to dir/manifest.json
DataManifest write_site_data(const ExperimentPlan& plan, const std::string& dir);
void write_manifest(const DataManifest& m, const std::string& path);
DataManifest read_manifest(const std::string& path);

// ---------------------------------------------------------------------------
// Condition-level operations (the CLI front ends call these directly).

// prior == nullptr -> point training; otherwise variational with that prior
// (init optionally seeds the posterior)
TrainResult run_condition(const NetworkSpec& spec, const Dataset& data, const TrainConfig& cfg,
                          const SiteCheckpoint* prior, const SiteCheckpoint* init,
                          std::vector<std::string> provenance);

struct DwcOutcome {
    SiteCheckpoint consolidated;
    TrainResult finetuned;
    long clamp_count = 0;
};

// consolidate, then fine-tune on the base site with the consolidated posterior
// as both initialization and prior; max_steps == 0 returns the consolidated
// posterior untouched
DwcOutcome run_dwc(const SiteCheckpoint& prior, const std::vector<SiteCheckpoint>& sites,
                   const Dataset& finetune_data, const TrainConfig& ft_cfg,
                   const std::string& finetune_tag);

// unweighted probability average over >= 2 shape-compatible models
FeatureMap<float> run_ensemble(const std::vector<const SiteCheckpoint*>& cks, const Volume& vol,
                               int tile, int mc_samples, std::uint64_t seed);

// sum of per-weight KL terms; prior == nullptr means the standard normal
double checkpoint_kl(const SiteCheckpoint& q, const SiteCheckpoint* prior);

// ---------------------------------------------------------------------------
// Full run.

struct ConditionRun {
    std::string name;
    long steps = 0;
    bool converged = false;
    bool trained = false; // ensemble and the raw consolidation never train
};

struct ExperimentResult {
    std::vector<std::string> conditions; // summary row order
    std::vector<std::string> site_ids;   // summary column order
    DiceReport report;                   // datasets: site ids + "held_out"
    std::vector<ConditionRun> runs;
    double kl_ft_consolidated = 0; // fine-tuned posterior against its prior
    double kl_ft_std_normal = 0;   // same posterior against N(0, 1)
};

// writes out_dir/{plan.txt,data/,conditions/,report.csv,summary.csv,stats.csv,
// steps.csv,diagnostics.txt}; returns everything needed to audit the run
ExperimentResult run_experiment(const ExperimentPlan& plan, const std::string& out_dir);

} // namespace dwc
