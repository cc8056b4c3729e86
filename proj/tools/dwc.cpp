// Command-line front end: data generation, the individual training stages,
// consolidation, evaluation, and the full orchestrated experiment.

#include <cstdio>
#include <filesystem>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dwc/checkpoint.hpp"
#include "dwc/consolidate.hpp"
#include "dwc/eval.hpp"
#include "dwc/experiment.hpp"
#include "dwc/network.hpp"
#include "dwc/rng.hpp"
#include "dwc/sites.hpp"

namespace fs = std::filesystem;

namespace {

struct EvalEntry {
    std::string dataset;
    int id = 0;
    dwc::Volume z;     // scored image
    dwc::Volume truth; // labels
};

dwc::ExperimentPlan load_plan(std::uint64_t seed, const std::string& plan_path,
                              bool seed_given) {
    dwc::ExperimentPlan plan = dwc::ExperimentPlan::defaults(seed);
    if (!plan_path.empty()) {
        dwc::KvMap kv = dwc::read_kv(plan_path);
        if (seed_given) kv.erase("seed"); // an explicit --seed wins over the file
        plan.apply_kv(kv);
    }
    return plan;
}

dwc::TrainConfig load_train_config(const std::string& path, const dwc::TrainConfig& base) {
    if (path.empty()) return base;
    return dwc::train_config_from_kv(dwc::read_kv(path), base);
}

dwc::LabeledVolume load_pair(const fs::path& root, const dwc::ManifestVolume& v) {
    dwc::LabeledVolume lv;
    lv.image = dwc::read_volume((root / v.image).string());
    lv.labels = dwc::read_volume((root / v.labels).string());
    return lv;
}

// every manifest entry matching the site filter and split
std::vector<std::pair<const dwc::ManifestSite*, const dwc::ManifestVolume*>> select(
    const dwc::DataManifest& m, const std::set<std::string>& site_filter,
    const std::string& split) {
    std::vector<std::pair<const dwc::ManifestSite*, const dwc::ManifestVolume*>> out;
    const auto scan = [&](const std::vector<dwc::ManifestSite>& sites) {
        for (const auto& s : sites) {
            if (!site_filter.empty() && !site_filter.count(s.profile.id)) continue;
            for (const auto& v : s.volumes)
                if (split == "all" || v.split == split) out.emplace_back(&s, &v);
        }
    };
    scan(m.sites);
    scan(m.held_out);
    return out;
}

dwc::Dataset tiles_for(const dwc::DataManifest& m, const fs::path& root,
                       const std::vector<std::string>& site_ids, const std::string& split) {
    const std::set<std::string> filter(site_ids.begin(), site_ids.end());
    dwc::Dataset data;
    for (const auto& [site, vol] : select(m, filter, split)) {
        const dwc::Dataset part =
            dwc::make_tiles(load_pair(root, *vol), m.geometry.tile, m.geometry.classes);
        data.insert(data.end(), part.begin(), part.end());
    }
    if (data.empty()) throw std::runtime_error("no volumes match the requested sites/split");
    return data;
}

std::vector<EvalEntry> eval_entries(const dwc::DataManifest& m, const fs::path& root,
                                    const std::vector<std::string>& site_ids,
                                    const std::string& split) {
    const std::set<std::string> filter(site_ids.begin(), site_ids.end());
    std::vector<EvalEntry> out;
    for (const auto& [site, vol] : select(m, filter, split)) {
        dwc::LabeledVolume lv = load_pair(root, *vol);
        out.push_back({site->profile.id, vol->id, dwc::z_scored(lv.image),
                       std::move(lv.labels)});
    }
    if (out.empty()) throw std::runtime_error("no volumes match the requested sites/split");
    return out;
}

void report_entries(dwc::DiceReport& rep, const std::string& name, const EvalEntry& e,
                    const dwc::Volume& labels, int classes) {
    rep.add(name, e.dataset, e.id, dwc::dice_per_class(labels, e.truth, classes));
}

void finish_report(const dwc::DiceReport& rep, const std::string& name,
                   const std::vector<EvalEntry>& entries, const std::string& out_csv) {
    if (!out_csv.empty()) rep.write_csv(out_csv);
    std::set<std::string> datasets;
    for (const auto& e : entries) datasets.insert(e.dataset);
    double sum = 0;
    long n = 0;
    for (const auto& ds : datasets)
        for (double v : rep.volume_means(name, ds)) {
            sum += v;
            ++n;
        }
    std::printf("%s: mean Dice %.6f over %ld volumes\n", name.c_str(),
                n ? sum / static_cast<double>(n) : 0.0, n);
}

void write_predictions(const std::string& dir, const EvalEntry& e, const dwc::Volume& labels) {
    if (dir.empty()) return;
    fs::create_directories(dir);
    char stem[64];
    std::snprintf(stem, sizeof(stem), "%s_%03d", e.dataset.c_str(), e.id);
    dwc::write_volume(labels, dir + "/" + stem + ".labels.dwcv");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"distributed weight consolidation workbench"};
    app.require_subcommand(1);

    // ---- gen-data ----
    auto* gen = app.add_subcommand("gen-data", "generate site volumes and a manifest");
    std::uint64_t gen_seed = 0;
    std::string gen_out, gen_plan;
    gen->add_option("--seed", gen_seed, "plan seed");
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--plan", gen_plan, "plan overrides (key = value file)");

    // ---- train-map ----
    auto* tmap = app.add_subcommand("train-map", "point training on one or more sites");
    std::string tmap_manifest, tmap_out, tmap_config, tmap_loss;
    std::vector<std::string> tmap_sites;
    std::uint64_t tmap_seed = 0;
    tmap->add_option("--manifest", tmap_manifest, "dataset manifest")->required();
    tmap->add_option("--site", tmap_sites, "site id (repeat to pool)")->required();
    tmap->add_option("--out", tmap_out, "checkpoint path")->required();
    tmap->add_option("--config", tmap_config, "training config (key = value file)");
    tmap->add_option("--loss", tmap_loss, "loss log CSV path");
    tmap->add_option("--seed", tmap_seed, "training seed");

    // ---- train-vcl ----
    auto* tvcl = app.add_subcommand("train-vcl",
                                    "variational training; prior checkpoint or N(0,1)");
    std::string tvcl_manifest, tvcl_out, tvcl_config, tvcl_loss, tvcl_prior, tvcl_init;
    std::vector<std::string> tvcl_sites;
    std::uint64_t tvcl_seed = 0;
    tvcl->add_option("--manifest", tvcl_manifest, "dataset manifest")->required();
    tvcl->add_option("--site", tvcl_sites, "site id (repeat to pool)")->required();
    tvcl->add_option("--out", tvcl_out, "checkpoint path")->required();
    tvcl->add_option("--prior", tvcl_prior, "prior checkpoint (defaults to N(0,1))");
    tvcl->add_option("--init-from", tvcl_init, "initial checkpoint (point or variational)");
    tvcl->add_option("--config", tvcl_config, "training config (key = value file)");
    tvcl->add_option("--loss", tvcl_loss, "loss log CSV path");
    tvcl->add_option("--seed", tvcl_seed, "training seed");

    // ---- consolidate ----
    auto* cons = app.add_subcommand("consolidate",
                                    "fuse site posteriors sharing a common prior");
    std::string cons_prior, cons_out;
    std::vector<std::string> cons_sites;
    cons->add_option("--prior", cons_prior, "shared prior checkpoint")->required();
    cons->add_option("--site", cons_sites, "site posterior checkpoint (repeatable)")
        ->required();
    cons->add_option("--out", cons_out, "output checkpoint")->required();

    // ---- finetune ----
    auto* ft = app.add_subcommand("finetune",
                                  "fine-tune a posterior against itself as prior");
    std::string ft_manifest, ft_posterior, ft_out, ft_config, ft_loss;
    std::vector<std::string> ft_sites;
    std::uint64_t ft_seed = 0;
    ft->add_option("--manifest", ft_manifest, "dataset manifest")->required();
    ft->add_option("--site", ft_sites, "site id (repeat to pool)")->required();
    ft->add_option("--posterior", ft_posterior, "posterior used as init and prior")
        ->required();
    ft->add_option("--out", ft_out, "checkpoint path")->required();
    ft->add_option("--config", ft_config, "training config (key = value file)");
    ft->add_option("--loss", ft_loss, "loss log CSV path");
    ft->add_option("--seed", ft_seed, "training seed");

    // ---- ensemble-eval ----
    auto* ens = app.add_subcommand("ensemble-eval",
                                   "evaluate an output-probability average of models");
    std::string ens_manifest, ens_csv, ens_pred, ens_split = "test";
    std::vector<std::string> ens_cks, ens_sites;
    int ens_mc = 10;
    std::uint64_t ens_seed = 0;
    ens->add_option("--manifest", ens_manifest, "dataset manifest")->required();
    ens->add_option("--ckpt", ens_cks, "member checkpoint (at least two)")->required();
    ens->add_option("--site", ens_sites, "restrict to these site ids");
    ens->add_option("--split", ens_split, "train | test | eval | all");
    ens->add_option("--mc", ens_mc, "samples per variational member");
    ens->add_option("--seed", ens_seed, "sampling seed");
    ens->add_option("--out", ens_csv, "tidy Dice CSV path");
    ens->add_option("--pred-out", ens_pred, "directory for predicted label volumes");

    // ---- evaluate ----
    auto* ev = app.add_subcommand("evaluate",
                                  "score a checkpoint on a manifest, or one "
                                  "prediction against one truth volume");
    std::string ev_ckpt, ev_manifest, ev_csv, ev_predout, ev_split = "test";
    std::string ev_pred, ev_truth, ev_mask, ev_name = "model";
    std::vector<std::string> ev_sites;
    int ev_mc = 10, ev_classes = 0;
    std::uint64_t ev_seed = 0;
    ev->add_option("--ckpt", ev_ckpt, "checkpoint to score");
    ev->add_option("--manifest", ev_manifest, "dataset manifest");
    ev->add_option("--site", ev_sites, "restrict to these site ids");
    ev->add_option("--split", ev_split, "train | test | eval | all");
    ev->add_option("--mc", ev_mc, "prediction samples");
    ev->add_option("--seed", ev_seed, "sampling seed");
    ev->add_option("--name", ev_name, "condition name in the report");
    ev->add_option("--out", ev_csv, "tidy Dice CSV path");
    ev->add_option("--pred-out", ev_predout, "directory for predicted label volumes");
    ev->add_option("--pred", ev_pred, "predicted label volume (direct mode)");
    ev->add_option("--truth", ev_truth, "truth label volume (direct mode)");
    ev->add_option("--classes", ev_classes, "class count (direct mode)");
    ev->add_option("--mask", ev_mask, "error mask output (direct mode)");

    // ---- experiment ----
    auto* ex = app.add_subcommand("experiment", "run the full plan and emit reports");
    std::uint64_t ex_seed = 0;
    std::string ex_out, ex_plan;
    ex->add_option("--seed", ex_seed, "plan seed");
    ex->add_option("--out", ex_out, "output directory")->required();
    ex->add_option("--plan", ex_plan, "plan overrides (key = value file)");

    // ---- inspect-ckpt ----
    auto* ins = app.add_subcommand("inspect-ckpt", "print checkpoint structure");
    std::string ins_path;
    ins->add_option("--ckpt", ins_path, "checkpoint path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::fprintf(stderr, "%s\n%s", e.what(), app.help().c_str());
        return 2;
    }

    try {
        if (*gen) {
            const auto plan =
                load_plan(gen_seed, gen_plan, gen->count("--seed") > 0);
            dwc::write_site_data(plan, gen_out);
            std::printf("wrote %s/manifest.json\n", gen_out.c_str());
        } else if (*tmap) {
            const auto m = dwc::read_manifest(tmap_manifest);
            const fs::path root = fs::path(tmap_manifest).parent_path();
            dwc::TrainConfig cfg = load_train_config(tmap_config, dwc::TrainConfig{});
            if (tmap->count("--seed")) cfg.seed = tmap_seed;
            dwc::NetworkSpec spec = dwc::NetworkSpec::mini(16, m.geometry.classes);
            std::string joined;
            for (const auto& s : tmap_sites) joined += (joined.empty() ? "" : "+") + s;
            const auto r = dwc::run_condition(spec, tiles_for(m, root, tmap_sites, "train"),
                                              cfg, nullptr, nullptr, {"map(" + joined + ")"});
            dwc::write_checkpoint(r.checkpoint, tmap_out);
            if (!tmap_loss.empty()) dwc::write_loss_csv(tmap_loss, r.log);
            std::printf("%s: %ld steps, %s\n", tmap_out.c_str(), r.steps,
                        r.converged ? "converged" : "step limit");
        } else if (*tvcl) {
            const auto m = dwc::read_manifest(tvcl_manifest);
            const fs::path root = fs::path(tvcl_manifest).parent_path();
            dwc::TrainConfig cfg = load_train_config(tvcl_config, dwc::TrainConfig{});
            if (tvcl->count("--seed")) cfg.seed = tvcl_seed;
            dwc::NetworkSpec spec = dwc::NetworkSpec::mini(16, m.geometry.classes);
            dwc::SiteCheckpoint prior;
            std::vector<std::string> prov;
            if (tvcl_prior.empty()) {
                prior = dwc::scalar_prior_like(spec);
            } else {
                prior = dwc::read_checkpoint(tvcl_prior);
                spec = prior.spec;
                prov = prior.provenance;
            }
            std::string joined;
            for (const auto& s : tvcl_sites) joined += (joined.empty() ? "" : "+") + s;
            prov.push_back((tvcl_prior.empty() ? "ffg(" : "vcl(") + joined + ")");
            dwc::SiteCheckpoint init;
            const dwc::SiteCheckpoint* init_ptr = nullptr;
            if (!tvcl_init.empty()) {
                init = dwc::read_checkpoint(tvcl_init);
                init_ptr = &init;
            }
            const auto r = dwc::run_condition(spec, tiles_for(m, root, tvcl_sites, "train"),
                                              cfg, &prior, init_ptr, std::move(prov));
            dwc::write_checkpoint(r.checkpoint, tvcl_out);
            if (!tvcl_loss.empty()) dwc::write_loss_csv(tvcl_loss, r.log);
            std::printf("%s: %ld steps, %s\n", tvcl_out.c_str(), r.steps,
                        r.converged ? "converged" : "step limit");
        } else if (*cons) {
            const auto prior = dwc::read_checkpoint(cons_prior);
            std::vector<dwc::SiteCheckpoint> sites;
            for (const auto& p : cons_sites) sites.push_back(dwc::read_checkpoint(p));
            const auto c = dwc::consolidate(prior, sites);
            dwc::write_checkpoint(c.checkpoint, cons_out);
            std::printf("%s: %zu site posteriors fused, %ld variances clamped\n",
                        cons_out.c_str(), sites.size(), c.clamp_count);
        } else if (*ft) {
            const auto m = dwc::read_manifest(ft_manifest);
            const fs::path root = fs::path(ft_manifest).parent_path();
            const auto posterior = dwc::read_checkpoint(ft_posterior);
            dwc::TrainConfig base;
            const int per_edge = m.geometry.side / m.geometry.tile;
            base.data_weight = per_edge * per_edge * per_edge; // one example volume
            dwc::TrainConfig cfg = load_train_config(ft_config, base);
            if (ft->count("--seed")) cfg.seed = ft_seed;
            std::string joined;
            for (const auto& s : ft_sites) joined += (joined.empty() ? "" : "+") + s;
            const auto data = tiles_for(m, root, ft_sites, "train");
            std::vector<std::string> prov = posterior.provenance;
            prov.push_back("ft(" + joined + ")");
            const auto r = dwc::run_condition(posterior.spec, data, cfg, &posterior,
                                              &posterior, std::move(prov));
            dwc::write_checkpoint(r.checkpoint, ft_out);
            if (!ft_loss.empty()) dwc::write_loss_csv(ft_loss, r.log);
            std::printf("%s: %ld steps, %s\n", ft_out.c_str(), r.steps,
                        r.converged ? "converged" : "step limit");
        } else if (*ens) {
            const auto m = dwc::read_manifest(ens_manifest);
            const fs::path root = fs::path(ens_manifest).parent_path();
            std::vector<dwc::SiteCheckpoint> cks;
            std::vector<const dwc::SiteCheckpoint*> ptrs;
            for (const auto& p : ens_cks) cks.push_back(dwc::read_checkpoint(p));
            for (const auto& c : cks) ptrs.push_back(&c);
            const auto entries = eval_entries(m, root, ens_sites, ens_split);
            dwc::DiceReport rep;
            for (const auto& e : entries) {
                const auto probs = dwc::run_ensemble(ptrs, e.z, m.geometry.tile, ens_mc,
                                                     dwc::CounterRng(ens_seed)
                                                         .stream(dwc::hash_name(
                                                             e.dataset.c_str()))
                                                         .stream(e.id)
                                                         .key());
                const auto labels = dwc::argmax_labels(probs);
                report_entries(rep, "ensemble", e, labels, m.geometry.classes);
                write_predictions(ens_pred, e, labels);
            }
            finish_report(rep, "ensemble", entries, ens_csv);
        } else if (*ev) {
            if (!ev_pred.empty() || !ev_truth.empty()) {
                // direct mode: one prediction volume against one truth volume
                if (ev_pred.empty() || ev_truth.empty() || ev_classes < 1)
                    throw std::runtime_error(
                        "direct mode needs --pred, --truth, and --classes");
                const auto pred = dwc::read_volume(ev_pred);
                const auto truth = dwc::read_volume(ev_truth);
                const auto dice = dwc::dice_per_class(pred, truth, ev_classes);
                for (int c = 0; c < ev_classes; ++c) {
                    if (std::isnan(dice[c]))
                        std::printf("class %d: absent\n", c);
                    else
                        std::printf("class %d: %.6f\n", c, dice[c]);
                }
                std::printf("mean: %.6f\n", dwc::dice_mean(dice));
                if (!ev_mask.empty()) dwc::export_error_mask(pred, truth, ev_mask);
            } else {
                if (ev_ckpt.empty() || ev_manifest.empty())
                    throw std::runtime_error(
                        "checkpoint mode needs --ckpt and --manifest");
                const auto m = dwc::read_manifest(ev_manifest);
                const fs::path root = fs::path(ev_manifest).parent_path();
                const dwc::Predictor pred(dwc::read_checkpoint(ev_ckpt));
                const auto entries = eval_entries(m, root, ev_sites, ev_split);
                dwc::DiceReport rep;
                for (const auto& e : entries) {
                    const auto labels = pred.labels_volume(
                        e.z, m.geometry.tile, ev_mc,
                        dwc::CounterRng(ev_seed)
                            .stream(dwc::hash_name(e.dataset.c_str()))
                            .stream(e.id)
                            .key());
                    report_entries(rep, ev_name, e, labels, m.geometry.classes);
                    write_predictions(ev_predout, e, labels);
                }
                finish_report(rep, ev_name, entries, ev_csv);
            }
        } else if (*ex) {
            const auto plan = load_plan(ex_seed, ex_plan, ex->count("--seed") > 0);
            const auto r = dwc::run_experiment(plan, ex_out);
            std::printf("wrote %s/summary.csv (%zu conditions, %zu datasets)\n",
                        ex_out.c_str(), r.conditions.size(), r.site_ids.size() + 1);
        } else if (*ins) {
            const auto ck = dwc::read_checkpoint(ins_path);
            std::printf("kind: %s\n",
                        ck.kind == dwc::SiteCheckpoint::Kind::variational ? "variational"
                                                                          : "map-point");
            std::printf("in_channels: %d  classes: %d  layers: %zu\n", ck.spec.in_channels,
                        ck.spec.classes, ck.spec.layers.size());
            std::string prov;
            for (const auto& p : ck.provenance) prov += (prov.empty() ? "" : " -> ") + p;
            std::printf("provenance: %s\n", prov.c_str());
            for (const auto& rec : ck.records) {
                std::string dims;
                for (auto d : rec.dims) dims += (dims.empty() ? "" : "x") + std::to_string(d);
                std::printf("  %-18s %-14s %zu values%s\n", rec.name.c_str(), dims.c_str(),
                            rec.mu.size(), rec.sigma.empty() ? "" : " (mu, sigma)");
            }
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
