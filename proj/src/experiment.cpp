#include "dwc/experiment.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "dwc/consolidate.hpp"
#include "dwc/rng.hpp"
#include "dwc/variational.hpp"

namespace dwc {

namespace fs = std::filesystem;

namespace {

std::uint64_t subkey(std::uint64_t root, const std::string& label, std::uint64_t id = 0) {
    return CounterRng(root).stream(hash_name(label.c_str())).stream(id).key();
}

std::string lower(std::string s) {
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

std::string fmt_real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string fmt_fix(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

double parse_real(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    double r;
    try {
        r = std::stod(v, &pos);
    } catch (const std::exception&) {
        throw std::invalid_argument("bad numeric value for " + key + ": '" + v + "'");
    }
    if (pos != v.size()) throw std::invalid_argument("bad numeric value for " + key + ": '" + v + "'");
    return r;
}

long parse_int(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    long r;
    try {
        r = std::stol(v, &pos);
    } catch (const std::exception&) {
        throw std::invalid_argument("bad integer value for " + key + ": '" + v + "'");
    }
    if (pos != v.size()) throw std::invalid_argument("bad integer value for " + key + ": '" + v + "'");
    return r;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    unsigned long long r;
    try {
        r = std::stoull(v, &pos);
    } catch (const std::exception&) {
        throw std::invalid_argument("bad seed value for " + key + ": '" + v + "'");
    }
    if (pos != v.size()) throw std::invalid_argument("bad seed value for " + key + ": '" + v + "'");
    return r;
}

std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : v) {
        if (c == ',') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else if (!std::isspace(static_cast<unsigned char>(c))) {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

std::string join_list(const std::vector<std::string>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out.push_back(',');
        out += v[i];
    }
    return out;
}

void profile_set(SiteProfile& p, const std::string& field, const std::string& key,
                 const std::string& value) {
    if (field == "gain") p.gain = parse_real(key, value);
    else if (field == "bias") p.bias = parse_real(key, value);
    else if (field == "gamma") p.gamma = parse_real(key, value);
    else if (field == "noise") p.noise = parse_real(key, value);
    else if (field == "field") p.field = parse_real(key, value);
    else if (field == "order") {
        p.order.clear();
        for (const auto& t : split_list(value))
            p.order.push_back(static_cast<int>(parse_int(key, t)));
    } else if (field == "volumes") p.volumes = static_cast<int>(parse_int(key, value));
    else if (field == "seed") p.seed = parse_u64(key, value);
    else throw std::invalid_argument("unknown plan key: " + key);
}

void profile_kv(KvMap& kv, const std::string& prefix, const SiteProfile& p) {
    kv[prefix + "gain"] = fmt_real(p.gain);
    kv[prefix + "bias"] = fmt_real(p.bias);
    kv[prefix + "gamma"] = fmt_real(p.gamma);
    kv[prefix + "noise"] = fmt_real(p.noise);
    kv[prefix + "field"] = fmt_real(p.field);
    if (!p.order.empty()) {
        std::vector<std::string> toks;
        for (const int b : p.order) toks.push_back(std::to_string(b));
        kv[prefix + "order"] = join_list(toks);
    }
    kv[prefix + "volumes"] = std::to_string(p.volumes);
    kv[prefix + "seed"] = std::to_string(p.seed);
}

} // namespace

// ---------------------------------------------------------------------------
// key=value files

KvMap read_kv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    KvMap kv;
    std::string line;
    long lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const auto strip = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            if (b == std::string::npos) return std::string();
            const auto e = s.find_last_not_of(" \t\r");
            return s.substr(b, e - b + 1);
        };
        if (strip(line).empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                     ": expected 'key = value'");
        const std::string key = strip(line.substr(0, eq));
        const std::string value = strip(line.substr(eq + 1));
        if (key.empty())
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": empty key");
        kv[key] = value;
    }
    return kv;
}

void write_kv(const std::string& path, const KvMap& kv) {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw std::runtime_error("cannot open " + path);
    for (const auto& [k, v] : kv) std::fprintf(f, "%s = %s\n", k.c_str(), v.c_str());
    if (std::fclose(f) != 0) throw std::runtime_error("cannot write " + path);
}

TrainConfig train_config_from_kv(const KvMap& kv, const TrainConfig& base) {
    TrainConfig cfg = base;
    for (const auto& [k, v] : kv) {
        if (k == "lr") cfg.lr = parse_real(k, v);
        else if (k == "batch") cfg.batch = static_cast<int>(parse_int(k, v));
        else if (k == "dataset_size") cfg.dataset_size = parse_int(k, v);
        else if (k == "max_steps") cfg.max_steps = static_cast<int>(parse_int(k, v));
        else if (k == "window") cfg.window = static_cast<int>(parse_int(k, v));
        else if (k == "window_tol") cfg.window_tol = parse_real(k, v);
        else if (k == "seed") cfg.seed = parse_u64(k, v);
        else if (k == "mc_samples") cfg.mc_samples = static_cast<int>(parse_int(k, v));
        else if (k == "data_weight") cfg.data_weight = parse_real(k, v);
        else throw std::invalid_argument("unknown training key: " + k);
    }
    return cfg;
}

KvMap train_config_to_kv(const TrainConfig& cfg) {
    KvMap kv;
    kv["lr"] = fmt_real(cfg.lr);
    kv["batch"] = std::to_string(cfg.batch);
    kv["dataset_size"] = std::to_string(cfg.dataset_size);
    kv["max_steps"] = std::to_string(cfg.max_steps);
    kv["window"] = std::to_string(cfg.window);
    kv["window_tol"] = fmt_real(cfg.window_tol);
    kv["seed"] = std::to_string(cfg.seed);
    kv["mc_samples"] = std::to_string(cfg.mc_samples);
    kv["data_weight"] = fmt_real(cfg.data_weight);
    return kv;
}

NetworkSpec network_spec_from_kv(const KvMap& kv) {
    int filters = 16, classes = 5, in_channels = 1;
    std::vector<int> dilations = {1, 1, 1, 2, 4, 8, 1};
    for (const auto& [k, v] : kv) {
        if (k == "filters") filters = static_cast<int>(parse_int(k, v));
        else if (k == "classes") classes = static_cast<int>(parse_int(k, v));
        else if (k == "in_channels") in_channels = static_cast<int>(parse_int(k, v));
        else if (k == "dilations") {
            dilations.clear();
            for (const auto& d : split_list(v))
                dilations.push_back(static_cast<int>(parse_int(k, d)));
        } else {
            throw std::invalid_argument("unknown network key: " + k);
        }
    }
    return NetworkSpec::with_dilations(filters, classes, in_channels, dilations);
}

KvMap network_spec_to_kv(const NetworkSpec& spec) {
    KvMap kv;
    kv["in_channels"] = std::to_string(spec.in_channels);
    kv["classes"] = std::to_string(spec.classes);
    kv["filters"] = std::to_string(spec.layers.empty() ? 0 : spec.layers.front().filters);
    std::vector<std::string> dils;
    for (std::size_t l = 0; l + 1 < spec.layers.size(); ++l)
        dils.push_back(std::to_string(spec.layers[l].dilation));
    kv["dilations"] = join_list(dils);
    return kv;
}

// ---------------------------------------------------------------------------
// Plan

ExperimentPlan ExperimentPlan::defaults(std::uint64_t seed) {
    ExperimentPlan p;
    p.seed = seed;
    p.geometry.side = 16;
    p.geometry.tile = 16;
    p.geometry.classes = 5;
    p.geometry.seed = subkey(seed, "geometry");
    p.spec = NetworkSpec::mini();

    const auto site = [&](const char* id, double gain, double bias, double gamma,
                          double noise, double field, std::vector<int> order, int volumes,
                          int test) {
        PlanSite s;
        s.profile.id = id;
        s.profile.gain = gain;
        s.profile.bias = bias;
        s.profile.gamma = gamma;
        s.profile.noise = noise;
        s.profile.field = field;
        s.profile.order = std::move(order);
        s.profile.volumes = volumes;
        s.profile.seed = subkey(seed, "site", hash_name(id));
        s.test = test;
        return s;
    };
    // unequal site sizes, largest first.  Noise, field strength and band
    // separation are shared, so no site is intrinsically harder; what
    // separates them is the mapping from tissue class to rendered brightness,
    // which per-volume standardisation cannot undo.  H renders brightness
    // rising inward; N renders its outermost tissue brightest with a dark
    // mid-zone; B renders its outer trio in descending order; W inverts
    // polarity outright (different pulse sequences really do invert the
    // contrast between particular tissues).  Each map reverses the local
    // contrast direction across part of another site's anatomy, so models
    // carry a site signature in both directions.  Mild gamma differences add
    // per-site texture on top.
    p.sites = {site("H", 1.00, 0.00, 1.00, 0.045, 0.14, {}, 15, 3),
               site("N", 1.00, 0.02, 0.80, 0.045, 0.14, {4, 1, 0, 2, 3}, 9, 3),
               site("B", 1.00, 0.06, 1.60, 0.045, 0.14, {2, 1, 0, 3, 4}, 7, 3),
               site("W", -0.90, 1.02, 1.10, 0.045, 0.14, {}, 6, 3)};

    for (int k = 0; k < 4; ++k) {
        SiteProfile h;
        h.id = "x" + std::to_string(k);
        CounterRng r(subkey(seed, "held", static_cast<std::uint64_t>(k)));
        h.gamma = 0.8 + 0.5 * r.uniform(0);
        h.gain = 0.9 + 0.2 * r.uniform(1);
        h.bias = -0.05 + 0.1 * r.uniform(2);
        h.noise = 0.045;
        h.field = 0.14;
        h.volumes = 1;
        h.seed = subkey(seed, "held-seed", static_cast<std::uint64_t>(k));
        p.held_out.push_back(h);
    }

    p.map_cfg.lr = 0.02;
    p.map_cfg.batch = 6;
    p.map_cfg.max_steps = 200;
    p.map_cfg.window = 50;
    p.map_cfg.window_tol = 0.004;

    p.var_cfg = p.map_cfg;
    p.var_cfg.lr = 0.01;
    p.var_cfg.max_steps = 70;
    p.var_cfg.window = 20;
    p.var_cfg.window_tol = 0.005;

    p.ft_cfg = p.var_cfg;
    p.ft_cfg.lr = 0.005;
    p.ft_cfg.max_steps = 40;
    p.ft_cfg.window = 10;
    p.ft_cfg.data_weight = 0; // resolved to one volume's tile count at run time

    return p;
}

void ExperimentPlan::validate() const {
    spec.validate();
    if (sites.size() < 2) throw std::invalid_argument("plan needs at least two sites");
    if (geometry.side < 4 || geometry.tile < 1 || geometry.side % geometry.tile != 0)
        throw std::invalid_argument("plan geometry: side must be a positive multiple of tile");
    if (spec.in_channels != 1)
        throw std::invalid_argument("plan network must take single-channel volumes");
    if (spec.classes != geometry.classes)
        throw std::invalid_argument("plan network classes must match geometry classes");
    const auto check_order = [&](const SiteProfile& p) {
        if (p.order.empty()) return;
        std::vector<bool> seen(static_cast<size_t>(geometry.classes), false);
        if (p.order.size() != static_cast<size_t>(geometry.classes))
            throw std::invalid_argument("site " + p.id + ": band order must list every class");
        for (const int b : p.order) {
            if (b < 0 || b >= geometry.classes || seen[static_cast<size_t>(b)])
                throw std::invalid_argument("site " + p.id +
                                            ": band order must be a permutation");
            seen[static_cast<size_t>(b)] = true;
        }
    };
    std::set<std::string> ids;
    for (const auto& s : sites) {
        if (s.profile.id.empty()) throw std::invalid_argument("site id must not be empty");
        if (!ids.insert(lower(s.profile.id)).second)
            throw std::invalid_argument("duplicate site id: " + s.profile.id);
        if (s.test < 1 || s.profile.volumes <= s.test)
            throw std::invalid_argument("site " + s.profile.id +
                                        ": needs at least one train and one test volume");
        if (!(s.profile.gamma > 0)) throw std::invalid_argument("site gamma must be positive");
        check_order(s.profile);
    }
    for (const auto& h : held_out) {
        if (h.id.empty()) throw std::invalid_argument("held-out id must not be empty");
        if (!ids.insert(lower(h.id)).second)
            throw std::invalid_argument("duplicate held-out id: " + h.id);
        if (h.volumes < 1) throw std::invalid_argument("held-out pool needs volumes >= 1");
        check_order(h);
    }
    if (eval_mc < 1) throw std::invalid_argument("eval_mc must be >= 1");
}

int ExperimentPlan::tiles_per_volume() const {
    const int per_edge = geometry.side / geometry.tile;
    return per_edge * per_edge * per_edge;
}

KvMap ExperimentPlan::to_kv() const {
    KvMap kv;
    kv["seed"] = std::to_string(seed);
    kv["eval_mc"] = std::to_string(eval_mc);
    kv["geometry.side"] = std::to_string(geometry.side);
    kv["geometry.tile"] = std::to_string(geometry.tile);
    kv["geometry.classes"] = std::to_string(geometry.classes);
    kv["geometry.seed"] = std::to_string(geometry.seed);
    for (const auto& [k, v] : network_spec_to_kv(spec)) kv["net." + k] = v;
    for (const auto& [k, v] : train_config_to_kv(map_cfg)) kv["map." + k] = v;
    for (const auto& [k, v] : train_config_to_kv(var_cfg)) kv["var." + k] = v;
    for (const auto& [k, v] : train_config_to_kv(ft_cfg)) kv["ft." + k] = v;

    std::vector<std::string> site_ids, held_ids;
    for (const auto& s : sites) {
        site_ids.push_back(s.profile.id);
        profile_kv(kv, "site." + s.profile.id + ".", s.profile);
        kv["site." + s.profile.id + ".test"] = std::to_string(s.test);
    }
    for (const auto& h : held_out) {
        held_ids.push_back(h.id);
        profile_kv(kv, "held." + h.id + ".", h);
    }
    kv["sites"] = join_list(site_ids);
    kv["held"] = join_list(held_ids);

    // informative only: the condition graph implied by the roster
    const std::string base = lower(sites.front().profile.id);
    for (const auto& s : sites)
        kv["condition." + lower(s.profile.id) + "_map"] =
            "point training on " + s.profile.id;
    kv["condition.pooled_map"] = "point training on the union of all site training sets";
    kv["condition.ensemble"] = "probability average of the per-site point models";
    kv["condition." + base + "_var"] =
        "variational net on " + sites.front().profile.id + ", standard normal prior";
    kv["condition.dwc"] = "consolidation of the one-step sequential posteriors";
    kv["condition.dwc_ft"] = "consolidation fine-tuned on " + sites.front().profile.id;
    return kv;
}

void ExperimentPlan::apply_kv(const KvMap& kv) {
    // a new seed re-derives every sub-seed before other overrides land
    if (const auto it = kv.find("seed"); it != kv.end())
        *this = defaults(parse_u64("seed", it->second));

    // roster changes next, so per-site overrides can target fresh entries
    if (const auto it = kv.find("sites"); it != kv.end()) {
        std::vector<PlanSite> next;
        for (const auto& id : split_list(it->second)) {
            const auto old = std::find_if(sites.begin(), sites.end(), [&](const PlanSite& s) {
                return s.profile.id == id;
            });
            if (old != sites.end()) {
                next.push_back(*old);
            } else {
                PlanSite s;
                s.profile.id = id;
                s.profile.volumes = 4;
                s.profile.seed = subkey(seed, "site", hash_name(id.c_str()));
                s.test = 1;
                next.push_back(s);
            }
        }
        sites = std::move(next);
    }
    if (const auto it = kv.find("held"); it != kv.end()) {
        std::vector<SiteProfile> next;
        std::uint64_t k = 0;
        for (const auto& id : split_list(it->second)) {
            const auto old = std::find_if(held_out.begin(), held_out.end(),
                                          [&](const SiteProfile& h) { return h.id == id; });
            if (old != held_out.end()) {
                next.push_back(*old);
            } else {
                SiteProfile h;
                h.id = id;
                h.volumes = 1;
                h.seed = subkey(seed, "held-seed", k);
                next.push_back(h);
            }
            ++k;
        }
        held_out = std::move(next);
    }

    KvMap map_kv, var_kv, ft_kv, net_kv;
    for (const auto& [k, v] : kv) {
        if (k == "seed" || k == "sites" || k == "held") continue;
        if (k.rfind("condition.", 0) == 0) continue; // informative output
        if (k == "eval_mc") { eval_mc = static_cast<int>(parse_int(k, v)); continue; }
        if (k == "geometry.side") { geometry.side = static_cast<int>(parse_int(k, v)); continue; }
        if (k == "geometry.tile") { geometry.tile = static_cast<int>(parse_int(k, v)); continue; }
        if (k == "geometry.classes") { geometry.classes = static_cast<int>(parse_int(k, v)); continue; }
        if (k == "geometry.seed") { geometry.seed = parse_u64(k, v); continue; }
        if (k.rfind("net.", 0) == 0) { net_kv[k.substr(4)] = v; continue; }
        if (k.rfind("map.", 0) == 0) { map_kv[k.substr(4)] = v; continue; }
        if (k.rfind("var.", 0) == 0) { var_kv[k.substr(4)] = v; continue; }
        if (k.rfind("ft.", 0) == 0) { ft_kv[k.substr(3)] = v; continue; }
        if (k.rfind("site.", 0) == 0 || k.rfind("held.", 0) == 0) {
            const bool is_site = k.rfind("site.", 0) == 0;
            const std::string rest = k.substr(5);
            const auto dot = rest.rfind('.');
            if (dot == std::string::npos) throw std::invalid_argument("unknown plan key: " + k);
            const std::string id = rest.substr(0, dot);
            const std::string field = rest.substr(dot + 1);
            if (is_site) {
                const auto s = std::find_if(sites.begin(), sites.end(), [&](const PlanSite& e) {
                    return e.profile.id == id;
                });
                if (s == sites.end()) throw std::invalid_argument("unknown site in key: " + k);
                if (field == "test") s->test = static_cast<int>(parse_int(k, v));
                else profile_set(s->profile, field, k, v);
            } else {
                const auto h = std::find_if(held_out.begin(), held_out.end(),
                                            [&](const SiteProfile& e) { return e.id == id; });
                if (h == held_out.end())
                    throw std::invalid_argument("unknown held-out pool in key: " + k);
                profile_set(*h, field, k, v);
            }
            continue;
        }
        throw std::invalid_argument("unknown plan key: " + k);
    }
    if (!net_kv.empty()) {
        // fill unspecified fields from the current spec
        for (const auto& [k, v] : network_spec_to_kv(spec))
            net_kv.emplace(k, v);
        spec = network_spec_from_kv(net_kv);
    }
    map_cfg = train_config_from_kv(map_kv, map_cfg);
    var_cfg = train_config_from_kv(var_kv, var_cfg);
    ft_cfg = train_config_from_kv(ft_kv, ft_cfg);
}

// ---------------------------------------------------------------------------
// Manifest

void to_json(nlohmann::json& j, const SiteProfile& p) {
    j = {{"id", p.id},     {"gain", p.gain},   {"bias", p.bias},
         {"gamma", p.gamma}, {"noise", p.noise}, {"field", p.field},
         {"order", p.order}, {"volumes", p.volumes}, {"seed", p.seed}};
}

void from_json(const nlohmann::json& j, SiteProfile& p) {
    j.at("id").get_to(p.id);
    j.at("gain").get_to(p.gain);
    j.at("bias").get_to(p.bias);
    j.at("gamma").get_to(p.gamma);
    j.at("noise").get_to(p.noise);
    j.at("field").get_to(p.field);
    p.order = j.value("order", std::vector<int>{});
    j.at("volumes").get_to(p.volumes);
    j.at("seed").get_to(p.seed);
}

void to_json(nlohmann::json& j, const SiteGeometry& g) {
    j = {{"side", g.side}, {"tile", g.tile}, {"classes", g.classes}, {"seed", g.seed}};
}

void from_json(const nlohmann::json& j, SiteGeometry& g) {
    j.at("side").get_to(g.side);
    j.at("tile").get_to(g.tile);
    j.at("classes").get_to(g.classes);
    j.at("seed").get_to(g.seed);
}

// found through argument-dependent lookup by the json library, so these must
// sit in the enclosing namespace even though no header declares them
void to_json(nlohmann::json& j, const ManifestVolume& v) {
    j = {{"id", v.id}, {"split", v.split}, {"image", v.image}, {"labels", v.labels}};
}

void from_json(const nlohmann::json& j, ManifestVolume& v) {
    j.at("id").get_to(v.id);
    j.at("split").get_to(v.split);
    j.at("image").get_to(v.image);
    j.at("labels").get_to(v.labels);
}

void to_json(nlohmann::json& j, const ManifestSite& s) {
    j = {{"profile", s.profile}, {"volumes", s.volumes}};
}

void from_json(const nlohmann::json& j, ManifestSite& s) {
    j.at("profile").get_to(s.profile);
    j.at("volumes").get_to(s.volumes);
}

void to_json(nlohmann::json& j, const DataManifest& m) {
    j = {{"geometry", m.geometry}, {"sites", m.sites}, {"held_out", m.held_out}};
}

void from_json(const nlohmann::json& j, DataManifest& m) {
    j.at("geometry").get_to(m.geometry);
    j.at("sites").get_to(m.sites);
    j.at("held_out").get_to(m.held_out);
}

namespace {

// scene ids for evaluation-only pools sit far from the training range
int held_scene_id(std::size_t pool_index, int v) {
    return 1000 + static_cast<int>(pool_index) * 1000 + v;
}

} // namespace

void write_manifest(const DataManifest& m, const std::string& path) {
    nlohmann::json j = m;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path);
    out << j.dump(2) << "\n";
    if (!out) throw std::runtime_error("cannot write " + path);
}

DataManifest read_manifest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
        return j.get<DataManifest>();
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("bad manifest " + path + ": " + e.what());
    }
}

DataManifest write_site_data(const ExperimentPlan& plan, const std::string& dir) {
    plan.validate();
    fs::create_directories(dir);
    DataManifest m;
    m.geometry = plan.geometry;

    const auto emit = [&](const SiteProfile& profile, int scene_id, const std::string& split,
                          ManifestSite& site, int file_index) {
        const LabeledVolume lv = generate_volume(profile, plan.geometry, scene_id);
        char stem[32];
        std::snprintf(stem, sizeof(stem), "vol%03d", file_index);
        const std::string rel_img = profile.id + "/" + stem + ".dwcv";
        const std::string rel_lab = profile.id + "/" + stem + ".labels.dwcv";
        write_volume(lv.image, dir + "/" + rel_img);
        write_volume(lv.labels, dir + "/" + rel_lab);
        site.volumes.push_back({scene_id, split, rel_img, rel_lab});
    };

    for (const auto& s : plan.sites) {
        fs::create_directories(fs::path(dir) / s.profile.id);
        ManifestSite site;
        site.profile = s.profile;
        const int train_count = s.profile.volumes - s.test;
        for (int v = 0; v < s.profile.volumes; ++v)
            emit(s.profile, v, v < train_count ? "train" : "test", site, v);
        m.sites.push_back(std::move(site));
    }
    for (std::size_t k = 0; k < plan.held_out.size(); ++k) {
        const auto& profile = plan.held_out[k];
        fs::create_directories(fs::path(dir) / profile.id);
        ManifestSite site;
        site.profile = profile;
        for (int v = 0; v < profile.volumes; ++v)
            emit(profile, held_scene_id(k, v), "eval", site, v);
        m.held_out.push_back(std::move(site));
    }
    write_manifest(m, dir + "/manifest.json");
    return m;
}

// ---------------------------------------------------------------------------
// Condition-level operations

TrainResult run_condition(const NetworkSpec& spec, const Dataset& data, const TrainConfig& cfg,
                          const SiteCheckpoint* prior, const SiteCheckpoint* init,
                          std::vector<std::string> provenance) {
    if (!prior) {
        if (init)
            throw std::invalid_argument("point training takes no initial checkpoint");
        return train_map(spec, data, cfg, std::move(provenance));
    }
    return train_variational(spec, data, cfg, *prior, init, std::move(provenance));
}

DwcOutcome run_dwc(const SiteCheckpoint& prior, const std::vector<SiteCheckpoint>& sites,
                   const Dataset& finetune_data, const TrainConfig& ft_cfg,
                   const std::string& finetune_tag) {
    DwcOutcome out;
    Consolidated c = consolidate(prior, sites);
    out.clamp_count = c.clamp_count;
    out.consolidated = std::move(c.checkpoint);
    std::vector<std::string> provenance = out.consolidated.provenance;
    provenance.push_back(finetune_tag);
    if (ft_cfg.max_steps == 0) {
        // posterior passes through untouched; only the provenance grows
        out.finetuned.checkpoint = out.consolidated;
        out.finetuned.checkpoint.provenance = std::move(provenance);
        return out;
    }
    out.finetuned = train_variational(out.consolidated.spec, finetune_data, ft_cfg,
                                      out.consolidated, &out.consolidated,
                                      std::move(provenance));
    return out;
}

FeatureMap<float> run_ensemble(const std::vector<const SiteCheckpoint*>& cks, const Volume& vol,
                               int tile, int mc_samples, std::uint64_t seed) {
    if (cks.size() < 2) throw std::invalid_argument("ensemble needs at least two models");
    for (const auto* ck : cks) {
        if (!ck) throw std::invalid_argument("ensemble member is null");
        if (!(ck->spec == cks.front()->spec))
            throw std::invalid_argument("ensemble members disagree on the network spec");
    }
    const CounterRng root(seed);
    std::vector<double> acc;
    FeatureMap<float> shape;
    for (std::size_t i = 0; i < cks.size(); ++i) {
        const Predictor p(*cks[i]);
        FeatureMap<float> probs =
            p.probs_volume(vol, tile, mc_samples, root.stream(i).key());
        if (acc.empty()) {
            acc.assign(probs.data.size(), 0.0);
            shape = probs;
        }
        for (std::size_t j = 0; j < probs.data.size(); ++j) acc[j] += probs.data[j];
    }
    for (std::size_t j = 0; j < acc.size(); ++j)
        shape.data[j] = static_cast<float>(acc[j] / static_cast<double>(cks.size()));
    return shape;
}

double checkpoint_kl(const SiteCheckpoint& q, const SiteCheckpoint* prior) {
    if (q.kind != SiteCheckpoint::Kind::variational)
        throw std::invalid_argument("KL needs a variational posterior");
    if (prior && prior->kind != SiteCheckpoint::Kind::variational)
        throw std::invalid_argument("KL needs a variational prior");
    double kl = 0;
    for (const auto& rec : q.records) {
        const std::span<const float> mu(rec.mu), sigma(rec.sigma);
        if (prior) {
            const auto& pr = prior->record(rec.name);
            kl += kl_ffg<float>(mu, sigma, std::span<const float>(pr.mu),
                                std::span<const float>(pr.sigma));
        } else {
            kl += kl_ffg<float>(mu, sigma, 0.0, 1.0);
        }
    }
    return kl;
}

// ---------------------------------------------------------------------------
// Full run

namespace {

struct SiteBundle {
    std::string id;
    Dataset train;
    std::vector<std::pair<int, LabeledVolume>> test; // (scene id, volume)
};

struct EvalVolume {
    std::string dataset;
    int id;
    Volume z;     // scored image
    Volume truth; // labels
};

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw std::runtime_error("cannot open " + path);
    for (const auto& l : lines) std::fprintf(f, "%s\n", l.c_str());
    if (std::fclose(f) != 0) throw std::runtime_error("cannot write " + path);
}

} // namespace

ExperimentResult run_experiment(const ExperimentPlan& plan_in, const std::string& out_dir) {
    ExperimentPlan plan = plan_in;
    plan.validate();
    if (plan.ft_cfg.data_weight == 0)
        plan.ft_cfg.data_weight = plan.tiles_per_volume(); // one example volume

    const fs::path out(out_dir);
    const fs::path cond_root = out / "conditions";
    fs::create_directories(cond_root);
    write_kv((out / "plan.txt").string(), plan.to_kv());
    write_site_data(plan, (out / "data").string());

    const std::uint64_t clamps_before = negative_variance_count().load();

    // ---- data in memory ----
    std::vector<SiteBundle> bundles;
    std::vector<EvalVolume> eval_volumes;
    for (const auto& s : plan.sites) {
        SiteBundle b;
        b.id = s.profile.id;
        const auto vols = generate_site(s.profile, plan.geometry);
        const int train_count = s.profile.volumes - s.test;
        std::vector<LabeledVolume> train(vols.begin(), vols.begin() + train_count);
        b.train = make_tiles(train, plan.geometry.tile, plan.geometry.classes);
        for (int v = train_count; v < s.profile.volumes; ++v) {
            b.test.emplace_back(v, vols[v]);
            eval_volumes.push_back({b.id, v, z_scored(vols[v].image), vols[v].labels});
        }
        bundles.push_back(std::move(b));
    }
    for (std::size_t k = 0; k < plan.held_out.size(); ++k) {
        const auto& profile = plan.held_out[k];
        for (int v = 0; v < profile.volumes; ++v) {
            const int id = held_scene_id(k, v);
            const LabeledVolume lv = generate_volume(profile, plan.geometry, id);
            eval_volumes.push_back({"held_out", id, z_scored(lv.image), lv.labels});
        }
    }

    // ---- condition graph ----
    ExperimentResult result;
    std::map<std::string, SiteCheckpoint> cks;

    const auto train_seed = [&](const std::string& name) {
        return subkey(plan.seed, "train:" + name);
    };
    const auto emit = [&](const std::string& name, const TrainResult& r, const TrainConfig& cfg,
                          bool trained) {
        const fs::path dir = cond_root / name;
        fs::create_directories(dir);
        write_checkpoint(r.checkpoint, (dir / "checkpoint.dwck").string());
        write_loss_csv((dir / "loss.csv").string(), r.log);
        KvMap snap = train_config_to_kv(cfg);
        snap["condition"] = name;
        write_kv((dir / "config.txt").string(), snap);
        result.runs.push_back({name, r.steps, r.converged, trained});
        cks[name] = r.checkpoint;
    };

    for (const auto& s : plan.sites) result.site_ids.push_back(s.profile.id);
    const std::string base_id = plan.sites.front().profile.id;
    const std::string base = lower(base_id);

    // per-site point models
    for (const auto& b : bundles) {
        const std::string name = lower(b.id) + "_map";
        TrainConfig cfg = plan.map_cfg;
        cfg.seed = train_seed(name);
        emit(name, run_condition(plan.spec, b.train, cfg, nullptr, nullptr, {"map(" + b.id + ")"}),
             cfg, true);
    }

    // pooled ceiling
    {
        Dataset pooled;
        std::string joined;
        for (const auto& b : bundles) {
            pooled.insert(pooled.end(), b.train.begin(), b.train.end());
            joined += (joined.empty() ? "" : "+") + b.id;
        }
        TrainConfig cfg = plan.map_cfg;
        cfg.seed = train_seed("pooled_map");
        emit("pooled_map",
             run_condition(plan.spec, pooled, cfg, nullptr, nullptr, {"map(" + joined + ")"}),
             cfg, true);
    }

    // variational base on the front site, standard normal prior, point init
    const SiteCheckpoint std_prior = scalar_prior_like(plan.spec);
    {
        const std::string name = base + "_var";
        TrainConfig cfg = plan.var_cfg;
        cfg.seed = train_seed(name);
        emit(name,
             run_condition(plan.spec, bundles.front().train, cfg, &std_prior,
                           &cks.at(base + "_map"), {"ffg(" + base_id + ")"}),
             cfg, true);
    }

    // one-step sequential posteriors: base -> each other site
    for (std::size_t i = 1; i < bundles.size(); ++i) {
        const std::string name = "vcl_" + base + lower(bundles[i].id);
        TrainConfig cfg = plan.var_cfg;
        cfg.seed = train_seed(name);
        const SiteCheckpoint& prior = cks.at(base + "_var");
        std::vector<std::string> prov = prior.provenance;
        prov.push_back("vcl(" + bundles[i].id + ")");
        emit(name,
             run_condition(plan.spec, bundles[i].train, cfg, &prior, nullptr, std::move(prov)),
             cfg, true);
    }

    // chains in both site-size orders; the first hop reuses the one-step net
    const auto chain = [&](const std::vector<std::size_t>& order) {
        std::string name = "vcl_" + base + lower(bundles[order[0]].id);
        for (std::size_t step = 1; step < order.size(); ++step) {
            const auto& b = bundles[order[step]];
            const std::string next = name + lower(b.id);
            TrainConfig cfg = plan.var_cfg;
            cfg.seed = train_seed(next);
            const SiteCheckpoint& prior = cks.at(name);
            std::vector<std::string> prov = prior.provenance;
            prov.push_back("vcl(" + b.id + ")");
            emit(next, run_condition(plan.spec, b.train, cfg, &prior, nullptr, std::move(prov)),
                 cfg, true);
            name = next;
        }
        return name;
    };
    std::vector<std::size_t> decreasing, increasing;
    for (std::size_t i = 1; i < bundles.size(); ++i) decreasing.push_back(i);
    increasing.assign(decreasing.rbegin(), decreasing.rend());
    const std::string chain_dec = chain(decreasing);
    const std::string chain_inc = chain(increasing);

    // consolidation and fine-tune on the front site
    {
        std::vector<SiteCheckpoint> one_step;
        for (std::size_t i = 1; i < bundles.size(); ++i)
            one_step.push_back(cks.at("vcl_" + base + lower(bundles[i].id)));
        TrainConfig cfg = plan.ft_cfg;
        cfg.seed = train_seed("dwc_ft");
        DwcOutcome dwc = run_dwc(cks.at(base + "_var"), one_step, bundles.front().train, cfg,
                                 "ft(" + base_id + ")");

        TrainResult raw;
        raw.checkpoint = dwc.consolidated;
        emit("dwc", raw, TrainConfig{}, false);
        emit("dwc_ft", dwc.finetuned, cfg, true);

        result.kl_ft_consolidated = checkpoint_kl(cks.at("dwc_ft"), &cks.at("dwc"));
        result.kl_ft_std_normal = checkpoint_kl(cks.at("dwc_ft"), nullptr);
    }

    // ensemble bookkeeping (predictions only, no checkpoint)
    {
        const fs::path dir = cond_root / "ensemble";
        fs::create_directories(dir);
        KvMap snap;
        snap["condition"] = "ensemble";
        std::vector<std::string> members;
        for (const auto& b : bundles) members.push_back(lower(b.id) + "_map");
        snap["members"] = join_list(members);
        write_kv((dir / "config.txt").string(), snap);
        result.runs.push_back({"ensemble", 0, false, false});
    }

    // ---- evaluation ----
    for (const auto& b : bundles) result.conditions.push_back(lower(b.id) + "_map");
    result.conditions.push_back("pooled_map");
    result.conditions.push_back("ensemble");
    result.conditions.push_back(base + "_var");
    result.conditions.push_back(chain_dec);
    result.conditions.push_back(chain_inc);
    result.conditions.push_back("dwc");
    result.conditions.push_back("dwc_ft");

    const auto eval_seed = [&](const std::string& cond, const EvalVolume& v) {
        return subkey(plan.seed, "eval:" + cond + ":" + v.dataset,
                      static_cast<std::uint64_t>(v.id));
    };
    std::vector<const SiteCheckpoint*> members;
    for (const auto& b : bundles) members.push_back(&cks.at(lower(b.id) + "_map"));

    for (const auto& cond : result.conditions) {
        if (cond == "ensemble") {
            for (const auto& v : eval_volumes) {
                const auto probs = run_ensemble(members, v.z, plan.geometry.tile, plan.eval_mc,
                                                eval_seed(cond, v));
                const auto dice =
                    dice_per_class(argmax_labels(probs), v.truth, plan.geometry.classes);
                result.report.add(cond, v.dataset, v.id, dice);
            }
            continue;
        }
        const Predictor pred(cks.at(cond));
        for (const auto& v : eval_volumes) {
            const Volume labels =
                pred.labels_volume(v.z, plan.geometry.tile, plan.eval_mc, eval_seed(cond, v));
            const auto dice = dice_per_class(labels, v.truth, plan.geometry.classes);
            result.report.add(cond, v.dataset, v.id, dice);
        }
    }

    // ---- reports ----
    result.report.write_csv((out / "report.csv").string());

    {
        std::vector<std::string> lines;
        std::string header = "condition";
        for (const auto& id : result.site_ids) header += "," + id;
        header += ",weighted_avg,held_out";
        lines.push_back(header);
        for (const auto& cond : result.conditions) {
            std::string row = cond;
            for (const auto& id : result.site_ids)
                row += "," + fmt_fix(result.report.dataset_mean(cond, id));
            row += "," + fmt_fix(result.report.weighted_average(
                             cond, std::span<const std::string>(result.site_ids)));
            row += "," + fmt_fix(result.report.dataset_mean(cond, "held_out"));
            lines.push_back(row);
        }
        write_lines((out / "summary.csv").string(), lines);
    }

    {
        // paired per-volume scores: site test sets pooled in roster order
        const auto scores = [&](const std::string& cond, bool held) {
            std::vector<double> v;
            if (held) return result.report.volume_means(cond, "held_out");
            for (const auto& id : result.site_ids)
                for (double m : result.report.volume_means(cond, id)) v.push_back(m);
            return v;
        };
        const std::vector<std::pair<std::string, std::string>> pairs = {
            {"dwc_ft", "ensemble"}, {"dwc", "ensemble"},      {"dwc_ft", "pooled_map"},
            {"dwc_ft", base + "_var"}, {chain_dec, chain_inc}, {"pooled_map", "ensemble"},
        };
        std::vector<std::string> lines = {"comparison,scope,t,p,df,degenerate"};
        char buf[160];
        for (const auto& [a, b] : pairs)
            for (const bool held : {false, true}) {
                const auto sa = scores(a, held);
                if (sa.size() < 2) continue; // too few volumes to pair
                const TTest tt = paired_ttest(sa, scores(b, held));
                std::snprintf(buf, sizeof(buf), "%s_vs_%s,%s,%.6g,%.6g,%ld,%d", a.c_str(),
                              b.c_str(), held ? "held_out" : "sites", tt.t, tt.p, tt.df,
                              tt.degenerate ? 1 : 0);
                lines.push_back(buf);
            }
        write_lines((out / "stats.csv").string(), lines);
    }

    {
        std::vector<std::string> lines = {"condition,trained,steps,converged"};
        for (const auto& r : result.runs)
            lines.push_back(r.name + "," + (r.trained ? "1" : "0") + "," +
                            std::to_string(r.steps) + "," + (r.converged ? "1" : "0"));
        write_lines((out / "steps.csv").string(), lines);
    }

    {
        KvMap diag;
        diag["kl_ft_consolidated"] = fmt_real(result.kl_ft_consolidated);
        diag["kl_ft_std_normal"] = fmt_real(result.kl_ft_std_normal);
        diag["negative_variance_clamps"] =
            std::to_string(negative_variance_count().load() - clamps_before);
        write_kv((out / "diagnostics.txt").string(), diag);
    }

    return result;
}

} // namespace dwc
