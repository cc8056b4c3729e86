#include "dwc/sites.hpp"

#include <cmath>
#include <stdexcept>

#include "dwc/rng.hpp"

namespace dwc {

namespace {

double uniform_in(const CounterRng& rng, std::uint64_t idx, double lo, double hi) {
    return lo + (hi - lo) * rng.uniform(idx);
}

} // namespace

LabeledVolume generate_volume(const SiteProfile& profile, const SiteGeometry& geo,
                              int volume_id) {
    if (geo.side < 4 || geo.classes < 2) throw std::invalid_argument("generate: bad geometry");
    if (!(profile.gamma > 0)) throw std::invalid_argument("generate: gamma must be positive");
    if (profile.noise < 0) throw std::invalid_argument("generate: negative noise sigma");
    const int n = geo.side;
    const int C = geo.classes;
    if (!profile.order.empty()) {
        std::vector<bool> seen(static_cast<size_t>(C), false);
        if (profile.order.size() != static_cast<size_t>(C))
            throw std::invalid_argument("generate: band order must list every class");
        for (const int b : profile.order) {
            if (b < 0 || b >= C || seen[static_cast<size_t>(b)])
                throw std::invalid_argument("generate: band order must be a permutation");
            seen[static_cast<size_t>(b)] = true;
        }
    }
    const int shells = C - 1;

    const CounterRng geom = CounterRng(geo.seed).stream(static_cast<std::uint64_t>(volume_id));
    const CounterRng shape = geom.stream(0);
    const CounterRng bands = geom.stream(1);
    const CounterRng site =
        CounterRng(profile.seed).stream(hash_name(profile.id.c_str())).stream(
            static_cast<std::uint64_t>(volume_id));
    const CounterRng fieldr = site.stream(0);
    const CounterRng noiser = site.stream(1);

    // nested ellipsoids: common center, shared axes scaled by shrinking factors
    const double cx = 0.5 * n + uniform_in(shape, 0, -0.06 * n, 0.06 * n);
    const double cy = 0.5 * n + uniform_in(shape, 1, -0.06 * n, 0.06 * n);
    const double cz = 0.5 * n + uniform_in(shape, 2, -0.06 * n, 0.06 * n);
    const double ax = uniform_in(shape, 3, 0.30 * n, 0.42 * n);
    const double ay = uniform_in(shape, 4, 0.30 * n, 0.42 * n);
    const double az = uniform_in(shape, 5, 0.30 * n, 0.42 * n);
    // cube-root spacing gives every shell roughly equal voxel volume, so the
    // innermost class stays large enough to score; jitter is smaller than the
    // narrowest spacing, keeping the factors ordered
    std::vector<double> frac(shells);
    for (int k = 0; k < shells; ++k) {
        const double base = std::cbrt(static_cast<double>(shells - k) / shells);
        const double lo = k == 0 ? 1.0 : base - 0.03; // outer shell keeps the full axes
        const double hi = k == 0 ? 1.0 : base + 0.03;
        frac[k] = uniform_in(shape, 6 + k, lo, hi);
    }

    // per-class intensity bands: evenly spaced with a guard gap, one draw each
    std::vector<double> level(C);
    for (int c = 0; c < C; ++c) {
        const double lo = (c + 0.08) / C;
        const double hi = (c + 0.92) / C;
        level[c] = uniform_in(bands, c, lo, hi);
    }

    // smooth multiplicative field: product of low-frequency cosines
    const double fx = uniform_in(fieldr, 0, 0.5, 1.2), px = uniform_in(fieldr, 3, 0.0, 2.0);
    const double fy = uniform_in(fieldr, 1, 0.5, 1.2), py = uniform_in(fieldr, 4, 0.0, 2.0);
    const double fz = uniform_in(fieldr, 2, 0.5, 1.2), pz = uniform_in(fieldr, 5, 0.0, 2.0);

    LabeledVolume out;
    out.image = Volume(n, n, n);
    out.labels = Volume(n, n, n);
    const double pi = 3.14159265358979323846;
    std::uint64_t noise_idx = 0;
    for (int x = 0; x < n; ++x)
        for (int y = 0; y < n; ++y)
            for (int z = 0; z < n; ++z) {
                const double dx = (x - cx) / ax, dy = (y - cy) / ay, dz = (z - cz) / az;
                const double r2 = dx * dx + dy * dy + dz * dz;
                int label = 0;
                for (int k = 0; k < shells; ++k) {
                    const double f = frac[k];
                    if (r2 <= f * f) label = k + 1;
                }
                out.labels.at(x, y, z) = static_cast<float>(label);

                const int band = profile.order.empty() ? label : profile.order[label];
                double v = profile.gain * level[band] + profile.bias;
                v = std::pow(std::max(v, 0.0), profile.gamma);
                const double fld = std::cos(pi * (fx * x / (n - 1.0) + px)) *
                                   std::cos(pi * (fy * y / (n - 1.0) + py)) *
                                   std::cos(pi * (fz * z / (n - 1.0) + pz));
                v *= 1.0 + profile.field * fld;
                v += profile.noise * noiser.normal(noise_idx);
                ++noise_idx;
                out.image.at(x, y, z) = static_cast<float>(v);
            }
    return out;
}

std::vector<LabeledVolume> generate_site(const SiteProfile& profile, const SiteGeometry& geo) {
    std::vector<LabeledVolume> out;
    out.reserve(profile.volumes);
    for (int v = 0; v < profile.volumes; ++v) out.push_back(generate_volume(profile, geo, v));
    return out;
}

Volume z_scored(const Volume& vol) {
    if (vol.data.empty()) throw std::invalid_argument("z_scored: empty volume");
    double sum = 0;
    for (const float v : vol.data) sum += v;
    const double mean = sum / static_cast<double>(vol.data.size());
    double ss = 0;
    for (const float v : vol.data) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / static_cast<double>(vol.data.size()));
    if (!(sd > 1e-12)) throw std::invalid_argument("z_scored: constant volume");
    Volume out = vol;
    for (auto& v : out.data) v = static_cast<float>((v - mean) / sd);
    return out;
}

std::vector<FeatureMap<float>> tile_volume(const Volume& vol, int tile) {
    if (tile < 1 || vol.nx % tile || vol.ny % tile || vol.nz % tile)
        throw std::invalid_argument("tile: volume edges must be divisible by the tile side");
    std::vector<FeatureMap<float>> out;
    for (int bx = 0; bx < vol.nx; bx += tile)
        for (int by = 0; by < vol.ny; by += tile)
            for (int bz = 0; bz < vol.nz; bz += tile) {
                FeatureMap<float> t(1, tile, tile, tile);
                for (int i = 0; i < tile; ++i)
                    for (int j = 0; j < tile; ++j)
                        for (int k = 0; k < tile; ++k)
                            t.data[(static_cast<size_t>(i) * tile + j) * tile + k] =
                                vol.at(bx + i, by + j, bz + k);
                out.push_back(std::move(t));
            }
    return out;
}

Volume reassemble(const std::vector<FeatureMap<float>>& tiles, int nx, int ny, int nz) {
    if (tiles.empty()) throw std::invalid_argument("reassemble: no tiles");
    const int tile = tiles[0].nx;
    if (tile < 1 || nx % tile || ny % tile || nz % tile ||
        tiles.size() != static_cast<size_t>(nx / tile) * (ny / tile) * (nz / tile))
        throw std::invalid_argument("reassemble: tile count does not match the volume shape");
    Volume out(nx, ny, nz);
    size_t ti = 0;
    for (int bx = 0; bx < nx; bx += tile)
        for (int by = 0; by < ny; by += tile)
            for (int bz = 0; bz < nz; bz += tile) {
                const auto& t = tiles[ti++];
                if (t.channels != 1 || t.nx != tile || t.ny != tile || t.nz != tile)
                    throw std::invalid_argument("reassemble: inconsistent tile shape");
                for (int i = 0; i < tile; ++i)
                    for (int j = 0; j < tile; ++j)
                        for (int k = 0; k < tile; ++k)
                            out.at(bx + i, by + j, bz + k) =
                                t.data[(static_cast<size_t>(i) * tile + j) * tile + k];
            }
    return out;
}

std::vector<std::vector<std::uint8_t>> tile_labels(const Volume& labels, int tile,
                                                   int classes) {
    if (tile < 1 || labels.nx % tile || labels.ny % tile || labels.nz % tile)
        throw std::invalid_argument("tile: volume edges must be divisible by the tile side");
    std::vector<std::vector<std::uint8_t>> out;
    for (int bx = 0; bx < labels.nx; bx += tile)
        for (int by = 0; by < labels.ny; by += tile)
            for (int bz = 0; bz < labels.nz; bz += tile) {
                std::vector<std::uint8_t> t(static_cast<size_t>(tile) * tile * tile);
                size_t at = 0;
                for (int i = 0; i < tile; ++i)
                    for (int j = 0; j < tile; ++j)
                        for (int k = 0; k < tile; ++k) {
                            const float v = labels.at(bx + i, by + j, bz + k);
                            const long c = std::lround(v);
                            if (c < 0 || c >= classes || std::abs(v - c) > 1e-3f)
                                throw std::invalid_argument("tile: non-integer or out-of-range label");
                            t[at++] = static_cast<std::uint8_t>(c);
                        }
                out.push_back(std::move(t));
            }
    return out;
}

Dataset make_tiles(const LabeledVolume& vol, int tile, int classes) {
    auto xs = tile_volume(z_scored(vol.image), tile);
    auto ys = tile_labels(vol.labels, tile, classes);
    Dataset out(xs.size());
    for (size_t i = 0; i < xs.size(); ++i) {
        out[i].x = std::move(xs[i]);
        out[i].y = std::move(ys[i]);
    }
    return out;
}

Dataset make_tiles(const std::vector<LabeledVolume>& vols, int tile, int classes) {
    Dataset out;
    for (const auto& v : vols) {
        auto part = make_tiles(v, tile, classes);
        for (auto& t : part) out.push_back(std::move(t));
    }
    return out;
}

DatasetSplit split_volumes(int count, double test_fraction) {
    if (count < 1) throw std::invalid_argument("split: need at least one volume");
    if (!(test_fraction >= 0.0) || test_fraction >= 1.0)
        throw std::invalid_argument("split: test fraction must be in [0, 1)");
    int test = static_cast<int>(std::lround(test_fraction * count));
    if (count >= 2 && test_fraction > 0.0) test = std::max(test, 1);
    test = std::min(test, count - 1);
    DatasetSplit s;
    for (int i = 0; i < count - test; ++i) s.train.push_back(i);
    for (int i = count - test; i < count; ++i) s.test.push_back(i);
    return s;
}

} // namespace dwc
