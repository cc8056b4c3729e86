#pragma once

// Synthetic multi-site data: volumes of nested ellipsoidal regions whose class
// intensities pass through a per-site acquisition chain (band order, gain,
// offset, gamma, smooth multiplicative field, additive noise). Geometry and class intensities
// derive from a shared geometry seed, so two sites with neutral acquisition
// chains produce identical volumes; everything site-specific derives from the
// profile seed and site id.

#include <cstdint>
#include <string>
#include <vector>

#include "dwc/network.hpp"
#include "dwc/tensor.hpp"

namespace dwc {

struct SiteProfile {
    std::string id;
    double gain = 1.0;
    double bias = 0.0;
    double gamma = 1.0;  // > 0
    double noise = 0.0;  // >= 0, additive sigma
    double field = 0.0;  // amplitude of the smooth multiplicative field
    // class -> intensity band. Empty means identity; otherwise a permutation of
    // 0..classes-1, letting a site render tissues in a different brightness
    // order (the way different pulse sequences invert tissue contrast).
    std::vector<int> order;
    int volumes = 0; // train + test together
    std::uint64_t seed = 0;
};

struct SiteGeometry {
    int side = 24;
    int tile = 24;
    int classes = 5;
    std::uint64_t seed = 0;
};

struct LabeledVolume {
    Volume image;
    Volume labels; // class ids stored exactly in float
};

LabeledVolume generate_volume(const SiteProfile& profile, const SiteGeometry& geo,
                              int volume_id);
std::vector<LabeledVolume> generate_site(const SiteProfile& profile, const SiteGeometry& geo);

// Zero-mean unit-variance over all voxels of one volume; near-constant input is
// rejected rather than zero-filled.
Volume z_scored(const Volume& vol);

// Non-overlapping cubic tiles in (x, y, z) block order; reassembly is exact.
std::vector<FeatureMap<float>> tile_volume(const Volume& vol, int tile);
Volume reassemble(const std::vector<FeatureMap<float>>& tiles, int nx, int ny, int nz);
std::vector<std::vector<std::uint8_t>> tile_labels(const Volume& labels, int tile, int classes);

// z-score + tile the image, tile the labels, pair them up.
Dataset make_tiles(const LabeledVolume& vol, int tile, int classes);
Dataset make_tiles(const std::vector<LabeledVolume>& vols, int tile, int classes);

struct DatasetSplit {
    std::vector<int> train, test; // disjoint volume ids
};

// Deterministic tail split; at least one test volume once count >= 2.
DatasetSplit split_volumes(int count, double test_fraction = 0.1);

} // namespace dwc
