#pragma once

// Closed-form fusion of independently trained factorized Gaussian posteriors
// that share one prior: per weight, precisions add and the prior's precision
// is subtracted S-1 times. Site variances are clamped to the prior variance
// first, which keeps the combined precision strictly positive.

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "dwc/checkpoint.hpp"

namespace dwc {

// sigma_site^2 <- min(sigma_site^2, sigma_prior^2), returning the number of
// entries that were shrunk.
std::uint64_t clamp_sigmas(std::span<const float> prior_sigma, std::span<float> site_sigma);

std::pair<SiteCheckpoint, std::uint64_t> clamp_site_variances(const SiteCheckpoint& prior,
                                                              const SiteCheckpoint& site);

// Elementwise consolidation over already-aligned arrays. Math in 64-bit,
// result rounded to f32. Sites are clamped internally; returns clamp count.
std::uint64_t consolidate_arrays(std::span<const float> prior_mu,
                                 std::span<const float> prior_sigma,
                                 const std::vector<std::span<const float>>& site_mu,
                                 const std::vector<std::span<const float>>& site_sigma,
                                 std::span<float> out_mu, std::span<float> out_sigma);

struct Consolidated {
    SiteCheckpoint checkpoint;
    std::uint64_t clamp_count = 0;
};

// Checkpoint-level wrapper: validates that every posterior shares the prior's
// spec, consolidates record by record, and concatenates provenance
// (prior chain first, then each site chain in the order given).
Consolidated consolidate(const SiteCheckpoint& prior, const std::vector<SiteCheckpoint>& sites);

} // namespace dwc
