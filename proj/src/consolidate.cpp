#include "dwc/consolidate.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dwc {

std::uint64_t clamp_sigmas(std::span<const float> prior_sigma, std::span<float> site_sigma) {
    if (prior_sigma.size() != site_sigma.size())
        throw std::invalid_argument("clamp_sigmas: mismatched shapes");
    std::uint64_t count = 0;
    for (size_t i = 0; i < site_sigma.size(); ++i) {
        if (site_sigma[i] > prior_sigma[i]) {
            site_sigma[i] = prior_sigma[i];
            ++count;
        }
    }
    return count;
}

std::pair<SiteCheckpoint, std::uint64_t> clamp_site_variances(const SiteCheckpoint& prior,
                                                              const SiteCheckpoint& site) {
    if (!(prior.spec == site.spec))
        throw std::invalid_argument("clamp_site_variances: specs differ");
    if (prior.kind != SiteCheckpoint::Kind::variational ||
        site.kind != SiteCheckpoint::Kind::variational)
        throw std::invalid_argument("clamp_site_variances: need variational checkpoints");
    SiteCheckpoint out = site;
    std::uint64_t count = 0;
    for (size_t r = 0; r < out.records.size(); ++r)
        count += clamp_sigmas(prior.records[r].sigma, out.records[r].sigma);
    return {std::move(out), count};
}

std::uint64_t consolidate_arrays(std::span<const float> prior_mu,
                                 std::span<const float> prior_sigma,
                                 const std::vector<std::span<const float>>& site_mu,
                                 const std::vector<std::span<const float>>& site_sigma,
                                 std::span<float> out_mu, std::span<float> out_sigma) {
    const size_t n = prior_mu.size();
    const size_t s_count = site_mu.size();
    if (prior_sigma.size() != n || out_mu.size() != n || out_sigma.size() != n)
        throw std::invalid_argument("consolidate_arrays: mismatched shapes");
    if (s_count == 0 || site_sigma.size() != s_count)
        throw std::invalid_argument("consolidate_arrays: need at least one site");
    for (size_t s = 0; s < s_count; ++s)
        if (site_mu[s].size() != n || site_sigma[s].size() != n)
            throw std::invalid_argument("consolidate_arrays: mismatched site shapes");

    std::uint64_t clamped = 0;
    std::vector<double> precs(s_count), wmeans(s_count);
    for (size_t i = 0; i < n; ++i) {
        const double prior_var = static_cast<double>(prior_sigma[i]) * prior_sigma[i];
        const double prior_prec = 1.0 / prior_var;
        for (size_t s = 0; s < s_count; ++s) {
            double sv = static_cast<double>(site_sigma[s][i]) * site_sigma[s][i];
            if (sv > prior_var) {
                sv = prior_var;
                ++clamped;
            }
            precs[s] = 1.0 / sv;
            wmeans[s] = static_cast<double>(site_mu[s][i]) / sv;
        }
        // sorted accumulation keeps the result independent of site order
        std::sort(precs.begin(), precs.end());
        std::sort(wmeans.begin(), wmeans.end());
        double tau = 0.0, weighted = 0.0;
        for (size_t s = 0; s < s_count; ++s) {
            tau += precs[s];
            weighted += wmeans[s];
        }
        tau -= (s_count - 1) * prior_prec;
        weighted -= (s_count - 1) * static_cast<double>(prior_mu[i]) * prior_prec;
        if (!(tau > 0.0))
            throw std::runtime_error("consolidate: non-positive combined precision");
        const double var = 1.0 / tau;
        out_mu[i] = static_cast<float>(weighted * var);
        out_sigma[i] = static_cast<float>(std::sqrt(var));
    }
    return clamped;
}

Consolidated consolidate(const SiteCheckpoint& prior, const std::vector<SiteCheckpoint>& sites) {
    if (sites.empty()) throw std::invalid_argument("consolidate: need at least one site");
    if (prior.kind != SiteCheckpoint::Kind::variational)
        throw std::invalid_argument("consolidate: prior must be variational");
    for (const auto& s : sites) {
        if (!(s.spec == prior.spec)) throw std::invalid_argument("consolidate: specs differ");
        if (s.kind != SiteCheckpoint::Kind::variational)
            throw std::invalid_argument("consolidate: sites must be variational");
        if (s.records.size() != prior.records.size())
            throw std::invalid_argument("consolidate: record lists differ");
    }

    Consolidated result;
    result.checkpoint = prior;
    result.checkpoint.provenance = prior.provenance;
    for (const auto& s : sites)
        result.checkpoint.provenance.insert(result.checkpoint.provenance.end(),
                                            s.provenance.begin(), s.provenance.end());

    for (size_t r = 0; r < prior.records.size(); ++r) {
        std::vector<std::span<const float>> mus, sigmas;
        mus.reserve(sites.size());
        sigmas.reserve(sites.size());
        for (const auto& s : sites) {
            mus.emplace_back(s.records[r].mu);
            sigmas.emplace_back(s.records[r].sigma);
        }
        result.clamp_count += consolidate_arrays(
            prior.records[r].mu, prior.records[r].sigma, mus, sigmas,
            result.checkpoint.records[r].mu, result.checkpoint.records[r].sigma);
    }
    return result;
}

} // namespace dwc
