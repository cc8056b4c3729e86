#pragma once

// Fully-factorized Gaussian weight posteriors: closed-form KL against a
// Gaussian prior, reparameterized sampling, weight-normalized means, and the
// stochastic dilated convolution with the noise moved onto pre-activations
// (per-voxel mean/variance maps instead of per-weight draws).

#include <atomic>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dwc/rng.hpp"
#include "dwc/tensor.hpp"

namespace dwc {

// Count of variance-map entries clamped at zero (negative only through
// round-off). Reset/read from tests.
std::atomic<std::uint64_t>& negative_variance_count();

template <typename T>
inline T softplus(T x) {
    return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

// Inverse of softplus; argument must be positive.
template <typename T>
inline T softplus_inv(T y) {
    if (!(y > T(0))) throw std::invalid_argument("softplus_inv: argument must be positive");
    return y > T(20) ? y : std::log(std::expm1(y));
}

template <typename T>
inline T sigmoid(T x) {
    return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

namespace detail {

template <typename T>
inline void require_positive(std::span<const T> sigma, const char* what) {
    for (T s : sigma)
        if (!(s > T(0)) || !std::isfinite(static_cast<double>(s)))
            throw std::invalid_argument(std::string(what) + ": sigma must be positive and finite");
}

} // namespace detail

// KL(q || p) in nats for elementwise Gaussians, accumulated at 64-bit
// precision: sum of log(sp/sq) + (sq^2 + (mq-mp)^2) / (2 sp^2) - 1/2.
template <typename T>
double kl_ffg(std::span<const T> mu_q, std::span<const T> sigma_q,
              std::span<const T> mu_p, std::span<const T> sigma_p) {
    if (mu_q.size() != sigma_q.size() || mu_p.size() != sigma_p.size() || mu_q.size() != mu_p.size())
        throw std::invalid_argument("kl_ffg: mismatched shapes");
    detail::require_positive(sigma_q, "kl_ffg");
    detail::require_positive(sigma_p, "kl_ffg");
    double acc = 0.0;
    for (size_t i = 0; i < mu_q.size(); ++i) {
        const double sq = static_cast<double>(sigma_q[i]);
        const double sp = static_cast<double>(sigma_p[i]);
        const double dm = static_cast<double>(mu_q[i]) - static_cast<double>(mu_p[i]);
        acc += std::log(sp / sq) + (sq * sq + dm * dm) / (2.0 * sp * sp) - 0.5;
    }
    return acc;
}

// Scalar prior broadcast over every weight.
template <typename T>
double kl_ffg(std::span<const T> mu_q, std::span<const T> sigma_q, double mu0, double sigma0) {
    if (mu_q.size() != sigma_q.size()) throw std::invalid_argument("kl_ffg: mismatched shapes");
    if (!(sigma0 > 0.0)) throw std::invalid_argument("kl_ffg: prior sigma must be positive");
    detail::require_positive(sigma_q, "kl_ffg");
    double acc = 0.0;
    const double inv2s2 = 1.0 / (2.0 * sigma0 * sigma0);
    const double logsp = std::log(sigma0);
    for (size_t i = 0; i < mu_q.size(); ++i) {
        const double sq = static_cast<double>(sigma_q[i]);
        const double dm = static_cast<double>(mu_q[i]) - mu0;
        acc += logsp - std::log(sq) + (sq * sq + dm * dm) * inv2s2 - 0.5;
    }
    return acc;
}

// One reparameterized draw: w_i = mu_i + sigma_i * eps_i with eps from the
// seeded counter stream, so a given seed always yields the same array.
template <typename T>
std::vector<T> sample_weights(std::span<const T> mu, std::span<const T> sigma, std::uint64_t seed) {
    if (mu.size() != sigma.size()) throw std::invalid_argument("sample_weights: mismatched shapes");
    CounterRng rng(seed);
    std::vector<T> w(mu.size());
    for (size_t i = 0; i < w.size(); ++i)
        w[i] = static_cast<T>(static_cast<double>(mu[i]) +
                              static_cast<double>(sigma[i]) * rng.normal(i));
    return w;
}

// mu_f = g_f * v_f / ||v_f||, filters laid out contiguously (per_filter values
// each). Throws on a zero-norm direction.
template <typename T>
void weight_normalized_mean(std::span<const T> g, std::span<const T> v, size_t per_filter,
                            std::span<T> mu) {
    const size_t filters = g.size();
    if (v.size() != filters * per_filter || mu.size() != v.size())
        throw std::invalid_argument("weight_normalized_mean: mismatched shapes");
    for (size_t f = 0; f < filters; ++f) {
        const T* vf = v.data() + f * per_filter;
        double n2 = 0.0;
        for (size_t i = 0; i < per_filter; ++i) n2 += static_cast<double>(vf[i]) * vf[i];
        if (!(n2 > 0.0)) throw std::invalid_argument("weight_normalized_mean: zero-norm direction");
        const double scale = static_cast<double>(g[f]) / std::sqrt(n2);
        T* mf = mu.data() + f * per_filter;
        for (size_t i = 0; i < per_filter; ++i) mf[i] = static_cast<T>(scale * vf[i]);
    }
}

// Adjoint of weight_normalized_mean. grad_g and grad_v are accumulated into
// (callers zero them first when that is what they want).
template <typename T>
void weight_norm_backward(std::span<const T> g, std::span<const T> v, size_t per_filter,
                          std::span<const T> grad_mu, std::span<T> grad_g, std::span<T> grad_v) {
    const size_t filters = g.size();
    if (v.size() != filters * per_filter || grad_mu.size() != v.size() ||
        grad_g.size() != filters || grad_v.size() != v.size())
        throw std::invalid_argument("weight_norm_backward: mismatched shapes");
    for (size_t f = 0; f < filters; ++f) {
        const T* vf = v.data() + f * per_filter;
        const T* gm = grad_mu.data() + f * per_filter;
        double n2 = 0.0, dot_gm_v = 0.0;
        for (size_t i = 0; i < per_filter; ++i) {
            n2 += static_cast<double>(vf[i]) * vf[i];
            dot_gm_v += static_cast<double>(gm[i]) * vf[i];
        }
        if (!(n2 > 0.0)) throw std::invalid_argument("weight_norm_backward: zero-norm direction");
        const double n = std::sqrt(n2);
        // d mu / d g = v / ||v||;  d mu_j / d v_i = g ( delta_ij / n - v_i v_j / n^3 )
        grad_g[f] += static_cast<T>(dot_gm_v / n);
        const double gf = static_cast<double>(g[f]);
        T* gv = grad_v.data() + f * per_filter;
        for (size_t i = 0; i < per_filter; ++i)
            gv[i] += static_cast<T>(gf / n * (static_cast<double>(gm[i]) - vf[i] * dot_gm_v / n2));
    }
}

// Stochastic dilated convolution under the factorized posterior: mean map from
// conv(in, mu), variance map from conv(in^2, sigma^2) plus the bias variance,
// output = mean + sqrt(variance) * noise. `noise` is laid out like the output
// (F, X, Y, Z); empty noise means eps = 0. Bias spans may be empty.
template <typename T>
FeatureMap<T> ffg_conv3d(const FeatureMap<T>& in,
                         std::span<const T> mu_w, std::span<const T> sigma_w,
                         std::span<const T> mu_b, std::span<const T> sigma_b,
                         int filters, const KernelShape& ks,
                         std::span<const T> noise) {
    if (sigma_w.size() != mu_w.size() || sigma_b.size() != mu_b.size())
        throw std::invalid_argument("ffg_conv3d: mu/sigma shapes differ");
    detail::require_positive(sigma_w, "ffg_conv3d");
    detail::require_positive(sigma_b, "ffg_conv3d");

    FeatureMap<T> mean = conv3d<T>(in, mu_w, mu_b, filters, ks);

    FeatureMap<T> sq(in.channels, in.nx, in.ny, in.nz);
    for (size_t i = 0; i < sq.data.size(); ++i) sq.data[i] = in.data[i] * in.data[i];
    std::vector<T> w2(sigma_w.size());
    for (size_t i = 0; i < w2.size(); ++i) w2[i] = sigma_w[i] * sigma_w[i];
    std::vector<T> b2(sigma_b.size());
    for (size_t i = 0; i < b2.size(); ++i) b2[i] = sigma_b[i] * sigma_b[i];
    FeatureMap<T> var = conv3d<T>(sq, w2, b2, filters, ks);

    if (!noise.empty() && noise.size() != mean.data.size())
        throw std::invalid_argument("ffg_conv3d: noise shaped unlike the output");
    std::uint64_t clamped = 0;
    for (size_t i = 0; i < mean.data.size(); ++i) {
        T v = var.data[i];
        if (v < T(0)) {
            v = T(0);
            ++clamped;
        }
        const T eps = noise.empty() ? T(0) : noise[i];
        mean.data[i] += std::sqrt(v) * eps;
    }
    if (clamped) negative_variance_count().fetch_add(clamped, std::memory_order_relaxed);
    return mean;
}

} // namespace dwc
