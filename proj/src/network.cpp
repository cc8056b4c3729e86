#include "dwc/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <memory>
#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "dwc/rng.hpp"
#include "dwc/variational.hpp"

namespace dwc {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};

size_t bounded(std::uint64_t r, size_t n) {
    return static_cast<size_t>((static_cast<unsigned __int128>(r) * n) >> 64);
}

std::vector<size_t> shuffled_indices(size_t n, const CounterRng& rng) {
    std::vector<size_t> p(n);
    for (size_t i = 0; i < n; ++i) p[i] = i;
    std::uint64_t ctr = 0;
    for (size_t i = n; i > 1; --i) std::swap(p[i - 1], p[bounded(rng.bits(ctr++), i)]);
    return p;
}

template <typename T>
FeatureMap<T> squared(const FeatureMap<T>& x) {
    FeatureMap<T> out = x;
    for (auto& v : out.data) v *= v;
    return out;
}

} // namespace

int worker_threads() {
    static const int n = [] {
#ifdef _OPENMP
        int hw = omp_get_max_threads();
#else
        int hw = 1;
#endif
        if (const char* env = std::getenv("DWC_THREADS")) {
            const int cap = std::atoi(env);
            if (cap > 0) hw = std::min(hw, cap);
        }
        return std::max(1, hw);
    }();
    return n;
}

void write_loss_csv(const std::string& path, const std::vector<LossRow>& rows) {
    std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.c_str(), "wb"));
    if (!f) throw std::runtime_error("loss log: cannot open " + path);
    std::fprintf(f.get(), "step,data_term,kl_term,total\n");
    for (const auto& r : rows)
        std::fprintf(f.get(), "%ld,%.10g,%.10g,%.10g\n", r.step, r.data_term, r.kl_term, r.total);
}

double nll_mean(const FeatureMap<float>& probs, std::span<const std::uint8_t> labels) {
    const size_t vox = probs.voxels();
    if (labels.size() != vox) throw std::invalid_argument("nll_mean: label count != voxel count");
    double s = 0.0;
    for (size_t v = 0; v < vox; ++v) {
        if (labels[v] >= probs.channels) throw std::out_of_range("nll_mean: label out of range");
        s -= std::log(static_cast<double>(probs.data[static_cast<size_t>(labels[v]) * vox + v]));
    }
    return s / static_cast<double>(vox);
}

template <typename T>
void adam_step(std::span<T> params, std::span<const T> grad, std::vector<double>& m,
               std::vector<double>& v, long t, double lr, double beta1, double beta2,
               double eps) {
    if (grad.size() != params.size() || m.size() != params.size() || v.size() != params.size())
        throw std::invalid_argument("adam_step: mismatched sizes");
    if (t < 1) throw std::invalid_argument("adam_step: step index starts at 1");
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (size_t i = 0; i < params.size(); ++i) {
        const double g = static_cast<double>(grad[i]);
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        params[i] -= static_cast<T>(lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps));
    }
}

template void adam_step<float>(std::span<float>, std::span<const float>, std::vector<double>&,
                               std::vector<double>&, long, double, double, double, double);
template void adam_step<double>(std::span<double>, std::span<const double>, std::vector<double>&,
                                std::vector<double>&, long, double, double, double, double);

// ---------------------------------------------------------------------------
// Model

template <typename T>
Model<T>::Model(NetworkSpec spec, Kind kind) : spec_(std::move(spec)), kind_(kind) {
    spec_.validate();
    size_t at = 0;
    off_.resize(spec_.layers.size());
    for (size_t l = 0; l < spec_.layers.size(); ++l) {
        Group& o = off_[l];
        o.filters = spec_.layers[l].filters;
        o.kcount = spec_.kernel_count(l);
        o.g = at;
        at += o.filters;
        o.v = at;
        at += o.kcount;
        if (kind_ == Kind::variational) {
            o.rho_w = at;
            at += o.kcount;
        }
        o.mu_b = at;
        at += o.filters;
        if (kind_ == Kind::variational) {
            o.rho_b = at;
            at += o.filters;
        }
    }
    params_.assign(at, T(0));
    mat_.resize(spec_.layers.size());
}

template <typename T>
void Model<T>::init_random(std::uint64_t seed) {
    const CounterRng root(seed);
    for (size_t l = 0; l < off_.size(); ++l) {
        const Group& o = off_[l];
        const CounterRng r = root.stream(l);
        for (size_t i = 0; i < o.kcount; ++i)
            params_[o.v + i] = static_cast<T>(r.normal(i));
        // He-style magnitude for relu layers, unit for the head
        const bool head = spec_.layers[l].act == LayerSpec::Act::softmax;
        const T g0 = head ? T(1) : static_cast<T>(std::sqrt(2.0));
        for (size_t f = 0; f < o.filters; ++f) params_[o.g + f] = g0;
        for (size_t f = 0; f < o.filters; ++f) params_[o.mu_b + f] = T(0);
        if (kind_ == Kind::variational) {
            const T rho0 = static_cast<T>(softplus_inv(0.001));
            for (size_t i = 0; i < o.kcount; ++i) params_[o.rho_w + i] = rho0;
            for (size_t f = 0; f < o.filters; ++f) params_[o.rho_b + f] = rho0;
        }
    }
}

template <typename T>
void Model<T>::set_weight_norm(size_t l, std::span<const float> w) {
    const Group& o = off_[l];
    const size_t per = o.kcount / o.filters;
    for (size_t f = 0; f < o.filters; ++f) {
        double n2 = 0.0;
        for (size_t i = 0; i < per; ++i) {
            const double x = w[f * per + i];
            n2 += x * x;
        }
        if (!(n2 > 0.0))
            throw std::invalid_argument("model: cannot weight-normalize an all-zero filter");
        params_[o.g + f] = static_cast<T>(std::sqrt(n2));
        for (size_t i = 0; i < per; ++i)
            params_[o.v + f * per + i] = static_cast<T>(w[f * per + i]);
    }
}

template <typename T>
void Model<T>::load(const SiteCheckpoint& ck) {
    ck.validate();
    if (!(ck.spec == spec_)) throw std::invalid_argument("model: checkpoint spec differs");
    const bool var_ck = ck.kind == SiteCheckpoint::Kind::variational;
    if (var_ck != (kind_ == Kind::variational))
        throw std::invalid_argument("model: checkpoint kind differs (use init_from_point)");
    for (size_t l = 0; l < off_.size(); ++l) {
        const Group& o = off_[l];
        const auto& kr = ck.records[2 * l];
        const auto& br = ck.records[2 * l + 1];
        set_weight_norm(l, kr.mu);
        for (size_t f = 0; f < o.filters; ++f) params_[o.mu_b + f] = static_cast<T>(br.mu[f]);
        if (var_ck) {
            for (size_t i = 0; i < o.kcount; ++i)
                params_[o.rho_w + i] =
                    static_cast<T>(softplus_inv(static_cast<double>(kr.sigma[i])));
            for (size_t f = 0; f < o.filters; ++f)
                params_[o.rho_b + f] =
                    static_cast<T>(softplus_inv(static_cast<double>(br.sigma[f])));
        }
    }
}

template <typename T>
void Model<T>::init_from_point(const SiteCheckpoint& ck, double sigma) {
    ck.validate();
    if (kind_ != Kind::variational)
        throw std::invalid_argument("model: init_from_point targets a variational model");
    if (!(ck.spec == spec_)) throw std::invalid_argument("model: checkpoint spec differs");
    if (ck.kind != SiteCheckpoint::Kind::map_point)
        throw std::invalid_argument("model: init_from_point needs a point checkpoint");
    if (!(sigma > 0.0)) throw std::invalid_argument("model: sigma must be positive");
    const T rho0 = static_cast<T>(softplus_inv(sigma));
    for (size_t l = 0; l < off_.size(); ++l) {
        const Group& o = off_[l];
        set_weight_norm(l, ck.records[2 * l].mu);
        for (size_t f = 0; f < o.filters; ++f)
            params_[o.mu_b + f] = static_cast<T>(ck.records[2 * l + 1].mu[f]);
        for (size_t i = 0; i < o.kcount; ++i) params_[o.rho_w + i] = rho0;
        for (size_t f = 0; f < o.filters; ++f) params_[o.rho_b + f] = rho0;
    }
}

template <typename T>
void Model<T>::materialize() const {
    for (size_t l = 0; l < off_.size(); ++l) {
        const Group& o = off_[l];
        LayerArrays& a = mat_[l];
        a.mu_w.resize(o.kcount);
        const size_t per = o.kcount / o.filters;
        weight_normalized_mean<T>(std::span<const T>(params_.data() + o.g, o.filters),
                                  std::span<const T>(params_.data() + o.v, o.kcount), per,
                                  a.mu_w);
        a.mu_b.assign(params_.begin() + o.mu_b, params_.begin() + o.mu_b + o.filters);
        if (kind_ == Kind::variational) {
            a.sig_w.resize(o.kcount);
            a.sig2_w.resize(o.kcount);
            for (size_t i = 0; i < o.kcount; ++i) {
                a.sig_w[i] = softplus(params_[o.rho_w + i]);
                a.sig2_w[i] = a.sig_w[i] * a.sig_w[i];
            }
            a.sig_b.resize(o.filters);
            a.sig2_b.resize(o.filters);
            for (size_t f = 0; f < o.filters; ++f) {
                a.sig_b[f] = softplus(params_[o.rho_b + f]);
                a.sig2_b[f] = a.sig_b[f] * a.sig_b[f];
            }
        }
    }
}

template <typename T>
SiteCheckpoint Model<T>::save(std::vector<std::string> provenance) const {
    materialize();
    auto ck = make_checkpoint(spec_,
                              kind_ == Kind::variational ? SiteCheckpoint::Kind::variational
                                                         : SiteCheckpoint::Kind::map_point,
                              std::move(provenance));
    for (size_t l = 0; l < off_.size(); ++l) {
        const LayerArrays& a = mat_[l];
        auto& kr = ck.records[2 * l];
        auto& br = ck.records[2 * l + 1];
        for (size_t i = 0; i < a.mu_w.size(); ++i) kr.mu[i] = static_cast<float>(a.mu_w[i]);
        for (size_t f = 0; f < a.mu_b.size(); ++f) br.mu[f] = static_cast<float>(a.mu_b[f]);
        if (kind_ == Kind::variational) {
            // keep stored sigmas above f32 denormal territory
            for (size_t i = 0; i < a.sig_w.size(); ++i)
                kr.sigma[i] = std::max(static_cast<float>(a.sig_w[i]), 1e-30f);
            for (size_t f = 0; f < a.sig_b.size(); ++f)
                br.sigma[f] = std::max(static_cast<float>(a.sig_b[f]), 1e-30f);
        }
    }
    return ck;
}

template <typename T>
FeatureMap<T> Model<T>::forward_with(const FeatureMap<T>& x,
                                     const std::vector<std::vector<T>>& w,
                                     const std::vector<std::vector<T>>& b) {
    FeatureMap<T> h = x;
    for (size_t l = 0; l < spec_.layers.size(); ++l) {
        const auto& layer = spec_.layers[l];
        h = conv3d<T>(h, w[l], b[l], layer.filters, layer.kernel());
        if (layer.act == LayerSpec::Act::relu)
            relu_inplace(h);
        else
            h = softmax_channels(h);
    }
    return h;
}

template <typename T>
FeatureMap<T> Model<T>::forward_probs(const FeatureMap<T>& x) {
    materialize();
    std::vector<std::vector<T>> w(off_.size()), b(off_.size());
    for (size_t l = 0; l < off_.size(); ++l) {
        w[l] = mat_[l].mu_w;
        b[l] = mat_[l].mu_b;
    }
    return forward_with(x, w, b);
}

template <typename T>
FeatureMap<T> Model<T>::forward_probs_sampled(const FeatureMap<T>& x, std::uint64_t draw_key) {
    if (kind_ == Kind::point) return forward_probs(x);
    materialize();
    const CounterRng root(draw_key);
    std::vector<std::vector<T>> w(off_.size()), b(off_.size());
    for (size_t l = 0; l < off_.size(); ++l) {
        const CounterRng rk = root.stream(2 * l);
        const CounterRng rb = root.stream(2 * l + 1);
        w[l].resize(mat_[l].mu_w.size());
        for (size_t i = 0; i < w[l].size(); ++i)
            w[l][i] = mat_[l].mu_w[i] + mat_[l].sig_w[i] * static_cast<T>(rk.normal(i));
        b[l].resize(mat_[l].mu_b.size());
        for (size_t f = 0; f < b[l].size(); ++f)
            b[l][f] = mat_[l].mu_b[f] + mat_[l].sig_b[f] * static_cast<T>(rb.normal(f));
    }
    return forward_with(x, w, b);
}

template <typename T>
typename Model<T>::Objective Model<T>::evaluate(std::span<const Tile* const> batch, double scale,
                                                const SiteCheckpoint* prior,
                                                std::uint64_t noise_key, std::vector<T>* grad) {
    if (batch.empty()) throw std::invalid_argument("evaluate: empty batch");
    if (prior) {
        if (!(prior->spec == spec_)) throw std::invalid_argument("evaluate: prior spec differs");
        if (kind_ == Kind::variational && prior->kind != SiteCheckpoint::Kind::variational)
            throw std::invalid_argument("evaluate: prior must be variational");
    }
    materialize();
    const size_t L = spec_.layers.size();
    const size_t B = batch.size();
    const int C = spec_.classes;
    const bool variational = kind_ == Kind::variational;
    const CounterRng noise_root(noise_key);

    for (const Tile* t : batch) {
        if (t->x.channels != spec_.in_channels)
            throw std::invalid_argument("evaluate: tile channel count differs from the spec");
        if (t->y.size() != t->x.voxels())
            throw std::invalid_argument("evaluate: label count != voxel count");
        for (const std::uint8_t y : t->y)
            if (y >= C) throw std::out_of_range("evaluate: label out of range");
    }

    std::vector<double> nll(B, 0.0);
    std::vector<std::vector<T>> gbuf(grad ? B : 0);

#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic, 1) num_threads(worker_threads())
#endif
    for (long mi = 0; mi < static_cast<long>(B); ++mi) {
        const Tile& tile = *batch[mi];

        // forward, caching what the backward pass reads
        std::vector<FeatureMap<T>> h(L + 1), act(L), smap(variational ? L : 0),
            eps(variational ? L : 0);
        h[0] = FeatureMap<T>(tile.x.channels, tile.x.nx, tile.x.ny, tile.x.nz);
        for (size_t i = 0; i < h[0].data.size(); ++i)
            h[0].data[i] = static_cast<T>(tile.x.data[i]);

        for (size_t l = 0; l < L; ++l) {
            const auto& layer = spec_.layers[l];
            const KernelShape ks = layer.kernel();
            act[l] = conv3d<T>(h[l], mat_[l].mu_w, mat_[l].mu_b, layer.filters, ks);
            if (variational) {
                FeatureMap<T> var =
                    conv3d<T>(squared(h[l]), mat_[l].sig2_w, mat_[l].sig2_b, layer.filters, ks);
                std::uint64_t clamped = 0;
                for (auto& vv : var.data) {
                    if (vv < T(0)) {
                        vv = T(0);
                        ++clamped;
                    }
                    vv = std::sqrt(vv);
                }
                if (clamped)
                    negative_variance_count().fetch_add(clamped, std::memory_order_relaxed);
                smap[l] = std::move(var);
                const CounterRng r = noise_root.stream(mi).stream(l);
                eps[l] = FeatureMap<T>(act[l].channels, act[l].nx, act[l].ny, act[l].nz);
                for (size_t i = 0; i < eps[l].data.size(); ++i)
                    eps[l].data[i] = static_cast<T>(r.normal(i));
                for (size_t i = 0; i < act[l].data.size(); ++i)
                    act[l].data[i] += smap[l].data[i] * eps[l].data[i];
            }
            if (l + 1 < L) h[l + 1] = relu(act[l]);
        }

        // per-voxel cross entropy straight from the logits
        const FeatureMap<T>& logits = act[L - 1];
        const size_t vox = logits.voxels();
        FeatureMap<T> glog;
        if (grad) glog = FeatureMap<T>(C, logits.nx, logits.ny, logits.nz);
        double loss = 0.0;
        for (size_t v = 0; v < vox; ++v) {
            const std::uint8_t label = tile.y[v];
            double mx = -1e300;
            for (int c = 0; c < C; ++c)
                mx = std::max(mx, static_cast<double>(logits.data[c * vox + v]));
            double se = 0.0;
            for (int c = 0; c < C; ++c)
                se += std::exp(static_cast<double>(logits.data[c * vox + v]) - mx);
            loss += mx + std::log(se) - static_cast<double>(logits.data[label * vox + v]);
            if (grad) {
                for (int c = 0; c < C; ++c) {
                    const double p =
                        std::exp(static_cast<double>(logits.data[c * vox + v]) - mx) / se;
                    glog.data[c * vox + v] =
                        static_cast<T>(scale * (p - (c == label ? 1.0 : 0.0)));
                }
            }
        }
        nll[mi] = loss;

        if (!grad) continue;
        gbuf[mi].assign(params_.size(), T(0));
        std::vector<T>& gp = gbuf[mi];
        FeatureMap<T> g_a = std::move(glog);
        for (long l = static_cast<long>(L) - 1; l >= 0; --l) {
            const auto& layer = spec_.layers[l];
            const KernelShape ks = layer.kernel();
            const Group& o = off_[l];
            const size_t per = o.kcount / o.filters;

            FeatureMap<T> g_var;
            if (variational) {
                g_var = FeatureMap<T>(g_a.channels, g_a.nx, g_a.ny, g_a.nz);
                for (size_t i = 0; i < g_var.data.size(); ++i) {
                    const T s = smap[l].data[i];
                    g_var.data[i] =
                        s > T(0) ? g_a.data[i] * eps[l].data[i] / (T(2) * s) : T(0);
                }
            }

            FeatureMap<T> g_h;
            if (l > 0) {
                g_h = conv3d_grad_input<T>(g_a, mat_[l].mu_w, h[l].channels, h[l].nx, h[l].ny,
                                           h[l].nz, ks);
                if (variational) {
                    const FeatureMap<T> g_h_var = conv3d_grad_input<T>(
                        g_var, mat_[l].sig2_w, h[l].channels, h[l].nx, h[l].ny, h[l].nz, ks);
                    for (size_t i = 0; i < g_h.data.size(); ++i)
                        g_h.data[i] += T(2) * h[l].data[i] * g_h_var.data[i];
                }
            }

            std::vector<T> gw(o.kcount);
            conv3d_grad_weights<T>(h[l], g_a, gw, layer.filters, ks);
            weight_norm_backward<T>(std::span<const T>(params_.data() + o.g, o.filters),
                                    std::span<const T>(params_.data() + o.v, o.kcount), per, gw,
                                    std::span<T>(gp.data() + o.g, o.filters),
                                    std::span<T>(gp.data() + o.v, o.kcount));
            std::vector<T> gb(o.filters);
            conv3d_grad_bias<T>(g_a, gb);
            for (size_t f = 0; f < o.filters; ++f) gp[o.mu_b + f] += gb[f];

            if (variational) {
                std::vector<T> gw2(o.kcount);
                conv3d_grad_weights<T>(squared(h[l]), g_var, gw2, layer.filters, ks);
                for (size_t i = 0; i < o.kcount; ++i)
                    gp[o.rho_w + i] += gw2[i] * T(2) * mat_[l].sig_w[i] *
                                       sigmoid(params_[o.rho_w + i]);
                std::vector<T> gb2(o.filters);
                conv3d_grad_bias<T>(g_var, gb2);
                for (size_t f = 0; f < o.filters; ++f)
                    gp[o.rho_b + f] += gb2[f] * T(2) * mat_[l].sig_b[f] *
                                       sigmoid(params_[o.rho_b + f]);
            }

            if (l > 0) {
                relu_backward_inplace(act[l - 1], g_h);
                g_a = std::move(g_h);
            }
        }
    }

    Objective obj;
    for (size_t m = 0; m < B; ++m) obj.data_term += scale * nll[m];
    if (grad) {
        grad->assign(params_.size(), T(0));
        for (size_t m = 0; m < B; ++m)
            for (size_t i = 0; i < params_.size(); ++i) (*grad)[i] += gbuf[m][i];
    }

    // prior coupling, once per batch
    if (variational) {
        double kl = 0.0;
        std::vector<T> dmu;
        for (size_t l = 0; l < off_.size(); ++l) {
            const Group& o = off_[l];
            const size_t per = o.kcount / o.filters;
            const float* pm = prior ? prior->records[2 * l].mu.data() : nullptr;
            const float* ps = prior ? prior->records[2 * l].sigma.data() : nullptr;
            dmu.assign(o.kcount, T(0));
            for (size_t i = 0; i < o.kcount; ++i) {
                const double mu = mat_[l].mu_w[i], s = mat_[l].sig_w[i];
                const double mp = pm ? pm[i] : 0.0, sp = ps ? ps[i] : 1.0;
                kl += std::log(sp / s) + (s * s + (mu - mp) * (mu - mp)) / (2 * sp * sp) - 0.5;
                if (grad) {
                    dmu[i] = static_cast<T>((mu - mp) / (sp * sp));
                    const double dsig = -1.0 / s + s / (sp * sp);
                    (*grad)[o.rho_w + i] +=
                        static_cast<T>(dsig * sigmoid(static_cast<double>(params_[o.rho_w + i])));
                }
            }
            if (grad)
                weight_norm_backward<T>(std::span<const T>(params_.data() + o.g, o.filters),
                                        std::span<const T>(params_.data() + o.v, o.kcount), per,
                                        dmu, std::span<T>(grad->data() + o.g, o.filters),
                                        std::span<T>(grad->data() + o.v, o.kcount));
            const float* pbm = prior ? prior->records[2 * l + 1].mu.data() : nullptr;
            const float* pbs = prior ? prior->records[2 * l + 1].sigma.data() : nullptr;
            for (size_t f = 0; f < o.filters; ++f) {
                const double mu = mat_[l].mu_b[f], s = mat_[l].sig_b[f];
                const double mp = pbm ? pbm[f] : 0.0, sp = pbs ? pbs[f] : 1.0;
                kl += std::log(sp / s) + (s * s + (mu - mp) * (mu - mp)) / (2 * sp * sp) - 0.5;
                if (grad) {
                    (*grad)[o.mu_b + f] += static_cast<T>((mu - mp) / (sp * sp));
                    const double dsig = -1.0 / s + s / (sp * sp);
                    (*grad)[o.rho_b + f] +=
                        static_cast<T>(dsig * sigmoid(static_cast<double>(params_[o.rho_b + f])));
                }
            }
        }
        obj.kl_term = kl;
    } else {
        // quadratic penalty from a standard-normal prior over the weights
        double quad = 0.0;
        std::vector<T> dmu;
        for (size_t l = 0; l < off_.size(); ++l) {
            const Group& o = off_[l];
            const size_t per = o.kcount / o.filters;
            dmu.assign(o.kcount, T(0));
            for (size_t i = 0; i < o.kcount; ++i) {
                const double w = mat_[l].mu_w[i];
                quad += 0.5 * w * w;
                if (grad) dmu[i] = static_cast<T>(w);
            }
            if (grad)
                weight_norm_backward<T>(std::span<const T>(params_.data() + o.g, o.filters),
                                        std::span<const T>(params_.data() + o.v, o.kcount), per,
                                        dmu, std::span<T>(grad->data() + o.g, o.filters),
                                        std::span<T>(grad->data() + o.v, o.kcount));
            for (size_t f = 0; f < o.filters; ++f) {
                const double b = mat_[l].mu_b[f];
                quad += 0.5 * b * b;
                if (grad) (*grad)[o.mu_b + f] += static_cast<T>(b);
            }
        }
        obj.kl_term = quad;
    }

    obj.total = obj.data_term + obj.kl_term;
    return obj;
}

template class Model<float>;
template class Model<double>;

// ---------------------------------------------------------------------------
// Training

namespace {

TrainResult train_core(const Dataset& data, const TrainConfig& cfg, Model<float>& model,
                       const SiteCheckpoint* prior, std::vector<std::string> provenance) {
    if (data.empty()) throw std::invalid_argument("train: empty dataset");
    if (cfg.batch < 1 || cfg.window < 1 || cfg.max_steps < 1 || !(cfg.lr > 0))
        throw std::invalid_argument("train: bad config");
    const size_t M = std::min<size_t>(static_cast<size_t>(cfg.batch), data.size());
    const double N = cfg.dataset_size > 0 ? static_cast<double>(cfg.dataset_size)
                                          : static_cast<double>(data.size());
    const double eff_n = cfg.data_weight > 0 ? cfg.data_weight : N;
    const double scale = eff_n / static_cast<double>(M);

    std::vector<double> mstate(model.params().size(), 0.0), vstate(model.params().size(), 0.0);
    std::vector<float> grad;
    const CounterRng order_root = CounterRng(cfg.seed).stream(0x0bde);
    const CounterRng noise_root = CounterRng(cfg.seed).stream(0x34a1);

    TrainResult res;
    std::vector<size_t> perm;
    size_t pos = 0;
    std::uint64_t epoch = 0;
    double prev_window_mean = 0.0;
    bool have_window = false;
    double acc = 0.0;
    int in_window = 0;

    for (long step = 0; step < cfg.max_steps; ++step) {
        if (perm.empty() || pos + M > perm.size()) {
            perm = shuffled_indices(data.size(), order_root.stream(epoch++));
            pos = 0;
        }
        std::vector<const Tile*> batch(M);
        for (size_t i = 0; i < M; ++i) batch[i] = &data[perm[pos + i]];
        pos += M;

        const auto obj =
            model.evaluate(batch, scale, prior, noise_root.stream(step).key(), &grad);
        adam_step<float>(model.params(), grad, mstate, vstate, step + 1, cfg.lr);
        res.log.push_back({step, obj.data_term, obj.kl_term, obj.total});
        res.steps = step + 1;

        acc += obj.total;
        if (++in_window == cfg.window) {
            const double mean = acc / cfg.window;
            if (have_window) {
                const double denom = std::abs(prev_window_mean);
                if (denom > 0 && std::abs(mean - prev_window_mean) / denom < cfg.window_tol) {
                    res.converged = true;
                    break;
                }
            }
            prev_window_mean = mean;
            have_window = true;
            acc = 0.0;
            in_window = 0;
        }
    }
    res.checkpoint = model.save(std::move(provenance));
    return res;
}

} // namespace

TrainResult train_map(const NetworkSpec& spec, const Dataset& data, const TrainConfig& cfg,
                      std::vector<std::string> provenance) {
    Model<float> model(spec, Model<float>::Kind::point);
    model.init_random(cfg.seed);
    return train_core(data, cfg, model, nullptr, std::move(provenance));
}

TrainResult train_variational(const NetworkSpec& spec, const Dataset& data,
                              const TrainConfig& cfg, const SiteCheckpoint& prior,
                              const SiteCheckpoint* init, std::vector<std::string> provenance) {
    if (prior.kind != SiteCheckpoint::Kind::variational)
        throw std::invalid_argument("train: prior must be variational");
    Model<float> model(spec, Model<float>::Kind::variational);
    const SiteCheckpoint& start = init ? *init : prior;
    if (start.kind == SiteCheckpoint::Kind::map_point)
        model.init_from_point(start, 0.001);
    else
        model.load(start);
    return train_core(data, cfg, model, &prior, std::move(provenance));
}

// ---------------------------------------------------------------------------
// Prediction

Predictor::Predictor(SiteCheckpoint ck) : ck_(std::move(ck)) { ck_.validate(); }

FeatureMap<float> Predictor::forward_tile(const FeatureMap<float>& x,
                                          const std::vector<std::vector<float>>& w,
                                          const std::vector<std::vector<float>>& b) const {
    FeatureMap<float> h = x;
    for (size_t l = 0; l < ck_.spec.layers.size(); ++l) {
        const auto& layer = ck_.spec.layers[l];
        h = conv3d<float>(h, w[l], b[l], layer.filters, layer.kernel());
        if (layer.act == LayerSpec::Act::relu)
            relu_inplace(h);
        else
            h = softmax_channels(h);
    }
    return h;
}

void Predictor::draw_weights(std::uint64_t sample_key, std::vector<std::vector<float>>& w,
                             std::vector<std::vector<float>>& b) const {
    const size_t L = ck_.spec.layers.size();
    w.resize(L);
    b.resize(L);
    const CounterRng root(sample_key);
    for (size_t l = 0; l < L; ++l) {
        const auto& kr = ck_.records[2 * l];
        const auto& br = ck_.records[2 * l + 1];
        w[l] = kr.mu;
        b[l] = br.mu;
        if (ck_.kind == SiteCheckpoint::Kind::variational) {
            const CounterRng rk = root.stream(2 * l);
            const CounterRng rb = root.stream(2 * l + 1);
            for (size_t i = 0; i < w[l].size(); ++i)
                w[l][i] += kr.sigma[i] * static_cast<float>(rk.normal(i));
            for (size_t f = 0; f < b[l].size(); ++f)
                b[l][f] += br.sigma[f] * static_cast<float>(rb.normal(f));
        }
    }
}

FeatureMap<float> Predictor::probs_tile(const FeatureMap<float>& x, int mc_samples,
                                        std::uint64_t seed) const {
    if (mc_samples < 1) throw std::invalid_argument("predict: need at least one sample");
    const CounterRng root(seed);
    std::vector<std::vector<float>> w, b;
    if (ck_.kind == SiteCheckpoint::Kind::map_point) {
        draw_weights(0, w, b);
        return forward_tile(x, w, b);
    }
    FeatureMap<float> out;
    std::vector<double> acc;
    for (int s = 0; s < mc_samples; ++s) {
        draw_weights(root.stream(s).key(), w, b);
        const auto p = forward_tile(x, w, b);
        if (s == 0) {
            out = p;
            acc.assign(p.data.begin(), p.data.end());
        } else {
            for (size_t i = 0; i < acc.size(); ++i) acc[i] += p.data[i];
        }
    }
    for (size_t i = 0; i < acc.size(); ++i)
        out.data[i] = static_cast<float>(acc[i] / mc_samples);
    return out;
}

FeatureMap<float> Predictor::probs_volume(const Volume& vol, int tile, int mc_samples,
                                          std::uint64_t seed) const {
    if (ck_.spec.in_channels != 1)
        throw std::invalid_argument("predict: volume input needs a single-channel spec");
    if (mc_samples < 1) throw std::invalid_argument("predict: need at least one sample");
    if (tile < 1 || vol.nx % tile || vol.ny % tile || vol.nz % tile)
        throw std::invalid_argument("predict: volume edges must be divisible by the tile size");
    const int C = ck_.spec.classes;
    FeatureMap<float> probs(C, vol.nx, vol.ny, vol.nz);
    std::vector<double> acc(probs.data.size(), 0.0);
    const size_t vvox = static_cast<size_t>(vol.nx) * vol.ny * vol.nz;
    const int samples = ck_.kind == SiteCheckpoint::Kind::map_point ? 1 : mc_samples;
    const CounterRng root(seed);
    std::vector<std::vector<float>> w, b;
    for (int s = 0; s < samples; ++s) {
        draw_weights(ck_.kind == SiteCheckpoint::Kind::map_point ? 0 : root.stream(s).key(), w,
                     b);
        for (int bx = 0; bx < vol.nx; bx += tile)
            for (int by = 0; by < vol.ny; by += tile)
                for (int bz = 0; bz < vol.nz; bz += tile) {
                    FeatureMap<float> x(1, tile, tile, tile);
                    for (int i = 0; i < tile; ++i)
                        for (int j = 0; j < tile; ++j)
                            for (int k = 0; k < tile; ++k)
                                x.data[(static_cast<size_t>(i) * tile + j) * tile + k] =
                                    vol.data[vol.index(bx + i, by + j, bz + k)];
                    const auto p = forward_tile(x, w, b);
                    const size_t tvox = p.voxels();
                    for (int c = 0; c < C; ++c)
                        for (int i = 0; i < tile; ++i)
                            for (int j = 0; j < tile; ++j)
                                for (int k = 0; k < tile; ++k)
                                    acc[c * vvox +
                                        (static_cast<size_t>(bx + i) * vol.ny + (by + j)) *
                                            vol.nz +
                                        (bz + k)] +=
                                        p.data[c * tvox +
                                               (static_cast<size_t>(i) * tile + j) * tile + k];
                }
    }
    for (size_t i = 0; i < acc.size(); ++i)
        probs.data[i] = static_cast<float>(acc[i] / samples);
    return probs;
}

Volume Predictor::labels_volume(const Volume& vol, int tile, int mc_samples,
                                std::uint64_t seed) const {
    return argmax_labels(probs_volume(vol, tile, mc_samples, seed));
}

} // namespace dwc
