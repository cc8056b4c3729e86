#pragma once

// The segmentation model: a stack of shape-preserving dilated convolutions
// with either point weights (MAP training) or factorized Gaussian posteriors
// (stochastic variational training with the noise moved onto pre-activations).
// Kernel means are weight-normalized (per-filter scale g times direction
// v/||v||); sigmas live behind a softplus. Training runs Adam on exact
// reverse-mode gradients and stops when windowed loss means flatten out.

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dwc/checkpoint.hpp"
#include "dwc/netspec.hpp"
#include "dwc/tensor.hpp"

namespace dwc {

struct Tile {
    FeatureMap<float> x;         // (in_channels, n, n, n)
    std::vector<std::uint8_t> y; // voxel labels, length n^3
};
using Dataset = std::vector<Tile>;

struct TrainConfig {
    double lr = 0.001;
    int batch = 10;
    long dataset_size = 0;   // N in the data-term scale; 0 = use the dataset's size
    int max_steps = 20000;
    int window = 50;         // convergence window length, in steps
    double window_tol = 0.01;
    std::uint64_t seed = 0;
    int mc_samples = 10;
    double data_weight = 0;  // overrides N when > 0 (fine-tuning)
};

struct LossRow {
    long step;
    double data_term, kl_term, total;
};

void write_loss_csv(const std::string& path, const std::vector<LossRow>& rows);

// Worker count for within-step parallelism: min(hardware, DWC_THREADS).
int worker_threads();

// Mean over voxels of -log p(true class). Reporting helper; the training
// objective works from logits instead.
double nll_mean(const FeatureMap<float>& probs, std::span<const std::uint8_t> labels);

// Bias-corrected Adam update; m/v are 64-bit state vectors, t counts from 1.
template <typename T>
void adam_step(std::span<T> params, std::span<const T> grad, std::vector<double>& m,
               std::vector<double>& v, long t, double lr, double beta1 = 0.9,
               double beta2 = 0.999, double eps = 1e-8);

template <typename T>
class Model {
public:
    enum class Kind { point, variational };

    Model(NetworkSpec spec, Kind kind);

    const NetworkSpec& net() const { return spec_; }
    Kind kind() const { return kind_; }
    std::vector<T>& params() { return params_; }
    const std::vector<T>& params() const { return params_; }

    // He-scaled random directions, unit-consistent g, zero biases.
    void init_random(std::uint64_t seed);
    // Point model from a point checkpoint, variational from a variational one.
    void load(const SiteCheckpoint& ck);
    // Variational model seeded from a point solution: mu reproduces the point
    // weights exactly, every sigma starts at `sigma`.
    void init_from_point(const SiteCheckpoint& ck, double sigma);
    SiteCheckpoint save(std::vector<std::string> provenance) const;

    struct Objective {
        double data_term = 0; // scale * sum over batch of per-voxel NLL sums
        double kl_term = 0;   // KL to the prior, or the MAP quadratic penalty
        double total = 0;
    };

    // Minimized objective over one batch; `scale` is the N/M factor applied to
    // the summed data term. prior == nullptr means a standard-normal prior.
    // noise_key freezes the per-example pre-activation noise (variational).
    // grad, when given, must be param-sized and is overwritten.
    Objective evaluate(std::span<const Tile* const> batch, double scale,
                       const SiteCheckpoint* prior, std::uint64_t noise_key,
                       std::vector<T>* grad);

    // Deterministic forward using the posterior means (the MAP forward).
    FeatureMap<T> forward_probs(const FeatureMap<T>& x);
    // Forward under one seeded draw of whole weights w = mu + sigma * eps.
    FeatureMap<T> forward_probs_sampled(const FeatureMap<T>& x, std::uint64_t draw_key);

private:
    struct Group {
        size_t g = 0, v = 0, rho_w = 0, mu_b = 0, rho_b = 0; // offsets into params_
        size_t kcount = 0, filters = 0;
    };
    struct LayerArrays {
        std::vector<T> mu_w, sig_w, sig2_w, mu_b, sig_b, sig2_b;
    };

    void materialize() const;
    void set_weight_norm(size_t layer, std::span<const float> w);
    FeatureMap<T> forward_with(const FeatureMap<T>& x,
                               const std::vector<std::vector<T>>& w,
                               const std::vector<std::vector<T>>& b);

    NetworkSpec spec_;
    Kind kind_;
    std::vector<Group> off_;
    std::vector<T> params_;
    mutable std::vector<LayerArrays> mat_; // derived from params_ on demand
};

extern template class Model<float>;
extern template class Model<double>;

struct TrainResult {
    SiteCheckpoint checkpoint;
    std::vector<LossRow> log;
    long steps = 0;
    bool converged = false;
};

TrainResult train_map(const NetworkSpec& spec, const Dataset& data, const TrainConfig& cfg,
                      std::vector<std::string> provenance);

// Variational training against `prior`; parameters start from `init` when
// given (else from the prior itself). Both must be variational checkpoints.
TrainResult train_variational(const NetworkSpec& spec, const Dataset& data,
                              const TrainConfig& cfg, const SiteCheckpoint& prior,
                              const SiteCheckpoint* init, std::vector<std::string> provenance);

// MC-averaged prediction. Point checkpoints predict deterministically; for
// variational ones each sample draws one full weight set (shared by every
// tile of the volume) and softmax outputs are averaged.
class Predictor {
public:
    explicit Predictor(SiteCheckpoint ck);

    const SiteCheckpoint& checkpoint() const { return ck_; }

    FeatureMap<float> probs_tile(const FeatureMap<float>& x, int mc_samples,
                                 std::uint64_t seed) const;
    // Volume edges must be divisible by `tile`.
    FeatureMap<float> probs_volume(const Volume& vol, int tile, int mc_samples,
                                   std::uint64_t seed) const;
    Volume labels_volume(const Volume& vol, int tile, int mc_samples, std::uint64_t seed) const;

private:
    FeatureMap<float> forward_tile(const FeatureMap<float>& x,
                                   const std::vector<std::vector<float>>& w,
                                   const std::vector<std::vector<float>>& b) const;
    void draw_weights(std::uint64_t sample_key, std::vector<std::vector<float>>& w,
                      std::vector<std::vector<float>>& b) const;

    SiteCheckpoint ck_;
};

} // namespace dwc
