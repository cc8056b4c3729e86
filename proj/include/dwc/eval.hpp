#pragma once

// Segmentation scoring: per-class Dice overlap, paired two-tailed t tests with
// a numerically integrated Student-t CDF, error-mask export, and a tidy
// per-(condition, dataset, volume, class) report that recomputes its own
// aggregates.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "dwc/tensor.hpp"

namespace dwc {

// 2 TP / (2 TP + FN + FP) per class; classes absent from both prediction and
// truth come back as NaN and are excluded from averages.
std::vector<double> dice_per_class(const Volume& pred, const Volume& truth, int classes);

// Mean over non-NaN entries; NaN when nothing is present.
double dice_mean(std::span<const double> per_class);

// P(T <= t) for Student's t with df degrees of freedom; adaptive quadrature,
// absolute tolerance 1e-10, tail-stable for large |t|.
double student_t_cdf(double t, long df);

struct TTest {
    double t = 0.0;
    double p = 1.0;
    long df = 0;
    bool degenerate = false; // zero-variance differences
};

// Paired two-tailed t test of a against b (difference a - b), volumes paired
// by index.
TTest paired_ttest(std::span<const double> a, std::span<const double> b);

// 1 where the rounded labels disagree, 0 elsewhere.
Volume error_mask(const Volume& pred, const Volume& truth);
void export_error_mask(const Volume& pred, const Volume& truth, const std::string& path);

struct DiceRow {
    std::string condition, dataset;
    int volume = 0;
    int cls = 0;
    double dice = 0.0;
};

// Flat row store; every aggregate is recomputed from the rows so that stored
// summaries can always be cross-checked.
struct DiceReport {
    std::vector<DiceRow> rows;

    // one row per present class (NaN entries are skipped)
    void add(const std::string& condition, const std::string& dataset, int volume,
             std::span<const double> per_class);

    double volume_mean(const std::string& condition, const std::string& dataset,
                       int volume) const;
    // per-volume means over one dataset, volumes in ascending id order
    std::vector<double> volume_means(const std::string& condition,
                                     const std::string& dataset) const;
    double dataset_mean(const std::string& condition, const std::string& dataset) const;
    // pooled mean of per-volume means across the listed datasets (weighting
    // each dataset by its volume count)
    double weighted_average(const std::string& condition,
                            std::span<const std::string> datasets) const;

    void write_csv(const std::string& path) const;
};

} // namespace dwc
