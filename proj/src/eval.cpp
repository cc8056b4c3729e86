#include "dwc/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <limits>
#include <stdexcept>

namespace dwc {

namespace {

int label_at(const Volume& v, std::size_t i, int classes) {
    const long c = std::lround(static_cast<double>(v.data[i]));
    if (c < 0 || c >= classes || std::abs(v.data[i] - static_cast<float>(c)) > 1e-3f)
        throw std::invalid_argument("label volume holds a non-label value");
    return static_cast<int>(c);
}

void check_same_shape(const Volume& a, const Volume& b) {
    if (a.nx != b.nx || a.ny != b.ny || a.nz != b.nz)
        throw std::invalid_argument("volume shapes differ");
}

// Student-t density constant and tail integrand.  The tail P(T > t) for
// t >= 1 is computed after the substitution u -> 1/w, which maps [t, inf)
// onto (0, 1/t] and leaves a smooth integrand
//   c * nu^((nu+1)/2) * w^(nu-1) / (1 + nu w^2)^((nu+1)/2).
struct TDensity {
    double nu, c;
    explicit TDensity(long df)
        : nu(static_cast<double>(df)),
          c(std::exp(std::lgamma((nu + 1) / 2) - std::lgamma(nu / 2)) /
            std::sqrt(nu * M_PI)) {}
    double pdf(double u) const {
        return c * std::pow(1.0 + u * u / nu, -(nu + 1) / 2);
    }
    double tail_integrand(double w) const {
        return c * std::pow(nu, (nu + 1) / 2) * std::pow(w, nu - 1.0) /
               std::pow(1.0 + nu * w * w, (nu + 1) / 2);
    }
};

template <typename F>
double simpson_rec(const F& f, double a, double b, double fa, double fm, double fb,
                   double whole, double tol, int depth) {
    const double m = (a + b) / 2;
    const double lm = (a + m) / 2, rm = (m + b) / 2;
    const double flm = f(lm), frm = f(rm);
    const double left = (m - a) / 6 * (fa + 4 * flm + fm);
    const double right = (b - m) / 6 * (fm + 4 * frm + fb);
    const double delta = left + right - whole;
    if (depth >= 60 || std::abs(delta) <= 15 * tol)
        return left + right + delta / 15;
    return simpson_rec(f, a, m, fa, flm, fm, left, tol / 2, depth + 1) +
           simpson_rec(f, m, b, fm, frm, fb, right, tol / 2, depth + 1);
}

template <typename F>
double integrate(const F& f, double a, double b, double tol) {
    if (!(b > a)) return 0.0;
    const double m = (a + b) / 2;
    const double fa = f(a), fm = f(m), fb = f(b);
    const double whole = (b - a) / 6 * (fa + 4 * fm + fb);
    return simpson_rec(f, a, b, fa, fm, fb, whole, tol, 0);
}

// P(T > t) for t >= 0.
double t_tail(double t, long df) {
    const TDensity d(df);
    if (t <= 1.0) {
        const double body =
            integrate([&](double u) { return d.pdf(u); }, 0.0, t, 1e-10);
        return 0.5 - body;
    }
    return integrate([&](double w) { return d.tail_integrand(w); }, 0.0, 1.0 / t, 1e-10);
}

} // namespace

std::vector<double> dice_per_class(const Volume& pred, const Volume& truth, int classes) {
    if (classes < 1) throw std::invalid_argument("dice needs at least one class");
    check_same_shape(pred, truth);
    std::vector<long> tp(classes, 0), in_pred(classes, 0), in_truth(classes, 0);
    for (std::size_t i = 0; i < truth.data.size(); ++i) {
        const int p = label_at(pred, i, classes);
        const int t = label_at(truth, i, classes);
        ++in_pred[p];
        ++in_truth[t];
        if (p == t) ++tp[p];
    }
    std::vector<double> dice(classes);
    for (int c = 0; c < classes; ++c) {
        const long denom = in_pred[c] + in_truth[c]; // = 2 TP + FN + FP
        dice[c] = denom == 0 ? std::numeric_limits<double>::quiet_NaN()
                             : 2.0 * static_cast<double>(tp[c]) / static_cast<double>(denom);
    }
    return dice;
}

double dice_mean(std::span<const double> per_class) {
    double sum = 0;
    long n = 0;
    for (double d : per_class)
        if (!std::isnan(d)) { sum += d; ++n; }
    return n == 0 ? std::numeric_limits<double>::quiet_NaN() : sum / static_cast<double>(n);
}

double student_t_cdf(double t, long df) {
    if (df < 1) throw std::invalid_argument("t distribution needs df >= 1");
    if (t >= 0) return 1.0 - t_tail(t, df);
    return t_tail(-t, df);
}

TTest paired_ttest(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("paired samples differ in length");
    const std::size_t n = a.size();
    if (n < 2) throw std::invalid_argument("paired t test needs at least two pairs");
    double mean = 0;
    for (std::size_t i = 0; i < n; ++i) mean += a[i] - b[i];
    mean /= static_cast<double>(n);
    double ss = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = (a[i] - b[i]) - mean;
        ss += d * d;
    }
    TTest r;
    r.df = static_cast<long>(n) - 1;
    const double var = ss / static_cast<double>(n - 1);
    if (var <= 0) {
        r.degenerate = true;
        r.t = mean == 0 ? 0.0
                        : std::copysign(std::numeric_limits<double>::infinity(), mean);
        r.p = mean == 0 ? 1.0 : 0.0;
        return r;
    }
    r.t = mean / std::sqrt(var / static_cast<double>(n));
    r.p = std::clamp(2.0 * t_tail(std::abs(r.t), r.df), 0.0, 1.0);
    return r;
}

Volume error_mask(const Volume& pred, const Volume& truth) {
    check_same_shape(pred, truth);
    Volume m(pred.nx, pred.ny, pred.nz);
    for (std::size_t i = 0; i < m.data.size(); ++i)
        m.data[i] = std::lround(static_cast<double>(pred.data[i])) ==
                            std::lround(static_cast<double>(truth.data[i]))
                        ? 0.0f
                        : 1.0f;
    return m;
}

void export_error_mask(const Volume& pred, const Volume& truth, const std::string& path) {
    write_volume(error_mask(pred, truth), path);
}

void DiceReport::add(const std::string& condition, const std::string& dataset, int volume,
                     std::span<const double> per_class) {
    for (std::size_t c = 0; c < per_class.size(); ++c)
        if (!std::isnan(per_class[c]))
            rows.push_back({condition, dataset, volume, static_cast<int>(c), per_class[c]});
}

double DiceReport::volume_mean(const std::string& condition, const std::string& dataset,
                               int volume) const {
    double sum = 0;
    long n = 0;
    for (const auto& r : rows)
        if (r.condition == condition && r.dataset == dataset && r.volume == volume) {
            sum += r.dice;
            ++n;
        }
    return n == 0 ? std::numeric_limits<double>::quiet_NaN() : sum / static_cast<double>(n);
}

std::vector<double> DiceReport::volume_means(const std::string& condition,
                                             const std::string& dataset) const {
    std::vector<int> ids;
    for (const auto& r : rows)
        if (r.condition == condition && r.dataset == dataset) ids.push_back(r.volume);
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    std::vector<double> means;
    means.reserve(ids.size());
    for (int id : ids) means.push_back(volume_mean(condition, dataset, id));
    return means;
}

double DiceReport::dataset_mean(const std::string& condition,
                                const std::string& dataset) const {
    const auto means = volume_means(condition, dataset);
    return dice_mean(means);
}

double DiceReport::weighted_average(const std::string& condition,
                                    std::span<const std::string> datasets) const {
    double sum = 0;
    long n = 0;
    for (const auto& ds : datasets)
        for (double m : volume_means(condition, ds)) {
            sum += m;
            ++n;
        }
    return n == 0 ? std::numeric_limits<double>::quiet_NaN() : sum / static_cast<double>(n);
}

void DiceReport::write_csv(const std::string& path) const {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw std::runtime_error("cannot open " + path);
    std::fputs("condition,dataset,volume,class,dice\n", f);
    for (const auto& r : rows)
        std::fprintf(f, "%s,%s,%d,%d,%.6f\n", r.condition.c_str(), r.dataset.c_str(),
                     r.volume, r.cls, r.dice);
    if (std::fclose(f) != 0) throw std::runtime_error("cannot write " + path);
}

} // namespace dwc
