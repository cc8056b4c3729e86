#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "dwc/rng.hpp"

namespace {

// Kolmogorov-Smirnov statistic against the standard normal CDF.
double ks_statistic(std::vector<double> xs) {
    std::sort(xs.begin(), xs.end());
    const double n = static_cast<double>(xs.size());
    double d = 0.0;
    for (size_t i = 0; i < xs.size(); ++i) {
        const double cdf = 0.5 * std::erfc(-xs[i] / std::sqrt(2.0));
        d = std::max(d, std::abs(cdf - static_cast<double>(i) / n));
        d = std::max(d, std::abs(cdf - static_cast<double>(i + 1) / n));
    }
    return d;
}

} // namespace

TEST_CASE("counter rng is a pure function of (key, index)") {
    dwc::CounterRng a(42), b(42);
    for (uint64_t i = 0; i < 100; ++i) {
        CHECK(a.normal(i) == b.normal(i));
        CHECK(a.uniform(i) == b.uniform(i));
    }
    dwc::CounterRng c(43);
    CHECK(a.normal(0) != c.normal(0));
}

TEST_CASE("sub-streams decorrelate") {
    dwc::CounterRng root(7);
    auto s1 = root.stream(1), s2 = root.stream(2);
    CHECK(s1.key() != s2.key());
    CHECK(s1.normal(0) != s2.normal(0));
    // Same derivation path gives the same stream.
    CHECK(root.stream(1).normal(5) == s1.normal(5));
}

TEST_CASE("normal draws pass a KS test at n = 1e5") {
    dwc::CounterRng rng(123);
    const size_t n = 100000;
    std::vector<double> xs(n);
    for (size_t i = 0; i < n; ++i) xs[i] = rng.normal(i);
    CHECK(ks_statistic(std::move(xs)) < 0.01);
}

TEST_CASE("uniform draws lie in (0,1] with sane mean") {
    dwc::CounterRng rng(9);
    double sum = 0.0;
    const size_t n = 100000;
    for (size_t i = 0; i < n; ++i) {
        const double u = rng.uniform(i);
        REQUIRE(u > 0.0);
        REQUIRE(u <= 1.0);
        sum += u;
    }
    CHECK(std::abs(sum / n - 0.5) < 0.005);
}
