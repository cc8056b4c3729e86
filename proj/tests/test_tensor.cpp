#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "dwc/rng.hpp"
#include "dwc/tensor.hpp"

using dwc::FeatureMap;
using dwc::KernelShape;
using dwc::Volume;

namespace {

FeatureMap<float> random_map(int c, int n, uint64_t seed, double scale = 1.0) {
    FeatureMap<float> m(c, n, n, n);
    dwc::CounterRng rng(seed);
    for (size_t i = 0; i < m.data.size(); ++i) m.data[i] = static_cast<float>(scale * rng.normal(i));
    return m;
}

std::vector<float> random_weights(size_t n, uint64_t seed, double scale = 0.5) {
    std::vector<float> w(n);
    dwc::CounterRng rng(seed);
    for (size_t i = 0; i < n; ++i) w[i] = static_cast<float>(scale * rng.normal(i));
    return w;
}

double max_abs_diff(const FeatureMap<float>& a, const FeatureMap<float>& b) {
    REQUIRE(a.data.size() == b.data.size());
    double d = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i)
        d = std::max(d, std::abs(static_cast<double>(a.data[i]) - b.data[i]));
    return d;
}

} // namespace

TEST_CASE("all-zero kernel annihilates any input") {
    auto in = random_map(2, 6, 1);
    std::vector<float> w(2 * 2 * 27, 0.0f);
    std::vector<float> b(2, 0.0f);
    auto out = dwc::conv3d<float>(in, w, b, 2, KernelShape::cubic(1, 1, 1));
    for (float v : out.data) CHECK(v == 0.0f);
}

TEST_CASE("identity kernel with p = l reproduces the input") {
    for (int l : {1, 2}) {
        auto in = random_map(1, 7, 2);
        std::vector<float> w(27, 0.0f);
        w[13] = 1.0f; // center tap t = (0,0,0)
        auto out = dwc::conv3d<float>(in, w, {}, 1, KernelShape::cubic(1, l, l));
        REQUIRE(out.nx == in.nx);
        CHECK(max_abs_diff(out, in) == 0.0);
    }
}

TEST_CASE("3x3x3 ones kernel, l=2, p=2, all-ones 7^3 input: center voxel sums 27") {
    FeatureMap<float> in(1, 7, 7, 7);
    std::fill(in.data.begin(), in.data.end(), 1.0f);
    std::vector<float> w(27, 1.0f);
    auto fast = dwc::conv3d<float>(in, w, {}, 1, KernelShape::cubic(1, 2, 2));
    auto naive = dwc::naive_conv3d<float>(in, w, {}, 1, KernelShape::cubic(1, 2, 2));
    REQUIRE(fast.nx == 7);
    CHECK(fast.at(0, 3, 3, 3) == doctest::Approx(27.0f));
    CHECK(naive.at(0, 3, 3, 3) == doctest::Approx(27.0f));
}

TEST_CASE("fast path matches the six-nested-loop oracle") {
    int cases = 0;
    for (int l : {1, 2, 4}) {
        for (int c : {1, 2}) {
            for (int n : {5, 8, 12}) {
                const int f = 3;
                auto in = random_map(c, n, 100 + cases);
                auto ks = KernelShape::cubic(1, l, l); // shape preserving
                auto w = random_weights(static_cast<size_t>(f) * c * 27, 200 + cases);
                auto b = random_weights(f, 300 + cases);
                auto fast = dwc::conv3d<float>(in, w, b, f, ks);
                auto naive = dwc::naive_conv3d<float>(in, w, b, f, ks);
                CHECK(max_abs_diff(fast, naive) < 1e-5);
                ++cases;
            }
        }
    }
    CHECK(cases == 18);
}

TEST_CASE("padding arithmetic: l=1 p=1 on 5^3 keeps shape; p=l*a in general") {
    auto in = random_map(1, 5, 4);
    auto out = dwc::conv3d<float>(in, random_weights(27, 5), {}, 1, KernelShape::cubic(1, 1, 1));
    CHECK(out.nx == 5);
    CHECK(out.ny == 5);
    CHECK(out.nz == 5);
    // dilation 4 with p = 4 also preserves 9^3
    auto in2 = random_map(1, 9, 6);
    auto out2 = dwc::conv3d<float>(in2, random_weights(27, 7), {}, 1, KernelShape::cubic(1, 4, 4));
    CHECK(out2.nx == 9);
}

TEST_CASE("convolution is linear in its input") {
    dwc::CounterRng rng(77);
    for (int rep = 0; rep < 5; ++rep) {
        const float alpha = static_cast<float>(2.0 * rng.uniform(2 * rep) * 2 - 2);
        const float beta = static_cast<float>(2.0 * rng.uniform(2 * rep + 1) * 2 - 2);
        auto x = random_map(2, 6, 400 + rep);
        auto y = random_map(2, 6, 500 + rep);
        FeatureMap<float> mix(2, 6, 6, 6);
        for (size_t i = 0; i < mix.data.size(); ++i) mix.data[i] = alpha * x.data[i] + beta * y.data[i];
        auto ks = KernelShape::cubic(1, 2, 2);
        auto w = random_weights(2 * 2 * 27, 600 + rep);
        auto cx = dwc::conv3d<float>(x, w, {}, 2, ks);
        auto cy = dwc::conv3d<float>(y, w, {}, 2, ks);
        auto cmix = dwc::conv3d<float>(mix, w, {}, 2, ks);
        double d = 0.0;
        for (size_t i = 0; i < cmix.data.size(); ++i)
            d = std::max(d, std::abs(static_cast<double>(cmix.data[i]) - (alpha * cx.data[i] + beta * cy.data[i])));
        CHECK(d < 1e-4);
    }
}

TEST_CASE("conv rejects mismatched weight array") {
    auto in = random_map(1, 5, 8);
    std::vector<float> w(26, 0.0f);
    CHECK_THROWS_AS(dwc::conv3d<float>(in, w, {}, 1, KernelShape::cubic(1, 1, 1)), std::invalid_argument);
    std::vector<float> w2(27, 0.0f);
    std::vector<float> bad_bias(2, 0.0f);
    CHECK_THROWS_AS(dwc::conv3d<float>(in, w2, bad_bias, 1, KernelShape::cubic(1, 1, 1)), std::invalid_argument);
}

TEST_CASE("conv adjoints satisfy the inner-product identity") {
    // <conv(x), g> == <x, grad_input(g)> and == <w, grad_weights(x, g)> + <b, grad_bias(g)>
    const int c = 2, f = 3, n = 6;
    auto ks = KernelShape::cubic(1, 2, 2);
    auto x = random_map(c, n, 11);
    auto w = random_weights(static_cast<size_t>(f) * c * 27, 12);
    auto b = random_weights(f, 13);
    auto out = dwc::conv3d<float>(x, w, b, f, ks);
    auto g = random_map(f, n, 14);

    double lhs = 0.0;
    for (size_t i = 0; i < out.data.size(); ++i) lhs += static_cast<double>(out.data[i]) * g.data[i];

    auto gx = dwc::conv3d_grad_input<float>(g, w, c, n, n, n, ks);
    std::vector<float> gw(w.size());
    dwc::conv3d_grad_weights<float>(x, g, gw, f, ks);
    std::vector<float> gb(f);
    dwc::conv3d_grad_bias<float>(g, gb);

    double rhs_x = 0.0;
    for (size_t i = 0; i < x.data.size(); ++i) rhs_x += static_cast<double>(x.data[i]) * gx.data[i];
    double rhs_w = 0.0;
    for (size_t i = 0; i < w.size(); ++i) rhs_w += static_cast<double>(w[i]) * gw[i];
    double rhs_b = 0.0;
    for (int i = 0; i < f; ++i) rhs_b += static_cast<double>(b[i]) * gb[i];

    // out = Wx + b is bilinear in (x, w): each adjoint accounts for <g, Wx> on its own
    CHECK(lhs == doctest::Approx(rhs_x + rhs_b).epsilon(1e-4));
    CHECK(lhs == doctest::Approx(rhs_w + rhs_b).epsilon(1e-4));
}

TEST_CASE("relu definition") {
    FeatureMap<float> x(1, 1, 1, 2);
    x.data = {-1.0f, 2.0f};
    auto y = dwc::relu(x);
    CHECK(y.data[0] == 0.0f);
    CHECK(y.data[1] == 2.0f);
}

TEST_CASE("softmax of equal logits is uniform") {
    for (int c : {2, 5}) {
        FeatureMap<float> x(c, 2, 2, 2);
        std::fill(x.data.begin(), x.data.end(), 0.7f);
        auto y = dwc::softmax_channels(x);
        for (float v : y.data) CHECK(v == doctest::Approx(1.0f / c).epsilon(1e-6));
    }
}

TEST_CASE("softmax of logits (1, 0)") {
    FeatureMap<float> x(2, 1, 1, 1);
    x.data = {1.0f, 0.0f};
    auto y = dwc::softmax_channels(x);
    CHECK(y.data[0] == doctest::Approx(0.7310586).epsilon(1e-6));
    CHECK(y.data[1] == doctest::Approx(0.2689414).epsilon(1e-6));
}

TEST_CASE("softmax channels sum to one at every voxel") {
    auto x = random_map(5, 4, 21, 3.0);
    auto y = dwc::softmax_channels(x);
    const size_t vox = y.voxels();
    for (size_t v = 0; v < vox; ++v) {
        double s = 0.0;
        for (int c = 0; c < 5; ++c) s += y.data[c * vox + v];
        CHECK(std::abs(s - 1.0) < 1e-6);
    }
}

TEST_CASE("volume file round trip and failure modes") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "dwc_tensor_test";
    fs::create_directories(dir);
    const auto path = (dir / "v.dwcv").string();

    Volume v(3, 4, 5);
    dwc::CounterRng rng(31);
    for (size_t i = 0; i < v.data.size(); ++i) v.data[i] = static_cast<float>(rng.normal(i));
    dwc::write_volume(v, path);
    auto r = dwc::read_volume(path);
    REQUIRE(r.nx == 3);
    REQUIRE(r.ny == 4);
    REQUIRE(r.nz == 5);
    CHECK(r.data == v.data);

    SUBCASE("truncated payload") {
        auto bytes = fs::file_size(path);
        fs::resize_file(path, bytes - 7);
        bool threw = false;
        try {
            dwc::read_volume(path);
        } catch (const std::runtime_error& e) {
            threw = true;
            CHECK(std::string(e.what()).find("truncated") != std::string::npos);
        }
        CHECK(threw);
    }
    SUBCASE("bad magic") {
        std::fstream fio(path, std::ios::in | std::ios::out | std::ios::binary);
        fio.write("XXXX", 4);
        fio.close();
        CHECK_THROWS_AS(dwc::read_volume(path), std::runtime_error);
    }
    fs::remove_all(dir);
}

TEST_CASE("argmax labels") {
    FeatureMap<float> p(3, 1, 1, 2);
    // voxel 0: class 2 wins; voxel 1: class 0 wins
    p.data = {0.2f, 0.6f, 0.1f, 0.1f, 0.7f, 0.3f};
    auto lab = dwc::argmax_labels(p);
    CHECK(lab.data[0] == 2.0f);
    CHECK(lab.data[1] == 0.0f);
}
