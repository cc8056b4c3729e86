#pragma once

#include <cstdint>
#include <cstddef>
#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dwc {

// Dense 3D scalar grid, flat (x, y, z) layout with z contiguous.
struct Volume {
    int nx = 0, ny = 0, nz = 0;
    std::vector<float> data;

    Volume() = default;
    Volume(int x, int y, int z) : nx(x), ny(y), nz(z), data(static_cast<size_t>(x) * y * z, 0.0f) {}

    size_t size() const { return data.size(); }
    size_t index(int x, int y, int z) const {
        return (static_cast<size_t>(x) * ny + y) * nz + z;
    }
    float& at(int x, int y, int z) { return data[index(x, y, z)]; }
    float at(int x, int y, int z) const { return data[index(x, y, z)]; }
};

// Multi-channel grid, flat (c, x, y, z) layout with z contiguous.
template <typename T>
struct FeatureMap {
    int channels = 0, nx = 0, ny = 0, nz = 0;
    std::vector<T> data;

    FeatureMap() = default;
    FeatureMap(int c, int x, int y, int z)
        : channels(c), nx(x), ny(y), nz(z), data(static_cast<size_t>(c) * x * y * z, T(0)) {}

    size_t voxels() const { return static_cast<size_t>(nx) * ny * nz; }
    size_t size() const { return data.size(); }
    size_t index(int c, int x, int y, int z) const {
        return ((static_cast<size_t>(c) * nx + x) * ny + y) * nz + z;
    }
    T& at(int c, int x, int y, int z) { return data[index(c, x, y, z)]; }
    T at(int c, int x, int y, int z) const { return data[index(c, x, y, z)]; }
    T* channel(int c) { return data.data() + static_cast<size_t>(c) * voxels(); }
    const T* channel(int c) const { return data.data() + static_cast<size_t>(c) * voxels(); }
};

template <typename T>
FeatureMap<T> to_feature_map(const Volume& v) {
    FeatureMap<T> f(1, v.nx, v.ny, v.nz);
    for (size_t i = 0; i < v.data.size(); ++i) f.data[i] = static_cast<T>(v.data[i]);
    return f;
}

// Kernel geometry: half-extents per axis, dilation l, zero padding p.
// The tap index set is {-a..a} x {-b..b} x {-c..c}; taps read the input every
// l-th voxel. Output spatial extent is N + 2p - 2*l*half along each axis.
struct KernelShape {
    int half_x = 1, half_y = 1, half_z = 1;
    int dilation = 1;
    int padding = 0;

    static KernelShape cubic(int half, int dilation, int padding) {
        return KernelShape{half, half, half, dilation, padding};
    }
    int kx() const { return 2 * half_x + 1; }
    int ky() const { return 2 * half_y + 1; }
    int kz() const { return 2 * half_z + 1; }
    int taps() const { return kx() * ky() * kz(); }
    int out_extent(int n, int half) const { return n + 2 * padding - 2 * dilation * half; }
};

namespace detail {

inline void check_conv_args(int channels, size_t weight_count, size_t bias_count, int filters,
                            const KernelShape& ks, int out_x, int out_y, int out_z) {
    const size_t expect = static_cast<size_t>(filters) * channels * ks.taps();
    if (weight_count != expect)
        throw std::invalid_argument("conv3d: weight array does not match filters x channels x kernel taps");
    if (bias_count != 0 && bias_count != static_cast<size_t>(filters))
        throw std::invalid_argument("conv3d: bias array does not match filter count");
    if (out_x <= 0 || out_y <= 0 || out_z <= 0)
        throw std::invalid_argument("conv3d: non-positive output extent (padding too small for kernel)");
}

// Fixed-order lane-accumulated dot product, 64-bit accumulation.
template <typename A, typename B>
inline double dot_acc(const A* a, const B* b, int n) {
    double l0 = 0, l1 = 0, l2 = 0, l3 = 0;
    int i = 0;
    for (; i + 4 <= n; i += 4) {
        l0 += static_cast<double>(a[i]) * static_cast<double>(b[i]);
        l1 += static_cast<double>(a[i + 1]) * static_cast<double>(b[i + 1]);
        l2 += static_cast<double>(a[i + 2]) * static_cast<double>(b[i + 2]);
        l3 += static_cast<double>(a[i + 3]) * static_cast<double>(b[i + 3]);
    }
    double s = (l0 + l1) + (l2 + l3);
    for (; i < n; ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return s;
}

} // namespace detail

// Dilated 3D convolution, Eq-style taps w[f,c,t] applied to h[c, v - l*t] with
// zero fill outside the grid. Weights laid out (F, C, Kx, Ky, Kz); tap (i,j,k)
// corresponds to t = (i - half_x, j - half_y, k - half_z). Accumulation runs in
// 64-bit in a fixed (c, i, j, k) order per output voxel, so results do not
// depend on thread count.
template <typename T>
FeatureMap<T> conv3d(const FeatureMap<T>& in, std::span<const T> weights, std::span<const T> bias,
                     int filters, const KernelShape& ks) {
    const int X = in.nx, Y = in.ny, Z = in.nz, C = in.channels;
    const int XO = ks.out_extent(X, ks.half_x);
    const int YO = ks.out_extent(Y, ks.half_y);
    const int ZO = ks.out_extent(Z, ks.half_z);
    detail::check_conv_args(C, weights.size(), bias.size(), filters, ks, XO, YO, ZO);

    FeatureMap<T> out(filters, XO, YO, ZO);
    const size_t vox = static_cast<size_t>(XO) * YO * ZO;
    const int l = ks.dilation, p = ks.padding;
    std::vector<double> acc(vox);

    for (int f = 0; f < filters; ++f) {
        const double b = bias.empty() ? 0.0 : static_cast<double>(bias[f]);
        std::fill(acc.begin(), acc.end(), b);
        for (int c = 0; c < C; ++c) {
            const T* src = in.channel(c);
            const T* wf = weights.data() + (static_cast<size_t>(f) * C + c) * ks.taps();
            for (int i = 0; i < ks.kx(); ++i) {
                const int dx = l * (2 * ks.half_x - i) - p;
                const int x0 = std::max(0, -dx), x1 = std::min(XO, X - dx);
                for (int j = 0; j < ks.ky(); ++j) {
                    const int dy = l * (2 * ks.half_y - j) - p;
                    const int y0 = std::max(0, -dy), y1 = std::min(YO, Y - dy);
                    for (int k = 0; k < ks.kz(); ++k) {
                        const int dz = l * (2 * ks.half_z - k) - p;
                        const int z0 = std::max(0, -dz), z1 = std::min(ZO, Z - dz);
                        if (x0 >= x1 || y0 >= y1 || z0 >= z1) continue;
                        const double w = static_cast<double>(wf[(i * ks.ky() + j) * ks.kz() + k]);
                        for (int x = x0; x < x1; ++x) {
                            for (int y = y0; y < y1; ++y) {
                                const T* row = src + (static_cast<size_t>(x + dx) * Y + (y + dy)) * Z + (z0 + dz);
                                double* orow = acc.data() + (static_cast<size_t>(x) * YO + y) * ZO + z0;
                                const int n = z1 - z0;
                                for (int t = 0; t < n; ++t) orow[t] += w * static_cast<double>(row[t]);
                            }
                        }
                    }
                }
            }
        }
        T* dst = out.channel(f);
        for (size_t v = 0; v < vox; ++v) dst[v] = static_cast<T>(acc[v]);
    }
    return out;
}

// Literal six-nested-loop evaluation of the same sum; independent reference
// path for the fast kernel. Small inputs only.
template <typename T>
FeatureMap<T> naive_conv3d(const FeatureMap<T>& in, std::span<const T> weights, std::span<const T> bias,
                           int filters, const KernelShape& ks) {
    const int X = in.nx, Y = in.ny, Z = in.nz, C = in.channels;
    const int XO = ks.out_extent(X, ks.half_x);
    const int YO = ks.out_extent(Y, ks.half_y);
    const int ZO = ks.out_extent(Z, ks.half_z);
    detail::check_conv_args(C, weights.size(), bias.size(), filters, ks, XO, YO, ZO);

    FeatureMap<T> out(filters, XO, YO, ZO);
    const int l = ks.dilation, p = ks.padding;
    for (int f = 0; f < filters; ++f) {
        for (int x = 0; x < XO; ++x) {
            for (int y = 0; y < YO; ++y) {
                for (int z = 0; z < ZO; ++z) {
                    double s = bias.empty() ? 0.0 : static_cast<double>(bias[f]);
                    for (int c = 0; c < C; ++c) {
                        for (int i = 0; i < ks.kx(); ++i) {
                            const int u = x + l * (2 * ks.half_x - i) - p;
                            if (u < 0 || u >= X) continue;
                            for (int j = 0; j < ks.ky(); ++j) {
                                const int v = y + l * (2 * ks.half_y - j) - p;
                                if (v < 0 || v >= Y) continue;
                                for (int k = 0; k < ks.kz(); ++k) {
                                    const int w = z + l * (2 * ks.half_z - k) - p;
                                    if (w < 0 || w >= Z) continue;
                                    const size_t wi = ((static_cast<size_t>(f) * C + c) * ks.taps()) +
                                                      (static_cast<size_t>(i) * ks.ky() + j) * ks.kz() + k;
                                    s += static_cast<double>(weights[wi]) * static_cast<double>(in.at(c, u, v, w));
                                }
                            }
                        }
                    }
                    out.at(f, x, y, z) = static_cast<T>(s);
                }
            }
        }
    }
    return out;
}

// Adjoint of conv3d with respect to its input: grad_in[c,u] = sum over filters
// and taps of w[f,c,t] * grad_out[f, u - d(t)].
template <typename T>
FeatureMap<T> conv3d_grad_input(const FeatureMap<T>& grad_out, std::span<const T> weights,
                                int channels, int in_x, int in_y, int in_z, const KernelShape& ks) {
    const int XO = grad_out.nx, YO = grad_out.ny, ZO = grad_out.nz;
    const int F = grad_out.channels;
    const int l = ks.dilation, p = ks.padding;
    FeatureMap<T> gin(channels, in_x, in_y, in_z);
    const size_t vox = static_cast<size_t>(in_x) * in_y * in_z;
    std::vector<double> acc(vox);

    for (int c = 0; c < channels; ++c) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (int f = 0; f < F; ++f) {
            const T* g = grad_out.channel(f);
            const T* wf = weights.data() + (static_cast<size_t>(f) * channels + c) * ks.taps();
            for (int i = 0; i < ks.kx(); ++i) {
                const int dx = l * (2 * ks.half_x - i) - p;
                const int x0 = std::max(0, dx), x1 = std::min(in_x, XO + dx);
                for (int j = 0; j < ks.ky(); ++j) {
                    const int dy = l * (2 * ks.half_y - j) - p;
                    const int y0 = std::max(0, dy), y1 = std::min(in_y, YO + dy);
                    for (int k = 0; k < ks.kz(); ++k) {
                        const int dz = l * (2 * ks.half_z - k) - p;
                        const int z0 = std::max(0, dz), z1 = std::min(in_z, ZO + dz);
                        if (x0 >= x1 || y0 >= y1 || z0 >= z1) continue;
                        const double w = static_cast<double>(wf[(i * ks.ky() + j) * ks.kz() + k]);
                        for (int x = x0; x < x1; ++x) {
                            for (int y = y0; y < y1; ++y) {
                                const T* row = g + (static_cast<size_t>(x - dx) * YO + (y - dy)) * ZO + (z0 - dz);
                                double* orow = acc.data() + (static_cast<size_t>(x) * in_y + y) * in_z + z0;
                                const int n = z1 - z0;
                                for (int t = 0; t < n; ++t) orow[t] += w * static_cast<double>(row[t]);
                            }
                        }
                    }
                }
            }
        }
        T* dst = gin.channel(c);
        for (size_t v = 0; v < vox; ++v) dst[v] = static_cast<T>(acc[v]);
    }
    return gin;
}

// Adjoint with respect to the weights: gw[f,c,t] = sum_v grad_out[f,v] * in[c, v + d(t)].
template <typename T>
void conv3d_grad_weights(const FeatureMap<T>& in, const FeatureMap<T>& grad_out,
                         std::span<T> grad_weights, int filters, const KernelShape& ks) {
    const int X = in.nx, Y = in.ny, Z = in.nz, C = in.channels;
    const int XO = grad_out.nx, YO = grad_out.ny, ZO = grad_out.nz;
    const int l = ks.dilation, p = ks.padding;
    if (grad_weights.size() != static_cast<size_t>(filters) * C * ks.taps())
        throw std::invalid_argument("conv3d_grad_weights: bad gradient array size");

    for (int f = 0; f < filters; ++f) {
        const T* g = grad_out.channel(f);
        for (int c = 0; c < C; ++c) {
            const T* src = in.channel(c);
            T* gw = grad_weights.data() + (static_cast<size_t>(f) * C + c) * ks.taps();
            for (int i = 0; i < ks.kx(); ++i) {
                const int dx = l * (2 * ks.half_x - i) - p;
                const int x0 = std::max(0, -dx), x1 = std::min(XO, X - dx);
                for (int j = 0; j < ks.ky(); ++j) {
                    const int dy = l * (2 * ks.half_y - j) - p;
                    const int y0 = std::max(0, -dy), y1 = std::min(YO, Y - dy);
                    for (int k = 0; k < ks.kz(); ++k) {
                        const int dz = l * (2 * ks.half_z - k) - p;
                        const int z0 = std::max(0, -dz), z1 = std::min(ZO, Z - dz);
                        double s = 0.0;
                        if (x0 < x1 && y0 < y1 && z0 < z1) {
                            for (int x = x0; x < x1; ++x) {
                                for (int y = y0; y < y1; ++y) {
                                    const T* grow = g + (static_cast<size_t>(x) * YO + y) * ZO + z0;
                                    const T* row = src + (static_cast<size_t>(x + dx) * Y + (y + dy)) * Z + (z0 + dz);
                                    s += detail::dot_acc(grow, row, z1 - z0);
                                }
                            }
                        }
                        gw[(i * ks.ky() + j) * ks.kz() + k] = static_cast<T>(s);
                    }
                }
            }
        }
    }
}

template <typename T>
void conv3d_grad_bias(const FeatureMap<T>& grad_out, std::span<T> grad_bias) {
    if (grad_bias.size() != static_cast<size_t>(grad_out.channels))
        throw std::invalid_argument("conv3d_grad_bias: bad gradient array size");
    for (int f = 0; f < grad_out.channels; ++f) {
        const T* g = grad_out.channel(f);
        double l0 = 0, l1 = 0, l2 = 0, l3 = 0;
        size_t i = 0;
        const size_t n = grad_out.voxels();
        for (; i + 4 <= n; i += 4) {
            l0 += g[i];
            l1 += g[i + 1];
            l2 += g[i + 2];
            l3 += g[i + 3];
        }
        double s = (l0 + l1) + (l2 + l3);
        for (; i < n; ++i) s += g[i];
        grad_bias[f] = static_cast<T>(s);
    }
}

template <typename T>
FeatureMap<T> relu(const FeatureMap<T>& x) {
    FeatureMap<T> out = x;
    for (auto& v : out.data) v = std::max(T(0), v);
    return out;
}

template <typename T>
void relu_inplace(FeatureMap<T>& x) {
    for (auto& v : x.data) v = std::max(T(0), v);
}

// Gradient mask: passes grad where the forward input was positive.
template <typename T>
void relu_backward_inplace(const FeatureMap<T>& pre_activation, FeatureMap<T>& grad) {
    for (size_t i = 0; i < grad.data.size(); ++i)
        if (pre_activation.data[i] <= T(0)) grad.data[i] = T(0);
}

// Per-voxel softmax across the channel axis.
template <typename T>
FeatureMap<T> softmax_channels(const FeatureMap<T>& x) {
    const int C = x.channels;
    const size_t vox = x.voxels();
    FeatureMap<T> out(C, x.nx, x.ny, x.nz);
    std::vector<double> e(C);
    for (size_t v = 0; v < vox; ++v) {
        double m = -1e300;
        for (int c = 0; c < C; ++c) m = std::max(m, static_cast<double>(x.data[c * vox + v]));
        double s = 0.0;
        for (int c = 0; c < C; ++c) {
            e[c] = std::exp(static_cast<double>(x.data[c * vox + v]) - m);
            s += e[c];
        }
        for (int c = 0; c < C; ++c) out.data[c * vox + v] = static_cast<T>(e[c] / s);
    }
    return out;
}

// Raw volume file: magic "DWCV", u16 version, u16 dtype (0 = float32),
// three u32 dims, then little-endian float32 payload.
void write_volume(const Volume& v, const std::string& path);
Volume read_volume(const std::string& path);

// Per-class argmax over channels into a label volume.
template <typename T>
Volume argmax_labels(const FeatureMap<T>& probs) {
    Volume out(probs.nx, probs.ny, probs.nz);
    const size_t vox = probs.voxels();
    for (size_t v = 0; v < vox; ++v) {
        int best = 0;
        T bv = probs.data[v];
        for (int c = 1; c < probs.channels; ++c) {
            const T cv = probs.data[c * vox + v];
            if (cv > bv) {
                bv = cv;
                best = c;
            }
        }
        out.data[v] = static_cast<float>(best);
    }
    return out;
}

} // namespace dwc
