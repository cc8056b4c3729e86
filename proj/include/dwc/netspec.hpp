#pragma once

// Architecture description for the dilated-convolution segmentation network:
// an ordered list of conv layers, each shape-preserving (padding = dilation for
// the 3x3x3 layers) with a softmax classification head of 1x1x1 kernels.

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dwc/tensor.hpp"

namespace dwc {

struct LayerSpec {
    int filters = 0;
    int half_x = 1, half_y = 1, half_z = 1;
    int dilation = 1;
    int padding = 1;
    enum class Act { relu, softmax } act = Act::relu;

    KernelShape kernel() const { return {half_x, half_y, half_z, dilation, padding}; }
    size_t kernel_volume() const {
        return static_cast<size_t>(2 * half_x + 1) * (2 * half_y + 1) * (2 * half_z + 1);
    }
};

struct NetworkSpec {
    int in_channels = 1;
    int classes = 0;
    std::vector<LayerSpec> layers;

    int layer_in_channels(size_t i) const {
        return i == 0 ? in_channels : layers[i - 1].filters;
    }
    size_t kernel_count(size_t i) const {
        return static_cast<size_t>(layers[i].filters) * layer_in_channels(i) *
               layers[i].kernel_volume();
    }
    size_t bias_count(size_t i) const { return static_cast<size_t>(layers[i].filters); }
    size_t parameter_count() const {
        size_t n = 0;
        for (size_t i = 0; i < layers.size(); ++i) n += kernel_count(i) + bias_count(i);
        return n;
    }

    // Enforces the head shape (softmax, filters == classes, 1x1x1) and the
    // shape-preservation rule padding == dilation for every wider kernel.
    void validate() const {
        if (layers.empty()) throw std::invalid_argument("network spec: no layers");
        if (classes < 2) throw std::invalid_argument("network spec: need at least two classes");
        const auto& head = layers.back();
        if (head.act != LayerSpec::Act::softmax || head.filters != classes ||
            head.half_x != 0 || head.half_y != 0 || head.half_z != 0)
            throw std::invalid_argument(
                "network spec: final layer must be a 1x1x1 softmax head with one filter per class");
        for (size_t i = 0; i + 1 < layers.size(); ++i)
            if (layers[i].act != LayerSpec::Act::relu)
                throw std::invalid_argument("network spec: hidden layers must be relu");
        for (const auto& l : layers) {
            if (l.filters <= 0 || l.dilation <= 0 || l.half_x < 0 || l.half_y < 0 ||
                l.half_z < 0 || l.padding < 0)
                throw std::invalid_argument("network spec: non-positive layer dimension");
            if ((l.half_x > 0 || l.half_y > 0 || l.half_z > 0) && l.padding != l.dilation)
                throw std::invalid_argument(
                    "network spec: padding must equal dilation on shape-preserving layers");
        }
    }

    // Small segmentation net: the published dilation ladder (1,1,1,2,4,8,1)
    // at 16 filters over 5 classes.
    static NetworkSpec mini(int filters = 16, int classes = 5, int in_channels = 1) {
        return with_dilations(filters, classes, in_channels, {1, 1, 1, 2, 4, 8, 1});
    }

    // Full-size variant: 96 filters, 50 classes.
    static NetworkSpec full() { return with_dilations(96, 50, 1, {1, 1, 1, 2, 4, 8, 1}); }

    static NetworkSpec with_dilations(int filters, int classes, int in_channels,
                                      const std::vector<int>& dilations) {
        NetworkSpec s;
        s.in_channels = in_channels;
        s.classes = classes;
        for (int d : dilations)
            s.layers.push_back({filters, 1, 1, 1, d, d, LayerSpec::Act::relu});
        s.layers.push_back({classes, 0, 0, 0, 1, 0, LayerSpec::Act::softmax});
        s.validate();
        return s;
    }
};

inline void to_json(nlohmann::json& j, const LayerSpec& l) {
    j = {{"filters", l.filters},
         {"half", {l.half_x, l.half_y, l.half_z}},
         {"dilation", l.dilation},
         {"padding", l.padding},
         {"act", l.act == LayerSpec::Act::relu ? "relu" : "softmax"}};
}

inline void from_json(const nlohmann::json& j, LayerSpec& l) {
    j.at("filters").get_to(l.filters);
    const auto& h = j.at("half");
    l.half_x = h.at(0);
    l.half_y = h.at(1);
    l.half_z = h.at(2);
    j.at("dilation").get_to(l.dilation);
    j.at("padding").get_to(l.padding);
    const std::string a = j.at("act");
    if (a == "relu")
        l.act = LayerSpec::Act::relu;
    else if (a == "softmax")
        l.act = LayerSpec::Act::softmax;
    else
        throw std::invalid_argument("layer spec: unknown activation '" + a + "'");
}

inline void to_json(nlohmann::json& j, const NetworkSpec& s) {
    j = {{"in_channels", s.in_channels}, {"classes", s.classes}, {"layers", s.layers}};
}

inline void from_json(const nlohmann::json& j, NetworkSpec& s) {
    j.at("in_channels").get_to(s.in_channels);
    j.at("classes").get_to(s.classes);
    j.at("layers").get_to(s.layers);
}

inline bool operator==(const LayerSpec& a, const LayerSpec& b) {
    return a.filters == b.filters && a.half_x == b.half_x && a.half_y == b.half_y &&
           a.half_z == b.half_z && a.dilation == b.dilation && a.padding == b.padding &&
           a.act == b.act;
}

inline bool operator==(const NetworkSpec& a, const NetworkSpec& b) {
    return a.in_channels == b.in_channels && a.classes == b.classes && a.layers == b.layers;
}

} // namespace dwc
