// Python surface: the Gaussian algebra (KL, consolidation), the evaluation
// statistics, and read access to checkpoints. Heavy lifting (training, the
// experiment driver) stays behind the CLI.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dwc/checkpoint.hpp"
#include "dwc/consolidate.hpp"
#include "dwc/eval.hpp"
#include "dwc/sites.hpp"
#include "dwc/tensor.hpp"
#include "dwc/variational.hpp"

namespace py = pybind11;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

std::span<const float> flat(const FloatArray& a) {
    return {a.data(), static_cast<size_t>(a.size())};
}

dwc::Volume as_volume(const FloatArray& a, const char* what) {
    if (a.ndim() != 3) throw std::invalid_argument(std::string(what) + ": expected a 3-d array");
    dwc::Volume v(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)),
                  static_cast<int>(a.shape(2)));
    std::copy(a.data(), a.data() + a.size(), v.data.begin());
    return v;
}

py::array_t<float> volume_array(const dwc::Volume& v) {
    py::array_t<float> out({v.nx, v.ny, v.nz});
    std::copy(v.data.begin(), v.data.end(), out.mutable_data());
    return out;
}

py::dict record_dict(const dwc::TensorRecord& rec) {
    py::dict d;
    d["name"] = rec.name;
    std::vector<py::ssize_t> shape(rec.dims.begin(), rec.dims.end());
    py::array_t<float> mu(shape);
    std::copy(rec.mu.begin(), rec.mu.end(), mu.mutable_data());
    d["mu"] = mu;
    if (!rec.sigma.empty()) {
        py::array_t<float> sigma(shape);
        std::copy(rec.sigma.begin(), rec.sigma.end(), sigma.mutable_data());
        d["sigma"] = sigma;
    }
    return d;
}

} // namespace

PYBIND11_MODULE(_dwc, m) {
    m.doc() = "Gaussian weight algebra, evaluation statistics, checkpoint access";

    m.def("softplus", py::vectorize([](double x) { return dwc::softplus(x); }),
          "log(1 + exp(x)), overflow-safe");
    m.def("softplus_inv", py::vectorize([](double y) { return dwc::softplus_inv(y); }),
          "inverse of softplus; argument must be positive");

    m.def(
        "kl_ffg",
        [](const FloatArray& mu_q, const FloatArray& sigma_q, const FloatArray& mu_p,
           const FloatArray& sigma_p) {
            return dwc::kl_ffg<float>(flat(mu_q), flat(sigma_q), flat(mu_p), flat(sigma_p));
        },
        py::arg("mu_q"), py::arg("sigma_q"), py::arg("mu_p"), py::arg("sigma_p"),
        "KL(q || p) in nats between elementwise Gaussians");
    m.def(
        "kl_ffg_scalar",
        [](const FloatArray& mu_q, const FloatArray& sigma_q, double mu0, double sigma0) {
            return dwc::kl_ffg<float>(flat(mu_q), flat(sigma_q), mu0, sigma0);
        },
        py::arg("mu_q"), py::arg("sigma_q"), py::arg("mu0") = 0.0, py::arg("sigma0") = 1.0,
        "KL(q || p) against a broadcast scalar prior");

    m.def(
        "consolidate",
        [](const FloatArray& prior_mu, const FloatArray& prior_sigma,
           const std::vector<FloatArray>& site_mu, const std::vector<FloatArray>& site_sigma) {
            std::vector<std::span<const float>> mus, sigmas;
            for (const auto& a : site_mu) mus.push_back(flat(a));
            for (const auto& a : site_sigma) sigmas.push_back(flat(a));
            py::array_t<float> out_mu(prior_mu.size()), out_sigma(prior_mu.size());
            const std::uint64_t clamps = dwc::consolidate_arrays(
                flat(prior_mu), flat(prior_sigma), mus, sigmas,
                {out_mu.mutable_data(), static_cast<size_t>(out_mu.size())},
                {out_sigma.mutable_data(), static_cast<size_t>(out_sigma.size())});
            return py::make_tuple(out_mu, out_sigma, clamps);
        },
        py::arg("prior_mu"), py::arg("prior_sigma"), py::arg("site_mu"), py::arg("site_sigma"),
        "Fuse site posteriors sharing one prior; returns (mu, sigma, clamp_count)");

    m.def(
        "dice_per_class",
        [](const FloatArray& pred, const FloatArray& truth, int classes) {
            return dwc::dice_per_class(as_volume(pred, "pred"), as_volume(truth, "truth"),
                                       classes);
        },
        py::arg("pred"), py::arg("truth"), py::arg("classes"),
        "Per-class Dice overlap; NaN for classes absent from both volumes");

    m.def("student_t_cdf", &dwc::student_t_cdf, py::arg("t"), py::arg("df"));
    m.def(
        "paired_ttest",
        [](const std::vector<double>& a, const std::vector<double>& b) {
            const dwc::TTest r = dwc::paired_ttest(a, b);
            py::dict d;
            d["t"] = r.t;
            d["p"] = r.p;
            d["df"] = r.df;
            d["degenerate"] = r.degenerate;
            return d;
        },
        py::arg("a"), py::arg("b"), "Two-sided paired t-test over aligned score vectors");

    m.def(
        "read_checkpoint",
        [](const std::string& path) {
            const dwc::SiteCheckpoint ck = dwc::read_checkpoint(path);
            py::dict d;
            d["kind"] = ck.kind == dwc::SiteCheckpoint::Kind::variational ? "variational"
                                                                          : "map-point";
            d["provenance"] = ck.provenance;
            d["classes"] = ck.spec.classes;
            d["in_channels"] = ck.spec.in_channels;
            std::vector<py::tuple> layers;
            for (const auto& l : ck.spec.layers)
                layers.push_back(py::make_tuple(l.filters, l.dilation));
            d["layers"] = layers;
            py::list records;
            for (const auto& rec : ck.records) records.append(record_dict(rec));
            d["records"] = records;
            return d;
        },
        py::arg("path"), "Load a checkpoint as {kind, provenance, records: [{name, mu, sigma}]}");

    m.def(
        "generate_volume",
        [](int side, int classes, std::uint64_t geometry_seed, std::uint64_t site_seed,
           int volume_id, double gain, double bias, double gamma, double noise, double field,
           std::vector<int> order) {
            dwc::SiteGeometry geo;
            geo.side = side;
            geo.classes = classes;
            geo.seed = geometry_seed;
            dwc::SiteProfile p;
            p.id = "py";
            p.seed = site_seed;
            p.gain = gain;
            p.bias = bias;
            p.gamma = gamma;
            p.noise = noise;
            p.field = field;
            p.order = std::move(order);
            const dwc::LabeledVolume v = dwc::generate_volume(p, geo, volume_id);
            return py::make_tuple(volume_array(v.image), volume_array(v.labels));
        },
        py::arg("side"), py::arg("classes"), py::arg("geometry_seed"), py::arg("site_seed"),
        py::arg("volume_id") = 0, py::arg("gain") = 1.0, py::arg("bias") = 0.0,
        py::arg("gamma") = 1.0, py::arg("noise") = 0.0, py::arg("field") = 0.0,
        py::arg("order") = std::vector<int>{},
        "One synthetic acquisition; returns (image, labels)");

    m.def("z_scored", [](const FloatArray& img) { return volume_array(dwc::z_scored(as_volume(img, "image"))); },
          py::arg("image"), "Per-volume standardisation");
}
