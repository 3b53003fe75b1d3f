#include "rfk/eval.hpp"
#include "rfk/features.hpp"
#include "rfk/fineflow.hpp"
#include "rfk/io.hpp"
#include "rfk/pipeline.hpp"
#include "rfk/robust.hpp"

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <map>
#include <optional>
#include <string>

namespace py = pybind11;
using namespace rfk;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using BoolArray = py::array_t<bool, py::array::c_style | py::array::forcecast>;

// (H, W) or (H, W, C) in [0, 1].
Image to_image(const Array& a)
{
    if (a.ndim() != 2 && a.ndim() != 3)
        throw InvalidArgument("image must have shape (H, W) or (H, W, C)");
    const int h = static_cast<int>(a.shape(0)), w = static_cast<int>(a.shape(1));
    const int c = a.ndim() == 3 ? static_cast<int>(a.shape(2)) : 1;
    if (c != 1 && c != 3)
        throw InvalidArgument("image must have 1 or 3 channels");
    return Image(w, h, c, std::vector<double>(a.data(), a.data() + a.size()));
}

Array from_image(const Image& img)
{
    std::vector<py::ssize_t> shape{img.height(), img.width()};
    if (img.channels() > 1)
        shape.push_back(img.channels());
    Array out(shape);
    std::copy(img.data().begin(), img.data().end(), out.mutable_data());
    return out;
}

// Sample locations (H, W, 2) as (x, y) plus an optional validity mask.
FlowField to_flow(const Array& loc, const std::optional<BoolArray>& valid)
{
    if (loc.ndim() != 3 || loc.shape(2) != 2)
        throw InvalidArgument("flow must have shape (H, W, 2)");
    const int h = static_cast<int>(loc.shape(0)), w = static_cast<int>(loc.shape(1));
    if (valid && (valid->ndim() != 2 || valid->shape(0) != h || valid->shape(1) != w))
        throw InvalidArgument("validity mask must have shape (H, W)");
    FlowField f(w, h);
    const double* p = loc.data();
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * w + x;
            f.set(x, y, {p[2 * i], p[2 * i + 1]}, valid ? valid->data()[i] : true);
        }
    return f;
}

py::tuple from_flow(const FlowField& f)
{
    Array loc({f.height(), f.width(), 2});
    BoolArray valid({f.height(), f.width()});
    double* p = loc.mutable_data();
    bool* v = valid.mutable_data();
    for (std::size_t i = 0; i < f.locations().size(); ++i) {
        p[2 * i] = f.locations()[i].x;
        p[2 * i + 1] = f.locations()[i].y;
        v[i] = f.validity()[i] != 0;
    }
    return py::make_tuple(loc, valid);
}

ScalarMap to_map(const Array& a)
{
    if (a.ndim() != 2)
        throw InvalidArgument("map must have shape (H, W)");
    ScalarMap m(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)));
    std::copy(a.data(), a.data() + a.size(), m.values().begin());
    return m;
}

Array from_map(const ScalarMap& m)
{
    Array out({m.height(), m.width()});
    std::copy(m.values().begin(), m.values().end(), out.mutable_data());
    return out;
}

BoolArray from_mask(const Mask& m)
{
    BoolArray out({m.height, m.width});
    std::copy(m.values.begin(), m.values.end(), out.mutable_data());
    return out;
}

// Descriptor grid (GH, GW, C).
FeatureMap to_features(const FloatArray& a, int stride, float scale)
{
    if (a.ndim() != 3)
        throw InvalidArgument("feature map must have shape (GH, GW, C)");
    FeatureMap fm(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)), static_cast<int>(a.shape(2)), stride,
                  scale);
    std::copy(a.data(), a.data() + a.size(), fm.data.begin());
    return fm;
}

py::dict from_features(const FeatureMap& fm)
{
    FloatArray data({fm.grid_h, fm.grid_w, fm.channels});
    std::copy(fm.data.begin(), fm.data.end(), data.mutable_data());
    py::dict d;
    d["data"] = data;
    d["stride"] = fm.stride;
    d["scale_factor"] = fm.scale_factor;
    return d;
}

Array from_matrix(const Eigen::Matrix3d& m)
{
    Array out({3, 3});
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c)
            out.mutable_at(r, c) = m(r, c);
    return out;
}

Eigen::Matrix3d to_matrix(const Array& a)
{
    if (a.ndim() != 2 || a.shape(0) != 3 || a.shape(1) != 3)
        throw InvalidArgument("homography must have shape (3, 3)");
    Eigen::Matrix3d m;
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c)
            m(r, c) = a.at(r, c);
    return m;
}

pipeline::PipelineConfig make_config(const std::map<std::string, py::object>& settings)
{
    pipeline::PipelineConfig cfg;
    for (const auto& [key, value] : settings)
        pipeline::set_value(cfg, key, py::str(value).cast<std::string>());
    cfg.validate();
    return cfg;
}

fineflow::ObjectiveConfig objective(double lambda_match, double mu_cycle, bool grayscale)
{
    fineflow::ObjectiveConfig cfg;
    cfg.lambda_match = lambda_match;
    cfg.mu_cycle = mu_cycle;
    cfg.grayscale_ssim = grayscale;
    cfg.validate();
    return cfg;
}

eval::MissingPolicy missing_policy(const std::string& s)
{
    if (s == "zero_flow")
        return eval::MissingPolicy::zero_flow;
    if (s == "exclude")
        return eval::MissingPolicy::exclude;
    throw InvalidArgument("missing must be 'zero_flow' or 'exclude'");
}

std::vector<Correspondence> to_correspondences(const Array& src, const Array& tgt)
{
    if (src.ndim() != 2 || src.shape(1) != 2 || tgt.ndim() != 2 || tgt.shape(1) != 2 || src.shape(0) != tgt.shape(0))
        throw InvalidArgument("point arrays must both have shape (N, 2)");
    std::vector<Correspondence> c(static_cast<std::size_t>(src.shape(0)));
    for (std::size_t i = 0; i < c.size(); ++i)
        c[i] = {{src.at(i, 0), src.at(i, 1)}, {tgt.at(i, 0), tgt.at(i, 1)}, 1.0};
    return c;
}

}  // namespace

PYBIND11_MODULE(_core, m)
{
    m.doc() = "Multi-homography coarse alignment with per-pair fine flow.";

    // Translators run newest first, so the base class goes in first.
    const auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
    py::register_exception<InvalidArgument>(m, "InvalidArgument", base);
    py::register_exception<FormatError>(m, "FormatError", base);
    py::register_exception<DegenerateError>(m, "DegenerateError", base);

    m.def(
        "default_config", [] { return pipeline::to_text(pipeline::PipelineConfig{}); },
        "Canonical `key = value` text of the shipped defaults.");
    m.def(
        "config_text", [](const std::map<std::string, py::object>& s) { return pipeline::to_text(make_config(s)); },
        py::arg("settings") = std::map<std::string, py::object>{});
    m.def(
        "config_hash", [](const std::map<std::string, py::object>& s) { return pipeline::config_hash(make_config(s)); },
        py::arg("settings") = std::map<std::string, py::object>{});

    m.def(
        "align",
        [](const Array& src, const Array& tgt, const std::map<std::string, py::object>& settings) {
            const pipeline::PipelineConfig cfg = make_config(settings);
            pipeline::AlignResult r;
            {
                const Image s = to_image(src), t = to_image(tgt);
                py::gil_scoped_release release;
                r = pipeline::align(s, t, cfg);
            }
            py::dict out;
            const py::tuple flow = from_flow(r.aggregate.flow);
            out["flow"] = flow[0];
            out["valid"] = flow[1];
            out["matchability"] = from_map(r.aggregate.matchability);
            py::list hs, inliers;
            for (const auto& model : r.models) {
                hs.append(from_matrix(model.h.matrix()));
                inliers.append(model.inliers.size());
            }
            out["homographies"] = hs;
            out["inlier_counts"] = inliers;
            out["match_count"] = r.matches.size();
            out["working_source"] = from_image(r.src);
            out["working_target"] = from_image(r.tgt);
            return out;
        },
        py::arg("src"), py::arg("tgt"), py::arg("settings") = std::map<std::string, py::object>{},
        "Full pipeline. Returns the aggregated flow (target grid, source sample locations), its validity, the "
        "aggregated matchability, and the homographies (source to target).");

    m.def(
        "correlation_volume",
        [](const FloatArray& src, const FloatArray& tgt, int radius) {
            const auto v = fineflow::correlation_volume(to_features(src, 8, 1.0f), to_features(tgt, 8, 1.0f), radius);
            const py::ssize_t side = 2 * radius + 1;
            Array out({static_cast<py::ssize_t>(v.grid_h), static_cast<py::ssize_t>(v.grid_w), side, side});
            std::copy(v.values.begin(), v.values.end(), out.mutable_data());
            return out;
        },
        py::arg("src"), py::arg("tgt"), py::arg("radius") = 3,
        "Cosine similarities of shape (GH, GW, 2K+1, 2K+1); entry [j, i, n+K, m+K] compares src cell (i, j) with tgt "
        "cell (i-m, j-n), -1 where that cell is missing or invalid.");

    m.def(
        "ssim_map",
        [](const Array& a, const Array& b, int window, double sigma, double c1, double c2) {
            fineflow::ObjectiveConfig cfg;
            cfg.ssim_window = window;
            cfg.ssim_sigma = sigma;
            cfg.ssim_c1 = c1;
            cfg.ssim_c2 = c2;
            cfg.validate();
            return from_map(fineflow::ssim_map(to_image(a), to_image(b), cfg));
        },
        py::arg("a"), py::arg("b"), py::arg("window") = 11, py::arg("sigma") = 1.5, py::arg("c1") = 1e-4,
        py::arg("c2") = 9e-4);

    m.def(
        "total_loss",
        [](const Array& src, const Array& tgt, const Array& flow_st, const Array& flow_ts, const Array& m_st,
           const Array& m_ts, double lambda_match, double mu_cycle, bool grayscale,
           const std::optional<BoolArray>& valid_st, const std::optional<BoolArray>& valid_ts) {
            const auto l = fineflow::total_loss(to_image(src), to_image(tgt), to_flow(flow_st, valid_st),
                                                to_flow(flow_ts, valid_ts), to_map(m_st), to_map(m_ts),
                                                objective(lambda_match, mu_cycle, grayscale));
            py::dict d;
            d["ssim"] = l.ssim;
            d["match"] = l.match;
            d["cycle"] = l.cycle;
            d["total"] = l.total;
            d["valid_pixels"] = l.valid_pixels;
            return d;
        },
        py::arg("src"), py::arg("tgt"), py::arg("flow_st"), py::arg("flow_ts"), py::arg("m_st"), py::arg("m_ts"),
        py::arg("lambda_match") = 0.01, py::arg("mu_cycle") = 1.0, py::arg("grayscale") = true,
        py::arg("valid_st") = py::none(), py::arg("valid_ts") = py::none());

    m.def(
        "refine",
        [](const Array& src, const Array& tgt, const std::map<std::string, py::object>& settings) {
            const pipeline::PipelineConfig cfg = make_config(settings);
            fineflow::FineFlowResult r;
            {
                const Image s = to_image(src), t = to_image(tgt);
                py::gil_scoped_release release;
                r = pipeline::refine_pair(s, t, cfg);
            }
            py::dict d;
            d["flow_st"] = from_flow(r.flow_st)[0];
            d["flow_ts"] = from_flow(r.flow_ts)[0];
            d["m_st"] = from_map(r.m_st);
            d["m_ts"] = from_map(r.m_ts);
            d["trace"] = fineflow::trace_csv(r.trace);
            return d;
        },
        py::arg("src"), py::arg("tgt"), py::arg("settings") = std::map<std::string, py::object>{},
        "Fine stage on an already coarsely aligned, equal-size pair.");

    m.def(
        "ransac_homography",
        [](const Array& src_pts, const Array& tgt_pts, double threshold, std::uint64_t seed) -> py::object {
            robust::RansacConfig cfg;
            cfg.inlier_threshold = threshold;
            cfg.seed = seed;
            cfg.validate();
            const auto model = robust::ransac_homography(to_correspondences(src_pts, tgt_pts), cfg);
            if (!model)
                return py::none();
            return py::make_tuple(from_matrix(model->h.matrix()), model->inliers);
        },
        py::arg("src_pts"), py::arg("tgt_pts"), py::arg("threshold") = 3.0, py::arg("seed") = 0,
        "Returns (H, inlier_indices) with H mapping source to target, or None.");

    m.def(
        "warp_by_homography",
        [](const Array& img, const Array& h, int width, int height, bool clamp_border) {
            const Warped w =
                robust::warp_by_homography(to_image(img), Homography(to_matrix(h)), width, height, clamp_border);
            return py::make_tuple(from_image(w.image), from_mask(w.valid));
        },
        py::arg("img"), py::arg("h"), py::arg("width"), py::arg("height"), py::arg("clamp_border") = false);

    m.def(
        "aee",
        [](const Array& pred, const Array& gt, const std::optional<BoolArray>& pred_valid,
           const std::optional<BoolArray>& gt_valid, const std::string& missing) {
            return eval::aee(to_flow(pred, pred_valid), to_flow(gt, gt_valid), {}, missing_policy(missing));
        },
        py::arg("pred"), py::arg("gt"), py::arg("pred_valid") = py::none(), py::arg("gt_valid") = py::none(),
        py::arg("missing") = "zero_flow");
    m.def(
        "fl_all",
        [](const Array& pred, const Array& gt, const std::optional<BoolArray>& pred_valid,
           const std::optional<BoolArray>& gt_valid, const std::string& missing) {
            return eval::fl_all(to_flow(pred, pred_valid), to_flow(gt, gt_valid), {}, missing_policy(missing));
        },
        py::arg("pred"), py::arg("gt"), py::arg("pred_valid") = py::none(), py::arg("gt_valid") = py::none(),
        py::arg("missing") = "zero_flow");

    m.def("read_image", [](const std::string& path) { return from_image(io::read_image(path)); });
    m.def("write_png", [](const Array& img, const std::string& path) { io::write_png(to_image(img), path); });
    m.def("read_flo", [](const std::string& path) { return from_flow(io::read_flo(path)); },
          "Returns (locations, valid).");
    m.def(
        "write_flo",
        [](const Array& loc, const std::string& path, const std::optional<BoolArray>& valid) {
            io::write_flo(to_flow(loc, valid), path);
        },
        py::arg("flow"), py::arg("path"), py::arg("valid") = py::none());
    m.def("read_features", [](const std::string& path) { return from_features(io::read_featmap(path)); },
          "Reads an RFKFEAT1 file into {'data', 'stride', 'scale_factor'}.");
    m.def(
        "write_features",
        [](const FloatArray& data, const std::string& path, int stride, float scale_factor) {
            io::write_featmap(to_features(data, stride, scale_factor), path);
        },
        py::arg("data"), py::arg("path"), py::arg("stride") = 8, py::arg("scale_factor") = 1.0f);
    m.def(
        "dense_descriptors",
        [](const Array& img, double scale) { return from_features(features::extract_dense_descriptors(to_image(img), scale)); },
        py::arg("img"), py::arg("scale") = 1.0);
}
