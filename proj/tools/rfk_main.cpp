// rfk: command-line driver for alignment, metric suites, sweeps and apps.
#include "rfk/compose.hpp"
#include "rfk/eval.hpp"
#include "rfk/io.hpp"
#include "rfk/pipeline.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace rfk;

namespace {

constexpr const char* kVersion = "0.1.0";

enum Exit { kOk = 0, kInput = 2, kNoModel = 3, kInternal = 4 };

/// Thrown for conditions that map directly to an exit code.
struct ExitError : std::runtime_error {
    int code;
    ExitError(int c, const std::string& msg) : std::runtime_error(msg), code(c) {}
};

std::string num(double v)
{
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

std::string pad2(std::size_t i)
{
    char buf[16];
    std::snprintf(buf, sizeof buf, "%02zu", i);
    return buf;
}

Image load_image(const fs::path& p)
{
    if (!fs::exists(p))
        throw ExitError(kInput, "input not found: " + p.string());
    try {
        return io::read_image(p);
    } catch (const Error& e) {
        throw ExitError(kInput, "cannot read image " + p.string() + ": " + e.what());
    }
}

/// Runs fn(i) for i in [0, n) on up to `jobs` threads. The first exception
/// (lowest index) is rethrown after all workers finish.
template <class Fn>
void parallel_for(std::size_t n, int jobs, Fn fn)
{
    std::vector<std::exception_ptr> errors(n);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < n; i = next++) {
            try {
                fn(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const auto count = static_cast<std::size_t>(std::max(1, jobs));
    std::vector<std::thread> threads;
    for (std::size_t t = 1; t < std::min(count, n); ++t)
        threads.emplace_back(worker);
    worker();
    for (auto& t : threads)
        t.join();
    for (auto& e : errors)
        if (e)
            std::rethrow_exception(e);
}

std::vector<std::string> read_list(const fs::path& p)
{
    std::ifstream in(p);
    if (!in)
        throw ExitError(kInput, "cannot read list file " + p.string());
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        if (const auto h = line.find('#'); h != std::string::npos)
            line.erase(h);
        const auto a = line.find_first_not_of(" \t\r");
        if (a == std::string::npos)
            continue;
        const auto b = line.find_last_not_of(" \t\r");
        out.push_back(line.substr(a, b - a + 1));
    }
    return out;
}

std::vector<std::string> split_ws(const std::string& s)
{
    std::istringstream in(s);
    std::vector<std::string> out;
    std::string tok;
    while (in >> tok)
        out.push_back(tok);
    return out;
}

/// Shared configuration flags: -c, --seed, --set.
struct ConfigFlags {
    std::string path;
    std::int64_t seed = -1;
    std::vector<std::string> overrides;

    void add(CLI::App* cmd)
    {
        cmd->add_option("-c,--config", path, "key = value configuration file");
        cmd->add_option("--seed", seed, "random seed (overrides the config)");
        cmd->add_option("--set", overrides, "override one config entry, key=value");
    }

    pipeline::PipelineConfig resolve() const
    {
        try {
            pipeline::PipelineConfig cfg;
            if (!path.empty()) {
                if (!fs::exists(path))
                    throw ExitError(kInput, "config not found: " + path);
                cfg = pipeline::load_config(path);
            }
            for (const auto& kv : overrides) {
                const auto eq = kv.find('=');
                if (eq == std::string::npos)
                    throw InvalidArgument("--set expects key=value, got '" + kv + "'");
                pipeline::set_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
            }
            if (seed >= 0)
                cfg.seed = static_cast<std::uint64_t>(seed);
            cfg.validate();
            return cfg;
        } catch (const InvalidArgument& e) {
            throw ExitError(kInput, e.what());
        }
    }
};

json config_json(const pipeline::PipelineConfig& cfg)
{
    json j = json::object();
    std::istringstream in(pipeline::to_text(cfg));
    std::string line;
    while (std::getline(in, line)) {
        const auto eq = line.find(" = ");
        j[line.substr(0, eq)] = line.substr(eq + 3);
    }
    return j;
}

pipeline::ExternalFeatures load_external(const fs::path& dir, const fs::path& src_path, const Image& src,
                                         const fs::path& tgt_path, const Image& tgt)
{
    pipeline::ExternalFeatures ext;
    try {
        ext.src = pipeline::load_feature_dir(dir, src_path.stem().string());
        ext.tgt = pipeline::load_feature_dir(dir, tgt_path.stem().string());
    } catch (const Error& e) {
        throw ExitError(kInput, e.what());
    }
    ext.src_native = {src.width(), src.height()};
    ext.tgt_native = {tgt.width(), tgt.height()};
    return ext;
}

// ---------------------------------------------------------------------------
// align

struct AlignArgs {
    std::string src, tgt, out_dir, features_dir;
    int jobs = 1;
    bool self_check = false;
    ConfigFlags config;
};

int cmd_align(const AlignArgs& a)
{
    pipeline::PipelineConfig cfg = a.config.resolve();
    const Image src = load_image(a.src);
    const Image tgt = load_image(a.tgt);
    std::optional<pipeline::ExternalFeatures> ext;
    if (!a.features_dir.empty()) {
        ext = load_external(a.features_dir, a.src, src, a.tgt, tgt);
        cfg.match.descriptor_source = features::DescriptorSource::file;
    }

    const fs::path out = a.out_dir;
    fs::create_directories(out);
    const pipeline::AlignResult r = pipeline::align(src, tgt, cfg, ext ? &*ext : nullptr);

    io::write_correspondences(r.matches, out / "matches.txt");
    json manifest;
    manifest["tool"] = "rfk";
    manifest["version"] = kVersion;
    manifest["command"] = "align";
    manifest["inputs"] = {{"source", fs::path(a.src).filename().string()},
                          {"target", fs::path(a.tgt).filename().string()},
                          {"source_size", {src.width(), src.height()}},
                          {"target_size", {tgt.width(), tgt.height()}},
                          {"features", ext ? "file" : "builtin"}};
    manifest["working_size"] = {{"source", {r.src.width(), r.src.height()}},
                                {"target", {r.tgt.width(), r.tgt.height()}}};
    manifest["seed"] = cfg.seed;
    manifest["config_hash"] = pipeline::config_hash(cfg);
    manifest["config"] = config_json(cfg);
    manifest["matches"] = r.matches.size();

    json homs = json::array();
    for (std::size_t i = 0; i < r.models.size(); ++i)
        homs.push_back({{"index", i}, {"inliers", r.models[i].inliers.size()}});
    manifest["homographies"] = homs;

    json files = json::array({"matches.txt"});
    if (r.models.empty()) {
        manifest["status"] = "no_model";
        manifest["files"] = files;
        io::write_text_atomic(out / "manifest.json", manifest.dump(2) + "\n");
        throw ExitError(kNoModel, "no homography found among " + std::to_string(r.matches.size()) +
                                      " matches; fine stage skipped");
    }

    for (std::size_t i = 0; i < r.models.size(); ++i) {
        io::write_homography(r.models[i].h, out / ("homography_" + pad2(i) + ".txt"));
        io::write_text_atomic(out / ("trace_" + pad2(i) + ".csv"), fineflow::trace_csv(r.fine[i].trace));
        files.push_back("homography_" + pad2(i) + ".txt");
        files.push_back("trace_" + pad2(i) + ".csv");
    }
    io::write_flo(r.aggregate.flow, out / "flow.flo");
    io::write_matchability_png(r.aggregate.matchability, out / "matchability.png");
    const Warped warped = compose::warp_with_flow(r.src, r.aggregate.flow);
    io::write_png(warped.image, out / "warped_source.png");
    io::write_png(compose::overlay(warped, r.tgt), out / "overlay.png");
    for (const char* f : {"flow.flo", "matchability.png", "warped_source.png", "overlay.png"})
        files.push_back(f);

    std::size_t claimed = 0;
    for (int o : r.aggregate.owner)
        claimed += o >= 0;
    manifest["status"] = "ok";
    manifest["coverage"] = num(static_cast<double>(claimed) / std::max<std::size_t>(1, r.aggregate.owner.size()));
    manifest["files"] = files;
    io::write_text_atomic(out / "manifest.json", manifest.dump(2) + "\n");
    pipeline::log(1, "wrote " + out.string());

    if (a.self_check) {
        const pipeline::AlignResult self = pipeline::align(src, src, cfg);
        if (self.models.empty())
            throw ExitError(kInternal, "self-check: no homography for the source aligned with itself");
        const FlowField zero = FlowField::identity(self.tgt.width(), self.tgt.height());
        const double e = eval::aee(self.aggregate.flow, zero, {}, cfg.missing);
        std::cout << "self-check AEE vs zero flow: " << num(e) << " px\n";
        if (!(e < 0.1))
            throw ExitError(kInternal, "self-check failed: AEE " + num(e) + " >= 0.1 px");
    }
    return kOk;
}

// ---------------------------------------------------------------------------
// eval-flow

struct EvalFlowArgs {
    std::string pred_dir, gt_dir, list, out;
    std::string missing = "zero_flow";
    int jobs = 1;
};

int cmd_eval_flow(const EvalFlowArgs& a)
{
    const auto names = read_list(a.list);
    if (names.empty())
        throw ExitError(kInput, "empty pair list: " + a.list);
    eval::MissingPolicy policy;
    if (a.missing == "zero_flow")
        policy = eval::MissingPolicy::zero_flow;
    else if (a.missing == "exclude")
        policy = eval::MissingPolicy::exclude;
    else
        throw ExitError(kInput, "--missing expects zero_flow|exclude");

    std::vector<std::string> rows(names.size());
    std::vector<char> failed(names.size(), 0);
    parallel_for(names.size(), a.jobs, [&](std::size_t i) {
        const std::string& n = names[i];
        const fs::path pred = fs::path(a.pred_dir) / (n + ".flo");
        const fs::path gt = fs::path(a.gt_dir) / (n + ".flo");
        const fs::path corr = fs::path(a.gt_dir) / (n + ".corr.txt");
        try {
            for (const auto& p : {pred, gt})
                if (!fs::exists(p))
                    throw InvalidArgument("missing " + p.string());
            const FlowField fp = io::read_flo(pred);
            const FlowField fg = io::read_flo(gt);
            if (fp.width() != fg.width() || fp.height() != fg.height())
                throw InvalidArgument("size mismatch between prediction and ground truth");
            std::string row = n + "," + num(eval::aee(fp, fg, {}, policy)) + "," + num(eval::fl_all(fp, fg, {}, policy));
            if (fs::exists(corr)) {
                const auto cs = io::read_correspondences(corr);
                for (double d : {1.0, 3.0, 5.0})
                    row += "," + num(eval::sparse_accuracy(fp, cs, d));
            } else {
                row += ",,,";
            }
            rows[i] = row + ",";
        } catch (const std::exception& e) {
            std::string msg = e.what();
            std::replace(msg.begin(), msg.end(), ',', ';');
            rows[i] = n + ",,,,,," + msg;
            failed[i] = 1;
        }
    });

    std::string csv = "pair,aee,fl_all_pct,acc_1px_pct,acc_3px_pct,acc_5px_pct,error\n";
    for (const auto& r : rows)
        csv += r + "\n";
    if (a.out.empty())
        std::cout << csv;
    else
        io::write_text_atomic(a.out, csv);
    const bool any_failed = std::any_of(failed.begin(), failed.end(), [](char f) { return f != 0; });
    return any_failed ? kInput : kOk;
}

// ---------------------------------------------------------------------------
// eval-pose

struct EvalPoseArgs {
    std::string flow_dir, calib_dir, pose_dir, list, out;
    ConfigFlags config;
    int jobs = 1;
};

std::pair<eval::CameraIntrinsics, eval::CameraIntrinsics> read_calib(const fs::path& p)
{
    std::ifstream in(p);
    if (!in)
        throw InvalidArgument("missing " + p.string());
    std::array<eval::CameraIntrinsics, 2> k;
    for (auto& c : k)
        if (!(in >> c.fx >> c.fy >> c.cx >> c.cy))
            throw FormatError("calibration needs two lines 'fx fy cx cy': " + p.string());
    k[0].validate();
    k[1].validate();
    return {k[0], k[1]};
}

eval::RelativePose read_pose(const fs::path& p)
{
    std::ifstream in(p);
    if (!in)
        throw InvalidArgument("missing " + p.string());
    eval::RelativePose pose;
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c)
            if (!(in >> pose.rotation(r, c)))
                throw FormatError("pose needs three rows 'r r r t': " + p.string());
        if (!(in >> pose.translation(r)))
            throw FormatError("pose needs three rows 'r r r t': " + p.string());
    }
    if (pose.translation.norm() == 0.0)
        throw FormatError("pose translation is zero: " + p.string());
    pose.translation.normalize();
    return pose;
}

int cmd_eval_pose(const EvalPoseArgs& a)
{
    const pipeline::PipelineConfig cfg = a.config.resolve();
    std::vector<std::string> names;
    if (!a.list.empty()) {
        names = read_list(a.list);
    } else if (fs::is_directory(a.flow_dir)) {
        for (const auto& e : fs::directory_iterator(a.flow_dir))
            if (e.path().extension() == ".flo")
                names.push_back(e.path().stem().string());
        std::sort(names.begin(), names.end());
    } else {
        throw ExitError(kInput, "flow directory not found: " + a.flow_dir);
    }
    if (names.empty())
        throw ExitError(kInput, "no pairs to evaluate");

    eval::EssentialConfig ecfg = cfg.essential;
    ecfg.ransac.seed = cfg.seed;

    std::vector<eval::AngularError> errors(names.size());
    std::vector<std::string> status(names.size(), "ok");
    std::vector<char> input_error(names.size(), 0);
    parallel_for(names.size(), a.jobs, [&](std::size_t i) {
        const std::string& n = names[i];
        try {
            const fs::path flo = fs::path(a.flow_dir) / (n + ".flo");
            if (!fs::exists(flo))
                throw InvalidArgument("missing " + flo.string());
            const FlowField flow = io::read_flo(flo);
            const fs::path mpath = fs::path(a.flow_dir) / (n + ".matchability.png");
            const MatchabilityMap m = fs::exists(mpath) ? io::read_matchability_png(mpath)
                                                        : MatchabilityMap(flow.width(), flow.height(), 1.0);
            const auto [ks, kt] = read_calib(fs::path(a.calib_dir) / (n + ".txt"));
            const eval::RelativePose gt = read_pose(fs::path(a.pose_dir) / (n + ".txt"));
            const auto model = eval::essential_from_flow(flow, m, ks, kt, ecfg);
            if (!model)
                throw DegenerateError("no essential matrix");
            std::vector<eval::NormalizedPair> inl;
            for (std::size_t k : model->inliers)
                inl.push_back(model->points[k]);
            errors[i] = eval::pose_angular_error(eval::decompose_essential(model->e, inl), gt);
        } catch (const DegenerateError& e) {
            errors[i] = {180.0, 180.0};
            status[i] = std::string("failed: ") + e.what();
        } catch (const std::exception& e) {
            errors[i] = {180.0, 180.0};
            status[i] = std::string("error: ") + e.what();
            input_error[i] = 1;
        }
    });

    const std::vector<double> thresholds{5.0, 10.0, 20.0};
    const auto map = eval::pose_map(errors, thresholds);
    std::string csv = "pair,rotation_deg,translation_deg,status\n";
    for (std::size_t i = 0; i < names.size(); ++i) {
        std::string s = status[i];
        std::replace(s.begin(), s.end(), ',', ';');
        csv += names[i] + "," + num(errors[i].rotation_deg) + "," + num(errors[i].translation_deg) + "," + s + "\n";
    }
    csv += "# fraction of pairs with both errors <= threshold\n";
    csv += "map_at_5deg_pct,map_at_10deg_pct,map_at_20deg_pct\n";
    csv += num(map[0]) + "," + num(map[1]) + "," + num(map[2]) + "\n";
    if (a.out.empty())
        std::cout << csv;
    else
        io::write_text_atomic(a.out, csv);
    return std::any_of(input_error.begin(), input_error.end(), [](char f) { return f != 0; }) ? kInput : kOk;
}

// ---------------------------------------------------------------------------
// sweep

struct SweepArgs {
    std::string pairs, out;
    std::vector<double> lambdas{0.02, 0.01, 0.005};
    std::vector<double> mus{2.0, 1.0, 0.5};
    ConfigFlags config;
    int jobs = 1;
};

struct PairSpec {
    fs::path src, tgt, gt;
};

struct PairMetrics {
    double coverage = 0.0;
    double objective = 0.0;
    std::optional<double> aee, fl_all;
};

PairMetrics align_metrics(const pipeline::AlignResult& r, const FlowField* gt, eval::MissingPolicy policy)
{
    PairMetrics m;
    if (r.models.empty())
        return m;
    std::size_t claimed = 0;
    for (int o : r.aggregate.owner)
        claimed += o >= 0;
    m.coverage = static_cast<double>(claimed) / r.aggregate.owner.size();
    for (const auto& f : r.fine)
        if (!f.trace.empty())
            m.objective += f.trace.back().total;
    if (gt) {
        FlowField pred = r.aggregate.flow;
        if (gt->width() != pred.width() || gt->height() != pred.height())
            throw InvalidArgument("ground-truth flow does not match the working resolution");
        m.aee = eval::aee(pred, *gt, {}, policy);
        m.fl_all = eval::fl_all(pred, *gt, {}, policy);
    }
    return m;
}

int cmd_sweep(const SweepArgs& a)
{
    const pipeline::PipelineConfig base = a.config.resolve();
    std::vector<PairSpec> pairs;
    for (const auto& line : read_list(a.pairs)) {
        const auto tok = split_ws(line);
        if (tok.size() < 2 || tok.size() > 3)
            throw ExitError(kInput, "pair list lines are 'source target [gt.flo]': " + line);
        const fs::path dir = fs::path(a.pairs).parent_path();
        auto resolve = [&](const std::string& s) { return fs::path(s).is_absolute() ? fs::path(s) : dir / s; };
        pairs.push_back({resolve(tok[0]), resolve(tok[1]), tok.size() == 3 ? resolve(tok[2]) : fs::path()});
    }
    if (pairs.empty())
        throw ExitError(kInput, "empty pair list: " + a.pairs);
    if (a.lambdas.empty() || a.mus.empty())
        throw ExitError(kInput, "empty sweep grid");

    std::vector<Image> srcs, tgts;
    std::vector<std::optional<FlowField>> gts;
    for (const auto& p : pairs) {
        srcs.push_back(load_image(p.src));
        tgts.push_back(load_image(p.tgt));
        if (!p.gt.empty()) {
            if (!fs::exists(p.gt))
                throw ExitError(kInput, "input not found: " + p.gt.string());
            gts.push_back(io::read_flo(p.gt));
        } else {
            gts.emplace_back();
        }
    }

    const std::size_t points = a.lambdas.size() * a.mus.size();
    std::vector<PairMetrics> results(points * pairs.size());
    parallel_for(results.size(), a.jobs, [&](std::size_t k) {
        const std::size_t g = k / pairs.size(), p = k % pairs.size();
        pipeline::PipelineConfig cfg = base;
        cfg.objective.lambda_match = a.lambdas[g / a.mus.size()];
        cfg.objective.mu_cycle = a.mus[g % a.mus.size()];
        const auto r = pipeline::align(srcs[p], tgts[p], cfg);
        results[k] = align_metrics(r, gts[p] ? &*gts[p] : nullptr, cfg.missing);
    });

    std::string csv = "lambda,mu,pairs,mean_coverage,mean_objective,mean_aee,mean_fl_all_pct\n";
    for (std::size_t g = 0; g < points; ++g) {
        double cov = 0, obj = 0, aee = 0, fl = 0;
        std::size_t with_gt = 0;
        for (std::size_t p = 0; p < pairs.size(); ++p) {
            const auto& m = results[g * pairs.size() + p];
            cov += m.coverage;
            obj += m.objective;
            if (m.aee) {
                aee += *m.aee;
                fl += *m.fl_all;
                ++with_gt;
            }
        }
        const double n = static_cast<double>(pairs.size());
        csv += num(a.lambdas[g / a.mus.size()]) + "," + num(a.mus[g % a.mus.size()]) + "," +
               std::to_string(pairs.size()) + "," + num(cov / n) + "," + num(obj / n) + "," +
               (with_gt ? num(aee / with_gt) : "") + "," + (with_gt ? num(fl / with_gt) : "") + "\n";
    }
    if (a.out.empty())
        std::cout << csv;
    else
        io::write_text_atomic(a.out, csv);
    return kOk;
}

// ---------------------------------------------------------------------------
// apps

struct AppsArgs {
    std::string mode, target, out, region;
    std::vector<std::string> sources;
    double threshold = 0.5;
    ConfigFlags config;
    int jobs = 1;
};

int cmd_apps(const AppsArgs& a)
{
    const pipeline::PipelineConfig cfg = a.config.resolve();
    if (a.mode != "average" && a.mode != "texture")
        throw ExitError(kInput, "apps mode must be average or texture");
    if (a.mode == "average" && a.sources.empty())
        throw ExitError(kInput, "average needs at least 2 images (a target and one or more sources)");
    if (a.mode == "texture" && a.sources.size() != 1)
        throw ExitError(kInput, "texture needs exactly one source image");

    const Image tgt = load_image(a.target);
    std::vector<Image> srcs;
    for (const auto& s : a.sources)
        srcs.push_back(load_image(s));
    const Image tgt_w = cfg.resize_min_side > 0 ? resize_min_side(tgt, cfg.resize_min_side) : tgt;

    std::vector<pipeline::AlignResult> results(srcs.size());
    parallel_for(srcs.size(), a.jobs, [&](std::size_t i) { results[i] = pipeline::align(srcs[i], tgt, cfg); });
    for (std::size_t i = 0; i < results.size(); ++i)
        if (results[i].models.empty())
            throw ExitError(kNoModel, "no homography found for " + a.sources[i]);

    Image out;
    if (a.mode == "average") {
        std::vector<Warped> layers;
        layers.push_back({tgt_w, Mask(tgt_w.width(), tgt_w.height(), true)});
        for (const auto& r : results)
            layers.push_back(compose::warp_with_flow(r.src, r.aggregate.flow));
        out = compose::average_aligned(layers);
    } else {
        const auto& r = results[0];
        MatchabilityMap region = r.aggregate.matchability;
        if (!a.region.empty()) {
            if (!fs::exists(a.region))
                throw ExitError(kInput, "input not found: " + a.region);
            Mask mask = io::read_mask_png(a.region);
            if (mask.width != region.width() || mask.height != region.height())
                throw ExitError(kInput, "region mask must match the working target size " +
                                            std::to_string(region.width()) + "x" + std::to_string(region.height()));
            compose::apply_exclusion(region, [&] {
                Mask inv = mask;
                for (auto& v : inv.values)
                    v = v ? 0 : 1;
                return inv;
            }());
        }
        out = compose::texture_transfer(r.src, tgt_w, r.aggregate.flow, region, a.threshold);
    }
    io::write_image(out, a.out);
    return kOk;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"rfk: two-stage dense image alignment (homographies + optimized fine flow)"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);

    AlignArgs align;
    auto* c_align = app.add_subcommand("align", "align a source image to a target image");
    c_align->add_option("source", align.src, "source image")->required();
    c_align->add_option("target", align.tgt, "target image")->required();
    c_align->add_option("-o,--out", align.out_dir, "output directory")->required();
    c_align->add_option("--jobs", align.jobs, "worker threads (batch commands)")->check(CLI::PositiveNumber);
    c_align->add_option("--features-dir", align.features_dir, "directory of RFKFEAT1 files (<stem>_*.rfkfeat)");
    c_align->add_flag("--self-check", align.self_check, "also align the source with itself and report AEE");
    align.config.add(c_align);

    EvalFlowArgs ef;
    auto* c_ef = app.add_subcommand("eval-flow", "AEE / Fl-all / sparse accuracy over a pair list");
    c_ef->add_option("pred_dir", ef.pred_dir)->required();
    c_ef->add_option("gt_dir", ef.gt_dir)->required();
    c_ef->add_option("list", ef.list, "pair names, one per line")->required();
    c_ef->add_option("-o,--out", ef.out, "CSV output (stdout when omitted)");
    c_ef->add_option("--missing", ef.missing, "invalid-prediction policy: zero_flow|exclude");
    c_ef->add_option("--jobs", ef.jobs)->check(CLI::PositiveNumber);

    EvalPoseArgs ep;
    auto* c_ep = app.add_subcommand("eval-pose", "relative pose mAP @5/10/20 degrees from predicted flows");
    c_ep->add_option("flow_dir", ep.flow_dir)->required();
    c_ep->add_option("calib_dir", ep.calib_dir)->required();
    c_ep->add_option("pose_dir", ep.pose_dir)->required();
    c_ep->add_option("--list", ep.list, "pair names (default: every .flo in flow_dir)");
    c_ep->add_option("-o,--out", ep.out, "CSV output (stdout when omitted)");
    c_ep->add_option("--jobs", ep.jobs)->check(CLI::PositiveNumber);
    ep.config.add(c_ep);

    SweepArgs sw;
    auto* c_sw = app.add_subcommand("sweep", "rerun alignment over a lambda x mu grid");
    c_sw->add_option("pairs", sw.pairs, "lines 'source target [gt.flo]'")->required();
    c_sw->add_option("-o,--out", sw.out, "CSV output (stdout when omitted)");
    c_sw->add_option("--lambdas", sw.lambdas)->delimiter(',');
    c_sw->add_option("--mus", sw.mus)->delimiter(',');
    c_sw->add_option("--jobs", sw.jobs)->check(CLI::PositiveNumber);
    sw.config.add(c_sw);

    AppsArgs ap;
    auto* c_ap = app.add_subcommand("apps", "average or texture-transfer images aligned to one target");
    c_ap->add_option("mode", ap.mode, "average|texture")->required();
    c_ap->add_option("target", ap.target)->required();
    c_ap->add_option("sources", ap.sources);
    c_ap->add_option("-o,--out", ap.out, "output image")->required();
    c_ap->add_option("--region", ap.region, "texture: binary mask on the working target grid");
    c_ap->add_option("--threshold", ap.threshold, "texture: matchability threshold");
    c_ap->add_option("--jobs", ap.jobs)->check(CLI::PositiveNumber);
    ap.config.add(c_ap);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kInput;
    }

    try {
        if (c_align->parsed())
            return cmd_align(align);
        if (c_ef->parsed())
            return cmd_eval_flow(ef);
        if (c_ep->parsed())
            return cmd_eval_pose(ep);
        if (c_sw->parsed())
            return cmd_sweep(sw);
        if (c_ap->parsed())
            return cmd_apps(ap);
    } catch (const ExitError& e) {
        std::cerr << "rfk: " << e.what() << '\n';
        return e.code;
    } catch (const InvalidArgument& e) {
        std::cerr << "rfk: " << e.what() << '\n';
        return kInput;
    } catch (const FormatError& e) {
        std::cerr << "rfk: " << e.what() << '\n';
        return kInput;
    } catch (const std::exception& e) {
        std::cerr << "rfk: internal error: " << e.what() << '\n';
        return kInternal;
    }
    return kInternal;
}
