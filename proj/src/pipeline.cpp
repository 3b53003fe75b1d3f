#include "rfk/pipeline.hpp"

#include "rfk/io.hpp"

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <limits>
#include <mutex>
#include <sstream>

namespace rfk::pipeline {

namespace {

std::string trim(const std::string& s)
{
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string::npos)
        return {};
    const auto last = s.find_last_not_of(" \t\r\n");
    return s.substr(first, last - first + 1);
}

double parse_double(const std::string& key, const std::string& v)
{
    errno = 0;
    char* end = nullptr;
    const double d = std::strtod(v.c_str(), &end);
    if (v.empty() || end != v.c_str() + v.size() || errno == ERANGE || !std::isfinite(d))
        throw InvalidArgument("config key '" + key + "': not a number: '" + v + "'");
    return d;
}

long long parse_int(const std::string& key, const std::string& v)
{
    errno = 0;
    char* end = nullptr;
    const long long i = std::strtoll(v.c_str(), &end, 10);
    if (v.empty() || end != v.c_str() + v.size() || errno == ERANGE)
        throw InvalidArgument("config key '" + key + "': not an integer: '" + v + "'");
    return i;
}

int parse_int32(const std::string& key, const std::string& v)
{
    const long long i = parse_int(key, v);
    if (i < std::numeric_limits<int>::min() || i > std::numeric_limits<int>::max())
        throw InvalidArgument("config key '" + key + "': out of range: '" + v + "'");
    return static_cast<int>(i);
}

bool parse_bool(const std::string& key, const std::string& v)
{
    if (v == "true" || v == "1")
        return true;
    if (v == "false" || v == "0")
        return false;
    throw InvalidArgument("config key '" + key + "': expected true/false: '" + v + "'");
}

std::string fmt(double d)
{
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", d);
    return buf;
}

std::string fmt(bool b) { return b ? "true" : "false"; }

struct Key {
    const char* name;
    std::string (*get)(const PipelineConfig&);
    void (*set)(PipelineConfig&, const std::string& key, const std::string& value);
};

#define RFK_DOUBLE(NAME, FIELD)                                                                        \
    Key                                                                                                \
    {                                                                                                  \
        NAME, [](const PipelineConfig& c) { return fmt(static_cast<double>(c.FIELD)); },               \
            [](PipelineConfig& c, const std::string& k, const std::string& v) { c.FIELD = parse_double(k, v); } \
    }
#define RFK_INT(NAME, FIELD)                                                                           \
    Key                                                                                                \
    {                                                                                                  \
        NAME, [](const PipelineConfig& c) { return std::to_string(c.FIELD); },                         \
            [](PipelineConfig& c, const std::string& k, const std::string& v) { c.FIELD = parse_int32(k, v); } \
    }
#define RFK_BOOL(NAME, FIELD)                                                                          \
    Key                                                                                                \
    {                                                                                                  \
        NAME, [](const PipelineConfig& c) { return fmt(c.FIELD); },                                   \
            [](PipelineConfig& c, const std::string& k, const std::string& v) { c.FIELD = parse_bool(k, v); } \
    }

const std::vector<Key>& keys()
{
    static const std::vector<Key> table = {
        RFK_INT("resize.min_side", resize_min_side),
        Key{"seed", [](const PipelineConfig& c) { return std::to_string(c.seed); },
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                const long long s = parse_int(k, v);
                if (s < 0)
                    throw InvalidArgument("config key 'seed': must be non-negative");
                c.seed = static_cast<std::uint64_t>(s);
            }},
        RFK_INT("align.max_homographies", max_homographies),
        Key{"match.scales",
            [](const PipelineConfig& c) {
                std::string out;
                for (std::size_t i = 0; i < c.match.scales.size(); ++i)
                    out += (i ? "," : "") + fmt(c.match.scales[i]);
                return out;
            },
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                std::vector<double> scales;
                std::stringstream ss(v);
                std::string item;
                while (std::getline(ss, item, ','))
                    scales.push_back(parse_double(k, trim(item)));
                c.match.scales = std::move(scales);
            }},
        RFK_DOUBLE("match.min_score", match.min_score),
        Key{"match.descriptor_source",
            [](const PipelineConfig& c) {
                return std::string(c.match.descriptor_source == features::DescriptorSource::file ? "file" : "builtin");
            },
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                if (v == "builtin")
                    c.match.descriptor_source = features::DescriptorSource::builtin;
                else if (v == "file")
                    c.match.descriptor_source = features::DescriptorSource::file;
                else
                    throw InvalidArgument("config key '" + k + "': expected builtin|file: '" + v + "'");
            }},
        RFK_BOOL("match.all_scale_pairs", match.all_scale_pairs),
        RFK_DOUBLE("ransac.inlier_threshold", ransac.inlier_threshold),
        RFK_INT("ransac.max_iterations", ransac.max_iterations),
        RFK_DOUBLE("ransac.confidence", ransac.confidence),
        RFK_INT("ransac.min_matches_continue", ransac.min_matches_continue),
        RFK_INT("ransac.min_inliers_accept", ransac.min_inliers_accept),
        RFK_DOUBLE("ransac.mask_threshold", ransac.mask_threshold),
        RFK_DOUBLE("objective.lambda_match", objective.lambda_match),
        RFK_DOUBLE("objective.mu_cycle", objective.mu_cycle),
        RFK_INT("objective.ssim_window", objective.ssim_window),
        RFK_DOUBLE("objective.ssim_sigma", objective.ssim_sigma),
        RFK_DOUBLE("objective.ssim_c1", objective.ssim_c1),
        RFK_DOUBLE("objective.ssim_c2", objective.ssim_c2),
        RFK_BOOL("objective.grayscale_ssim", objective.grayscale_ssim),
        RFK_BOOL("objective.direct_matchability", objective.direct_matchability),
        RFK_INT("schedule.stage1", schedule.stage1),
        RFK_INT("schedule.stage2", schedule.stage2),
        RFK_INT("schedule.stage3", schedule.stage3),
        RFK_DOUBLE("schedule.step_size", schedule.step_size),
        RFK_DOUBLE("schedule.logit_step", schedule.logit_step),
        RFK_DOUBLE("schedule.decay", schedule.decay),
        RFK_INT("schedule.max_halvings", schedule.max_halvings),
        RFK_DOUBLE("schedule.smoothness_weight", schedule.smoothness_weight),
        RFK_DOUBLE("schedule.initial_logit", schedule.initial_logit),
        RFK_BOOL("schedule.stage3_moves_flow", schedule.stage3_moves_flow),
        RFK_DOUBLE("aggregate.threshold", aggregate_threshold),
        Key{"aggregate.overlap",
            [](const PipelineConfig& c) {
                return std::string(c.overlap == compose::OverlapPolicy::first_wins ? "first_wins"
                                                                                   : "highest_matchability");
            },
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                if (v == "first_wins")
                    c.overlap = compose::OverlapPolicy::first_wins;
                else if (v == "highest_matchability")
                    c.overlap = compose::OverlapPolicy::highest_matchability;
                else
                    throw InvalidArgument("config key '" + k + "': expected first_wins|highest_matchability");
            }},
        Key{"eval.missing", [](const PipelineConfig& c) { return std::string(eval::to_string(c.missing)); },
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                if (v == "zero_flow")
                    c.missing = eval::MissingPolicy::zero_flow;
                else if (v == "exclude")
                    c.missing = eval::MissingPolicy::exclude;
                else
                    throw InvalidArgument("config key '" + k + "': expected zero_flow|exclude");
            }},
        RFK_DOUBLE("eval.matchability_threshold", essential.matchability_threshold),
        Key{"eval.max_points", [](const PipelineConfig& c) { return std::to_string(c.essential.max_points); },
            [](PipelineConfig& c, const std::string& k, const std::string& v) {
                const long long n = parse_int(k, v);
                if (n < 8)
                    throw InvalidArgument("config key 'eval.max_points': must be >= 8");
                c.essential.max_points = static_cast<std::size_t>(n);
            }},
        RFK_DOUBLE("eval.sampson_threshold", essential.sampson_threshold),
    };
    return table;
}

#undef RFK_DOUBLE
#undef RFK_INT
#undef RFK_BOOL

robust::RansacConfig seeded(robust::RansacConfig r, std::uint64_t seed)
{
    r.seed = seed;
    return r;
}

Vec2 native_to_working(Vec2 p, features::ImageSize native, int w, int h)
{
    return {(p.x + 0.5) * w / native.width - 0.5, (p.y + 0.5) * h / native.height - 0.5};
}

}  // namespace

void PipelineConfig::validate() const
{
    if (resize_min_side < 0)
        throw InvalidArgument("resize.min_side must be >= 0");
    if (max_homographies < 0)
        throw InvalidArgument("align.max_homographies must be >= 0");
    if (!(aggregate_threshold >= 0.0 && aggregate_threshold <= 1.0))
        throw InvalidArgument("aggregate.threshold must lie in [0,1]");
    if (!(essential.matchability_threshold >= 0.0 && essential.matchability_threshold <= 1.0))
        throw InvalidArgument("eval.matchability_threshold must lie in [0,1]");
    if (!(essential.sampson_threshold > 0.0))
        throw InvalidArgument("eval.sampson_threshold must be positive");
    match.validate();
    ransac.validate();
    objective.validate();
    schedule.validate();
}

void set_value(PipelineConfig& cfg, const std::string& key, const std::string& value)
{
    for (const Key& k : keys()) {
        if (key == k.name) {
            k.set(cfg, key, trim(value));
            return;
        }
    }
    throw InvalidArgument("unknown config key '" + key + "'");
}

PipelineConfig parse_config(const std::string& text, PipelineConfig base)
{
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos)
            line.erase(hash);
        line = trim(line);
        if (line.empty())
            continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw InvalidArgument("config line " + std::to_string(lineno) + ": expected key = value");
        try {
            set_value(base, trim(line.substr(0, eq)), line.substr(eq + 1));
        } catch (const InvalidArgument& e) {
            throw InvalidArgument("config line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    base.validate();
    return base;
}

PipelineConfig load_config(const std::filesystem::path& path, PipelineConfig base)
{
    std::ifstream in(path);
    if (!in)
        throw InvalidArgument("cannot read config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), std::move(base));
}

std::string to_text(const PipelineConfig& cfg)
{
    std::string out;
    for (const Key& k : keys())
        out += std::string(k.name) + " = " + k.get(cfg) + "\n";
    return out;
}

std::string config_hash(const PipelineConfig& cfg)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : to_text(cfg)) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

int log_level()
{
    const char* env = std::getenv("RFK_LOG");
    if (!env)
        return 1;
    const std::string v = env;
    if (v == "0" || v == "quiet" || v == "error")
        return 0;
    if (v == "2" || v == "debug")
        return 2;
    return 1;
}

void log(int level, const std::string& message)
{
    static std::mutex mutex;
    if (level > log_level())
        return;
    std::lock_guard lock(mutex);
    std::cerr << "[rfk] " << message << '\n';
}

fineflow::FineFlowResult refine_pair(const Image& warped_src, const Image& tgt, const PipelineConfig& cfg)
{
    const FeatureMap fs = features::extract_dense_descriptors(warped_src, 1.0);
    const FeatureMap ft = features::extract_dense_descriptors(tgt, 1.0);
    return fineflow::optimize_fine_flow(warped_src, tgt, fs, ft, cfg.objective, cfg.schedule);
}

std::vector<FeatureMap> load_feature_dir(const std::filesystem::path& dir, const std::string& stem)
{
    if (!std::filesystem::is_directory(dir))
        throw InvalidArgument("features directory not found: " + dir.string());
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        const auto name = entry.path().filename().string();
        if (entry.is_regular_file() && entry.path().extension() == ".rfkfeat" && name.size() > stem.size() &&
            name.compare(0, stem.size(), stem) == 0 && (name[stem.size()] == '_' || name[stem.size()] == '.'))
            files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty())
        throw InvalidArgument("no " + stem + "_*.rfkfeat files in " + dir.string());
    std::vector<FeatureMap> maps;
    for (const auto& f : files)
        maps.push_back(io::read_featmap(f));
    return maps;
}

AlignResult align(const Image& src, const Image& tgt, const PipelineConfig& cfg, const ExternalFeatures* external)
{
    cfg.validate();
    if (src.empty() || tgt.empty())
        throw InvalidArgument("align: empty input image");

    AlignResult out;
    out.src = cfg.resize_min_side > 0 ? resize_min_side(src, cfg.resize_min_side) : src;
    out.tgt = cfg.resize_min_side > 0 ? resize_min_side(tgt, cfg.resize_min_side) : tgt;
    const int sw = out.src.width(), sh = out.src.height();
    const int tw = out.tgt.width(), th = out.tgt.height();
    log(2, "working sizes " + std::to_string(sw) + "x" + std::to_string(sh) + " / " + std::to_string(tw) + "x" +
               std::to_string(th));

    if (external) {
        out.matches = features::mutual_nn_match(external->src, external->tgt, cfg.match, external->src_native,
                                                external->tgt_native);
        for (Correspondence& c : out.matches) {
            c.src = native_to_working(c.src, external->src_native, sw, sh);
            c.tgt = native_to_working(c.tgt, external->tgt_native, tw, th);
        }
    } else {
        if (cfg.match.descriptor_source == features::DescriptorSource::file)
            throw InvalidArgument("descriptor_source = file needs externally supplied feature maps");
        const auto fs = features::extract_multiscale(out.src, cfg.match);
        const auto ft = features::extract_multiscale(out.tgt, cfg.match);
        out.matches = features::mutual_nn_match(fs, ft, cfg.match, {sw, sh}, {tw, th});
    }
    log(1, std::to_string(out.matches.size()) + " mutual nearest-neighbor matches");

    const FeatureMap tgt_fm = features::extract_dense_descriptors(out.tgt, 1.0);
    auto hook = [&](std::size_t index, const robust::HomographyModel& model) -> std::optional<MatchabilityMap> {
        log(1, "homography " + std::to_string(index) + ": " + std::to_string(model.inliers.size()) +
                   " inliers, refining");
        const Warped warped = robust::warp_by_homography(out.src, model.h, tw, th, true);
        const FeatureMap src_fm = features::extract_dense_descriptors(warped.image, 1.0);
        fineflow::FineFlowResult fine =
            fineflow::optimize_fine_flow(warped.image, out.tgt, src_fm, tgt_fm, cfg.objective, cfg.schedule);

        compose::FlowIteration it;
        it.flow = compose::compose_homography_flow(model.h, fine.flow_st, sw, sh);
        it.matchability = fine.m_st;
        for (int y = 0; y < th; ++y)
            for (int x = 0; x < tw; ++x)
                if (!it.flow.valid(x, y))
                    it.matchability.at(x, y) = 0.0;
        out.iterations.push_back(it);
        out.fine.push_back(std::move(fine));

        if (cfg.max_homographies > 0 && index + 1 >= static_cast<std::size_t>(cfg.max_homographies))
            return MatchabilityMap(tw, th, 1.0);  // claims every target pixel, ending the loop
        return it.matchability;
    };
    out.models = robust::multi_homography_decompose(out.matches, seeded(cfg.ransac, cfg.seed), {}, hook);
    log(1, std::to_string(out.models.size()) + " homographies");

    if (!out.models.empty())
        out.aggregate = compose::aggregate_flows(out.iterations, cfg.aggregate_threshold, cfg.overlap);
    return out;
}

}  // namespace rfk::pipeline
