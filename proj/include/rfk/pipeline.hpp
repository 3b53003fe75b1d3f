// End-to-end alignment driver and its key-value configuration file.
#pragma once

#include "rfk/compose.hpp"
#include "rfk/core.hpp"
#include "rfk/eval.hpp"
#include "rfk/features.hpp"
#include "rfk/fineflow.hpp"
#include "rfk/robust.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace rfk::pipeline {

struct PipelineConfig {
    int resize_min_side = 480;  ///< 0 keeps the input resolution
    std::uint64_t seed = 0;
    int max_homographies = 8;   ///< cap on multi-homography rounds, 0 = unbounded
    features::MatchConfig match{};
    robust::RansacConfig ransac{};
    fineflow::ObjectiveConfig objective{};
    fineflow::OptimizeSchedule schedule{};
    double aggregate_threshold = 0.5;
    compose::OverlapPolicy overlap = compose::OverlapPolicy::first_wins;
    eval::MissingPolicy missing = eval::MissingPolicy::zero_flow;
    eval::EssentialConfig essential{};

    void validate() const;
};

/// Applies one `key = value` setting; throws InvalidArgument for unknown
/// keys or malformed values.
void set_value(PipelineConfig& cfg, const std::string& key, const std::string& value);

/// Parses `key = value` lines; `#` starts a comment. Unset keys keep their
/// defaults.
PipelineConfig parse_config(const std::string& text, PipelineConfig base = {});
PipelineConfig load_config(const std::filesystem::path& path, PipelineConfig base = {});

/// Canonical dump: every key in a fixed order, round-trippable through
/// parse_config.
std::string to_text(const PipelineConfig& cfg);

/// FNV-1a 64 of to_text(cfg), as 16 hex digits.
std::string config_hash(const PipelineConfig& cfg);

/// Verbosity from RFK_LOG: 0 quiet, 1 info (default), 2 debug.
int log_level();
void log(int level, const std::string& message);

struct AlignResult {
    Image src;  ///< working-resolution source
    Image tgt;  ///< working-resolution target
    std::vector<Correspondence> matches;
    std::vector<robust::HomographyModel> models;
    std::vector<fineflow::FineFlowResult> fine;
    std::vector<compose::FlowIteration> iterations;  ///< composed flows on the target grid
    compose::Aggregate aggregate;
};

/// Optional externally computed descriptors, one map per scale. Cell
/// positions are interpreted in the frame of the unresized input image.
struct ExternalFeatures {
    std::vector<FeatureMap> src;
    std::vector<FeatureMap> tgt;
    features::ImageSize src_native{};
    features::ImageSize tgt_native{};
};

/// resize -> descriptors -> mutual NN -> multi-homography loop (fine flow on
/// each homography-warped pair, composed back to the source frame) ->
/// aggregation. Returns with no models when RANSAC finds none.
AlignResult align(const Image& src, const Image& tgt, const PipelineConfig& cfg,
                  const ExternalFeatures* external = nullptr);

/// Fine stage only: aligns an already coarsely aligned, equal-size pair.
fineflow::FineFlowResult refine_pair(const Image& warped_src, const Image& tgt, const PipelineConfig& cfg);

/// `<stem>.rfkfeat` and `<stem>_*.rfkfeat` files of `dir`, sorted by name.
std::vector<FeatureMap> load_feature_dir(const std::filesystem::path& dir, const std::string& stem);

}  // namespace rfk::pipeline
