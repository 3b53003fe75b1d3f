// Composition of coarse homographies with fine flows, multi-homography
// aggregation, and the image-level applications built on top of them.
#pragma once

#include "rfk/core.hpp"

#include <vector>

namespace rfk::compose {

/// Field sampling the original source: map(p) = h^-1 * fine.map(p).
/// `fine` samples the homography-warped source. When `src_width` and
/// `src_height` are positive, locations outside the source are invalidated.
FlowField compose_homography_flow(const Homography& h, const FlowField& fine, int src_width = 0,
                                  int src_height = 0);

enum class OverlapPolicy { first_wins, highest_matchability };

struct FlowIteration {
    FlowField flow;
    MatchabilityMap matchability;
};

struct Aggregate {
    FlowField flow;
    MatchabilityMap matchability;
    std::vector<int> owner;  ///< iteration index per pixel, -1 when unclaimed
};

/// Per target pixel, the first iteration (discovery order) with a valid flow
/// and matchability above `threshold` owns the pixel. With
/// highest_matchability the eligible iteration with the largest value wins
/// (earliest on ties). Unclaimed pixels are invalid with matchability 0.
Aggregate aggregate_flows(const std::vector<FlowIteration>& iterations, double threshold = 0.5,
                          OverlapPolicy policy = OverlapPolicy::first_wins);

/// Backward bilinear warp; invalid flow or out-of-bounds samples are invalid.
Warped warp_with_flow(const Image& img, const FlowField& flow);

/// Per-pixel mean over valid contributors; 0 where nothing contributes.
Image average_aligned(const std::vector<Warped>& images);

/// `tgt` with pixels where region > threshold and the flow is valid (and
/// in bounds) replaced by the warped source.
Image texture_transfer(const Image& src, const Image& tgt, const FlowField& flow, const MatchabilityMap& region,
                       double threshold = 0.5);

/// Zeroes matchability wherever `exclude` is set.
void apply_exclusion(MatchabilityMap& m, const Mask& exclude);

/// Mean of two images on their common valid pixels, for visual overlays.
Image overlay(const Warped& a, const Image& b);

}  // namespace rfk::compose
