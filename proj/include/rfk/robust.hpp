// Homography estimation: normalized DLT, RANSAC, and the iterated
// multi-homography decomposition.
#pragma once

#include "rfk/core.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

namespace rfk::robust {

struct RansacConfig {
    double inlier_threshold = 3.0;  ///< symmetric transfer error, pixels
    int max_iterations = 10000;
    double confidence = 0.9999;
    std::uint64_t seed = 0;
    int min_matches_continue = 50;
    int min_inliers_accept = 16;
    double mask_threshold = 0.5;  ///< matchability above which a target pixel is "claimed"

    void validate() const;
};

/// Deterministic 64-bit generator (splitmix64) with unbiased bounded draws.
/// Kept separate from any global source so results only depend on the seed.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}
    std::uint64_t next();
    /// Uniform in [0, n).
    std::uint64_t below(std::uint64_t n);
    /// Uniform in [0, 1).
    double uniform();

private:
    std::uint64_t state_;
};

/// Normalized DLT. Exact for four non-degenerate correspondences, least
/// squares in the algebraic sense for more. Throws DegenerateError on rank
/// deficiency.
Homography fit_homography_dlt(std::span<const Correspondence> corrs);

/// Average of forward and backward reprojection error; +inf when a point
/// maps to infinity.
double symmetric_transfer_error(const Homography& h, const Homography& h_inv, const Correspondence& c);

struct HomographyModel {
    Homography h;
    std::vector<std::size_t> inliers;  ///< indices into the input list, ascending
};

/// Seeded RANSAC with adaptive iteration count. Hypotheses are ranked by
/// the truncated quadratic cost sum(min(e^2, t^2)) over all correspondences
/// (ties keep the earliest); the winner is refit by least squares on its
/// inliers for as long as that does not raise the cost.
/// Returns nullopt with fewer than four correspondences or when the best
/// consensus is below min_inliers_accept.
std::optional<HomographyModel> ransac_homography(std::span<const Correspondence> corrs, const RansacConfig& cfg);

/// Called after each discovered homography; may return the matchability
/// mask (target grid) produced for it, whose claimed pixels are removed
/// from the pool.
using IterationHook = std::function<std::optional<MatchabilityMap>(std::size_t index, const HomographyModel&)>;

/// Repeated RANSAC on a shrinking pool. After each model its inliers are
/// removed, then every correspondence whose target pixel has matchability
/// above cfg.mask_threshold in `prev_masks[k]` (if supplied for iteration k)
/// or in the hook's mask. Stops when fewer than min_matches_continue remain
/// or RANSAC finds no model. Inlier indices refer to `corrs`.
std::vector<HomographyModel> multi_homography_decompose(std::span<const Correspondence> corrs,
                                                        const RansacConfig& cfg,
                                                        const std::vector<MatchabilityMap>& prev_masks = {},
                                                        const IterationHook& hook = {});

/// Backward warp: output pixel p samples img at h^-1 p. Samples outside
/// the image are invalid and hold 0, or with `clamp_border` the value at the
/// nearest in-image point.
Warped warp_by_homography(const Image& img, const Homography& h, int out_w, int out_h, bool clamp_border = false);

}  // namespace rfk::robust
