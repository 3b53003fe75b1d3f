// Metrics: dense flow error (AEE, Fl-all), sparse correspondence accuracy,
// and two-view relative pose from a predicted flow.
#pragma once

#include "rfk/core.hpp"
#include "rfk/robust.hpp"

#include <Eigen/Core>

#include <optional>
#include <span>
#include <utility>
#include <vector>

namespace rfk::eval {

/// How pixels with an invalid prediction enter AEE / Fl-all.
enum class MissingPolicy {
    zero_flow,  ///< counted with the error of a zero-displacement prediction
    exclude,    ///< dropped from the evaluation set
};

const char* to_string(MissingPolicy p);

/// Mean endpoint error over pixels selected by `mask` (all pixels when the
/// mask is empty) where the ground truth is valid. Throws InvalidArgument
/// when nothing is evaluated.
double aee(const FlowField& pred, const FlowField& gt, const Mask& mask = {},
           MissingPolicy policy = MissingPolicy::zero_flow);

/// Percentage of evaluated pixels whose endpoint error exceeds both 3 px and
/// 5% of the ground-truth displacement magnitude.
double fl_all(const FlowField& pred, const FlowField& gt, const Mask& mask = {},
              MissingPolicy policy = MissingPolicy::zero_flow);

/// Percentage of annotated correspondences for which the flow, bilinearly
/// interpolated at the target point, samples within `d` px of the source
/// point. Correspondences touching invalid flow count as failures.
double sparse_accuracy(const FlowField& flow, std::span<const Correspondence> corrs, double d);

struct CameraIntrinsics {
    double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;

    void validate() const;
    Eigen::Matrix3d matrix() const;
    Eigen::Vector2d normalize(Vec2 p) const;
};

/// X_target = R X_source + t, with |t| = 1.
struct RelativePose {
    Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
    Eigen::Vector3d translation = Eigen::Vector3d::UnitX();
};

/// Normalized image coordinates of one correspondence.
struct NormalizedPair {
    Eigen::Vector2d src;
    Eigen::Vector2d tgt;
};

struct EssentialConfig {
    double matchability_threshold = 0.95;
    std::size_t max_points = 2000;
    double sampson_threshold = 1e-3;  ///< on sqrt(Sampson distance), normalized coordinates
    robust::RansacConfig ransac{};
};

struct EssentialModel {
    Eigen::Matrix3d e;  ///< x_t^T E x_s = 0, unit Frobenius norm
    std::vector<NormalizedPair> points;
    std::vector<std::size_t> inliers;
};

/// Normalized 8-point solver; the result is projected onto the essential
/// manifold (two equal singular values, one zero). Needs >= 8 pairs.
Eigen::Matrix3d essential_eight_point(std::span<const NormalizedPair> pairs);

/// Square root of the Sampson distance.
double sampson_error(const Eigen::Matrix3d& e, const NormalizedPair& p);

/// RANSAC over the normalized 8-point solver.
std::optional<EssentialModel> ransac_essential(std::span<const NormalizedPair> pairs, const EssentialConfig& cfg);

/// Correspondences where matchability > threshold (uniformly subsampled to
/// max_points in raster order), normalized by the intrinsics.
std::vector<NormalizedPair> flow_correspondences(const FlowField& flow, const MatchabilityMap& matchability,
                                                 const CameraIntrinsics& k_src, const CameraIntrinsics& k_tgt,
                                                 const EssentialConfig& cfg);

/// Returns nullopt with fewer than 8 candidate correspondences or when
/// RANSAC finds no model.
std::optional<EssentialModel> essential_from_flow(const FlowField& flow, const MatchabilityMap& matchability,
                                                  const CameraIntrinsics& k_src, const CameraIntrinsics& k_tgt,
                                                  const EssentialConfig& cfg = {});

/// Four-fold decomposition with cheirality voting. Throws DegenerateError
/// when no candidate places more than half of the points in front of both
/// cameras.
RelativePose decompose_essential(const Eigen::Matrix3d& e, std::span<const NormalizedPair> pairs);

struct AngularError {
    double rotation_deg = 0.0;
    double translation_deg = 0.0;
};

/// Rotation: geodesic angle of R_gt^T R_est. Translation: angle between
/// directions, sign-invariant.
AngularError pose_angular_error(const RelativePose& est, const RelativePose& gt);

/// For each threshold, percentage of pairs with both errors <= threshold.
std::vector<double> pose_map(std::span<const AngularError> errors, std::span<const double> thresholds);

/// Rotation by `deg` degrees about a unit axis.
Eigen::Matrix3d axis_angle(const Eigen::Vector3d& axis, double deg);

}  // namespace rfk::eval
