// Fine alignment: the SSIM + cycle-consistency + matchability objective,
// the local correlation volume used to initialize it, and a staged
// per-pair optimizer over a 1/8-resolution flow parameterization.
//
// Conventions. For a pair (A, B) the flow "A->B" lives on B's grid and
// stores A-frame sample locations; matchability "A->B" lives on the same
// grid as flow A->B. The cycle-consistent matchability of a B pixel p is
//   Mc(p) = m_AB(p) * m_BA(f_AB(p)),
// and with r(p) = f_BA(f_AB(p)) the directional losses are, normalized by
// the number of valid B pixels,
//   L_ssim  = sum Mc (1 - SSIM(A o f_AB, B))
//   L_match = sum |Mc - 1|
//   L_cycle = sum Mc ||r(p) - p||.
// Samples that leave A (or land next to an invalid f_BA entry) get Mc = 0.
#pragma once

#include "rfk/core.hpp"

#include <string>
#include <vector>

namespace rfk::fineflow {

struct ObjectiveConfig {
    double lambda_match = 0.01;
    double mu_cycle = 1.0;
    int ssim_window = 11;
    double ssim_sigma = 1.5;
    double ssim_c1 = 1e-4;
    double ssim_c2 = 9e-4;
    bool grayscale_ssim = true;
    /// Penalize |m_AB - 1| instead of |Mc - 1|.
    bool direct_matchability = false;

    void validate() const;
};

// ---------------------------------------------------------------------------
// Correlation volume

/// Cosine similarity of every cell of `src` against its (2K+1)^2 grid
/// neighborhood in `tgt`. Channel (n+K)(2K+1) + (m+K) holds
/// cos(src(i, j), tgt(i - m, j - n)), with i the column and j the row.
/// Out-of-grid or zero-norm neighbors hold the sentinel -1.
struct CorrelationVolume {
    int grid_w = 0;
    int grid_h = 0;
    int radius = 3;
    std::vector<double> values;

    int channels() const { return (2 * radius + 1) * (2 * radius + 1); }
    int channel(int m, int n) const { return (n + radius) * (2 * radius + 1) + (m + radius); }
    double at(int i, int j, int m, int n) const
    {
        return values[(static_cast<std::size_t>(j) * grid_w + i) * channels() + channel(m, n)];
    }
};

inline constexpr double kCorrelationSentinel = -1.0;

CorrelationVolume correlation_volume(const FeatureMap& src, const FeatureMap& tgt, int radius = 3);

/// Per-cell displacement (pixels) on a coarse grid.
struct DisplacementGrid {
    int grid_w = 0;
    int grid_h = 0;
    std::vector<Vec2> cells;
};

/// Displacement toward the best-matching neighbor: cell (i, j) matched with
/// tgt(i - m, j - n) gets (-m, -n) * stride. Ties prefer the smallest offset,
/// then the first in row-major offset order. Cells whose best value is the
/// sentinel keep zero displacement.
DisplacementGrid init_flow_from_correlation(const CorrelationVolume& vol, int stride = 8);

// ---------------------------------------------------------------------------
// SSIM

/// Per-pixel SSIM with a Gaussian window truncated at the image border and
/// renormalized over the in-image part. Multichannel inputs are averaged
/// over channels (or converted to luma first when grayscale_ssim is set).
ScalarMap ssim_map(const Image& a, const Image& b, const ObjectiveConfig& cfg);

/// Mc(p) = dest_mask(p) * sample(sampled_mask, flow(p)); 0 where the sample
/// leaves the grid or the flow is invalid. `sampled_mask` lives on the grid
/// the flow samples, `dest_mask` and `flow` on the destination grid.
MatchabilityMap cycle_matchability(const MatchabilityMap& sampled_mask, const MatchabilityMap& dest_mask,
                                   const FlowField& flow);

// ---------------------------------------------------------------------------
// Objective

struct LossTerms {
    double ssim = 0.0;
    double match = 0.0;
    double cycle = 0.0;
    double total = 0.0;
    std::size_t valid_pixels = 0;
};

/// Weights of one optimization stage. With `freeze_matchability` the masks
/// are ignored and Mc is 1 wherever the sample is defined.
struct StageWeights {
    double ssim = 1.0;
    double lambda_match = 0.01;
    double mu_cycle = 1.0;
    bool freeze_matchability = false;
};

/// Gradients of a directional loss with respect to full-resolution fields:
/// flow_ab displacement (B grid), flow_ba displacement (A grid), and the two
/// matchability maps.
struct DirectionalGradient {
    std::vector<double> d_flow_ab_x, d_flow_ab_y;
    std::vector<double> d_flow_ba_x, d_flow_ba_y;
    std::vector<double> d_m_ab, d_m_ba;
};

/// Directional loss for B pixels. `m_ab` / `m_ba` may be null only when
/// weights.freeze_matchability is set. The returned `total` is the weighted
/// stage objective.
LossTerms directional_loss(const Image& a, const Image& b, const FlowField& flow_ab, const FlowField& flow_ba,
                           const MatchabilityMap* m_ab, const MatchabilityMap* m_ba, const ObjectiveConfig& cfg,
                           const StageWeights& weights, DirectionalGradient* grad = nullptr);

/// Full objective of the s->t direction:
///   L = L_ssim + lambda * L_match + mu * L_cycle.
/// flow_st and m_st live on the target grid, flow_ts and m_ts on the source
/// grid.
LossTerms total_loss(const Image& src, const Image& tgt, const FlowField& flow_st, const FlowField& flow_ts,
                     const MatchabilityMap& m_st, const MatchabilityMap& m_ts, const ObjectiveConfig& cfg);

// ---------------------------------------------------------------------------
// Coarse parameterization

inline constexpr int kGridStride = 8;

/// Displacements and matchability logits on a ceil(W/8) x ceil(H/8) grid.
/// Node (i, j) sits at pixel (8i + 3.5, 8j + 3.5); full-resolution fields
/// are bilinear upsamplings with clamped borders.
struct FlowParams {
    int width = 0;   ///< full-resolution width
    int height = 0;  ///< full-resolution height
    int grid_w = 0;
    int grid_h = 0;
    std::vector<double> dx, dy, logit;
    double smoothness_weight = 0.05;

    FlowParams() = default;
    FlowParams(int width, int height, double initial_logit = 2.0);

    std::size_t cells() const { return dx.size(); }
};

/// Bilinear upsampling of a grid channel to full resolution and its adjoint.
std::vector<double> upsample(const FlowParams& p, const std::vector<double>& grid);
std::vector<double> upsample_adjoint(const FlowParams& p, const std::vector<double>& full);

FlowField to_flow_field(const FlowParams& p);
MatchabilityMap to_matchability(const FlowParams& p);

/// Mean squared difference of 4-neighbor displacements, times the weight.
double smoothness(const FlowParams& p, std::vector<double>* d_dx = nullptr, std::vector<double>* d_dy = nullptr);

struct PairGradient {
    std::vector<double> st_dx, st_dy, st_logit;
    std::vector<double> ts_dx, ts_dy, ts_logit;
};

struct PairLoss {
    LossTerms st;  ///< terms of the s->t direction (target grid)
    LossTerms ts;  ///< terms of the t->s direction (source grid)
    double smoothness = 0.0;
    double objective = 0.0;
};

/// Joint objective L(s->t) + L(t->s) + smoothness of both grids. `st` lives
/// on the target grid, `ts` on the source grid; images must have equal size.
PairLoss pair_objective(const Image& src, const Image& tgt, const FlowParams& st, const FlowParams& ts,
                        const ObjectiveConfig& cfg, const StageWeights& weights, PairGradient* grad = nullptr);

struct GradientCheckInstance {
    Image src;
    Image tgt;
    FlowParams st;
    FlowParams ts;
    StageWeights weights;
};

/// Max over all parameters of |analytic - central difference| divided by
/// the largest analytic gradient magnitude (h = 1e-3).
double loss_gradient_check(const GradientCheckInstance& instance, const ObjectiveConfig& cfg, double h = 1e-3);

// ---------------------------------------------------------------------------
// Optimizer

struct OptimizeSchedule {
    int stage1 = 300;  ///< L_ssim only, matchability frozen
    int stage2 = 100;  ///< + mu L_cycle, matchability frozen
    int stage3 = 100;  ///< + lambda L_match, matchability free, flows held unless stage3_moves_flow
    double step_size = 0.5;   ///< max per-node displacement change, pixels
    double logit_step = 1.0;  ///< max per-node logit change
    double decay = 0.99;
    int max_halvings = 8;
    double smoothness_weight = 0.05;
    double initial_logit = 2.0;
    bool stage3_moves_flow = false;

    void validate() const;
};

struct TraceRow {
    int stage = 0;
    int iteration = 0;
    double ssim = 0.0;   ///< sum over both directions
    double match = 0.0;
    double cycle = 0.0;
    double smoothness = 0.0;
    double total = 0.0;  ///< stage objective
    bool accepted = true;
};

struct FineFlowResult {
    FlowField flow_st;  ///< target grid, samples the source
    FlowField flow_ts;  ///< source grid, samples the target
    MatchabilityMap m_st;
    MatchabilityMap m_ts;
    FlowParams params_st;
    FlowParams params_ts;
    std::vector<TraceRow> trace;
};

/// Per-pair minimization of the joint objective in three stages, starting
/// from correlation-volume displacements (K = 3, 3x3 median filtered) and
/// logits of +2. Flows and logits are separate blocks: each iteration takes
/// a max-norm-scaled gradient step on one block, then the other, each with
/// its own line search that halves a step until the stage objective does not
/// increase. A stage ends early when the gradient vanishes or no block finds
/// an acceptable step within max_halvings halvings.
///
/// Stage 3 holds the flows fixed by default. With free per-cell logits its
/// optimum switches off every pixel whose reconstruction loss exceeds
/// lambda; the flows there lose their data term and would be flattened by
/// the smoothness term alone.
FineFlowResult optimize_fine_flow(const Image& src, const Image& tgt, const FeatureMap& src_fm,
                                  const FeatureMap& tgt_fm, const ObjectiveConfig& cfg,
                                  const OptimizeSchedule& schedule);

/// CSV with header stage,iteration,L_ssim,L_match,L_cycle,smoothness,total,accepted.
std::string trace_csv(const std::vector<TraceRow>& trace);

}  // namespace rfk::fineflow
