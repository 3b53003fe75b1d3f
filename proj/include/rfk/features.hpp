// Dense multi-scale descriptors and symmetric (mutual nearest neighbor)
// correspondence extraction.
#pragma once

#include "rfk/core.hpp"

#include <vector>

namespace rfk::features {

enum class DescriptorSource { builtin, file };

struct MatchConfig {
    std::vector<double> scales{0.5, 0.6, 0.88, 1.0, 1.33, 1.66, 2.0};
    double min_score = 0.0;
    DescriptorSource descriptor_source = DescriptorSource::builtin;
    /// Match every source scale against every target scale; otherwise only
    /// equal scale indices are paired.
    bool all_scale_pairs = true;

    void validate() const;
};

inline constexpr int kCellSize = 8;
inline constexpr int kOrientationBins = 8;
inline constexpr int kBlocksPerSide = 4;
inline constexpr int kDescriptorSize = kOrientationBins * kBlocksPerSide * kBlocksPerSide;

/// Stride-8 grid of 128-d orientation-histogram descriptors computed on the
/// image resized by `scale`. Each descriptor pools the 4x4 block of 8x8
/// histograms centered on its cell, is L2-normalized, clipped at 0.2 and
/// renormalized. Cells without gradient energy stay all-zero (invalid).
FeatureMap extract_dense_descriptors(const Image& img, double scale);

/// One map per configured scale.
std::vector<FeatureMap> extract_multiscale(const Image& img, const MatchConfig& cfg);

struct ImageSize {
    int width = 0;
    int height = 0;
};

/// Pixel position (native, unscaled image frame) of a grid cell center.
Vec2 cell_to_native(const FeatureMap& fm, int i, int j, ImageSize native);

/// Mutual nearest neighbors by cosine similarity for each configured scale
/// pair. Output is deduplicated on rounded pixel pairs (highest score kept)
/// and sorted by (source pixel, target pixel).
std::vector<Correspondence> mutual_nn_match(const std::vector<FeatureMap>& src_maps,
                                            const std::vector<FeatureMap>& tgt_maps,
                                            const MatchConfig& cfg, ImageSize src_size, ImageSize tgt_size);

/// Raw mutual-NN on a single pair of grids, in cell indices.
struct CellMatch {
    int src_cell = 0;
    int tgt_cell = 0;
    float score = 0.0f;
};
std::vector<CellMatch> mutual_nn_cells(const FeatureMap& src, const FeatureMap& tgt);

}  // namespace rfk::features
