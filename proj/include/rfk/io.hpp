// File formats: PNG/PPM images, Middlebury .flo flow, RFKFEAT1 feature maps,
// plain-text correspondences and homographies.
#pragma once

#include "rfk/core.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace rfk::io {

namespace fs = std::filesystem;

/// Loads PNG (8/16-bit, gray/gray+alpha/RGB/RGBA) or binary PGM/PPM. Output
/// is normalized to [0,1]; alpha is dropped, gray+alpha becomes gray.
Image read_image(const fs::path& path);

/// 8-bit PNG, gray or RGB depending on channel count. Values are clamped
/// to [0,1] and rounded.
void write_png(const Image& img, const fs::path& path);

/// Binary PGM (1 channel) or PPM (3 channels).
void write_ppm(const Image& img, const fs::path& path);

/// Dispatches on extension (.png, .ppm, .pgm).
void write_image(const Image& img, const fs::path& path);

/// Matchability as 8-bit PNG, value * 255 rounded.
void write_matchability_png(const MatchabilityMap& m, const fs::path& path);
MatchabilityMap read_matchability_png(const fs::path& path);

/// Binary masks as 8-bit PNG; values > 127 select.
void write_mask_png(const Mask& m, const fs::path& path);
Mask read_mask_png(const fs::path& path);

// Middlebury .flo: "PIEH" tag (float 202021.25), int32 width, int32 height,
// then row-major float32 (dx, dy). Invalid pixels are stored as 1e10.
std::vector<std::uint8_t> encode_flo(const FlowField& flow);
FlowField decode_flo(const std::vector<std::uint8_t>& bytes);
void write_flo(const FlowField& flow, const fs::path& path);
FlowField read_flo(const fs::path& path);

// RFKFEAT1: 8-byte magic, int32 grid_w, grid_h, channels, stride, float32
// scale_factor, then row-major float32 descriptors. All little-endian.
std::vector<std::uint8_t> encode_featmap(const FeatureMap& fm);
FeatureMap decode_featmap(const std::vector<std::uint8_t>& bytes);
void write_featmap(const FeatureMap& fm, const fs::path& path);
FeatureMap read_featmap(const fs::path& path);

/// One `x_s y_s x_t y_t score` line per correspondence.
void write_correspondences(const std::vector<Correspondence>& corrs, const fs::path& path);
std::vector<Correspondence> read_correspondences(const fs::path& path);

/// Row-major 3x3, one row per line.
void write_homography(const Homography& h, const fs::path& path);
Homography read_homography(const fs::path& path);

std::vector<std::uint8_t> read_bytes(const fs::path& path);

/// Writes to a sibling temp file and renames it over `path`.
void write_bytes_atomic(const fs::path& path, const std::vector<std::uint8_t>& bytes);
void write_text_atomic(const fs::path& path, const std::string& text);

}  // namespace rfk::io
