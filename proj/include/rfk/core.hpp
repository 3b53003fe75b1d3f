// Core domain types shared by every stage of the aligner: images, feature
// grids, correspondences, homographies, dense flow and matchability fields.
#pragma once

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace rfk {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or truncated file contents.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Geometric degeneracy (rank deficiency, collinear samples, singular matrix).
class DegenerateError : public Error {
public:
    using Error::Error;
};

/// Arguments that violate an operation's preconditions.
class InvalidArgument : public Error {
public:
    using Error::Error;
};

struct Vec2 {
    double x = 0.0;
    double y = 0.0;

    friend Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
    friend Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
    friend Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
    friend bool operator==(Vec2 a, Vec2 b) = default;
};

double norm(Vec2 v);

/// Dense pixel grid with 1 or 3 interleaved channels, values in [0,1].
class Image {
public:
    Image() = default;
    Image(int width, int height, int channels, double fill = 0.0);
    Image(int width, int height, int channels, std::vector<double> data);

    int width() const { return width_; }
    int height() const { return height_; }
    int channels() const { return channels_; }
    bool empty() const { return width_ == 0 || height_ == 0; }

    double at(int x, int y, int c = 0) const { return data_[index(x, y, c)]; }
    double& at(int x, int y, int c = 0) { return data_[index(x, y, c)]; }

    const std::vector<double>& data() const { return data_; }
    std::vector<double>& data() { return data_; }

    /// Clamp every value into [0,1]; non-finite values become 0.
    void clamp01();

    friend bool operator==(const Image&, const Image&) = default;

private:
    std::size_t index(int x, int y, int c) const
    {
        return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
    }

    int width_ = 0;
    int height_ = 0;
    int channels_ = 1;
    std::vector<double> data_;
};

/// Luma conversion (0.299, 0.587, 0.114); single-channel input is copied.
Image to_gray(const Image& img);

/// Single-channel scalar field on a pixel grid. Used for matchability and
/// validity-weighted intermediate maps.
class ScalarMap {
public:
    ScalarMap() = default;
    ScalarMap(int width, int height, double fill = 0.0)
        : width_(width), height_(height),
          values_(static_cast<std::size_t>(width) * height, fill) {}

    int width() const { return width_; }
    int height() const { return height_; }
    double at(int x, int y) const { return values_[static_cast<std::size_t>(y) * width_ + x]; }
    double& at(int x, int y) { return values_[static_cast<std::size_t>(y) * width_ + x]; }
    const std::vector<double>& values() const { return values_; }
    std::vector<double>& values() { return values_; }

    friend bool operator==(const ScalarMap&, const ScalarMap&) = default;

private:
    int width_ = 0;
    int height_ = 0;
    std::vector<double> values_;
};

/// Per-pixel matchability in [0,1].
using MatchabilityMap = ScalarMap;

/// Boolean per-pixel mask.
struct Mask {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> values;

    Mask() = default;
    Mask(int w, int h, bool fill) : width(w), height(h), values(static_cast<std::size_t>(w) * h, fill ? 1 : 0) {}
    bool at(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x] != 0; }
    void set(int x, int y, bool v) { values[static_cast<std::size_t>(y) * width + x] = v ? 1 : 0; }
    friend bool operator==(const Mask&, const Mask&) = default;
};

/// Strided descriptor grid. Descriptors with zero norm are invalid.
struct FeatureMap {
    int grid_w = 0;
    int grid_h = 0;
    int channels = 0;
    int stride = 8;
    float scale_factor = 1.0f;
    std::vector<float> data;

    FeatureMap() = default;
    FeatureMap(int gw, int gh, int ch, int stride_, float scale)
        : grid_w(gw), grid_h(gh), channels(ch), stride(stride_), scale_factor(scale),
          data(static_cast<std::size_t>(gw) * gh * ch, 0.0f) {}

    const float* cell(int i, int j) const { return data.data() + (static_cast<std::size_t>(j) * grid_w + i) * channels; }
    float* cell(int i, int j) { return data.data() + (static_cast<std::size_t>(j) * grid_w + i) * channels; }
    bool valid(int i, int j) const;

    friend bool operator==(const FeatureMap&, const FeatureMap&) = default;
};

struct Correspondence {
    Vec2 src;
    Vec2 tgt;
    double score = 0.0;
};

/// 3x3 projective transform kept in canonical form: unit Frobenius norm and
/// h(2,2) >= 0.
class Homography {
public:
    Homography() : h_(Eigen::Matrix3d::Identity() / std::sqrt(3.0)) {}

    /// Canonicalizes `m`; throws DegenerateError when |det| <= 1e-12 after
    /// normalization.
    explicit Homography(const Eigen::Matrix3d& m);

    static Homography identity() { return Homography(); }

    const Eigen::Matrix3d& matrix() const { return h_; }
    Homography inverse() const;

    /// Maps a point; returns nullopt when it lands at infinity.
    std::optional<Vec2> apply(Vec2 p) const;

private:
    Eigen::Matrix3d h_;
};

/// Dense backward-warp correspondence. A field named A->B lives on B's
/// grid and stores, per B-pixel, the A-frame location to sample.
class FlowField {
public:
    FlowField() = default;
    FlowField(int width, int height);

    /// Identity mapping, all pixels valid.
    static FlowField identity(int width, int height);

    /// Constant displacement (dx, dy), all pixels valid.
    static FlowField translation(int width, int height, double dx, double dy);

    int width() const { return width_; }
    int height() const { return height_; }

    Vec2 map(int x, int y) const { return map_[idx(x, y)]; }
    bool valid(int x, int y) const { return valid_[idx(x, y)] != 0; }
    Vec2 displacement(int x, int y) const { return map(x, y) - Vec2{double(x), double(y)}; }

    void set(int x, int y, Vec2 location, bool is_valid = true)
    {
        map_[idx(x, y)] = location;
        valid_[idx(x, y)] = is_valid ? 1 : 0;
    }
    void invalidate(int x, int y) { valid_[idx(x, y)] = 0; }

    const std::vector<Vec2>& locations() const { return map_; }
    const std::vector<std::uint8_t>& validity() const { return valid_; }
    Mask valid_mask() const;

    friend bool operator==(const FlowField&, const FlowField&) = default;

private:
    std::size_t idx(int x, int y) const { return static_cast<std::size_t>(y) * width_ + x; }

    int width_ = 0;
    int height_ = 0;
    std::vector<Vec2> map_;
    std::vector<std::uint8_t> valid_;
};

/// Output of a backward warp: sampled image plus per-pixel validity.
/// Invalid pixels hold 0.
struct Warped {
    Image image;
    Mask valid;
};

struct AlignmentIteration {
    Homography homography;
    FlowField flow;
    MatchabilityMap matchability;
};

struct AlignmentResult {
    std::vector<AlignmentIteration> iterations;
    FlowField final_flow;
    MatchabilityMap final_matchability;
};

// ---------------------------------------------------------------------------
// Sampling

using PixelValue = std::array<double, 3>;

/// True when (x, y) lies inside [0, w-1] x [0, h-1].
inline bool in_bounds(double x, double y, int w, int h)
{
    return x >= 0.0 && y >= 0.0 && x <= w - 1 && y <= h - 1;
}

/// Bilinear interpolation of all channels; nullopt when the footprint leaves
/// the image. Unused channels of the result are 0.
std::optional<PixelValue> bilinear_sample(const Image& img, double x, double y);

/// Bilinear weights of a sample point. Neighbors are (x0,y0), (x0+1,y0),
/// (x0,y0+1), (x0+1,y0+1); the "+1" neighbor collapses onto x0 for
/// single-column (single-row) grids.
struct BilinearFootprint {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
    double fx = 0.0, fy = 0.0;
};

std::optional<BilinearFootprint> bilinear_footprint(double x, double y, int w, int h);

/// Scalar sample of a row-major field with its spatial gradient.
struct SampleWithGradient {
    double value = 0.0;
    double ddx = 0.0;
    double ddy = 0.0;
};

SampleWithGradient sample_field(const double* field, int w, const BilinearFootprint& fp, int stride = 1, int offset = 0);

std::optional<double> bilinear_sample(const ScalarMap& map, double x, double y);

// ---------------------------------------------------------------------------
// Resampling

/// Aspect-preserving bilinear resize so that min(width, height) == min_side.
Image resize_min_side(const Image& img, int min_side);

/// Bilinear resize to explicit dimensions (pixel-center aligned).
Image resize_to(const Image& img, int width, int height);

}  // namespace rfk
