#include "rfk/core.hpp"

#include <Eigen/LU>

#include <algorithm>
#include <cmath>

namespace rfk {

double norm(Vec2 v) { return std::hypot(v.x, v.y); }

Image::Image(int width, int height, int channels, double fill)
    : width_(width), height_(height), channels_(channels)
{
    if (width < 0 || height < 0)
        throw InvalidArgument("negative image dimensions");
    if (channels != 1 && channels != 3)
        throw InvalidArgument("image must have 1 or 3 channels");
    data_.assign(static_cast<std::size_t>(width) * height * channels, fill);
}

Image::Image(int width, int height, int channels, std::vector<double> data)
    : width_(width), height_(height), channels_(channels), data_(std::move(data))
{
    if (width < 0 || height < 0)
        throw InvalidArgument("negative image dimensions");
    if (channels != 1 && channels != 3)
        throw InvalidArgument("image must have 1 or 3 channels");
    if (data_.size() != static_cast<std::size_t>(width) * height * channels)
        throw InvalidArgument("image data length does not match dimensions");
}

void Image::clamp01()
{
    for (double& v : data_)
        v = std::isfinite(v) ? std::clamp(v, 0.0, 1.0) : 0.0;
}

Image to_gray(const Image& img)
{
    if (img.channels() == 1)
        return img;
    Image out(img.width(), img.height(), 1);
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x)
            out.at(x, y) = 0.299 * img.at(x, y, 0) + 0.587 * img.at(x, y, 1) + 0.114 * img.at(x, y, 2);
    return out;
}

bool FeatureMap::valid(int i, int j) const
{
    const float* d = cell(i, j);
    for (int c = 0; c < channels; ++c)
        if (d[c] != 0.0f)
            return true;
    return false;
}

Homography::Homography(const Eigen::Matrix3d& m)
{
    const double f = m.norm();
    if (!std::isfinite(f) || f == 0.0)
        throw DegenerateError("homography has zero or non-finite norm");
    Eigen::Matrix3d h = m / f;
    if (h(2, 2) < 0.0 || (h(2, 2) == 0.0 && h(2, 1) < 0.0))
        h = -h;
    if (std::abs(h.determinant()) <= 1e-12)
        throw DegenerateError("homography is singular");
    h_ = h;
}

Homography Homography::inverse() const { return Homography(h_.inverse()); }

std::optional<Vec2> Homography::apply(Vec2 p) const
{
    const Eigen::Vector3d q = h_ * Eigen::Vector3d(p.x, p.y, 1.0);
    if (std::abs(q.z()) < 1e-300)
        return std::nullopt;
    return Vec2{q.x() / q.z(), q.y() / q.z()};
}

FlowField::FlowField(int width, int height)
    : width_(width), height_(height),
      map_(static_cast<std::size_t>(width) * height),
      valid_(static_cast<std::size_t>(width) * height, 0)
{
    if (width < 0 || height < 0)
        throw InvalidArgument("negative flow dimensions");
}

FlowField FlowField::identity(int width, int height) { return translation(width, height, 0.0, 0.0); }

FlowField FlowField::translation(int width, int height, double dx, double dy)
{
    FlowField f(width, height);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x)
            f.set(x, y, {x + dx, y + dy});
    return f;
}

Mask FlowField::valid_mask() const
{
    Mask m(width_, height_, false);
    m.values = valid_;
    return m;
}

std::optional<BilinearFootprint> bilinear_footprint(double x, double y, int w, int h)
{
    if (!in_bounds(x, y, w, h))
        return std::nullopt;
    BilinearFootprint fp;
    fp.x0 = std::min(static_cast<int>(std::floor(x)), std::max(w - 2, 0));
    fp.y0 = std::min(static_cast<int>(std::floor(y)), std::max(h - 2, 0));
    fp.x1 = std::min(fp.x0 + 1, w - 1);
    fp.y1 = std::min(fp.y0 + 1, h - 1);
    fp.fx = x - fp.x0;
    fp.fy = y - fp.y0;
    return fp;
}

SampleWithGradient sample_field(const double* field, int w, const BilinearFootprint& fp, int stride, int offset)
{
    auto at = [&](int x, int y) { return field[(static_cast<std::size_t>(y) * w + x) * stride + offset]; };
    const double v00 = at(fp.x0, fp.y0), v10 = at(fp.x1, fp.y0);
    const double v01 = at(fp.x0, fp.y1), v11 = at(fp.x1, fp.y1);
    SampleWithGradient s;
    s.value = (1 - fp.fy) * ((1 - fp.fx) * v00 + fp.fx * v10) + fp.fy * ((1 - fp.fx) * v01 + fp.fx * v11);
    s.ddx = fp.x1 == fp.x0 ? 0.0 : (1 - fp.fy) * (v10 - v00) + fp.fy * (v11 - v01);
    s.ddy = fp.y1 == fp.y0 ? 0.0 : (1 - fp.fx) * (v01 - v00) + fp.fx * (v11 - v10);
    return s;
}

std::optional<PixelValue> bilinear_sample(const Image& img, double x, double y)
{
    const auto fp = bilinear_footprint(x, y, img.width(), img.height());
    if (!fp)
        return std::nullopt;
    PixelValue out{0.0, 0.0, 0.0};
    for (int c = 0; c < img.channels(); ++c)
        out[c] = sample_field(img.data().data(), img.width(), *fp, img.channels(), c).value;
    return out;
}

std::optional<double> bilinear_sample(const ScalarMap& map, double x, double y)
{
    const auto fp = bilinear_footprint(x, y, map.width(), map.height());
    if (!fp)
        return std::nullopt;
    return sample_field(map.values().data(), map.width(), *fp).value;
}

Image resize_to(const Image& img, int width, int height)
{
    if (img.empty())
        throw InvalidArgument("cannot resize a degenerate image");
    if (width < 1 || height < 1)
        throw InvalidArgument("resize target must be at least 1x1");
    if (width == img.width() && height == img.height())
        return img;
    const double sx = static_cast<double>(img.width()) / width;
    const double sy = static_cast<double>(img.height()) / height;
    Image out(width, height, img.channels());
    for (int y = 0; y < height; ++y) {
        const double srcy = std::clamp((y + 0.5) * sy - 0.5, 0.0, img.height() - 1.0);
        for (int x = 0; x < width; ++x) {
            const double srcx = std::clamp((x + 0.5) * sx - 0.5, 0.0, img.width() - 1.0);
            const auto fp = *bilinear_footprint(srcx, srcy, img.width(), img.height());
            for (int c = 0; c < img.channels(); ++c)
                out.at(x, y, c) = sample_field(img.data().data(), img.width(), fp, img.channels(), c).value;
        }
    }
    return out;
}

Image resize_min_side(const Image& img, int min_side)
{
    if (min_side < 1)
        throw InvalidArgument("min_side must be >= 1");
    if (img.empty())
        throw InvalidArgument("cannot resize a degenerate image");
    const int shortest = std::min(img.width(), img.height());
    const double s = static_cast<double>(min_side) / shortest;
    int w = img.width() <= img.height() ? min_side : static_cast<int>(std::lround(img.width() * s));
    int h = img.height() < img.width() ? min_side : static_cast<int>(std::lround(img.height() * s));
    return resize_to(img, std::max(w, 1), std::max(h, 1));
}

}  // namespace rfk
