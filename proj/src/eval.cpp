#include "rfk/eval.hpp"

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace rfk::eval {

const char* to_string(MissingPolicy p) { return p == MissingPolicy::zero_flow ? "zero_flow" : "exclude"; }

namespace {

void check_grids(const FlowField& pred, const FlowField& gt, const Mask& mask)
{
    if (pred.width() != gt.width() || pred.height() != gt.height())
        throw InvalidArgument("prediction and ground truth flows have different sizes");
    if (!mask.values.empty() && (mask.width != gt.width() || mask.height != gt.height()))
        throw InvalidArgument("evaluation mask has a different size than the flow");
}

// Endpoint errors and ground-truth magnitudes of the evaluated pixels.
std::vector<std::pair<double, double>> endpoint_errors(const FlowField& pred, const FlowField& gt, const Mask& mask,
                                                       MissingPolicy policy)
{
    check_grids(pred, gt, mask);
    std::vector<std::pair<double, double>> out;
    for (int y = 0; y < gt.height(); ++y)
        for (int x = 0; x < gt.width(); ++x) {
            if (!gt.valid(x, y) || (!mask.values.empty() && !mask.at(x, y)))
                continue;
            const Vec2 g = gt.displacement(x, y);
            const double mag = norm(g);
            if (pred.valid(x, y))
                out.emplace_back(norm(pred.displacement(x, y) - g), mag);
            else if (policy == MissingPolicy::zero_flow)
                out.emplace_back(mag, mag);
        }
    if (out.empty())
        throw InvalidArgument("empty evaluation set");
    return out;
}

Eigen::Matrix3d hartley(std::span<const Eigen::Vector2d> pts)
{
    Eigen::Vector2d c = Eigen::Vector2d::Zero();
    for (const auto& p : pts)
        c += p;
    c /= static_cast<double>(pts.size());
    double mean = 0.0;
    for (const auto& p : pts)
        mean += (p - c).norm();
    mean /= static_cast<double>(pts.size());
    if (!(mean > 0.0))
        throw DegenerateError("essential fit: all points coincide");
    const double s = std::sqrt(2.0) / mean;
    Eigen::Matrix3d t;
    t << s, 0, -s * c.x(), 0, s, -s * c.y(), 0, 0, 1;
    return t;
}

Eigen::Matrix3d project_essential(const Eigen::Matrix3d& m)
{
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Eigen::Matrix3d e =
        svd.matrixU() * Eigen::Vector3d(1.0, 1.0, 0.0).asDiagonal() * svd.matrixV().transpose();
    return e / e.norm();
}

std::vector<std::size_t> essential_inliers(const Eigen::Matrix3d& e, std::span<const NormalizedPair> pairs,
                                           double threshold)
{
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < pairs.size(); ++i)
        if (sampson_error(e, pairs[i]) < threshold)
            out.push_back(i);
    return out;
}

}  // namespace

double aee(const FlowField& pred, const FlowField& gt, const Mask& mask, MissingPolicy policy)
{
    const auto errs = endpoint_errors(pred, gt, mask, policy);
    double s = 0.0;
    for (const auto& [e, m] : errs)
        s += e;
    return s / static_cast<double>(errs.size());
}

double fl_all(const FlowField& pred, const FlowField& gt, const Mask& mask, MissingPolicy policy)
{
    const auto errs = endpoint_errors(pred, gt, mask, policy);
    std::size_t bad = 0;
    for (const auto& [e, m] : errs)
        if (e > 3.0 && e > 0.05 * m)
            ++bad;
    return 100.0 * static_cast<double>(bad) / static_cast<double>(errs.size());
}

double sparse_accuracy(const FlowField& flow, std::span<const Correspondence> corrs, double d)
{
    if (corrs.empty())
        throw InvalidArgument("sparse_accuracy needs at least one correspondence");
    std::size_t good = 0;
    for (const auto& c : corrs) {
        const auto fp = bilinear_footprint(c.tgt.x, c.tgt.y, flow.width(), flow.height());
        if (!fp || !flow.valid(fp->x0, fp->y0) || !flow.valid(fp->x1, fp->y0) || !flow.valid(fp->x0, fp->y1) ||
            !flow.valid(fp->x1, fp->y1))
            continue;
        const auto lerp = [&](auto get) {
            return (1 - fp->fy) * ((1 - fp->fx) * get(fp->x0, fp->y0) + fp->fx * get(fp->x1, fp->y0)) +
                   fp->fy * ((1 - fp->fx) * get(fp->x0, fp->y1) + fp->fx * get(fp->x1, fp->y1));
        };
        const double sx = lerp([&](int x, int y) { return flow.map(x, y).x; });
        const double sy = lerp([&](int x, int y) { return flow.map(x, y).y; });
        if (std::hypot(sx - c.src.x, sy - c.src.y) < d)
            ++good;
    }
    return 100.0 * static_cast<double>(good) / static_cast<double>(corrs.size());
}

void CameraIntrinsics::validate() const
{
    if (!(fx > 0.0 && fy > 0.0))
        throw InvalidArgument("focal lengths must be positive");
}

Eigen::Matrix3d CameraIntrinsics::matrix() const
{
    Eigen::Matrix3d k;
    k << fx, 0, cx, 0, fy, cy, 0, 0, 1;
    return k;
}

Eigen::Vector2d CameraIntrinsics::normalize(Vec2 p) const { return {(p.x - cx) / fx, (p.y - cy) / fy}; }

Eigen::Matrix3d essential_eight_point(std::span<const NormalizedPair> pairs)
{
    if (pairs.size() < 8)
        throw InvalidArgument("eight-point solver needs at least 8 correspondences");
    std::vector<Eigen::Vector2d> s(pairs.size()), t(pairs.size());
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        s[i] = pairs[i].src;
        t[i] = pairs[i].tgt;
    }
    const Eigen::Matrix3d ns = hartley(s), nt = hartley(t);
    Eigen::MatrixXd a(static_cast<Eigen::Index>(std::max<std::size_t>(pairs.size(), 9)), 9);
    a.setZero();
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const Eigen::Vector3d x = ns * s[i].homogeneous();
        const Eigen::Vector3d y = nt * t[i].homogeneous();
        a.row(static_cast<Eigen::Index>(i)) << y.x() * x.x(), y.x() * x.y(), y.x(), y.y() * x.x(), y.y() * x.y(),
            y.y(), x.x(), x.y(), 1.0;
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
    const auto& sv = svd.singularValues();
    if (!(sv(7) > 1e-12 * sv(0)))
        throw DegenerateError("eight-point system is rank deficient");
    const Eigen::VectorXd v = svd.matrixV().col(8);
    Eigen::Matrix3d f;
    f << v(0), v(1), v(2), v(3), v(4), v(5), v(6), v(7), v(8);
    return project_essential(nt.transpose() * f * ns);
}

double sampson_error(const Eigen::Matrix3d& e, const NormalizedPair& p)
{
    const Eigen::Vector3d x = p.src.homogeneous(), y = p.tgt.homogeneous();
    const Eigen::Vector3d ex = e * x, ety = e.transpose() * y;
    const double r = y.dot(ex);
    const double den = ex.x() * ex.x() + ex.y() * ex.y() + ety.x() * ety.x() + ety.y() * ety.y();
    if (den <= 0.0)
        return r == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    return std::abs(r) / std::sqrt(den);
}

std::optional<EssentialModel> ransac_essential(std::span<const NormalizedPair> pairs, const EssentialConfig& cfg)
{
    cfg.ransac.validate();
    const std::size_t n = pairs.size();
    if (n < 8)
        return std::nullopt;
    robust::Rng rng(cfg.ransac.seed);
    std::optional<Eigen::Matrix3d> best;
    std::size_t best_count = 0;
    std::size_t needed = static_cast<std::size_t>(cfg.ransac.max_iterations);
    std::vector<NormalizedPair> sample(8);
    for (std::size_t iter = 0; iter < needed; ++iter) {
        std::size_t idx[8];
        for (int k = 0; k < 8; ++k) {
            bool fresh;
            do {
                idx[k] = static_cast<std::size_t>(rng.below(n));
                fresh = std::none_of(idx, idx + k, [&](std::size_t j) { return j == idx[k]; });
            } while (!fresh);
            sample[static_cast<std::size_t>(k)] = pairs[idx[k]];
        }
        Eigen::Matrix3d e;
        try {
            e = essential_eight_point(sample);
        } catch (const DegenerateError&) {
            continue;
        }
        const std::size_t count = essential_inliers(e, pairs, cfg.sampson_threshold).size();
        if (count > best_count) {
            best_count = count;
            best = e;
            const double w = static_cast<double>(count) / static_cast<double>(n);
            const double p_good = std::pow(w, 8);
            if (p_good >= 1.0) {
                needed = std::min<std::size_t>(needed, iter + 1);
            } else if (p_good > 0.0) {
                const double k = std::log(1.0 - cfg.ransac.confidence) / std::log(1.0 - p_good);
                if (std::isfinite(k) && k < static_cast<double>(needed))
                    needed = static_cast<std::size_t>(std::ceil(std::max(k, 1.0)));
            }
        }
    }
    if (!best || best_count < 8)
        return std::nullopt;
    EssentialModel model{*best, std::vector<NormalizedPair>(pairs.begin(), pairs.end()),
                         essential_inliers(*best, pairs, cfg.sampson_threshold)};
    for (int round = 0; round < 5; ++round) {
        std::vector<NormalizedPair> support;
        for (std::size_t i : model.inliers)
            support.push_back(pairs[i]);
        Eigen::Matrix3d e;
        try {
            e = essential_eight_point(support);
        } catch (const DegenerateError&) {
            break;
        }
        auto inl = essential_inliers(e, pairs, cfg.sampson_threshold);
        if (inl.size() < model.inliers.size())
            break;
        const bool same = inl == model.inliers;
        model.e = e;
        model.inliers = std::move(inl);
        if (same)
            break;
    }
    return model;
}

std::vector<NormalizedPair> flow_correspondences(const FlowField& flow, const MatchabilityMap& matchability,
                                                 const CameraIntrinsics& k_src, const CameraIntrinsics& k_tgt,
                                                 const EssentialConfig& cfg)
{
    k_src.validate();
    k_tgt.validate();
    if (matchability.width() != flow.width() || matchability.height() != flow.height())
        throw InvalidArgument("matchability and flow grids differ");
    std::vector<std::pair<int, int>> cand;
    for (int y = 0; y < flow.height(); ++y)
        for (int x = 0; x < flow.width(); ++x)
            if (flow.valid(x, y) && matchability.at(x, y) > cfg.matchability_threshold)
                cand.emplace_back(x, y);
    std::vector<NormalizedPair> out;
    const std::size_t n = cand.size();
    const std::size_t take = cfg.max_points > 0 ? std::min(n, cfg.max_points) : n;
    out.reserve(take);
    for (std::size_t k = 0; k < take; ++k) {
        const auto [x, y] = cand[take == n ? k : (k * n) / take];
        out.push_back({k_src.normalize(flow.map(x, y)), k_tgt.normalize({double(x), double(y)})});
    }
    return out;
}

std::optional<EssentialModel> essential_from_flow(const FlowField& flow, const MatchabilityMap& matchability,
                                                  const CameraIntrinsics& k_src, const CameraIntrinsics& k_tgt,
                                                  const EssentialConfig& cfg)
{
    const auto pairs = flow_correspondences(flow, matchability, k_src, k_tgt, cfg);
    if (pairs.size() < 8)
        return std::nullopt;
    return ransac_essential(pairs, cfg);
}

RelativePose decompose_essential(const Eigen::Matrix3d& e, std::span<const NormalizedPair> pairs)
{
    if (pairs.empty())
        throw InvalidArgument("pose decomposition needs correspondences");
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(e, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::Matrix3d u = svd.matrixU(), v = svd.matrixV();
    if (u.determinant() < 0)
        u = -u;
    if (v.determinant() < 0)
        v = -v;
    Eigen::Matrix3d w;
    w << 0, -1, 0, 1, 0, 0, 0, 0, 1;
    const Eigen::Matrix3d r1 = u * w * v.transpose();
    const Eigen::Matrix3d r2 = u * w.transpose() * v.transpose();
    const Eigen::Vector3d t = u.col(2).normalized();
    const std::pair<Eigen::Matrix3d, Eigen::Vector3d> candidates[4] = {{r1, t}, {r1, -t}, {r2, t}, {r2, -t}};

    std::size_t best_count = 0;
    int best = -1;
    for (int c = 0; c < 4; ++c) {
        const auto& [r, tc] = candidates[c];
        Eigen::Matrix<double, 3, 4> p2;
        p2 << r, tc;
        std::size_t count = 0;
        for (const auto& pr : pairs) {
            Eigen::Matrix4d a;
            a.row(0) << -1, 0, pr.src.x(), 0;
            a.row(1) << 0, -1, pr.src.y(), 0;
            a.row(2) = pr.tgt.x() * p2.row(2) - p2.row(0);
            a.row(3) = pr.tgt.y() * p2.row(2) - p2.row(1);
            Eigen::JacobiSVD<Eigen::Matrix4d> s4(a, Eigen::ComputeFullV);
            const Eigen::Vector4d x = s4.matrixV().col(3);
            if (std::abs(x(3)) < 1e-12)
                continue;
            const Eigen::Vector3d pt = x.head<3>() / x(3);
            const double z2 = (r * pt + tc).z();
            if (pt.z() > 0.0 && z2 > 0.0)
                ++count;
        }
        if (count > best_count) {
            best_count = count;
            best = c;
        }
    }
    if (best < 0 || 2 * best_count <= pairs.size())
        throw DegenerateError("no pose candidate passes cheirality for a majority of points");
    RelativePose pose;
    // Re-orthonormalize to suppress round-off.
    Eigen::JacobiSVD<Eigen::Matrix3d> rs(candidates[best].first, Eigen::ComputeFullU | Eigen::ComputeFullV);
    pose.rotation = rs.matrixU() * rs.matrixV().transpose();
    pose.translation = candidates[best].second.normalized();
    return pose;
}

AngularError pose_angular_error(const RelativePose& est, const RelativePose& gt)
{
    const Eigen::Matrix3d d = gt.rotation.transpose() * est.rotation;
    const double c = std::clamp((d.trace() - 1.0) / 2.0, -1.0, 1.0);
    const double ct = std::clamp(std::abs(gt.translation.normalized().dot(est.translation.normalized())), 0.0, 1.0);
    constexpr double deg = 180.0 / std::numbers::pi;
    return {std::acos(c) * deg, std::acos(ct) * deg};
}

std::vector<double> pose_map(std::span<const AngularError> errors, std::span<const double> thresholds)
{
    if (errors.empty())
        throw InvalidArgument("pose_map needs at least one pair");
    std::vector<double> out;
    for (double tau : thresholds) {
        std::size_t ok = 0;
        for (const auto& e : errors)
            if (std::max(e.rotation_deg, e.translation_deg) <= tau)
                ++ok;
        out.push_back(100.0 * static_cast<double>(ok) / static_cast<double>(errors.size()));
    }
    return out;
}

Eigen::Matrix3d axis_angle(const Eigen::Vector3d& axis, double deg)
{
    return Eigen::AngleAxisd(deg * std::numbers::pi / 180.0, axis.normalized()).toRotationMatrix();
}

}  // namespace rfk::eval
