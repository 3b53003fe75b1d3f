#include "rfk/robust.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace rfk::robust {

void RansacConfig::validate() const
{
    if (!(inlier_threshold > 0.0))
        throw InvalidArgument("ransac inlier_threshold must be > 0");
    if (!(confidence > 0.0 && confidence < 1.0))
        throw InvalidArgument("ransac confidence must be in (0, 1)");
    if (max_iterations < 1)
        throw InvalidArgument("ransac max_iterations must be >= 1");
    if (min_inliers_accept < 4)
        throw InvalidArgument("ransac min_inliers_accept must be >= 4");
}

std::uint64_t Rng::next()
{
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

std::uint64_t Rng::below(std::uint64_t n)
{
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t v;
    do {
        v = next();
    } while (v >= limit);
    return v % n;
}

double Rng::uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

namespace {

// Similarity transform moving the centroid to the origin with mean distance
// sqrt(2).
Eigen::Matrix3d normalizer(std::span<const Vec2> pts)
{
    double cx = 0.0, cy = 0.0;
    for (const Vec2& p : pts) {
        cx += p.x;
        cy += p.y;
    }
    cx /= static_cast<double>(pts.size());
    cy /= static_cast<double>(pts.size());
    double mean = 0.0;
    for (const Vec2& p : pts)
        mean += std::hypot(p.x - cx, p.y - cy);
    mean /= static_cast<double>(pts.size());
    if (!(mean > 1e-12))
        throw DegenerateError("homography fit: all points coincide");
    const double s = std::sqrt(2.0) / mean;
    Eigen::Matrix3d t;
    t << s, 0, -s * cx, 0, s, -s * cy, 0, 0, 1;
    return t;
}

double triangle_area2(Vec2 a, Vec2 b, Vec2 c) { return std::abs((b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)); }

// True when some three of the four points are (nearly) collinear relative to
// the spread of the sample.
bool degenerate_quad(const Vec2 (&p)[4])
{
    double scale = 0.0;
    for (int i = 0; i < 4; ++i)
        for (int j = i + 1; j < 4; ++j)
            scale = std::max(scale, std::hypot(p[i].x - p[j].x, p[i].y - p[j].y));
    if (scale <= 0.0)
        return true;
    const double eps = 1e-6 * scale * scale;
    return triangle_area2(p[0], p[1], p[2]) < eps || triangle_area2(p[0], p[1], p[3]) < eps ||
           triangle_area2(p[0], p[2], p[3]) < eps || triangle_area2(p[1], p[2], p[3]) < eps;
}

/// Inliers and truncated quadratic cost sum(min(e^2, t^2)).
struct Consensus {
    std::vector<std::size_t> inliers;
    double cost = std::numeric_limits<double>::infinity();
};

Consensus consensus_of(const Homography& h, std::span<const Correspondence> corrs, double threshold)
{
    const Homography hinv = h.inverse();
    const double cap = threshold * threshold;
    Consensus out;
    out.cost = 0.0;
    for (std::size_t i = 0; i < corrs.size(); ++i) {
        const double e = symmetric_transfer_error(h, hinv, corrs[i]);
        if (e < threshold) {
            out.inliers.push_back(i);
            out.cost += e * e;
        } else {
            out.cost += cap;
        }
    }
    return out;
}

std::size_t required_iterations(std::size_t inliers, std::size_t total, double confidence, int cap)
{
    const double w = static_cast<double>(inliers) / static_cast<double>(total);
    const double p_good = std::pow(w, 4);
    if (p_good >= 1.0)
        return 1;
    if (p_good <= 0.0)
        return static_cast<std::size_t>(cap);
    const double n = std::log(1.0 - confidence) / std::log(1.0 - p_good);
    if (!std::isfinite(n) || n > cap)
        return static_cast<std::size_t>(cap);
    return static_cast<std::size_t>(std::ceil(std::max(n, 1.0)));
}

}  // namespace

Homography fit_homography_dlt(std::span<const Correspondence> corrs)
{
    if (corrs.size() < 4)
        throw InvalidArgument("homography fit needs at least 4 correspondences");
    std::vector<Vec2> src(corrs.size()), tgt(corrs.size());
    for (std::size_t i = 0; i < corrs.size(); ++i) {
        src[i] = corrs[i].src;
        tgt[i] = corrs[i].tgt;
    }
    if (corrs.size() == 4) {
        const Vec2 qs[4] = {src[0], src[1], src[2], src[3]};
        const Vec2 qt[4] = {tgt[0], tgt[1], tgt[2], tgt[3]};
        if (degenerate_quad(qs) || degenerate_quad(qt))
            throw DegenerateError("homography fit: collinear minimal sample");
    }
    const Eigen::Matrix3d ts = normalizer(src);
    const Eigen::Matrix3d tt = normalizer(tgt);

    const auto n = static_cast<Eigen::Index>(corrs.size());
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(std::max<Eigen::Index>(2 * n, 9), 9);
    for (Eigen::Index i = 0; i < n; ++i) {
        const Eigen::Vector3d p = ts * Eigen::Vector3d(src[i].x, src[i].y, 1.0);
        const Eigen::Vector3d q = tt * Eigen::Vector3d(tgt[i].x, tgt[i].y, 1.0);
        const double x = p.x(), y = p.y(), u = q.x(), v = q.y();
        a.row(2 * i) << -x, -y, -1, 0, 0, 0, u * x, u * y, u;
        a.row(2 * i + 1) << 0, 0, 0, -x, -y, -1, v * x, v * y, v;
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
    const auto& sv = svd.singularValues();
    if (!(sv(7) > 1e-10 * sv(0)))
        throw DegenerateError("homography fit: rank-deficient system");
    const Eigen::VectorXd hv = svd.matrixV().col(8);
    Eigen::Matrix3d hn;
    hn << hv(0), hv(1), hv(2), hv(3), hv(4), hv(5), hv(6), hv(7), hv(8);
    const Eigen::Matrix3d h = tt.inverse() * hn * ts;
    return Homography(h);
}

double symmetric_transfer_error(const Homography& h, const Homography& h_inv, const Correspondence& c)
{
    const auto fwd = h.apply(c.src);
    const auto bwd = h_inv.apply(c.tgt);
    if (!fwd || !bwd)
        return std::numeric_limits<double>::infinity();
    const double e = 0.5 * (norm(*fwd - c.tgt) + norm(*bwd - c.src));
    return std::isfinite(e) ? e : std::numeric_limits<double>::infinity();
}

std::optional<HomographyModel> ransac_homography(std::span<const Correspondence> corrs, const RansacConfig& cfg)
{
    cfg.validate();
    const std::size_t n = corrs.size();
    if (n < 4)
        return std::nullopt;

    Rng rng(cfg.seed);
    std::optional<Homography> best_h;
    Consensus best;
    std::size_t needed = static_cast<std::size_t>(cfg.max_iterations);

    for (std::size_t iter = 0; iter < needed; ++iter) {
        std::size_t idx[4];
        for (int k = 0; k < 4; ++k) {
            bool fresh;
            do {
                idx[k] = static_cast<std::size_t>(rng.below(n));
                fresh = std::none_of(idx, idx + k, [&](std::size_t j) { return j == idx[k]; });
            } while (!fresh);
        }
        const Correspondence sample[4] = {corrs[idx[0]], corrs[idx[1]], corrs[idx[2]], corrs[idx[3]]};
        Homography h;
        try {
            h = fit_homography_dlt(sample);
        } catch (const DegenerateError&) {
            continue;
        }
        Consensus c;
        try {
            c = consensus_of(h, corrs, cfg.inlier_threshold);
        } catch (const DegenerateError&) {
            continue;
        }
        if (c.cost < best.cost) {
            needed = std::min<std::size_t>(
                needed, required_iterations(c.inliers.size(), n, cfg.confidence, cfg.max_iterations));
            best = std::move(c);
            best_h = h;
        }
    }
    if (!best_h || best.inliers.size() < static_cast<std::size_t>(cfg.min_inliers_accept))
        return std::nullopt;

    // Least-squares refits over the consensus set, kept while they do not
    // raise the truncated cost.
    HomographyModel model{*best_h, std::move(best.inliers)};
    double cost = best.cost;
    for (int round = 0; round < 10; ++round) {
        std::vector<Correspondence> support;
        support.reserve(model.inliers.size());
        for (std::size_t i : model.inliers)
            support.push_back(corrs[i]);
        Homography h;
        Consensus c;
        try {
            h = fit_homography_dlt(support);
            c = consensus_of(h, corrs, cfg.inlier_threshold);
        } catch (const DegenerateError&) {
            break;
        }
        if (c.cost > cost)
            break;
        const bool same = c.inliers == model.inliers;
        model = {h, std::move(c.inliers)};
        cost = c.cost;
        if (same)
            break;
    }
    if (model.inliers.size() < static_cast<std::size_t>(cfg.min_inliers_accept))
        return std::nullopt;
    return model;
}

std::vector<HomographyModel> multi_homography_decompose(std::span<const Correspondence> corrs,
                                                        const RansacConfig& cfg,
                                                        const std::vector<MatchabilityMap>& prev_masks,
                                                        const IterationHook& hook)
{
    cfg.validate();
    std::vector<std::size_t> pool(corrs.size());
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    std::vector<HomographyModel> models;

    auto claimed = [&](const MatchabilityMap& m, const Correspondence& c) {
        const long x = std::lround(c.tgt.x), y = std::lround(c.tgt.y);
        if (x < 0 || y < 0 || x >= m.width() || y >= m.height())
            return false;
        return m.at(static_cast<int>(x), static_cast<int>(y)) > cfg.mask_threshold;
    };

    while (pool.size() >= static_cast<std::size_t>(std::max(cfg.min_matches_continue, 4))) {
        std::vector<Correspondence> subset;
        subset.reserve(pool.size());
        for (std::size_t i : pool)
            subset.push_back(corrs[i]);
        RansacConfig round_cfg = cfg;
        round_cfg.seed = cfg.seed + 0x9E3779B97F4A7C15ull * models.size();
        auto found = ransac_homography(subset, round_cfg);
        if (!found)
            break;

        HomographyModel model{found->h, {}};
        std::vector<std::uint8_t> drop(pool.size(), 0);
        for (std::size_t k : found->inliers) {
            model.inliers.push_back(pool[k]);
            drop[k] = 1;
        }
        const std::size_t index = models.size();
        std::optional<MatchabilityMap> hook_mask;
        if (hook)
            hook_mask = hook(index, model);
        for (std::size_t k = 0; k < pool.size(); ++k) {
            if (drop[k])
                continue;
            const Correspondence& c = corrs[pool[k]];
            if ((index < prev_masks.size() && claimed(prev_masks[index], c)) || (hook_mask && claimed(*hook_mask, c)))
                drop[k] = 1;
        }
        std::vector<std::size_t> next;
        for (std::size_t k = 0; k < pool.size(); ++k)
            if (!drop[k])
                next.push_back(pool[k]);
        pool = std::move(next);
        models.push_back(std::move(model));
    }
    return models;
}

Warped warp_by_homography(const Image& img, const Homography& h, int out_w, int out_h, bool clamp_border)
{
    const Homography hinv = h.inverse();
    Warped out{Image(out_w, out_h, img.channels()), Mask(out_w, out_h, false)};
    for (int y = 0; y < out_h; ++y)
        for (int x = 0; x < out_w; ++x) {
            const auto p = hinv.apply({double(x), double(y)});
            if (!p)
                continue;
            const auto v = bilinear_sample(img, p->x, p->y);
            if (v) {
                for (int c = 0; c < img.channels(); ++c)
                    out.image.at(x, y, c) = (*v)[c];
                out.valid.set(x, y, true);
            } else if (clamp_border && std::isfinite(p->x) && std::isfinite(p->y)) {
                const auto e = bilinear_sample(img, std::clamp(p->x, 0.0, img.width() - 1.0),
                                               std::clamp(p->y, 0.0, img.height() - 1.0));
                for (int c = 0; c < img.channels(); ++c)
                    out.image.at(x, y, c) = (*e)[c];
            }
        }
    return out;
}

}  // namespace rfk::robust
