#include "oracle.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

namespace rfk::testing {

namespace {

std::vector<double> luma_or_channel(const Image& img, int c, bool gray)
{
    std::vector<double> out(static_cast<std::size_t>(img.width()) * img.height());
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x) {
            double v;
            if (gray && img.channels() == 3)
                v = 0.299 * img.at(x, y, 0) + 0.587 * img.at(x, y, 1) + 0.114 * img.at(x, y, 2);
            else
                v = img.at(x, y, c);
            out[static_cast<std::size_t>(y) * img.width() + x] = v;
        }
    return out;
}

struct Corners {
    int x0, y0, x1, y1;
    double fx, fy;
};

std::optional<Corners> corners(double x, double y, int w, int h)
{
    if (!(x >= 0.0 && y >= 0.0 && x <= w - 1 && y <= h - 1))
        return std::nullopt;
    Corners c;
    c.x0 = std::min(static_cast<int>(std::floor(x)), std::max(w - 2, 0));
    c.y0 = std::min(static_cast<int>(std::floor(y)), std::max(h - 2, 0));
    c.x1 = std::min(c.x0 + 1, w - 1);
    c.y1 = std::min(c.y0 + 1, h - 1);
    c.fx = x - c.x0;
    c.fy = y - c.y0;
    return c;
}

template <class F>
double interp(const Corners& c, F get)
{
    return get(c.x0, c.y0) * (1 - c.fx) * (1 - c.fy) + get(c.x1, c.y0) * c.fx * (1 - c.fy) +
           get(c.x0, c.y1) * (1 - c.fx) * c.fy + get(c.x1, c.y1) * c.fx * c.fy;
}

}  // namespace

double oracle_ssim_at(const std::vector<double>& a, const std::vector<double>& b, int w, int h, int x, int y,
                      const OracleParams& p)
{
    const int r = p.window / 2;
    double ws = 0, ma = 0, mb = 0, aa = 0, bb = 0, ab = 0;
    for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
            const int u = x + dx, v = y + dy;
            if (u < 0 || v < 0 || u >= w || v >= h)
                continue;
            const double g = std::exp(-(dx * dx + dy * dy) / (2 * p.sigma * p.sigma));
            const double va = a[static_cast<std::size_t>(v) * w + u], vb = b[static_cast<std::size_t>(v) * w + u];
            ws += g;
            ma += g * va;
            mb += g * vb;
            aa += g * va * va;
            bb += g * vb * vb;
            ab += g * va * vb;
        }
    ma /= ws;
    mb /= ws;
    const double va = aa / ws - ma * ma, vb = bb / ws - mb * mb, cov = ab / ws - ma * mb;
    return ((2 * ma * mb + p.c1) * (2 * cov + p.c2)) / ((ma * ma + mb * mb + p.c1) * (va + vb + p.c2));
}

OracleTerms oracle_total_loss(const Image& src, const Image& tgt, const FlowField& flow_st, const FlowField& flow_ts,
                              const MatchabilityMap& m_st, const MatchabilityMap& m_ts, const OracleParams& p)
{
    const int ws = src.width(), hs = src.height(), wt = tgt.width(), ht = tgt.height();
    const int nch = p.grayscale ? 1 : src.channels();
    std::vector<double> mc(static_cast<std::size_t>(wt) * ht, 0.0), cyc(mc.size(), 0.0);
    std::vector<bool> counted(mc.size(), false);
    std::vector<std::vector<double>> warped(static_cast<std::size_t>(nch), std::vector<double>(mc.size(), 0.0));
    std::vector<std::vector<double>> splanes, tplanes;
    for (int c = 0; c < nch; ++c) {
        splanes.push_back(luma_or_channel(src, c, p.grayscale));
        tplanes.push_back(luma_or_channel(tgt, c, p.grayscale));
    }

    for (int y = 0; y < ht; ++y)
        for (int x = 0; x < wt; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * wt + x;
            if (!flow_st.valid(x, y))
                continue;
            counted[i] = true;
            const Vec2 q = flow_st.map(x, y);
            const auto cr = corners(q.x, q.y, ws, hs);
            if (!cr)
                continue;
            if (!flow_ts.valid(cr->x0, cr->y0) || !flow_ts.valid(cr->x1, cr->y0) || !flow_ts.valid(cr->x0, cr->y1) ||
                !flow_ts.valid(cr->x1, cr->y1))
                continue;
            for (int c = 0; c < nch; ++c)
                warped[static_cast<std::size_t>(c)][i] =
                    interp(*cr, [&](int u, int v) { return splanes[static_cast<std::size_t>(c)][static_cast<std::size_t>(v) * ws + u]; });
            const double back = interp(*cr, [&](int u, int v) { return m_ts.at(u, v); });
            mc[i] = m_st.at(x, y) * back;
            const double rx = interp(*cr, [&](int u, int v) { return flow_ts.map(u, v).x; });
            const double ry = interp(*cr, [&](int u, int v) { return flow_ts.map(u, v).y; });
            cyc[i] = std::sqrt((rx - x) * (rx - x) + (ry - y) * (ry - y));
        }

    OracleTerms t;
    int n = 0;
    for (int y = 0; y < ht; ++y)
        for (int x = 0; x < wt; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * wt + x;
            if (!counted[i])
                continue;
            ++n;
            double s = 0.0;
            for (int c = 0; c < nch; ++c)
                s += oracle_ssim_at(warped[static_cast<std::size_t>(c)], tplanes[static_cast<std::size_t>(c)], wt, ht, x,
                                    y, p);
            s /= nch;
            t.ssim += mc[i] * (1.0 - s);
            t.match += std::abs(mc[i] - 1.0);
            t.cycle += mc[i] * cyc[i];
        }
    if (n == 0)
        return t;
    t.ssim /= n;
    t.match /= n;
    t.cycle /= n;
    t.total = t.ssim + p.lambda * t.match + p.mu * t.cycle;
    return t;
}

namespace {

template <class F>
void for_each_eval(const FlowField& pred, const FlowField& gt, bool exclude_missing, F f)
{
    for (int y = 0; y < gt.height(); ++y)
        for (int x = 0; x < gt.width(); ++x) {
            if (!gt.valid(x, y))
                continue;
            const double gx = gt.map(x, y).x - x, gy = gt.map(x, y).y - y;
            const double mag = std::sqrt(gx * gx + gy * gy);
            if (pred.valid(x, y)) {
                const double ex = pred.map(x, y).x - gt.map(x, y).x, ey = pred.map(x, y).y - gt.map(x, y).y;
                f(std::sqrt(ex * ex + ey * ey), mag);
            } else if (!exclude_missing) {
                f(mag, mag);
            }
        }
}

}  // namespace

double oracle_aee(const FlowField& pred, const FlowField& gt, bool exclude_missing)
{
    double s = 0.0;
    int n = 0;
    for_each_eval(pred, gt, exclude_missing, [&](double e, double) {
        s += e;
        ++n;
    });
    return s / n;
}

double oracle_fl_all(const FlowField& pred, const FlowField& gt, bool exclude_missing)
{
    int bad = 0, n = 0;
    for_each_eval(pred, gt, exclude_missing, [&](double e, double m) {
        ++n;
        if (e > 3.0 && e > 0.05 * m)
            ++bad;
    });
    return 100.0 * bad / n;
}

double oracle_sparse_accuracy(const FlowField& flow, std::span<const Correspondence> corrs, double d)
{
    int ok = 0;
    for (const auto& c : corrs) {
        const auto cr = corners(c.tgt.x, c.tgt.y, flow.width(), flow.height());
        if (!cr || !flow.valid(cr->x0, cr->y0) || !flow.valid(cr->x1, cr->y0) || !flow.valid(cr->x0, cr->y1) ||
            !flow.valid(cr->x1, cr->y1))
            continue;
        const double sx = interp(*cr, [&](int u, int v) { return flow.map(u, v).x; });
        const double sy = interp(*cr, [&](int u, int v) { return flow.map(u, v).y; });
        if (std::sqrt((sx - c.src.x) * (sx - c.src.x) + (sy - c.src.y) * (sy - c.src.y)) < d)
            ++ok;
    }
    return 100.0 * ok / static_cast<double>(corrs.size());
}

double oracle_map_at(std::span<const std::pair<double, double>> errors, double tau)
{
    int ok = 0;
    for (const auto& [r, t] : errors)
        if (r <= tau && t <= tau)
            ++ok;
    return 100.0 * ok / static_cast<double>(errors.size());
}

}  // namespace rfk::testing
