#include "rfk/compose.hpp"

#include <cmath>

namespace rfk::compose {

FlowField compose_homography_flow(const Homography& h, const FlowField& fine, int src_width, int src_height)
{
    const Homography hinv = h.inverse();
    const bool check = src_width > 0 && src_height > 0;
    FlowField out(fine.width(), fine.height());
    for (int y = 0; y < fine.height(); ++y)
        for (int x = 0; x < fine.width(); ++x) {
            if (!fine.valid(x, y))
                continue;
            const auto p = hinv.apply(fine.map(x, y));
            if (!p || !std::isfinite(p->x) || !std::isfinite(p->y))
                continue;
            const bool ok = !check || in_bounds(p->x, p->y, src_width, src_height);
            out.set(x, y, *p, ok);
        }
    return out;
}

Aggregate aggregate_flows(const std::vector<FlowIteration>& iterations, double threshold, OverlapPolicy policy)
{
    Aggregate out;
    if (iterations.empty())
        return out;
    const int w = iterations.front().flow.width(), h = iterations.front().flow.height();
    for (const auto& it : iterations)
        if (it.flow.width() != w || it.flow.height() != h || it.matchability.width() != w ||
            it.matchability.height() != h)
            throw InvalidArgument("aggregate_flows: all iterations must share the target grid");
    out.flow = FlowField(w, h);
    out.matchability = MatchabilityMap(w, h, 0.0);
    out.owner.assign(static_cast<std::size_t>(w) * h, -1);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            int owner = -1;
            double best = 0.0;
            for (std::size_t k = 0; k < iterations.size(); ++k) {
                const auto& it = iterations[k];
                const double m = it.matchability.at(x, y);
                if (!it.flow.valid(x, y) || !(m > threshold))
                    continue;
                if (owner < 0 || (policy == OverlapPolicy::highest_matchability && m > best)) {
                    owner = static_cast<int>(k);
                    best = m;
                }
                if (policy == OverlapPolicy::first_wins)
                    break;
            }
            if (owner < 0)
                continue;
            const auto& it = iterations[static_cast<std::size_t>(owner)];
            out.flow.set(x, y, it.flow.map(x, y));
            out.matchability.at(x, y) = it.matchability.at(x, y);
            out.owner[static_cast<std::size_t>(y) * w + x] = owner;
        }
    return out;
}

Warped warp_with_flow(const Image& img, const FlowField& flow)
{
    Warped out{Image(flow.width(), flow.height(), img.channels()), Mask(flow.width(), flow.height(), false)};
    for (int y = 0; y < flow.height(); ++y)
        for (int x = 0; x < flow.width(); ++x) {
            if (!flow.valid(x, y))
                continue;
            const Vec2 q = flow.map(x, y);
            const auto v = bilinear_sample(img, q.x, q.y);
            if (!v)
                continue;
            for (int c = 0; c < img.channels(); ++c)
                out.image.at(x, y, c) = (*v)[c];
            out.valid.set(x, y, true);
        }
    return out;
}

Image average_aligned(const std::vector<Warped>& images)
{
    if (images.empty())
        throw InvalidArgument("average_aligned needs at least one image");
    const Image& first = images.front().image;
    const int w = first.width(), h = first.height(), ch = first.channels();
    for (const auto& im : images)
        if (im.image.width() != w || im.image.height() != h || im.image.channels() != ch || im.valid.width != w ||
            im.valid.height != h)
            throw InvalidArgument("average_aligned: all images must share dimensions");
    Image out(w, h, ch);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            int n = 0;
            for (const auto& im : images)
                if (im.valid.at(x, y))
                    ++n;
            if (n == 0)
                continue;
            for (int c = 0; c < ch; ++c) {
                double s = 0.0;
                for (const auto& im : images)
                    if (im.valid.at(x, y))
                        s += im.image.at(x, y, c);
                out.at(x, y, c) = s / n;
            }
        }
    return out;
}

Image texture_transfer(const Image& src, const Image& tgt, const FlowField& flow, const MatchabilityMap& region,
                       double threshold)
{
    if (region.width() != tgt.width() || region.height() != tgt.height() || flow.width() != tgt.width() ||
        flow.height() != tgt.height())
        throw InvalidArgument("texture_transfer: region and flow must live on the target grid");
    if (src.channels() != tgt.channels())
        throw InvalidArgument("texture_transfer: channel counts differ");
    const Warped warped = warp_with_flow(src, flow);
    Image out = tgt;
    for (int y = 0; y < tgt.height(); ++y)
        for (int x = 0; x < tgt.width(); ++x)
            if (region.at(x, y) > threshold && warped.valid.at(x, y))
                for (int c = 0; c < tgt.channels(); ++c)
                    out.at(x, y, c) = warped.image.at(x, y, c);
    return out;
}

void apply_exclusion(MatchabilityMap& m, const Mask& exclude)
{
    if (exclude.width != m.width() || exclude.height != m.height())
        throw InvalidArgument("exclusion mask does not match the matchability grid");
    for (std::size_t i = 0; i < exclude.values.size(); ++i)
        if (exclude.values[i])
            m.values()[i] = 0.0;
}

Image overlay(const Warped& a, const Image& b)
{
    if (a.image.width() != b.width() || a.image.height() != b.height())
        throw InvalidArgument("overlay: size mismatch");
    const Image ga = a.image.channels() == b.channels() ? a.image : to_gray(a.image);
    const Image gb = a.image.channels() == b.channels() ? b : to_gray(b);
    Image out = gb;
    for (int y = 0; y < b.height(); ++y)
        for (int x = 0; x < b.width(); ++x)
            if (a.valid.at(x, y))
                for (int c = 0; c < out.channels(); ++c)
                    out.at(x, y, c) = 0.5 * (ga.at(x, y, c) + gb.at(x, y, c));
    return out;
}

}  // namespace rfk::compose
