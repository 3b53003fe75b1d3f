#include "rfk/fineflow.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

namespace rfk::fineflow {

void ObjectiveConfig::validate() const
{
    if (lambda_match < 0.0 || mu_cycle < 0.0)
        throw InvalidArgument("objective weights must be >= 0");
    if (ssim_window < 3 || ssim_window % 2 == 0)
        throw InvalidArgument("ssim_window must be odd and >= 3");
    if (!(ssim_sigma > 0.0))
        throw InvalidArgument("ssim_sigma must be > 0");
    if (ssim_c1 < 0.0 || ssim_c2 < 0.0)
        throw InvalidArgument("ssim stabilizers must be >= 0");
}

void OptimizeSchedule::validate() const
{
    if (stage1 < 0 || stage2 < 0 || stage3 < 0)
        throw InvalidArgument("stage lengths must be >= 0");
    if (!(step_size > 0.0) || !(logit_step > 0.0))
        throw InvalidArgument("step sizes must be > 0");
    if (!(decay > 0.0 && decay <= 1.0))
        throw InvalidArgument("step decay must be in (0, 1]");
    if (max_halvings < 0)
        throw InvalidArgument("max_halvings must be >= 0");
}

// ---------------------------------------------------------------------------
// Correlation volume

CorrelationVolume correlation_volume(const FeatureMap& src, const FeatureMap& tgt, int radius)
{
    if (radius < 0)
        throw InvalidArgument("correlation radius must be >= 0");
    if (src.grid_w != tgt.grid_w || src.grid_h != tgt.grid_h || src.channels != tgt.channels)
        throw InvalidArgument("correlation volume needs feature maps of identical shape");
    CorrelationVolume vol;
    vol.grid_w = src.grid_w;
    vol.grid_h = src.grid_h;
    vol.radius = radius;
    const int nch = vol.channels();
    vol.values.assign(static_cast<std::size_t>(vol.grid_w) * vol.grid_h * nch, kCorrelationSentinel);

    auto cell_norm = [](const FeatureMap& fm, int i, int j) {
        const float* d = fm.cell(i, j);
        double s = 0.0;
        for (int c = 0; c < fm.channels; ++c)
            s += double(d[c]) * d[c];
        return std::sqrt(s);
    };
    std::vector<double> tnorm(static_cast<std::size_t>(tgt.grid_w) * tgt.grid_h);
    for (int j = 0; j < tgt.grid_h; ++j)
        for (int i = 0; i < tgt.grid_w; ++i)
            tnorm[static_cast<std::size_t>(j) * tgt.grid_w + i] = cell_norm(tgt, i, j);

    for (int j = 0; j < src.grid_h; ++j)
        for (int i = 0; i < src.grid_w; ++i) {
            const double sn = cell_norm(src, i, j);
            if (sn == 0.0)
                continue;
            const float* a = src.cell(i, j);
            double* out = vol.values.data() + (static_cast<std::size_t>(j) * vol.grid_w + i) * nch;
            for (int n = -radius; n <= radius; ++n)
                for (int m = -radius; m <= radius; ++m) {
                    const int ti = i - m, tj = j - n;
                    if (ti < 0 || tj < 0 || ti >= tgt.grid_w || tj >= tgt.grid_h)
                        continue;
                    const double tn = tnorm[static_cast<std::size_t>(tj) * tgt.grid_w + ti];
                    if (tn == 0.0)
                        continue;
                    const float* b = tgt.cell(ti, tj);
                    double dot = 0.0;
                    for (int c = 0; c < src.channels; ++c)
                        dot += double(a[c]) * b[c];
                    out[vol.channel(m, n)] = dot / (sn * tn);
                }
        }
    return vol;
}

DisplacementGrid init_flow_from_correlation(const CorrelationVolume& vol, int stride)
{
    DisplacementGrid g;
    g.grid_w = vol.grid_w;
    g.grid_h = vol.grid_h;
    g.cells.assign(static_cast<std::size_t>(vol.grid_w) * vol.grid_h, Vec2{});
    const int k = vol.radius;
    for (int j = 0; j < vol.grid_h; ++j)
        for (int i = 0; i < vol.grid_w; ++i) {
            double best = kCorrelationSentinel;
            int best_m = 0, best_n = 0, best_r2 = 0;
            bool found = false;
            for (int n = -k; n <= k; ++n)
                for (int m = -k; m <= k; ++m) {
                    const double v = vol.at(i, j, m, n);
                    if (v <= kCorrelationSentinel)
                        continue;
                    const int r2 = m * m + n * n;
                    if (!found || v > best || (v == best && r2 < best_r2)) {
                        found = true;
                        best = v;
                        best_m = m;
                        best_n = n;
                        best_r2 = r2;
                    }
                }
            if (found)
                g.cells[static_cast<std::size_t>(j) * g.grid_w + i] = {double(-best_m * stride), double(-best_n * stride)};
        }
    return g;
}

// ---------------------------------------------------------------------------
// SSIM machinery

namespace {

// Separable Gaussian window truncated at the image border and renormalized
// over the in-image taps.
class WindowFilter {
public:
    WindowFilter(int w, int h, int size, double sigma) : w_(w), h_(h), r_(size / 2)
    {
        kernel_.resize(static_cast<std::size_t>(size));
        double sum = 0.0;
        for (int t = -r_; t <= r_; ++t) {
            kernel_[static_cast<std::size_t>(t + r_)] = std::exp(-(t * t) / (2.0 * sigma * sigma));
            sum += kernel_[static_cast<std::size_t>(t + r_)];
        }
        for (double& v : kernel_)
            v /= sum;
        nx_ = axis_norm(w_);
        ny_ = axis_norm(h_);
        tmp_.resize(static_cast<std::size_t>(w_) * h_);
    }

    void apply(const double* in, double* out)
    {
        pass_x(in, tmp_.data());
        pass_y(tmp_.data(), out);
        for (int y = 0; y < h_; ++y)
            for (int x = 0; x < w_; ++x)
                out[idx(x, y)] /= nx_[static_cast<std::size_t>(x)] * ny_[static_cast<std::size_t>(y)];
    }

    void adjoint(const double* in, double* out)
    {
        std::vector<double> scaled(static_cast<std::size_t>(w_) * h_);
        for (int y = 0; y < h_; ++y)
            for (int x = 0; x < w_; ++x)
                scaled[idx(x, y)] = in[idx(x, y)] / (nx_[static_cast<std::size_t>(x)] * ny_[static_cast<std::size_t>(y)]);
        pass_x(scaled.data(), tmp_.data());
        pass_y(tmp_.data(), out);
    }

private:
    std::size_t idx(int x, int y) const { return static_cast<std::size_t>(y) * w_ + x; }

    std::vector<double> axis_norm(int n) const
    {
        std::vector<double> out(static_cast<std::size_t>(n), 0.0);
        for (int x = 0; x < n; ++x)
            for (int t = -r_; t <= r_; ++t)
                if (x + t >= 0 && x + t < n)
                    out[static_cast<std::size_t>(x)] += kernel_[static_cast<std::size_t>(t + r_)];
        return out;
    }

    // Zero-padded (unnormalized) correlation along one axis, written as
    // per-tap row updates so the inner loops are contiguous.
    void pass_x(const double* in, double* out) const
    {
        for (int y = 0; y < h_; ++y) {
            const double* src = in + idx(0, y);
            double* dst = out + idx(0, y);
            std::fill(dst, dst + w_, 0.0);
            for (int t = -r_; t <= r_; ++t) {
                const double k = kernel_[static_cast<std::size_t>(t + r_)];
                const int lo = std::max(0, -t), hi = std::min(w_, w_ - t);
                for (int x = lo; x < hi; ++x)
                    dst[x] += k * src[x + t];
            }
        }
    }

    void pass_y(const double* in, double* out) const
    {
        for (int y = 0; y < h_; ++y) {
            double* dst = out + idx(0, y);
            std::fill(dst, dst + w_, 0.0);
            const int lo = std::max(-r_, -y), hi = std::min(r_, h_ - 1 - y);
            for (int t = lo; t <= hi; ++t) {
                const double k = kernel_[static_cast<std::size_t>(t + r_)];
                const double* src = in + idx(0, y + t);
                for (int x = 0; x < w_; ++x)
                    dst[x] += k * src[x];
            }
        }
    }

    int w_, h_, r_;
    std::vector<double> kernel_, nx_, ny_, tmp_;
};

std::vector<double> channel_plane(const Image& img, int c)
{
    std::vector<double> out(static_cast<std::size_t>(img.width()) * img.height());
    const int ch = img.channels();
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = img.data()[i * ch + c];
    return out;
}

// SSIM of one channel pair with optional backpropagation of dL/dS into
// dL/da. `upstream` may be null when no gradient is needed.
void ssim_channel(WindowFilter& filt, const std::vector<double>& a, const std::vector<double>& b, double c1,
                  double c2, std::vector<double>& s_out, const std::vector<double>* upstream,
                  std::vector<double>* d_a)
{
    const std::size_t n = a.size();
    std::vector<double> mu_a(n), mu_b(n), e_aa(n), e_bb(n), e_ab(n), tmp(n);
    filt.apply(a.data(), mu_a.data());
    filt.apply(b.data(), mu_b.data());
    for (std::size_t i = 0; i < n; ++i)
        tmp[i] = a[i] * a[i];
    filt.apply(tmp.data(), e_aa.data());
    for (std::size_t i = 0; i < n; ++i)
        tmp[i] = b[i] * b[i];
    filt.apply(tmp.data(), e_bb.data());
    for (std::size_t i = 0; i < n; ++i)
        tmp[i] = a[i] * b[i];
    filt.apply(tmp.data(), e_ab.data());

    std::vector<double> g_mu, g_aa, g_ab;
    if (upstream) {
        g_mu.assign(n, 0.0);
        g_aa.assign(n, 0.0);
        g_ab.assign(n, 0.0);
    }
    s_out.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double ma = mu_a[i], mb = mu_b[i];
        const double var_a = e_aa[i] - ma * ma;
        const double var_b = e_bb[i] - mb * mb;
        const double cov = e_ab[i] - ma * mb;
        const double n1 = 2.0 * ma * mb + c1;
        const double n2 = 2.0 * cov + c2;
        const double d1 = ma * ma + mb * mb + c1;
        const double d2 = var_a + var_b + c2;
        const double den = d1 * d2;
        s_out[i] = n1 * n2 / den;
        if (!upstream)
            continue;
        const double u = (*upstream)[i];
        if (u == 0.0)
            continue;
        // Partial derivatives of S = n1 n2 / (d1 d2).
        const double ds_dn1 = n2 / den;
        const double ds_dn2 = n1 / den;
        const double ds_dd1 = -n1 * n2 / (d1 * den);
        const double ds_dd2 = -n1 * n2 / (d2 * den);
        // Chain through (mu_a, E[a^2], E[ab]).
        const double ds_dmu = ds_dn1 * 2.0 * mb + ds_dn2 * (-2.0 * mb) + ds_dd1 * 2.0 * ma + ds_dd2 * (-2.0 * ma);
        g_mu[i] = u * ds_dmu;
        g_aa[i] = u * ds_dd2;
        g_ab[i] = u * ds_dn2 * 2.0;
    }
    if (!upstream)
        return;
    std::vector<double> back_mu(n), back_aa(n), back_ab(n);
    filt.adjoint(g_mu.data(), back_mu.data());
    filt.adjoint(g_aa.data(), back_aa.data());
    filt.adjoint(g_ab.data(), back_ab.data());
    d_a->resize(n);
    for (std::size_t i = 0; i < n; ++i)
        (*d_a)[i] = back_mu[i] + 2.0 * a[i] * back_aa[i] + b[i] * back_ab[i];
}

Image prepare(const Image& img, const ObjectiveConfig& cfg)
{
    return cfg.grayscale_ssim ? to_gray(img) : img;
}

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

void scatter(std::vector<double>& field, int w, const BilinearFootprint& fp, double v)
{
    auto at = [&](int x, int y) -> double& { return field[static_cast<std::size_t>(y) * w + x]; };
    at(fp.x0, fp.y0) += v * (1 - fp.fx) * (1 - fp.fy);
    at(fp.x1, fp.y0) += v * fp.fx * (1 - fp.fy);
    at(fp.x0, fp.y1) += v * (1 - fp.fx) * fp.fy;
    at(fp.x1, fp.y1) += v * fp.fx * fp.fy;
}

}  // namespace

ScalarMap ssim_map(const Image& a0, const Image& b0, const ObjectiveConfig& cfg)
{
    cfg.validate();
    if (a0.width() != b0.width() || a0.height() != b0.height() || a0.channels() != b0.channels())
        throw InvalidArgument("ssim_map needs images of identical size and channel count");
    const Image a = prepare(a0, cfg), b = prepare(b0, cfg);
    WindowFilter filt(a.width(), a.height(), cfg.ssim_window, cfg.ssim_sigma);
    ScalarMap out(a.width(), a.height(), 0.0);
    std::vector<double> s;
    for (int c = 0; c < a.channels(); ++c) {
        ssim_channel(filt, channel_plane(a, c), channel_plane(b, c), cfg.ssim_c1, cfg.ssim_c2, s, nullptr, nullptr);
        for (std::size_t i = 0; i < s.size(); ++i)
            out.values()[i] += s[i] / a.channels();
    }
    return out;
}

MatchabilityMap cycle_matchability(const MatchabilityMap& sampled_mask, const MatchabilityMap& dest_mask,
                                   const FlowField& flow)
{
    if (dest_mask.width() != flow.width() || dest_mask.height() != flow.height())
        throw InvalidArgument("cycle_matchability: destination mask and flow grids differ");
    MatchabilityMap out(flow.width(), flow.height(), 0.0);
    for (int y = 0; y < flow.height(); ++y)
        for (int x = 0; x < flow.width(); ++x) {
            if (!flow.valid(x, y))
                continue;
            const Vec2 q = flow.map(x, y);
            const auto m = bilinear_sample(sampled_mask, q.x, q.y);
            if (m)
                out.at(x, y) = dest_mask.at(x, y) * *m;
        }
    return out;
}

// ---------------------------------------------------------------------------
// Directional loss

LossTerms directional_loss(const Image& a0, const Image& b0, const FlowField& flow_ab, const FlowField& flow_ba,
                           const MatchabilityMap* m_ab, const MatchabilityMap* m_ba, const ObjectiveConfig& cfg,
                           const StageWeights& weights, DirectionalGradient* grad)
{
    cfg.validate();
    if (a0.channels() != b0.channels())
        throw InvalidArgument("directional_loss: channel counts differ");
    if (flow_ab.width() != b0.width() || flow_ab.height() != b0.height())
        throw InvalidArgument("directional_loss: flow_ab must live on B's grid");
    if (flow_ba.width() != a0.width() || flow_ba.height() != a0.height())
        throw InvalidArgument("directional_loss: flow_ba must live on A's grid");
    const bool frozen = weights.freeze_matchability;
    if (!frozen) {
        if (!m_ab || !m_ba)
            throw InvalidArgument("directional_loss: matchability maps required");
        if (m_ab->width() != b0.width() || m_ab->height() != b0.height() || m_ba->width() != a0.width() ||
            m_ba->height() != a0.height())
            throw InvalidArgument("directional_loss: matchability grids do not match the images");
    }

    const Image a = prepare(a0, cfg), b = prepare(b0, cfg);
    const int wa = a.width(), ha = a.height(), wb = b.width(), hb = b.height();
    const int ch = a.channels();
    const std::size_t nb = static_cast<std::size_t>(wb) * hb;
    const std::size_t na = static_cast<std::size_t>(wa) * ha;

    std::vector<double> disp_x(na, 0.0), disp_y(na, 0.0);
    for (int y = 0; y < ha; ++y)
        for (int x = 0; x < wa; ++x)
            if (flow_ba.valid(x, y)) {
                const Vec2 d = flow_ba.displacement(x, y);
                disp_x[static_cast<std::size_t>(y) * wa + x] = d.x;
                disp_y[static_cast<std::size_t>(y) * wa + x] = d.y;
            }

    struct PixelState {
        bool counted = false;
        bool inside = false;
        BilinearFootprint fp;
        double m1 = 0.0, m2 = 0.0, mc = 0.0;
        double m2_dx = 0.0, m2_dy = 0.0;
        double ex = 0.0, ey = 0.0, cyc = 0.0;
        double jxx = 0.0, jxy = 0.0, jyx = 0.0, jyy = 0.0;  // d(displacement)/d(q)
    };
    std::vector<PixelState> st(nb);
    std::vector<std::vector<double>> warped(static_cast<std::size_t>(ch), std::vector<double>(nb, 0.0));
    std::vector<std::vector<double>> warped_dx, warped_dy;
    if (grad) {
        warped_dx.assign(static_cast<std::size_t>(ch), std::vector<double>(nb, 0.0));
        warped_dy.assign(static_cast<std::size_t>(ch), std::vector<double>(nb, 0.0));
    }

    std::size_t counted = 0;
    for (int y = 0; y < hb; ++y)
        for (int x = 0; x < wb; ++x) {
            const std::size_t p = static_cast<std::size_t>(y) * wb + x;
            PixelState& s = st[p];
            if (!flow_ab.valid(x, y))
                continue;
            s.counted = true;
            ++counted;
            s.m1 = frozen ? 1.0 : m_ab->at(x, y);
            const Vec2 q = flow_ab.map(x, y);
            const auto fp = bilinear_footprint(q.x, q.y, wa, ha);
            if (!fp)
                continue;
            if (!flow_ba.valid(fp->x0, fp->y0) || !flow_ba.valid(fp->x1, fp->y0) || !flow_ba.valid(fp->x0, fp->y1) ||
                !flow_ba.valid(fp->x1, fp->y1))
                continue;
            s.inside = true;
            s.fp = *fp;
            for (int c = 0; c < ch; ++c) {
                const auto v = sample_field(a.data().data(), wa, *fp, ch, c);
                warped[static_cast<std::size_t>(c)][p] = v.value;
                if (grad) {
                    warped_dx[static_cast<std::size_t>(c)][p] = v.ddx;
                    warped_dy[static_cast<std::size_t>(c)][p] = v.ddy;
                }
            }
            if (frozen) {
                s.m2 = 1.0;
            } else {
                const auto mv = sample_field(m_ba->values().data(), wa, *fp);
                s.m2 = mv.value;
                s.m2_dx = mv.ddx;
                s.m2_dy = mv.ddy;
            }
            s.mc = s.m1 * s.m2;
            const auto dxs = sample_field(disp_x.data(), wa, *fp);
            const auto dys = sample_field(disp_y.data(), wa, *fp);
            s.ex = q.x + dxs.value - x;
            s.ey = q.y + dys.value - y;
            s.cyc = std::hypot(s.ex, s.ey);
            s.jxx = dxs.ddx;
            s.jxy = dxs.ddy;
            s.jyx = dys.ddx;
            s.jyy = dys.ddy;
        }

    LossTerms terms;
    terms.valid_pixels = counted;
    if (counted == 0) {
        if (grad)
            *grad = DirectionalGradient{std::vector<double>(nb, 0.0), std::vector<double>(nb, 0.0),
                                        std::vector<double>(na, 0.0), std::vector<double>(na, 0.0),
                                        std::vector<double>(nb, 0.0), std::vector<double>(na, 0.0)};
        return terms;
    }
    const double inv_n = 1.0 / static_cast<double>(counted);

    // dL/dS depends only on Mc, so the SSIM backward pass can run alongside
    // the forward pass.
    const bool ssim_grad = grad && weights.ssim != 0.0;
    std::vector<double> upstream;
    if (ssim_grad) {
        upstream.assign(nb, 0.0);
        for (std::size_t p = 0; p < nb; ++p)
            if (st[p].counted && st[p].inside)
                upstream[p] = -weights.ssim * st[p].mc * inv_n / ch;
    }
    WindowFilter filt(wb, hb, cfg.ssim_window, cfg.ssim_sigma);
    std::vector<double> ssim(nb, 0.0), s_c;
    std::vector<std::vector<double>> d_warped(static_cast<std::size_t>(ch));
    for (int c = 0; c < ch; ++c) {
        ssim_channel(filt, warped[static_cast<std::size_t>(c)], channel_plane(b, c), cfg.ssim_c1, cfg.ssim_c2, s_c,
                     ssim_grad ? &upstream : nullptr, ssim_grad ? &d_warped[static_cast<std::size_t>(c)] : nullptr);
        for (std::size_t i = 0; i < nb; ++i)
            ssim[i] += s_c[i] / ch;
    }
    for (std::size_t p = 0; p < nb; ++p) {
        const PixelState& s = st[p];
        if (!s.counted)
            continue;
        terms.ssim += s.mc * (1.0 - ssim[p]);
        terms.match += cfg.direct_matchability && !frozen ? std::abs(s.m1 - 1.0) : std::abs(s.mc - 1.0);
        terms.cycle += s.mc * s.cyc;
    }
    terms.ssim *= inv_n;
    terms.match *= inv_n;
    terms.cycle *= inv_n;
    terms.total = weights.ssim * terms.ssim + weights.lambda_match * terms.match + weights.mu_cycle * terms.cycle;
    if (!grad)
        return terms;

    // Backward pass.
    grad->d_flow_ab_x.assign(nb, 0.0);
    grad->d_flow_ab_y.assign(nb, 0.0);
    grad->d_flow_ba_x.assign(na, 0.0);
    grad->d_flow_ba_y.assign(na, 0.0);
    grad->d_m_ab.assign(nb, 0.0);
    grad->d_m_ba.assign(na, 0.0);

    const bool direct = cfg.direct_matchability && !frozen;
    for (std::size_t p = 0; p < nb; ++p) {
        const PixelState& s = st[p];
        if (!s.counted)
            continue;
        double g_m1 = 0.0, g_m2 = 0.0;
        if (direct)
            g_m1 += weights.lambda_match * sign(s.m1 - 1.0) * inv_n;
        if (!s.inside) {
            if (!frozen)
                grad->d_m_ab[p] += g_m1;
            continue;
        }
        double g_mc = (weights.ssim * (1.0 - ssim[p]) + weights.mu_cycle * s.cyc) * inv_n;
        if (!direct)
            g_mc += weights.lambda_match * sign(s.mc - 1.0) * inv_n;
        if (!frozen) {
            g_m1 += g_mc * s.m2;
            g_m2 = g_mc * s.m1;
            grad->d_m_ab[p] += g_m1;
            scatter(grad->d_m_ba, wa, s.fp, g_m2);
        }
        double gqx = g_m2 * s.m2_dx;
        double gqy = g_m2 * s.m2_dy;
        if (ssim_grad)
            for (int c = 0; c < ch; ++c) {
                const double g = d_warped[static_cast<std::size_t>(c)][p];
                gqx += g * warped_dx[static_cast<std::size_t>(c)][p];
                gqy += g * warped_dy[static_cast<std::size_t>(c)][p];
            }
        if (s.cyc > 0.0 && weights.mu_cycle != 0.0) {
            const double k = weights.mu_cycle * s.mc * inv_n / s.cyc;
            const double ux = k * s.ex, uy = k * s.ey;
            // r = q + D(q): dr/dq = I + J
            gqx += ux * (1.0 + s.jxx) + uy * s.jyx;
            gqy += ux * s.jxy + uy * (1.0 + s.jyy);
            scatter(grad->d_flow_ba_x, wa, s.fp, ux);
            scatter(grad->d_flow_ba_y, wa, s.fp, uy);
        }
        grad->d_flow_ab_x[p] += gqx;
        grad->d_flow_ab_y[p] += gqy;
    }
    return terms;
}

LossTerms total_loss(const Image& src, const Image& tgt, const FlowField& flow_st, const FlowField& flow_ts,
                     const MatchabilityMap& m_st, const MatchabilityMap& m_ts, const ObjectiveConfig& cfg)
{
    const StageWeights w{1.0, cfg.lambda_match, cfg.mu_cycle, false};
    return directional_loss(src, tgt, flow_st, flow_ts, &m_st, &m_ts, cfg, w);
}

// ---------------------------------------------------------------------------
// Coarse parameterization

FlowParams::FlowParams(int w, int h, double initial_logit)
    : width(w), height(h), grid_w((w + kGridStride - 1) / kGridStride), grid_h((h + kGridStride - 1) / kGridStride)
{
    if (w < 1 || h < 1)
        throw InvalidArgument("flow parameters need a non-empty image");
    const std::size_t n = static_cast<std::size_t>(grid_w) * grid_h;
    dx.assign(n, 0.0);
    dy.assign(n, 0.0);
    logit.assign(n, initial_logit);
}

namespace {

struct AxisTap {
    int i0 = 0, i1 = 0;
    double f = 0.0;
};

std::vector<AxisTap> axis_taps(int n, int grid)
{
    std::vector<AxisTap> taps(static_cast<std::size_t>(n));
    for (int x = 0; x < n; ++x) {
        const double u = std::clamp((x - 0.5 * (kGridStride - 1)) / kGridStride, 0.0, grid - 1.0);
        AxisTap t;
        t.i0 = std::min(static_cast<int>(std::floor(u)), std::max(grid - 2, 0));
        t.i1 = std::min(t.i0 + 1, grid - 1);
        t.f = u - t.i0;
        taps[static_cast<std::size_t>(x)] = t;
    }
    return taps;
}

}  // namespace

std::vector<double> upsample(const FlowParams& p, const std::vector<double>& grid)
{
    const auto tx = axis_taps(p.width, p.grid_w);
    const auto ty = axis_taps(p.height, p.grid_h);
    std::vector<double> out(static_cast<std::size_t>(p.width) * p.height);
    auto g = [&](int i, int j) { return grid[static_cast<std::size_t>(j) * p.grid_w + i]; };
    for (int y = 0; y < p.height; ++y) {
        const AxisTap& b = ty[static_cast<std::size_t>(y)];
        for (int x = 0; x < p.width; ++x) {
            const AxisTap& a = tx[static_cast<std::size_t>(x)];
            out[static_cast<std::size_t>(y) * p.width + x] =
                (1 - b.f) * ((1 - a.f) * g(a.i0, b.i0) + a.f * g(a.i1, b.i0)) +
                b.f * ((1 - a.f) * g(a.i0, b.i1) + a.f * g(a.i1, b.i1));
        }
    }
    return out;
}

std::vector<double> upsample_adjoint(const FlowParams& p, const std::vector<double>& full)
{
    const auto tx = axis_taps(p.width, p.grid_w);
    const auto ty = axis_taps(p.height, p.grid_h);
    std::vector<double> out(static_cast<std::size_t>(p.grid_w) * p.grid_h, 0.0);
    auto g = [&](int i, int j) -> double& { return out[static_cast<std::size_t>(j) * p.grid_w + i]; };
    for (int y = 0; y < p.height; ++y) {
        const AxisTap& b = ty[static_cast<std::size_t>(y)];
        for (int x = 0; x < p.width; ++x) {
            const AxisTap& a = tx[static_cast<std::size_t>(x)];
            const double v = full[static_cast<std::size_t>(y) * p.width + x];
            g(a.i0, b.i0) += v * (1 - a.f) * (1 - b.f);
            g(a.i1, b.i0) += v * a.f * (1 - b.f);
            g(a.i0, b.i1) += v * (1 - a.f) * b.f;
            g(a.i1, b.i1) += v * a.f * b.f;
        }
    }
    return out;
}

FlowField to_flow_field(const FlowParams& p)
{
    const auto fx = upsample(p, p.dx);
    const auto fy = upsample(p, p.dy);
    FlowField f(p.width, p.height);
    for (int y = 0; y < p.height; ++y)
        for (int x = 0; x < p.width; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * p.width + x;
            f.set(x, y, {x + fx[i], y + fy[i]});
        }
    return f;
}

MatchabilityMap to_matchability(const FlowParams& p)
{
    std::vector<double> m(p.logit.size());
    std::transform(p.logit.begin(), p.logit.end(), m.begin(), sigmoid);
    MatchabilityMap out(p.width, p.height);
    out.values() = upsample(p, m);
    return out;
}

double smoothness(const FlowParams& p, std::vector<double>* d_dx, std::vector<double>* d_dy)
{
    if (d_dx)
        d_dx->assign(p.cells(), 0.0);
    if (d_dy)
        d_dy->assign(p.cells(), 0.0);
    const std::size_t edges = static_cast<std::size_t>(std::max(p.grid_w - 1, 0)) * p.grid_h +
                              static_cast<std::size_t>(std::max(p.grid_h - 1, 0)) * p.grid_w;
    if (edges == 0 || p.smoothness_weight == 0.0)
        return 0.0;
    const double k = p.smoothness_weight / static_cast<double>(edges);
    double e = 0.0;
    auto edge = [&](std::size_t i, std::size_t j) {
        const double ux = p.dx[i] - p.dx[j], uy = p.dy[i] - p.dy[j];
        e += ux * ux + uy * uy;
        if (d_dx) {
            (*d_dx)[i] += 2.0 * k * ux;
            (*d_dx)[j] -= 2.0 * k * ux;
        }
        if (d_dy) {
            (*d_dy)[i] += 2.0 * k * uy;
            (*d_dy)[j] -= 2.0 * k * uy;
        }
    };
    for (int j = 0; j < p.grid_h; ++j)
        for (int i = 0; i < p.grid_w; ++i) {
            const std::size_t c = static_cast<std::size_t>(j) * p.grid_w + i;
            if (i + 1 < p.grid_w)
                edge(c, c + 1);
            if (j + 1 < p.grid_h)
                edge(c, c + static_cast<std::size_t>(p.grid_w));
        }
    return k * e;
}

PairLoss pair_objective(const Image& src, const Image& tgt, const FlowParams& st, const FlowParams& ts,
                        const ObjectiveConfig& cfg, const StageWeights& weights, PairGradient* grad)
{
    if (src.width() != tgt.width() || src.height() != tgt.height())
        throw InvalidArgument("pair objective needs images of equal size");
    if (st.width != tgt.width() || st.height != tgt.height() || ts.width != src.width() || ts.height != src.height())
        throw InvalidArgument("flow parameters do not match image size");

    const FlowField f_st = to_flow_field(st);
    const FlowField f_ts = to_flow_field(ts);
    MatchabilityMap m_st, m_ts;
    if (!weights.freeze_matchability) {
        m_st = to_matchability(st);
        m_ts = to_matchability(ts);
    }
    const MatchabilityMap* pm_st = weights.freeze_matchability ? nullptr : &m_st;
    const MatchabilityMap* pm_ts = weights.freeze_matchability ? nullptr : &m_ts;

    DirectionalGradient g1, g2;
    PairLoss out;
    out.st = directional_loss(src, tgt, f_st, f_ts, pm_st, pm_ts, cfg, weights, grad ? &g1 : nullptr);
    out.ts = directional_loss(tgt, src, f_ts, f_st, pm_ts, pm_st, cfg, weights, grad ? &g2 : nullptr);
    std::vector<double> s_st_dx, s_st_dy, s_ts_dx, s_ts_dy;
    out.smoothness = smoothness(st, grad ? &s_st_dx : nullptr, grad ? &s_st_dy : nullptr) +
                     smoothness(ts, grad ? &s_ts_dx : nullptr, grad ? &s_ts_dy : nullptr);
    out.objective = out.st.total + out.ts.total + out.smoothness;
    if (!grad)
        return out;

    auto sum = [](const std::vector<double>& a, const std::vector<double>& b) {
        std::vector<double> r(a.size());
        for (std::size_t i = 0; i < a.size(); ++i)
            r[i] = a[i] + b[i];
        return r;
    };
    auto add_into = [](std::vector<double>& a, const std::vector<double>& b) {
        for (std::size_t i = 0; i < a.size(); ++i)
            a[i] += b[i];
    };
    grad->st_dx = upsample_adjoint(st, sum(g1.d_flow_ab_x, g2.d_flow_ba_x));
    grad->st_dy = upsample_adjoint(st, sum(g1.d_flow_ab_y, g2.d_flow_ba_y));
    grad->ts_dx = upsample_adjoint(ts, sum(g2.d_flow_ab_x, g1.d_flow_ba_x));
    grad->ts_dy = upsample_adjoint(ts, sum(g2.d_flow_ab_y, g1.d_flow_ba_y));
    add_into(grad->st_dx, s_st_dx);
    add_into(grad->st_dy, s_st_dy);
    add_into(grad->ts_dx, s_ts_dx);
    add_into(grad->ts_dy, s_ts_dy);
    grad->st_logit.assign(st.cells(), 0.0);
    grad->ts_logit.assign(ts.cells(), 0.0);
    if (!weights.freeze_matchability) {
        grad->st_logit = upsample_adjoint(st, sum(g1.d_m_ab, g2.d_m_ba));
        grad->ts_logit = upsample_adjoint(ts, sum(g2.d_m_ab, g1.d_m_ba));
        for (std::size_t i = 0; i < st.cells(); ++i) {
            const double s = sigmoid(st.logit[i]);
            grad->st_logit[i] *= s * (1.0 - s);
        }
        for (std::size_t i = 0; i < ts.cells(); ++i) {
            const double s = sigmoid(ts.logit[i]);
            grad->ts_logit[i] *= s * (1.0 - s);
        }
    }
    return out;
}

double loss_gradient_check(const GradientCheckInstance& inst, const ObjectiveConfig& cfg, double h)
{
    PairGradient g;
    pair_objective(inst.src, inst.tgt, inst.st, inst.ts, cfg, inst.weights, &g);

    FlowParams st = inst.st, ts = inst.ts;
    struct Slot {
        std::vector<double>* value;
        const std::vector<double>* analytic;
    };
    const Slot slots[] = {{&st.dx, &g.st_dx}, {&st.dy, &g.st_dy}, {&st.logit, &g.st_logit},
                          {&ts.dx, &g.ts_dx}, {&ts.dy, &g.ts_dy}, {&ts.logit, &g.ts_logit}};
    double scale = 0.0;
    for (const Slot& s : slots)
        for (double v : *s.analytic)
            scale = std::max(scale, std::abs(v));
    double worst_abs = 0.0;
    for (const Slot& s : slots)
        for (std::size_t i = 0; i < s.value->size(); ++i) {
            const double keep = (*s.value)[i];
            (*s.value)[i] = keep + h;
            const double up = pair_objective(inst.src, inst.tgt, st, ts, cfg, inst.weights).objective;
            (*s.value)[i] = keep - h;
            const double down = pair_objective(inst.src, inst.tgt, st, ts, cfg, inst.weights).objective;
            (*s.value)[i] = keep;
            const double fd = (up - down) / (2.0 * h);
            scale = std::max(scale, std::abs(fd));
            worst_abs = std::max(worst_abs, std::abs(fd - (*s.analytic)[i]));
        }
    return scale > 0.0 ? worst_abs / scale : worst_abs;
}

// ---------------------------------------------------------------------------
// Optimizer

namespace {

double inf_norm(const std::vector<double>& a, const std::vector<double>& b)
{
    double m = 0.0;
    for (double v : a)
        m = std::max(m, std::abs(v));
    for (double v : b)
        m = std::max(m, std::abs(v));
    return m;
}

void descend(std::vector<double>& x, const std::vector<double>& g, double scale)
{
    for (std::size_t i = 0; i < x.size(); ++i)
        x[i] -= scale * g[i];
}

// Moves each node by at most `step` px along its own gradient direction.
// The floor keeps nodes with negligible gradients from taking full steps.
void descend_per_node(std::vector<double>& dx, std::vector<double>& dy, const std::vector<double>& gx,
                      const std::vector<double>& gy, double step, double floor)
{
    for (std::size_t i = 0; i < dx.size(); ++i) {
        const double k = step / (std::hypot(gx[i], gy[i]) + floor);
        dx[i] -= k * gx[i];
        dy[i] -= k * gy[i];
    }
}

double max_node_norm(const std::vector<double>& gx, const std::vector<double>& gy)
{
    double m = 0.0;
    for (std::size_t i = 0; i < gx.size(); ++i)
        m = std::max(m, std::hypot(gx[i], gy[i]));
    return m;
}

// Correlation displacements are whole pixels, which would put every sample
// on a bilinear cell boundary where the sampled image is not differentiable
// and a one-sided gradient need not be a descent direction.
constexpr double kSeedOffset = 1.0 / 64.0;
constexpr double kNodeFloor = 1e-3;

// Component-wise 3x3 median with clamped borders. Per-cell argmax picks on
// repetitive texture are isolated outliers that the smoothness term would
// otherwise spread over their neighbors before the SSIM term can act.
double median9(const DisplacementGrid& d, int x, int y, bool use_x)
{
    std::array<double, 9> v{};
    int n = 0;
    for (int j = -1; j <= 1; ++j)
        for (int i = -1; i <= 1; ++i) {
            const int cx = std::clamp(x + i, 0, d.grid_w - 1), cy = std::clamp(y + j, 0, d.grid_h - 1);
            const Vec2& c = d.cells[static_cast<std::size_t>(cy) * d.grid_w + cx];
            v[n++] = use_x ? c.x : c.y;
        }
    std::nth_element(v.begin(), v.begin() + 4, v.end());
    return v[4];
}

void seed_from(FlowParams& p, const DisplacementGrid& d)
{
    for (int y = 0; y < d.grid_h; ++y)
        for (int x = 0; x < d.grid_w; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * d.grid_w + x;
            p.dx[i] = median9(d, x, y, true) + kSeedOffset;
            p.dy[i] = median9(d, x, y, false) + kSeedOffset;
        }
}

TraceRow row_of(int stage, int iteration, const PairLoss& l, bool accepted)
{
    return {stage,
            iteration,
            l.st.ssim + l.ts.ssim,
            l.st.match + l.ts.match,
            l.st.cycle + l.ts.cycle,
            l.smoothness,
            l.objective,
            accepted};
}

// Runs up to `length` iterations of one stage. Flow and logits are separate
// blocks, each with its own line search, so a flow stuck in a local minimum
// does not throttle the logits. Rows are appended to `trace` when given.
void run_stage(const Image& src, const Image& tgt, FlowParams& st, FlowParams& ts, const ObjectiveConfig& cfg,
               const StageWeights& wts, bool freeze_flow, int length, const OptimizeSchedule& schedule, int stage,
               std::vector<TraceRow>* trace)
{
    PairGradient grad;
    PairLoss cur = pair_objective(src, tgt, st, ts, cfg, wts, &grad);
    if (trace)
        trace->push_back(row_of(stage, 0, cur, true));
    double reduction[2] = {1.0, 1.0};
    double base[2] = {schedule.step_size, schedule.logit_step};
    const int first = freeze_flow ? 1 : 0, last = wts.freeze_matchability ? 1 : 2;
    for (int it = 1; it <= length; ++it) {
        bool any_accepted = false, any_gradient = false;
        for (int blk = first; blk < last; ++blk) {
            base[blk] *= schedule.decay;
            const double g = blk == 0 ? std::max(max_node_norm(grad.st_dx, grad.st_dy), max_node_norm(grad.ts_dx, grad.ts_dy))
                                      : inf_norm(grad.st_logit, grad.ts_logit);
            if (g == 0.0)
                continue;
            any_gradient = true;
            for (int attempt = 0; attempt <= schedule.max_halvings; ++attempt) {
                FlowParams nst = st, nts = ts;
                const double step = base[blk] * reduction[blk];
                if (blk == 0) {
                    descend_per_node(nst.dx, nst.dy, grad.st_dx, grad.st_dy, step, kNodeFloor * g);
                    descend_per_node(nts.dx, nts.dy, grad.ts_dx, grad.ts_dy, step, kNodeFloor * g);
                } else {
                    descend(nst.logit, grad.st_logit, step / g);
                    descend(nts.logit, grad.ts_logit, step / g);
                }
                PairGradient ngrad;
                const PairLoss next = pair_objective(src, tgt, nst, nts, cfg, wts, &ngrad);
                if (next.objective <= cur.objective) {
                    st = std::move(nst);
                    ts = std::move(nts);
                    cur = next;
                    grad = std::move(ngrad);
                    any_accepted = true;
                    reduction[blk] = std::min(1.0, reduction[blk] * 2.0);
                    break;
                }
                reduction[blk] *= 0.5;
            }
        }
        if (!any_gradient)
            break;
        if (trace)
            trace->push_back(row_of(stage, it, cur, any_accepted));
        // No step of either block within max_halvings decreases the objective: converged.
        if (!any_accepted)
            break;
    }
}

}  // namespace

FineFlowResult optimize_fine_flow(const Image& src0, const Image& tgt0, const FeatureMap& src_fm,
                                  const FeatureMap& tgt_fm, const ObjectiveConfig& cfg,
                                  const OptimizeSchedule& schedule)
{
    cfg.validate();
    schedule.validate();
    if (src0.width() != tgt0.width() || src0.height() != tgt0.height())
        throw InvalidArgument("fine flow needs coarsely aligned images of equal size");
    if (src0.channels() != tgt0.channels())
        throw InvalidArgument("fine flow needs images with equal channel counts");
    const Image src = prepare(src0, cfg), tgt = prepare(tgt0, cfg);
    const int w = src.width(), h = src.height();

    FlowParams st(w, h, schedule.initial_logit), ts(w, h, schedule.initial_logit);
    st.smoothness_weight = ts.smoothness_weight = schedule.smoothness_weight;
    if (src_fm.grid_w != st.grid_w || src_fm.grid_h != st.grid_h || tgt_fm.grid_w != st.grid_w ||
        tgt_fm.grid_h != st.grid_h)
        throw InvalidArgument("feature grids must match the 1/8 flow grid of the images");
    seed_from(st, init_flow_from_correlation(correlation_volume(tgt_fm, src_fm, 3), kGridStride));
    seed_from(ts, init_flow_from_correlation(correlation_volume(src_fm, tgt_fm, 3), kGridStride));

    const StageWeights stages[3] = {
        {1.0, 0.0, 0.0, true},
        {1.0, 0.0, cfg.mu_cycle, true},
        {1.0, cfg.lambda_match, cfg.mu_cycle, false},
    };
    const int lengths[3] = {schedule.stage1, schedule.stage2, schedule.stage3};

    FineFlowResult result;
    for (int s = 0; s < 3; ++s)
        run_stage(src, tgt, st, ts, cfg, stages[s], s == 2 && !schedule.stage3_moves_flow, lengths[s], schedule, s + 1,
                  &result.trace);

    result.flow_st = to_flow_field(st);
    result.flow_ts = to_flow_field(ts);
    result.m_st = to_matchability(st);
    result.m_ts = to_matchability(ts);
    result.params_st = std::move(st);
    result.params_ts = std::move(ts);
    return result;
}

std::string trace_csv(const std::vector<TraceRow>& trace)
{
    std::ostringstream os;
    os << "stage,iteration,L_ssim,L_match,L_cycle,smoothness,total,accepted\n";
    os << std::setprecision(10);
    for (const TraceRow& r : trace)
        os << r.stage << ',' << r.iteration << ',' << r.ssim << ',' << r.match << ',' << r.cycle << ','
           << r.smoothness << ',' << r.total << ',' << (r.accepted ? 1 : 0) << '\n';
    return os.str();
}

}  // namespace rfk::fineflow
