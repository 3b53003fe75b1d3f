#include "rfk/features.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <numbers>
#include <tuple>

namespace rfk::features {

void MatchConfig::validate() const
{
    if (scales.empty())
        throw InvalidArgument("match config needs at least one scale");
    for (double s : scales)
        if (!(s > 0.0))
            throw InvalidArgument("match scales must be positive");
}

namespace {

// Per-block orientation histograms on a grid of 8x8 pixel blocks whose origin
// is shifted by half a cell, so that four consecutive blocks are centered on
// a cell center.
struct BlockHistograms {
    // Block k spans pixels [8k + 4, 8k + 12); indices run from -2 to grid size.
    int bw = 0, bh = 0;
    std::vector<double> hist;

    double* block(int k, int l)
    {
        return hist.data() + (static_cast<std::size_t>(l + 2) * bw + (k + 2)) * kOrientationBins;
    }
    const double* block(int k, int l) const
    {
        return hist.data() + (static_cast<std::size_t>(l + 2) * bw + (k + 2)) * kOrientationBins;
    }
};

BlockHistograms block_histograms(const Image& gray)
{
    const int w = gray.width(), h = gray.height();
    const int gw = (w + kCellSize - 1) / kCellSize;
    const int gh = (h + kCellSize - 1) / kCellSize;
    BlockHistograms bh;
    bh.bw = gw + 3;
    bh.bh = gh + 3;
    bh.hist.assign(static_cast<std::size_t>(bh.bw) * bh.bh * kOrientationBins, 0.0);
    constexpr int half = kCellSize / 2;
    const double bin_width = 2.0 * std::numbers::pi / kOrientationBins;

    auto px = [&](int x, int y) { return gray.at(std::clamp(x, 0, w - 1), std::clamp(y, 0, h - 1)); };
    for (int y = 0; y < h; ++y) {
        const int l = (y + half) / kCellSize - 1;
        for (int x = 0; x < w; ++x) {
            const double gx = 0.5 * (px(x + 1, y) - px(x - 1, y));
            const double gy = 0.5 * (px(x, y + 1) - px(x, y - 1));
            const double mag = std::hypot(gx, gy);
            if (mag == 0.0)
                continue;
            double angle = std::atan2(gy, gx);
            if (angle < 0.0)
                angle += 2.0 * std::numbers::pi;
            const double pos = angle / bin_width;
            const int b0 = static_cast<int>(std::floor(pos)) % kOrientationBins;
            const int b1 = (b0 + 1) % kOrientationBins;
            const double f = pos - std::floor(pos);
            const int k = (x + half) / kCellSize - 1;
            double* hist = bh.block(k, l);
            hist[b0] += (1.0 - f) * mag;
            hist[b1] += f * mag;
        }
    }
    return bh;
}

void normalize_descriptor(std::vector<double>& d)
{
    double n = 0.0;
    for (double v : d)
        n += v * v;
    n = std::sqrt(n);
    if (n < 1e-12) {
        std::fill(d.begin(), d.end(), 0.0);
        return;
    }
    for (double& v : d)
        v = std::min(v / n, 0.2);
    n = 0.0;
    for (double v : d)
        n += v * v;
    n = std::sqrt(n);
    for (double& v : d)
        v /= n;
}

// Row-normalized descriptor matrix of the valid cells plus their indices.
struct ValidSet {
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> desc;
    std::vector<int> cells;
};

ValidSet valid_set(const FeatureMap& fm)
{
    ValidSet vs;
    const int n = fm.grid_w * fm.grid_h;
    for (int c = 0; c < n; ++c) {
        const float* d = fm.data.data() + static_cast<std::size_t>(c) * fm.channels;
        double s = 0.0;
        for (int k = 0; k < fm.channels; ++k)
            s += double(d[k]) * d[k];
        if (s > 0.0)
            vs.cells.push_back(c);
    }
    vs.desc.resize(static_cast<Eigen::Index>(vs.cells.size()), fm.channels);
    for (std::size_t r = 0; r < vs.cells.size(); ++r) {
        const float* d = fm.data.data() + static_cast<std::size_t>(vs.cells[r]) * fm.channels;
        double s = 0.0;
        for (int k = 0; k < fm.channels; ++k)
            s += double(d[k]) * d[k];
        const double inv = 1.0 / std::sqrt(s);
        for (int k = 0; k < fm.channels; ++k)
            vs.desc(static_cast<Eigen::Index>(r), k) = static_cast<float>(d[k] * inv);
    }
    return vs;
}

// Total order on feature maps; lets the similarity matrix always be built
// with the same operand order, so swapping the images transposes it bitwise.
bool map_less(const FeatureMap& a, const FeatureMap& b)
{
    const auto ka = std::tie(a.grid_w, a.grid_h, a.channels, a.stride, a.scale_factor);
    const auto kb = std::tie(b.grid_w, b.grid_h, b.channels, b.stride, b.scale_factor);
    if (ka != kb)
        return ka < kb;
    return std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) < 0;
}

}  // namespace

FeatureMap extract_dense_descriptors(const Image& img, double scale)
{
    if (img.empty())
        throw InvalidArgument("cannot extract descriptors from an empty image");
    if (!(scale > 0.0))
        throw InvalidArgument("descriptor scale must be positive");
    const Image gray0 = to_gray(img);
    const int w = std::max(1, static_cast<int>(std::lround(img.width() * scale)));
    const int h = std::max(1, static_cast<int>(std::lround(img.height() * scale)));
    if (std::min(w, h) < 32)
        throw InvalidArgument("image too small for descriptor extraction (min side < 32 after scaling)");
    const Image gray = resize_to(gray0, w, h);
    const BlockHistograms bh = block_histograms(gray);

    const int gw = (w + kCellSize - 1) / kCellSize;
    const int gh = (h + kCellSize - 1) / kCellSize;
    FeatureMap fm(gw, gh, kDescriptorSize, kCellSize, static_cast<float>(scale));
    std::vector<double> d(kDescriptorSize);
    for (int j = 0; j < gh; ++j)
        for (int i = 0; i < gw; ++i) {
            std::size_t o = 0;
            for (int bl = 0; bl < kBlocksPerSide; ++bl)
                for (int bk = 0; bk < kBlocksPerSide; ++bk) {
                    const double* hist = bh.block(i - 2 + bk, j - 2 + bl);
                    for (int b = 0; b < kOrientationBins; ++b)
                        d[o++] = hist[b];
                }
            normalize_descriptor(d);
            float* out = fm.cell(i, j);
            for (int k = 0; k < kDescriptorSize; ++k)
                out[k] = static_cast<float>(d[k]);
        }
    return fm;
}

std::vector<FeatureMap> extract_multiscale(const Image& img, const MatchConfig& cfg)
{
    cfg.validate();
    std::vector<FeatureMap> maps;
    maps.reserve(cfg.scales.size());
    for (double s : cfg.scales)
        maps.push_back(extract_dense_descriptors(img, s));
    return maps;
}

Vec2 cell_to_native(const FeatureMap& fm, int i, int j, ImageSize native)
{
    const double half = 0.5 * (fm.stride - 1);
    const double s = fm.scale_factor;
    const double x = (fm.stride * i + half + 0.5) / s - 0.5;
    const double y = (fm.stride * j + half + 0.5) / s - 0.5;
    return {std::clamp(x, 0.0, native.width - 1.0), std::clamp(y, 0.0, native.height - 1.0)};
}

std::vector<CellMatch> mutual_nn_cells(const FeatureMap& src, const FeatureMap& tgt)
{
    if (src.channels != tgt.channels)
        throw InvalidArgument("feature maps have different channel counts");
    const bool swapped = map_less(tgt, src);
    const FeatureMap& first = swapped ? tgt : src;
    const FeatureMap& second = swapped ? src : tgt;
    const ValidSet a = valid_set(first);
    const ValidSet b = valid_set(second);
    const Eigen::Index na = a.desc.rows(), nb = b.desc.rows();
    if (na == 0 || nb == 0)
        return {};

    std::vector<Eigen::Index> row_best(static_cast<std::size_t>(na), -1);
    std::vector<float> row_val(static_cast<std::size_t>(na), -2.0f);
    std::vector<Eigen::Index> col_best(static_cast<std::size_t>(nb), -1);
    std::vector<float> col_val(static_cast<std::size_t>(nb), -2.0f);

    constexpr Eigen::Index block = 512;
    Eigen::MatrixXf sim;
    for (Eigen::Index r0 = 0; r0 < na; r0 += block) {
        const Eigen::Index rows = std::min(block, na - r0);
        sim.noalias() = a.desc.middleRows(r0, rows) * b.desc.transpose();
        for (Eigen::Index c = 0; c < nb; ++c)
            for (Eigen::Index r = 0; r < rows; ++r) {
                const float v = sim(r, c);
                const auto gr = static_cast<std::size_t>(r0 + r);
                if (v > row_val[gr]) {
                    row_val[gr] = v;
                    row_best[gr] = c;
                }
                if (v > col_val[static_cast<std::size_t>(c)]) {
                    col_val[static_cast<std::size_t>(c)] = v;
                    col_best[static_cast<std::size_t>(c)] = r0 + r;
                }
            }
    }

    std::vector<CellMatch> out;
    for (Eigen::Index r = 0; r < na; ++r) {
        const Eigen::Index c = row_best[static_cast<std::size_t>(r)];
        if (c < 0 || col_best[static_cast<std::size_t>(c)] != r)
            continue;
        const int ca = a.cells[static_cast<std::size_t>(r)];
        const int cb = b.cells[static_cast<std::size_t>(c)];
        const float v = row_val[static_cast<std::size_t>(r)];
        out.push_back(swapped ? CellMatch{cb, ca, v} : CellMatch{ca, cb, v});
    }
    std::sort(out.begin(), out.end(), [](const CellMatch& x, const CellMatch& y) {
        return std::tie(x.src_cell, x.tgt_cell) < std::tie(y.src_cell, y.tgt_cell);
    });
    return out;
}

std::vector<Correspondence> mutual_nn_match(const std::vector<FeatureMap>& src_maps,
                                            const std::vector<FeatureMap>& tgt_maps,
                                            const MatchConfig& cfg, ImageSize src_size, ImageSize tgt_size)
{
    cfg.validate();
    using Key = std::tuple<long, long, long, long>;
    struct Entry {
        Correspondence c;
        std::array<double, 4> tie;  // symmetric tie-break key
    };
    std::map<Key, Entry> best;

    auto consider = [&](const FeatureMap& fs, const FeatureMap& ft) {
        for (const CellMatch& m : mutual_nn_cells(fs, ft)) {
            if (!(m.score > cfg.min_score))
                continue;
            Correspondence c;
            c.src = cell_to_native(fs, m.src_cell % fs.grid_w, m.src_cell / fs.grid_w, src_size);
            c.tgt = cell_to_native(ft, m.tgt_cell % ft.grid_w, m.tgt_cell / ft.grid_w, tgt_size);
            c.score = m.score;
            const Key key{std::lround(c.src.x), std::lround(c.src.y), std::lround(c.tgt.x), std::lround(c.tgt.y)};
            auto lo = std::array<double, 2>{c.src.x, c.src.y};
            auto hi = std::array<double, 2>{c.tgt.x, c.tgt.y};
            if (hi < lo)
                std::swap(lo, hi);
            const Entry e{c, {lo[0], lo[1], hi[0], hi[1]}};
            auto it = best.find(key);
            if (it == best.end())
                best.emplace(key, e);
            else if (c.score > it->second.c.score || (c.score == it->second.c.score && e.tie < it->second.tie))
                it->second = e;
        }
    };

    if (cfg.all_scale_pairs) {
        for (const auto& fs : src_maps)
            for (const auto& ft : tgt_maps)
                consider(fs, ft);
    } else {
        if (src_maps.size() != tgt_maps.size())
            throw InvalidArgument("equal-scale matching needs the same number of maps on both sides");
        for (std::size_t k = 0; k < src_maps.size(); ++k)
            consider(src_maps[k], tgt_maps[k]);
    }

    std::vector<Correspondence> out;
    out.reserve(best.size());
    for (const auto& [key, e] : best)
        out.push_back(e.c);
    return out;
}

}  // namespace rfk::features
