#include "rfk/features.hpp"

#include "synth.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <tuple>

using namespace rfk;
using namespace rfk::features;
using rfk::testing::Rng64;

namespace {

double cosine(const float* a, const float* b, int n)
{
    double ab = 0, aa = 0, bb = 0;
    for (int k = 0; k < n; ++k) {
        ab += double(a[k]) * b[k];
        aa += double(a[k]) * a[k];
        bb += double(b[k]) * b[k];
    }
    return ab / std::sqrt(aa * bb);
}

Image crop(const Image& img, int x0, int y0, int w, int h)
{
    Image out(w, h, img.channels());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < img.channels(); ++c)
                out.at(x, y, c) = img.at(x + x0, y + y0, c);
    return out;
}

}  // namespace

TEST(Descriptors, GridShapeAndHeader)
{
    Rng64 rng(1);
    const Image img = rfk::testing::noise_image(rng, 70, 45);
    const FeatureMap fm = extract_dense_descriptors(img, 1.0);
    EXPECT_EQ(fm.grid_w, 9);
    EXPECT_EQ(fm.grid_h, 6);
    EXPECT_EQ(fm.channels, 128);
    EXPECT_EQ(fm.stride, 8);
    const FeatureMap half = extract_dense_descriptors(img, 0.8);
    EXPECT_EQ(half.grid_w, 7);  // round(56) / 8
    EXPECT_FLOAT_EQ(half.scale_factor, 0.8f);
}

TEST(Descriptors, ConstantImageIsAllInvalid)
{
    const FeatureMap fm = extract_dense_descriptors(Image(40, 40, 1, 0.3), 1.0);
    for (int j = 0; j < fm.grid_h; ++j)
        for (int i = 0; i < fm.grid_w; ++i)
            EXPECT_FALSE(fm.valid(i, j));
}

TEST(Descriptors, ValidDescriptorsHaveUnitNorm)
{
    Rng64 rng(2);
    const Image img = rfk::testing::SmoothTexture(rng, 3).render(64, 48);
    const FeatureMap fm = extract_dense_descriptors(img, 1.0);
    int valid = 0;
    for (int j = 0; j < fm.grid_h; ++j)
        for (int i = 0; i < fm.grid_w; ++i) {
            if (!fm.valid(i, j))
                continue;
            ++valid;
            double s = 0;
            for (int k = 0; k < fm.channels; ++k)
                s += double(fm.cell(i, j)[k]) * fm.cell(i, j)[k];
            EXPECT_NEAR(std::sqrt(s), 1.0, 1e-6);
        }
    EXPECT_GT(valid, 0);
}

TEST(Descriptors, TooSmallImageThrows)
{
    EXPECT_THROW(extract_dense_descriptors(Image(40, 40, 1), 0.5), InvalidArgument);
    EXPECT_THROW(extract_dense_descriptors(Image(31, 64, 1), 1.0), InvalidArgument);
}

TEST(Descriptors, EightPixelShiftMovesOneCell)
{
    Rng64 rng(3);
    const Image big = rfk::testing::noise_image(rng, 104, 64);
    const Image a = crop(big, 0, 0, 96, 64);
    const Image b = crop(big, 8, 0, 96, 64);  // b(x) = a(x + 8)
    const FeatureMap fa = extract_dense_descriptors(a, 1.0);
    const FeatureMap fb = extract_dense_descriptors(b, 1.0);
    for (int j = 2; j < fa.grid_h - 2; ++j)
        for (int i = 2; i < fa.grid_w - 3; ++i)
            for (int k = 0; k < 128; ++k)
                ASSERT_NEAR(fb.cell(i, j)[k], fa.cell(i + 1, j)[k], 1e-5) << i << "," << j;
}

TEST(CellToNative, CentersAndClamping)
{
    FeatureMap fm(4, 4, 1, 8, 1.0f);
    const Vec2 c = cell_to_native(fm, 1, 2, {32, 32});
    EXPECT_DOUBLE_EQ(c.x, 11.5);
    EXPECT_DOUBLE_EQ(c.y, 19.5);
    fm.scale_factor = 2.0f;
    EXPECT_DOUBLE_EQ(cell_to_native(fm, 1, 0, {16, 16}).x, 5.5);
    fm.scale_factor = 0.5f;
    EXPECT_DOUBLE_EQ(cell_to_native(fm, 3, 3, {60, 60}).x, 55.5);
    EXPECT_DOUBLE_EQ(cell_to_native(fm, 3, 3, {50, 50}).y, 49.0);
}

TEST(MutualNN, MatchesBruteForce)
{
    Rng64 rng(4);
    for (int trial = 0; trial < 10; ++trial) {
        FeatureMap a = rfk::testing::random_feature_map(rng, 5, 4, 8);
        FeatureMap b = rfk::testing::random_feature_map(rng, 6, 3, 8);
        std::fill(a.cell(1, 1), a.cell(1, 1) + 8, 0.0f);
        const int na = 20, nb = 18;
        std::set<std::tuple<int, int>> expect;
        for (int i = 0; i < na; ++i) {
            if (!a.valid(i % 5, i / 5))
                continue;
            int best = -1;
            double bv = -2;
            for (int j = 0; j < nb; ++j) {
                const double v = cosine(a.data.data() + i * 8, b.data.data() + j * 8, 8);
                if (v > bv) {
                    bv = v;
                    best = j;
                }
            }
            int back = -1;
            double cv = -2;
            for (int i2 = 0; i2 < na; ++i2) {
                if (!a.valid(i2 % 5, i2 / 5))
                    continue;
                const double v = cosine(a.data.data() + i2 * 8, b.data.data() + best * 8, 8);
                if (v > cv) {
                    cv = v;
                    back = i2;
                }
            }
            if (back == i)
                expect.insert({i, best});
        }
        std::set<std::tuple<int, int>> got;
        for (const auto& m : mutual_nn_cells(a, b)) {
            got.insert({m.src_cell, m.tgt_cell});
            EXPECT_NEAR(m.score, cosine(a.data.data() + m.src_cell * 8, b.data.data() + m.tgt_cell * 8, 8), 1e-6);
        }
        EXPECT_EQ(got, expect);
    }
}

TEST(MutualNN, IdenticalImagesSelfMatch)
{
    Rng64 rng(5);
    const Image img = rfk::testing::noise_image(rng, 64, 48);
    MatchConfig cfg;
    cfg.scales = {1.0};
    const auto maps = extract_multiscale(img, cfg);
    const auto m = mutual_nn_match(maps, maps, cfg, {64, 48}, {64, 48});
    EXPECT_EQ(m.size(), 48u);
    for (const auto& c : m) {
        EXPECT_EQ(c.src, c.tgt);
        EXPECT_NEAR(c.score, 1.0, 1e-5);
    }
}

TEST(MutualNN, SwappingImagesSwapsOutput)
{
    Rng64 rng(6);
    const rfk::testing::SmoothTexture tex(rng, 1, 40, 6.0, 20.0);
    const Image a = tex.render(80, 64);
    const Image b = tex.render(72, 60, [](int x, int y) { return Vec2{x * 1.1 + 3.0, y * 1.1 - 2.0}; });
    MatchConfig cfg;
    cfg.scales = {0.6, 1.0, 1.33};
    const auto ma = extract_multiscale(a, cfg), mb = extract_multiscale(b, cfg);
    const auto ab = mutual_nn_match(ma, mb, cfg, {80, 64}, {72, 60});
    const auto ba = mutual_nn_match(mb, ma, cfg, {72, 60}, {80, 64});
    ASSERT_EQ(ab.size(), ba.size());
    ASSERT_FALSE(ab.empty());
    using T = std::tuple<double, double, double, double, double>;
    std::vector<T> x, y;
    for (const auto& c : ab)
        x.emplace_back(c.src.x, c.src.y, c.tgt.x, c.tgt.y, c.score);
    for (const auto& c : ba)
        y.emplace_back(c.tgt.x, c.tgt.y, c.src.x, c.src.y, c.score);
    std::sort(x.begin(), x.end());
    std::sort(y.begin(), y.end());
    EXPECT_EQ(x, y);
    for (const auto& c : ab) {
        EXPECT_TRUE(in_bounds(c.src.x, c.src.y, 80, 64));
        EXPECT_TRUE(in_bounds(c.tgt.x, c.tgt.y, 72, 60));
    }
}

TEST(MutualNN, OutputIsSortedAndDeduplicated)
{
    Rng64 rng(7);
    const Image img = rfk::testing::noise_image(rng, 64, 64);
    MatchConfig cfg;
    cfg.scales = {1.0, 1.0};
    const auto maps = extract_multiscale(img, cfg);
    const auto m = mutual_nn_match(maps, maps, cfg, {64, 64}, {64, 64});
    EXPECT_EQ(m.size(), 64u);
    for (std::size_t k = 1; k < m.size(); ++k)
        EXPECT_LT(std::make_tuple(std::lround(m[k - 1].src.x), std::lround(m[k - 1].src.y)),
                  std::make_tuple(std::lround(m[k].src.x), std::lround(m[k].src.y)));
}

TEST(MutualNN, EmptyInputsGiveNoMatches)
{
    const FeatureMap z(4, 4, 8, 8, 1.0f);
    Rng64 rng(8);
    EXPECT_TRUE(mutual_nn_cells(z, rfk::testing::random_feature_map(rng, 4, 4, 8)).empty());
}

TEST(MutualNN, RotatedCopyKeepsFewMatches)
{
    Rng64 rng(9);
    const rfk::testing::SmoothTexture tex(rng, 1, 60, 5.0, 16.0);
    const Image a = tex.render(64, 64);
    const Image b = tex.render(64, 64, [](int x, int y) { return Vec2{double(y), 63.0 - x}; });
    const FeatureMap fa = extract_dense_descriptors(a, 1.0), fb = extract_dense_descriptors(b, 1.0);
    int correct = 0;
    for (const auto& m : mutual_nn_cells(fa, fb)) {
        // Cell (i, j) of a appears at (j', 7 - i') in b under the rotation.
        const int ia = m.src_cell % 8, ja = m.src_cell / 8, ib = m.tgt_cell % 8, jb = m.tgt_cell / 8;
        if (std::abs(ib - (7 - ja)) + std::abs(jb - ia) == 0)
            ++correct;
    }
    EXPECT_LE(correct, 4);
}
