#include "rfk/compose.hpp"
#include "rfk/robust.hpp"

#include "synth.hpp"

#include <Eigen/Dense>
#include <gtest/gtest.h>

using namespace rfk;
using namespace rfk::compose;
using rfk::testing::Rng64;
using rfk::testing::uniform;

TEST(Compose, IdentityHomographyKeepsFine)
{
    auto fine = FlowField::translation(9, 7, 0.5, -1.25);
    fine.invalidate(3, 3);
    const auto out = compose_homography_flow(Homography::identity(), fine);
    for (int y = 0; y < 7; ++y)
        for (int x = 0; x < 9; ++x) {
            EXPECT_EQ(out.valid(x, y), fine.valid(x, y));
            if (fine.valid(x, y)) {
                EXPECT_NEAR(out.map(x, y).x, fine.map(x, y).x, 1e-12);
                EXPECT_NEAR(out.map(x, y).y, fine.map(x, y).y, 1e-12);
            }
        }
}

TEST(Compose, IdentityFineGivesInverseHomography)
{
    Rng64 rng(1);
    const Eigen::Matrix3d m = rfk::testing::random_homography(rng, 40, 30);
    const auto out = compose_homography_flow(Homography(m), FlowField::identity(40, 30), 40, 30);
    const Eigen::Matrix3d mi = m.inverse();
    for (int y = 0; y < 30; ++y)
        for (int x = 0; x < 40; ++x) {
            const Vec2 q = rfk::testing::apply_h(mi, {double(x), double(y)});
            EXPECT_NEAR(out.map(x, y).x, q.x, 1e-9);
            EXPECT_NEAR(out.map(x, y).y, q.y, 1e-9);
            EXPECT_EQ(out.valid(x, y), in_bounds(q.x, q.y, 40, 30));
        }
}

TEST(Compose, SingleResamplingMatchesTwoStepWarp)
{
    Rng64 rng(2);
    const Image src = rfk::testing::SmoothTexture(rng, 1, 40, 16.0, 48.0).render(96, 80);
    Eigen::Matrix3d m;
    m << 1.03, 0.02, -3.0, -0.01, 0.98, 2.0, 2e-5, -1e-5, 1;
    const Homography h(m);
    const rfk::testing::SinusoidalWarp warp{2.0, 60.0, 50.0, 0.3, 1.1};
    FlowField fine(96, 80);
    for (int y = 0; y < 80; ++y)
        for (int x = 0; x < 96; ++x)
            fine.set(x, y, Vec2{double(x), double(y)} + warp.displacement(x, y));
    const Warped coarse = robust::warp_by_homography(src, h, 96, 80);
    const Warped two_step = warp_with_flow(coarse.image, fine);
    const Warped one_step = warp_with_flow(src, compose_homography_flow(h, fine, 96, 80));
    double worst = 0;
    for (int y = 12; y < 68; ++y)
        for (int x = 12; x < 84; ++x)
            worst = std::max(worst, std::abs(one_step.image.at(x, y) - two_step.image.at(x, y)));
    EXPECT_LT(worst, 0.02);
}

TEST(Aggregate, DisjointMasksUnionAndFirstWins)
{
    const int w = 6, h = 4;
    FlowIteration a{FlowField::translation(w, h, 1, 0), MatchabilityMap(w, h, 0.0)};
    FlowIteration b{FlowField::translation(w, h, 0, 2), MatchabilityMap(w, h, 0.0)};
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (x < 3)
                a.matchability.at(x, y) = 0.9;
            if (x >= 2)
                b.matchability.at(x, y) = 0.95;
        }
    a.matchability.at(5, 3) = 0.5;  // not above threshold
    b.matchability.at(5, 3) = 0.0;
    const auto agg = aggregate_flows({a, b});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int owner = agg.owner[static_cast<std::size_t>(y) * w + x];
            if (x == 5 && y == 3) {
                EXPECT_EQ(owner, -1);
                EXPECT_FALSE(agg.flow.valid(x, y));
                EXPECT_EQ(agg.matchability.at(x, y), 0.0);
            } else if (x < 3) {
                EXPECT_EQ(owner, 0);
                EXPECT_EQ(agg.flow.displacement(x, y), (Vec2{1, 0}));
                EXPECT_EQ(agg.matchability.at(x, y), 0.9);
            } else {
                EXPECT_EQ(owner, 1);
                EXPECT_EQ(agg.flow.displacement(x, y), (Vec2{0, 2}));
            }
        }
    const auto hm = aggregate_flows({a, b}, 0.5, OverlapPolicy::highest_matchability);
    EXPECT_EQ(hm.owner[2], 1);
    EXPECT_TRUE(aggregate_flows({}).owner.empty());
    FlowIteration bad{FlowField::identity(3, 3), MatchabilityMap(3, 3)};
    EXPECT_THROW(aggregate_flows({a, bad}), InvalidArgument);
}

TEST(Aggregate, SingleFullMaskIsIdentityOperation)
{
    FlowIteration a{FlowField::translation(5, 5, 0.25, 0.5), MatchabilityMap(5, 5, 1.0)};
    const auto agg = aggregate_flows({a});
    EXPECT_EQ(agg.flow, a.flow);
}

TEST(Warp, FlowIdentityTranslationAndInvalid)
{
    Rng64 rng(3);
    const Image img = rfk::testing::noise_image(rng, 20, 20, 3);
    EXPECT_EQ(warp_with_flow(img, FlowField::identity(20, 20)).image, img);
    const auto tr = warp_with_flow(img, FlowField::translation(20, 20, -5, 0));
    for (int y = 0; y < 20; ++y)
        for (int x = 0; x < 20; ++x) {
            EXPECT_EQ(tr.valid.at(x, y), x >= 5);
            if (x >= 5)
                EXPECT_NEAR(tr.image.at(x, y, 1), img.at(x - 5, y, 1), 1e-12);
        }
    const auto none = warp_with_flow(img, FlowField(20, 20));
    for (auto v : none.valid.values)
        EXPECT_EQ(v, 0);
}

TEST(Average, MatchesScalarMean)
{
    Rng64 rng(4);
    std::vector<Warped> stack;
    for (int k = 0; k < 4; ++k) {
        Warped w{rfk::testing::noise_image(rng, 7, 5, 3), Mask(7, 5, false)};
        for (auto& v : w.valid.values)
            v = uniform(rng, 0, 1) < 0.7 ? 1 : 0;
        stack.push_back(w);
    }
    const Image avg = average_aligned(stack);
    for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 7; ++x)
            for (int c = 0; c < 3; ++c) {
                double s = 0;
                int n = 0;
                for (const auto& w : stack)
                    if (w.valid.at(x, y)) {
                        s += w.image.at(x, y, c);
                        ++n;
                    }
                EXPECT_NEAR(avg.at(x, y, c), n ? s / n : 0.0, 1e-15);
            }
    const Warped one{stack[0].image, Mask(7, 5, true)};
    const Image same = average_aligned({one, one, one});
    for (std::size_t i = 0; i < same.data().size(); ++i)
        EXPECT_NEAR(same.data()[i], one.image.data()[i], 1e-15);
    EXPECT_THROW(average_aligned({}), InvalidArgument);
}

TEST(Texture, RegionRules)
{
    Rng64 rng(5);
    const Image src = rfk::testing::noise_image(rng, 8, 6, 3), tgt = rfk::testing::noise_image(rng, 8, 6, 3);
    const auto id = FlowField::identity(8, 6);
    EXPECT_EQ(texture_transfer(src, tgt, id, MatchabilityMap(8, 6, 0.0)), tgt);
    EXPECT_EQ(texture_transfer(tgt, tgt, id, MatchabilityMap(8, 6, 1.0)), tgt);
    MatchabilityMap half(8, 6, 0.0);
    for (int y = 0; y < 6; ++y)
        for (int x = 4; x < 8; ++x)
            half.at(x, y) = 1.0;
    const Image out = texture_transfer(src, tgt, id, half);
    for (int y = 0; y < 6; ++y)
        for (int x = 0; x < 8; ++x)
            for (int c = 0; c < 3; ++c)
                EXPECT_EQ(out.at(x, y, c), x >= 4 ? src.at(x, y, c) : tgt.at(x, y, c));
}

TEST(Exclusion, ZeroesMaskedPixels)
{
    MatchabilityMap m(3, 2, 0.8);
    Mask ex(3, 2, false);
    ex.set(1, 1, true);
    apply_exclusion(m, ex);
    EXPECT_EQ(m.at(1, 1), 0.0);
    EXPECT_EQ(m.at(0, 0), 0.8);
    EXPECT_THROW(apply_exclusion(m, Mask(2, 2, false)), InvalidArgument);
}
