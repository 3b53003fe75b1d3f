#include "rfk/eval.hpp"

#include "oracle.hpp"
#include "synth.hpp"

#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <numbers>

using namespace rfk;
using namespace rfk::eval;
using rfk::testing::Rng64;
using rfk::testing::uniform;

namespace {

FlowField random_flow(Rng64& rng, int w, int h, double invalid)
{
    FlowField f(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            f.set(x, y, {x + uniform(rng, -8, 8), y + uniform(rng, -8, 8)}, uniform(rng, 0, 1) >= invalid);
    return f;
}

}  // namespace

TEST(Aee, TrivialAndConstantOffset)
{
    const auto gt = FlowField::translation(4, 4, 2, -1);
    EXPECT_EQ(aee(gt, gt), 0.0);
    EXPECT_DOUBLE_EQ(aee(FlowField::translation(4, 4, 3, -1), gt), 1.0);
    EXPECT_THROW(aee(gt, FlowField(4, 4)), InvalidArgument);
    EXPECT_THROW(aee(gt, FlowField::identity(3, 4)), InvalidArgument);
}

TEST(Aee, MatchesOracleUnderBothPolicies)
{
    Rng64 rng(1);
    for (int k = 0; k < 20; ++k) {
        const auto p = random_flow(rng, 4, 4, 0.2), g = random_flow(rng, 4, 4, 0.1);
        EXPECT_NEAR(aee(p, g), rfk::testing::oracle_aee(p, g, false), 1e-12);
        EXPECT_NEAR(aee(p, g, {}, MissingPolicy::exclude), rfk::testing::oracle_aee(p, g, true), 1e-12);
        EXPECT_NEAR(fl_all(p, g), rfk::testing::oracle_fl_all(p, g, false), 1e-12);
    }
    EXPECT_STREQ(to_string(MissingPolicy::exclude), "exclude");
}

TEST(Aee, MaskRestrictsEvaluation)
{
    const auto gt = FlowField::identity(2, 1);
    FlowField p = FlowField::identity(2, 1);
    p.set(1, 0, {5.0, 0.0});
    Mask m(2, 1, false);
    m.set(0, 0, true);
    EXPECT_EQ(aee(p, gt, m), 0.0);
    EXPECT_EQ(aee(p, gt), 2.0);
}

TEST(FlAll, BoundaryLogic)
{
    const auto gt100 = FlowField::translation(3, 3, 100, 0);
    EXPECT_EQ(fl_all(gt100, gt100), 0.0);
    EXPECT_EQ(fl_all(FlowField::translation(3, 3, 104, 0), gt100), 0.0);
    const auto gt10 = FlowField::translation(3, 3, 10, 0);
    EXPECT_EQ(fl_all(FlowField::translation(3, 3, 14, 0), gt10), 100.0);
    EXPECT_EQ(fl_all(FlowField::translation(3, 3, 13, 0), gt10), 0.0);  // exactly 3 px is not wrong
}

TEST(FlAll, MonotoneInAddedError)
{
    Rng64 rng(2);
    const auto g = random_flow(rng, 5, 5, 0.0);
    FlowField p = g;
    double prev = fl_all(p, g);
    for (int k = 0; k < 25; ++k) {
        const int x = k % 5, y = k / 5;
        p.set(x, y, p.map(x, y) + Vec2{4.0 + k, 0.0});
        const double now = fl_all(p, g);
        EXPECT_GE(now, prev);
        prev = now;
    }
}

TEST(Sparse, ExactInvalidAndOracle)
{
    Rng64 rng(3);
    const auto f = FlowField::translation(10, 10, 1.5, -0.5);
    std::vector<Correspondence> c;
    for (int k = 0; k < 20; ++k) {
        const Vec2 t{uniform(rng, 0, 9), uniform(rng, 0, 9)};
        c.push_back({t + Vec2{1.5, -0.5} + Vec2{uniform(rng, -4, 4), uniform(rng, -4, 4)}, t, 1.0});
    }
    for (double d : {1.0, 3.0, 5.0})
        EXPECT_DOUBLE_EQ(sparse_accuracy(f, c, d), rfk::testing::oracle_sparse_accuracy(f, c, d));
    std::vector<Correspondence> exact;
    for (auto k : c)
        exact.push_back({k.tgt + Vec2{1.5, -0.5}, k.tgt, 1.0});
    EXPECT_EQ(sparse_accuracy(f, exact, 1.0), 100.0);
    EXPECT_EQ(sparse_accuracy(FlowField(10, 10), exact, 5.0), 0.0);
    EXPECT_THROW(sparse_accuracy(f, std::vector<Correspondence>{}, 1.0), InvalidArgument);
}

TEST(PoseError, AnalyticCases)
{
    RelativePose gt;
    EXPECT_EQ(pose_angular_error(gt, gt).rotation_deg, 0.0);
    RelativePose est = gt;
    est.rotation = axis_angle(Eigen::Vector3d::UnitZ(), 10.0);
    EXPECT_NEAR(pose_angular_error(est, gt).rotation_deg, 10.0, 1e-6);
    est = gt;
    est.translation = -gt.translation;
    EXPECT_EQ(pose_angular_error(est, gt).translation_deg, 0.0);
}

TEST(PoseMap, ThresholdLogicAndOracle)
{
    const std::vector<AngularError> e(5, AngularError{7.0, 3.0});
    const std::vector<double> th{5, 10, 20};
    EXPECT_EQ(pose_map(e, th), (std::vector<double>{0.0, 100.0, 100.0}));
    Rng64 rng(4);
    std::vector<AngularError> r;
    std::vector<std::pair<double, double>> ro;
    for (int k = 0; k < 20; ++k) {
        r.push_back({uniform(rng, 0, 25), uniform(rng, 0, 25)});
        ro.emplace_back(r.back().rotation_deg, r.back().translation_deg);
    }
    const auto got = pose_map(r, th);
    for (std::size_t i = 0; i < th.size(); ++i)
        EXPECT_DOUBLE_EQ(got[i], rfk::testing::oracle_map_at(ro, th[i]));
    EXPECT_THROW(pose_map(std::vector<AngularError>{}, th), InvalidArgument);
}

namespace {

struct Scene {
    RelativePose pose;
    std::vector<NormalizedPair> pairs;
};

Scene make_scene(Rng64& rng, int n, const Eigen::Matrix3d& r, const Eigen::Vector3d& t)
{
    Scene s;
    s.pose.rotation = r;
    s.pose.translation = t.normalized();
    for (int k = 0; k < n; ++k) {
        const Eigen::Vector3d xs(uniform(rng, -2, 2), uniform(rng, -2, 2), uniform(rng, 4, 8));
        const Eigen::Vector3d xt = r * xs + t;
        s.pairs.push_back({xs.hnormalized(), xt.hnormalized()});
    }
    return s;
}

}  // namespace

TEST(Essential, NoiselessSceneSatisfiesEpipolarConstraint)
{
    Rng64 rng(5);
    const Scene s = make_scene(rng, 50, axis_angle({0.2, 1, 0.1}, 8.0), {0.8, 0.1, 0.2});
    const Eigen::Matrix3d e = essential_eight_point(s.pairs);
    for (const auto& p : s.pairs)
        EXPECT_LT(std::abs(p.tgt.homogeneous().dot(e * p.src.homogeneous())), 1e-8);
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(e);
    EXPECT_NEAR(svd.singularValues()(0), svd.singularValues()(1), 1e-12);
    EXPECT_NEAR(svd.singularValues()(2), 0.0, 1e-12);
}

TEST(Essential, PureTranslationIsSkewMatrix)
{
    Rng64 rng(6);
    const Eigen::Vector3d t(0.3, -0.5, 0.8);
    const Scene s = make_scene(rng, 40, Eigen::Matrix3d::Identity(), t);
    Eigen::Matrix3d e = essential_eight_point(s.pairs);
    Eigen::Matrix3d tx;
    const Eigen::Vector3d u = t.normalized();
    tx << 0, -u.z(), u.y(), u.z(), 0, -u.x(), -u.y(), u.x(), 0;
    tx /= tx.norm();
    if ((e - tx).norm() > (e + tx).norm())
        e = -e;
    EXPECT_LT((e - tx).norm(), 1e-4);
}

TEST(Essential, DecompositionRecoversPose)
{
    Rng64 rng(7);
    for (int k = 0; k < 10; ++k) {
        const Eigen::Vector3d axis(uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1));
        const Eigen::Vector3d t(uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -0.3, 0.3));
        const Scene s = make_scene(rng, 60, axis_angle(axis, uniform(rng, 2, 15)), t);
        const auto model = ransac_essential(s.pairs, {});
        ASSERT_TRUE(model);
        const RelativePose p = decompose_essential(model->e, s.pairs);
        const auto err = pose_angular_error(p, s.pose);
        EXPECT_LT(err.rotation_deg, 0.1);
        EXPECT_LT(err.translation_deg, 0.1);
        EXPECT_LT((p.rotation * p.rotation.transpose() - Eigen::Matrix3d::Identity()).norm(), 1e-9);
        EXPECT_NEAR(p.rotation.determinant(), 1.0, 1e-9);
        EXPECT_NEAR(p.translation.norm(), 1.0, 1e-12);
        for (std::size_t i : model->inliers)
            EXPECT_LT(sampson_error(model->e, s.pairs[i]), 1e-3);
    }
}

TEST(Essential, IdentityRotationUnitX)
{
    Rng64 rng(8);
    const Scene s = make_scene(rng, 30, Eigen::Matrix3d::Identity(), {1, 0, 0});
    const RelativePose p = decompose_essential(essential_eight_point(s.pairs), s.pairs);
    EXPECT_LT((p.rotation - Eigen::Matrix3d::Identity()).norm(), 1e-9);
    EXPECT_NEAR(std::abs(p.translation.x()), 1.0, 1e-9);
    EXPECT_GT(p.translation.x(), 0.0);
}

TEST(Essential, PointsBehindCamerasAreDegenerate)
{
    // Every candidate reconstructs these points with negative depth in one of the views.
    Rng64 rng(9);
    Scene s = make_scene(rng, 30, Eigen::Matrix3d::Identity(), {1, 0, 0});
    const Eigen::Matrix3d e = essential_eight_point(s.pairs);
    std::vector<NormalizedPair> mixed;
    for (std::size_t k = 0; k < s.pairs.size(); ++k) {
        // Alternate points in front and behind: no candidate wins a strict majority.
        Eigen::Vector3d xs(uniform(rng, -2, 2), uniform(rng, -2, 2), uniform(rng, 4, 8));
        if (k % 2)
            xs.z() = -xs.z();
        const Eigen::Vector3d xt = xs + Eigen::Vector3d(1, 0, 0);
        mixed.push_back({xs.hnormalized(), xt.hnormalized()});
    }
    EXPECT_THROW(decompose_essential(e, mixed), DegenerateError);
}

TEST(Essential, TooFewCandidates)
{
    FlowField f = FlowField::identity(10, 10);
    MatchabilityMap m(10, 10, 0.0);
    for (int k = 0; k < 7; ++k)
        m.at(k, k) = 1.0;
    const CameraIntrinsics k{100, 100, 5, 5};
    EXPECT_FALSE(essential_from_flow(f, m, k, k).has_value());
    EXPECT_THROW(essential_eight_point(std::vector<NormalizedPair>(7)), InvalidArgument);
    EXPECT_THROW((CameraIntrinsics{0, 1, 0, 0}).validate(), InvalidArgument);
}

TEST(Essential, FlowCorrespondencesSubsample)
{
    FlowField f = FlowField::translation(100, 50, 1, 0);
    const MatchabilityMap m(100, 50, 1.0);
    const CameraIntrinsics k{50, 50, 50, 25};
    EssentialConfig cfg;
    const auto c = flow_correspondences(f, m, k, k, cfg);
    EXPECT_EQ(c.size(), 2000u);
    EXPECT_NEAR(c[0].src.x(), (1.0 - 50) / 50, 1e-12);
    EXPECT_NEAR(c[0].tgt.x(), (0.0 - 50) / 50, 1e-12);
}
