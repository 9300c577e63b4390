#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "gradient_cases.hpp"
#include "monolabel/losses.hpp"

namespace monolabel {
namespace {

using namespace monolabel::testing;

MaskObs half_mask(int w, int h) {
    Grid<std::uint8_t> inst(w, h, 0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w / 2; ++x) inst(x, y) = 1;
    return MaskObs::from_instance(inst);
}

TEST(SilLoss, PerfectOverlapIsNearZero) {
    const MaskObs m = half_mask(8, 8);
    SilhouetteMap s{Grid<double>(8, 8, 0.0)};
    for (std::size_t i = 0; i < s.prob.size(); ++i) s.prob.data()[i] = m.fg.data()[i];
    EXPECT_LE(sil_loss(s, m).value, -std::log(1.0 - kBceEpsilon) + 1e-6);
}

TEST(SilLoss, HalfProbabilityIsLogTwo) {
    const MaskObs m = half_mask(8, 8);
    SilhouetteMap s{Grid<double>(8, 8, 0.5)};
    EXPECT_NEAR(sil_loss(s, m).value, std::log(2.0), 1e-12);
}

TEST(SilLoss, MatchesDirectSummation) {
    std::mt19937_64 rng(41);
    std::uniform_real_distribution<double> u(0, 1);
    Grid<std::uint8_t> inst(8, 8, 0), other(8, 8, 0);
    SilhouetteMap s{Grid<double>(8, 8)};
    for (std::size_t i = 0; i < 64; ++i) {
        inst.data()[i] = u(rng) < 0.4;
        other.data()[i] = !inst.data()[i] && u(rng) < 0.2;
        s.prob.data()[i] = u(rng);
    }
    const MaskObs m = MaskObs::from_instance(inst, &other);
    double expected = 0.0;
    for (std::size_t i = 0; i < 64; ++i) {
        const double p = std::clamp(s.prob.data()[i], 1e-6, 1 - 1e-6);
        const double fg = inst.data()[i] ? 1.0 : 0.0;
        const double bg = (!inst.data()[i] && !other.data()[i]) ? 1.0 : 0.0;
        if (fg + bg > 0) expected += -std::log(p * fg + (1 - p) * bg);
    }
    EXPECT_NEAR(sil_loss(s, m).value, expected / 64.0, 1e-12);
}

TEST(SilLoss, CotangentMatchesFiniteDifference) {
    std::mt19937_64 rng(42);
    std::uniform_real_distribution<double> u(0.05, 0.95);
    const MaskObs m = half_mask(6, 5);
    SilhouetteMap s{Grid<double>(6, 5)};
    for (double& v : s.prob.values()) v = u(rng);
    const auto base = sil_loss(s, m);
    for (std::size_t i = 0; i < s.prob.size(); ++i) {
        SilhouetteMap a = s, b = s;
        a.prob.data()[i] += 1e-6;
        b.prob.data()[i] -= 1e-6;
        const double fd = (sil_loss(a, m).value - sil_loss(b, m).value) / 2e-6;
        EXPECT_NEAR(base.cotangent.data()[i], fd, 1e-6);
    }
}

TEST(SilLoss, FiniteForSaturatedInputs) {
    const MaskObs m = half_mask(4, 4);
    SilhouetteMap s{Grid<double>(4, 4, 0.0)};
    for (int y = 0; y < 4; ++y) s.prob(3, y) = 1.0;  // wrong everywhere it matters
    EXPECT_TRUE(std::isfinite(sil_loss(s, m).value));
}

TEST(SilLoss, ClampedPixelsHaveZeroCotangent) {
    const MaskObs m = half_mask(4, 4);
    SilhouetteMap s{Grid<double>(4, 4, 1e-9)};
    s.prob(0, 0) = 1.0 - 1e-9;
    const auto r = sil_loss(s, m);
    for (double c : r.cotangent.values()) EXPECT_EQ(c, 0.0);
}

TEST(SilLoss, DimensionMismatchThrows) {
    EXPECT_THROW(sil_loss(SilhouetteMap{Grid<double>(4, 4, 0.5)}, half_mask(5, 4)), DimensionError);
}

TEST(MvSilLoss, SelfViewEqualsSilLoss) {
    const GradientScene s = make_gradient_scene(7);
    ViewObs self;
    self.intr = s.intr;
    self.crop = s.crop;
    self.mask = s.mask_i;
    const std::vector<ViewObs> views = {self};
    const auto mv = mv_sil_loss(s.space, s.pose, views);
    const auto single = sil_term(s, s.pose);
    EXPECT_NEAR(mv.term.value, single.value, 1e-12);
    EXPECT_LE((mv.term.grad_t - single.grad_t).norm(), 1e-12);
}

TEST(MvSilLoss, ViewBehindCameraIsSkipped) {
    GradientScene s = make_gradient_scene(8);
    s.views[0].g_ik = SE3Transform(rot_y(std::numbers::pi), Vec3::Zero());
    const auto mv = mv_sil_loss(s.space, s.pose, s.views);
    ASSERT_EQ(mv.skipped_frames.size(), 1u);
    EXPECT_EQ(mv.skipped_frames[0], s.views[0].frame);
    EXPECT_TRUE(mv.term.active);
}

TEST(PhotoLoss, ConstantImagesGiveZero) {
    GradientScene s = make_gradient_scene(9);
    s.image_i = Image(s.intr.width, s.intr.height, 0.4f);
    for (auto& img : s.images) img = Image(s.intr.width, s.intr.height, 0.4f);
    const auto r = photo_loss(s.space, s.pose, s.image_i, s.intr, s.crop, s.views, &s.photo_fg);
    EXPECT_TRUE(r.term.active);
    EXPECT_EQ(r.term.value, 0.0);
    EXPECT_EQ(r.term.grad_t.norm(), 0.0);
}

TEST(PhotoLoss, IdentityWarpSameImageIsExactlyZero) {
    GradientScene s = make_gradient_scene(10);
    ViewObs same;
    same.intr = s.intr;
    same.crop = s.crop;
    same.image = &s.image_i;
    const std::vector<ViewObs> views = {same};
    const auto r = photo_loss(s.space, s.pose, s.image_i, s.intr, s.crop, views);
    EXPECT_GT(r.pixels, 0);
    EXPECT_EQ(r.term.value, 0.0);
}

TEST(PhotoLoss, NoCoverageIsFlagged) {
    GradientScene s = make_gradient_scene(11);
    s.pose.t_c.z() = -5.0;
    const auto r = photo_loss(s.space, s.pose, s.image_i, s.intr, s.crop, s.views);
    EXPECT_TRUE(r.no_coverage);
    EXPECT_EQ(r.term.value, 0.0);
    EXPECT_FALSE(r.term.active);
}

TEST(SmoothL1, Shape) {
    EXPECT_DOUBLE_EQ(smooth_l1(0.0), 0.0);
    EXPECT_DOUBLE_EQ(smooth_l1(0.05), 0.025);
    EXPECT_DOUBLE_EQ(smooth_l1(-0.2), 0.175);
    EXPECT_DOUBLE_EQ(smooth_l1(0.01), 0.5 * 0.0001 / 0.05);
}

TEST(DepthCenterLoss, CoincidentCenters) {
    const ShapeSpace s = cuboid_space();
    ObjectPose p;
    p.t_c = Vec3(1, 1.5, 12);
    const auto r = depth_center_loss(s, p, p.t_c);
    EXPECT_NEAR(r.value, 0.0, 1e-20);
    EXPECT_LE(r.grad_t.norm(), 1e-12);
}

TEST(DepthCenterLoss, UnitOffset) {
    const ShapeSpace s = cuboid_space();
    ObjectPose p;
    p.t_c = Vec3(1, 1.5, 12);
    const auto r = depth_center_loss(s, p, p.t_c - Vec3(0, 0, 1));
    EXPECT_NEAR(r.value, 1.0, 1e-12);
    EXPECT_LE((r.grad_t - Vec3(0, 0, 2)).norm(), 1e-12);
}

TEST(DepthCenterLoss, MatchesDirectFormula) {
    std::mt19937_64 rng(43);
    std::uniform_real_distribution<double> u(-10, 10);
    const ShapeSpace s = cuboid_space();
    for (int i = 0; i < 50; ++i) {
        ObjectPose p;
        p.t_c = Vec3(u(rng), u(rng), 20 + u(rng));
        p.yaw = u(rng);
        const Vec3 c(u(rng), u(rng), 20 + u(rng));
        const double dx = p.t_c.x() - c.x(), dy = p.t_c.y() - c.y(), dz = p.t_c.z() - c.z();
        EXPECT_NEAR(depth_center_loss(s, p, c).value, dx * dx + dy * dy + dz * dz, 1e-9);
    }
}

TEST(VerticalLoss, OnPlaneIsZero) {
    ObjectPose p;
    p.size = Vec3(1.5, 1.6, 3.9);
    p.t_c = Vec3(0, 1.65 - 0.75, 10);
    Priors pr;
    pr.y_plane = 1.65;
    EXPECT_NEAR(vertical_loss(p, pr).value, 0.0, 1e-24);
}

TEST(VerticalLoss, ThirtyCentimetersAbove) {
    ObjectPose p;
    p.size = Vec3(1.5, 1.6, 3.9);
    p.t_c = Vec3(0, 1.65 - 0.75 - 0.3, 10);  // y down: above means smaller y
    Priors pr;
    pr.y_plane = 1.65;
    EXPECT_NEAR(vertical_loss(p, pr).value, 0.09, 1e-12);
}

TEST(VerticalLoss, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(44);
    std::uniform_real_distribution<double> u(-1, 1);
    Priors pr;
    for (int i = 0; i < 20; ++i) {
        ObjectPose p;
        p.t_c = Vec3(u(rng), 1 + u(rng), 10 + u(rng));
        p.size = Vec3(1.5 + 0.3 * u(rng), 1.6, 3.9);
        const auto r = vertical_loss(p, pr);
        const auto fy = [&](const Vec3& t) {
            ObjectPose q = p;
            q.t_c = t;
            return vertical_loss(q, pr).value;
        };
        const auto fh = [&](const Vec3& sz) {
            ObjectPose q = p;
            q.size = sz;
            return vertical_loss(q, pr).value;
        };
        EXPECT_NEAR(r.grad_t.y(), central_difference(fy, p.t_c, 1, 1e-4), 1e-6);
        EXPECT_NEAR(r.grad_size(0), central_difference(fh, p.size, 0, 1e-4), 1e-6);
        EXPECT_EQ(r.grad_t.x(), 0.0);
    }
}

TEST(SizeLoss, Examples) {
    Priors pr;
    EXPECT_EQ(size_loss(pr.size_mean, pr).value, 0.0);
    EXPECT_NEAR(size_loss(pr.size_mean + Vec3(0.1, 0, 0), pr).value, 0.01, 1e-12);
    std::mt19937_64 rng(45);
    std::uniform_real_distribution<double> u(0.5, 5);
    for (int i = 0; i < 20; ++i) {
        const Vec3 s(u(rng), u(rng), u(rng));
        const Vec3 d = s - pr.size_mean;
        const auto r = size_loss(s, pr);
        EXPECT_NEAR(r.value, d(0) * d(0) + d(1) * d(1) + d(2) * d(2), 1e-12);
        EXPECT_LE((r.grad_size - 2 * d).norm(), 1e-12);
    }
}

LossTerms all_terms(const GradientScene& s) {
    LossTerms t;
    t.sil = sil_term(s, s.pose);
    t.mv_sil = mv_sil_term(s, s.pose);
    t.depth = depth_term(s, s.pose);
    t.photo = photo_term(s, s.pose);
    t.size = size_term(s, s.pose);
    t.y = vertical_term(s, s.pose);
    return t;
}

TEST(TotalLoss, DefaultWeights) {
    const LossWeights w;
    EXPECT_EQ(w.sil, 1.0);
    EXPECT_EQ(w.mv_sil, 1.0);
    EXPECT_EQ(w.depth, 0.5);
    EXPECT_EQ(w.photo, 10.0);
    EXPECT_EQ(w.size, 0.5);
    EXPECT_EQ(w.y, 1.0);
}

TEST(TotalLoss, ZeroWeights) {
    const auto b = total_loss(all_terms(make_gradient_scene(12)), LossWeights{0, 0, 0, 0, 0, 0});
    EXPECT_EQ(b.total, 0.0);
    EXPECT_EQ(b.grad_t.norm() + b.grad_size.norm(), 0.0);
}

TEST(TotalLoss, SingleTerm) {
    const auto t = all_terms(make_gradient_scene(13));
    const auto b = total_loss(t, LossWeights{0, 0, 0, 0, 1, 0});
    EXPECT_EQ(b.total, t.size.value);
}

TEST(TotalLoss, DefaultsEqualHandWeightedSum) {
    const auto t = all_terms(make_gradient_scene(14));
    const auto b = total_loss(t, LossWeights{});
    const double hand = 1 * t.sil.value + 1 * t.mv_sil.value + 0.5 * t.depth.value + 10 * t.photo.value +
                        0.5 * t.size.value + 1 * t.y.value;
    EXPECT_NEAR(b.total, hand, 1e-9);
}

TEST(TotalLoss, LinearInWeights) {
    const auto t = all_terms(make_gradient_scene(15));
    const LossWeights w{0.3, 1.7, 0.5, 2.0, 0.9, 1.1};
    const LossWeights w2{0.6, 3.4, 1.0, 4.0, 1.8, 2.2};
    const auto a = total_loss(t, w);
    const auto b = total_loss(t, w2);
    EXPECT_NEAR(b.total, 2 * a.total, 1e-9);
    EXPECT_LE((b.grad_t - 2 * a.grad_t).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LE((b.grad_size - 2 * a.grad_size).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(TotalLoss, InactiveTermsContributeNothing) {
    auto t = all_terms(make_gradient_scene(16));
    t.depth.active = false;
    t.depth.value = 1e9;
    const auto b = total_loss(t, LossWeights{0, 0, 1, 0, 0, 0});
    EXPECT_EQ(b.total, 0.0);
}

TEST(TotalLoss, NegativeWeightRejected) { EXPECT_THROW(total_loss(LossTerms{}, LossWeights{-1, 0, 0, 0, 0, 0}), ConfigError); }

TEST(Losses, AreNonnegative) {
    for (int seed = 0; seed < 5; ++seed) {
        const auto t = all_terms(make_gradient_scene(100 + seed));
        for (const auto* term : {&t.sil, &t.mv_sil, &t.depth, &t.photo, &t.size, &t.y}) EXPECT_GE(term->value, 0.0);
    }
}

// Finite-difference checks for every term, 20 seeded scenes each.
class TermGradient : public ::testing::TestWithParam<std::pair<const char*, TermFn>> {};

TEST_P(TermGradient, MatchesCentralDifferences) {
    const auto& [name, fn] = GetParam();
    for (int seed = 0; seed < 20; ++seed) {
        const GradientScene s = make_gradient_scene(1000 + seed);
        const auto r = check_term_gradient(s, fn);
        EXPECT_TRUE(r.ok) << name << " seed " << seed << ": " << r.detail;
    }
}

INSTANTIATE_TEST_SUITE_P(AllTerms, TermGradient,
                         ::testing::Values(std::make_pair("sil", TermFn(sil_term)),
                                           std::make_pair("mv_sil", TermFn(mv_sil_term)),
                                           std::make_pair("photo", TermFn(photo_term)),
                                           std::make_pair("depth", TermFn(depth_term)),
                                           std::make_pair("vertical", TermFn(vertical_term)),
                                           std::make_pair("size", TermFn(size_term))),
                         [](const auto& info) { return std::string(info.param.first); });

}  // namespace
}  // namespace monolabel
