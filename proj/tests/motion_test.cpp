#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "monolabel/motion.hpp"
#include "motion_cases.hpp"
#include "test_util.hpp"

namespace mt = monolabel::testing;
using namespace monolabel;

namespace {

Detection det_at(int frame, const Vec3& t, double score = 0.9) {
    Detection d;
    d.frame = frame;
    d.pose.t_c = t;
    d.bbox2d = {10, 10, 50, 40};
    d.score = score;
    return d;
}

std::vector<SE3Transform> identity_poses(int n) { return std::vector<SE3Transform>(static_cast<std::size_t>(n)); }

/// Camera moving forward (+z) by `step` per frame.
std::vector<SE3Transform> forward_poses(int n, double step) {
    std::vector<SE3Transform> p;
    for (int f = 0; f < n; ++f) p.push_back(SE3Transform::translation_only(Vec3(0, 0, step * f)));
    return p;
}

Track track_from(const std::vector<Point3D>& world, MotionClass mc = MotionClass::static_object) {
    Track t;
    for (std::size_t f = 0; f < world.size(); ++f) t.detections.push_back(det_at(static_cast<int>(f), world[f]));
    t.motion_class = mc;
    return t;
}

}  // namespace

TEST(Associate, EmptyInput) {
    EXPECT_TRUE(associate({}, {}, MotionConfig{}).empty());
}

TEST(Associate, SlowMoverIsOneTrack) {
    std::vector<std::vector<Detection>> frames(12);
    for (int f = 0; f < 12; ++f) frames[static_cast<std::size_t>(f)].push_back(det_at(f, Vec3(0.3 * f, 1.5, 12)));
    const auto tracks = associate(frames, identity_poses(12), MotionConfig{});
    ASSERT_EQ(tracks.size(), 1u);
    EXPECT_EQ(tracks[0].detections.size(), 12u);
}

TEST(Associate, TwoStaticObjectsNoSwitches) {
    std::vector<std::vector<Detection>> frames(10);
    for (int f = 0; f < 10; ++f) {
        // Alternate input order to catch order-dependent identity flips.
        auto& fr = frames[static_cast<std::size_t>(f)];
        fr.push_back(det_at(f, Vec3(f % 2 ? 4 : -4, 1.5, 20 - f)));
        fr.push_back(det_at(f, Vec3(f % 2 ? -4 : 4, 1.5, 20 - f)));
    }
    const auto tracks = associate(frames, forward_poses(10, 1.0), MotionConfig{});
    ASSERT_EQ(tracks.size(), 2u);
    for (const auto& t : tracks) {
        ASSERT_EQ(t.detections.size(), 10u);
        for (const auto& d : t.detections) EXPECT_EQ(d.pose.t_c.x(), t.detections.front().pose.t_c.x());
    }
}

TEST(Associate, ConstantVelocityPredictionKeepsCrossingIdentities) {
    // Two objects crossing in x at 1.2 m/frame, 1.5 m apart in z: nearest
    // neighbour on raw positions would swap them at the crossing.
    std::vector<std::vector<Detection>> frames(11);
    for (int f = 0; f < 11; ++f) {
        frames[static_cast<std::size_t>(f)].push_back(det_at(f, Vec3(-6 + 1.2 * f, 1.5, 20)));
        frames[static_cast<std::size_t>(f)].push_back(det_at(f, Vec3(6 - 1.2 * f, 1.5, 21.5)));
    }
    const auto tracks = associate(frames, identity_poses(11), MotionConfig{});
    ASSERT_EQ(tracks.size(), 2u);
    for (const auto& t : tracks) {
        ASSERT_EQ(t.detections.size(), 11u);
        for (const auto& d : t.detections) EXPECT_EQ(d.pose.t_c.z(), t.detections.front().pose.t_c.z());
    }
}

TEST(Associate, TrackEndsAfterTooManyMisses) {
    const auto run = [](int resume) {
        std::vector<std::vector<Detection>> frames(12);
        for (int f : {0, 1, 2, resume}) frames[static_cast<std::size_t>(f)].push_back(det_at(f, Vec3(0, 1.5, 10)));
        return associate(frames, identity_poses(12), MotionConfig{}).size();
    };
    EXPECT_EQ(run(6), 1u);  // three missed frames are bridged
    EXPECT_EQ(run(7), 2u);  // four are not
}

TEST(Associate, GateRejectsFarDetections) {
    std::vector<std::vector<Detection>> frames(2);
    frames[0].push_back(det_at(0, Vec3(0, 1.5, 10)));
    frames[1].push_back(det_at(1, Vec3(3.5, 1.5, 10)));
    EXPECT_EQ(associate(frames, identity_poses(2), MotionConfig{}).size(), 2u);
    MotionConfig wide;
    wide.gate_radius = 4.0;
    EXPECT_EQ(associate(frames, identity_poses(2), wide).size(), 1u);
}

TEST(Associate, Deterministic) {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(-20, 20);
    std::vector<std::vector<Detection>> frames(15);
    for (int f = 0; f < 15; ++f)
        for (int k = 0; k < 6; ++k) frames[static_cast<std::size_t>(f)].push_back(det_at(f, Vec3(u(rng), 1.5, 30 + u(rng))));
    const auto a = associate(frames, identity_poses(15), MotionConfig{});
    const auto b = associate(frames, identity_poses(15), MotionConfig{});
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].frames(), b[i].frames());
}

TEST(Associate, MissingCameraPoseThrows) {
    std::vector<std::vector<Detection>> frames(3);
    frames[2].push_back(det_at(2, Vec3(0, 1.5, 10)));
    EXPECT_THROW(associate(frames, identity_poses(2), MotionConfig{}), LookupError);
}

TEST(WorldPositions, IdentityPosesKeepCameraCoordinates) {
    const Track t = track_from({Vec3(1, 2, 3), Vec3(4, 5, 6)});
    const auto w = world_positions(t, identity_poses(2));
    EXPECT_EQ(w[0], Vec3(1, 2, 3));
    EXPECT_EQ(w[1], Vec3(4, 5, 6));
}

TEST(WorldPositions, StaticObjectUnderForwardMotion) {
    Track t;
    for (int f = 0; f < 8; ++f) t.detections.push_back(det_at(f, Vec3(2, 1.5, 20.0 - f)));
    for (const auto& p : world_positions(t, forward_poses(8, 1.0))) EXPECT_LE((p - Vec3(2, 1.5, 20)).norm(), 1e-9);
}

TEST(WorldPositions, MissingPoseThrows) {
    Track t;
    t.detections.push_back(det_at(5, Vec3(0, 0, 5)));
    try {
        world_positions(t, identity_poses(3));
        FAIL();
    } catch (const LookupError& e) {
        EXPECT_NE(std::string(e.what()).find("frame 5"), std::string::npos);
    }
}

TEST(ClassifyMotion, IdenticalPositionsAreStatic) {
    const std::vector<Point3D> p(6, Vec3(1, 2, 3));
    const std::vector<int> f{0, 1, 2, 3, 4, 5};
    EXPECT_EQ(classify_motion(p, f, MotionConfig{}).motion_class, MotionClass::static_object);
}

TEST(ClassifyMotion, OneMeterPerFrameIsMoving) {
    std::vector<Point3D> p;
    std::vector<int> f;
    for (int i = 0; i < 6; ++i) {
        p.emplace_back(i, 1.5, 10);
        f.push_back(i);
    }
    EXPECT_EQ(classify_motion(p, f, MotionConfig{}).motion_class, MotionClass::moving);
}

TEST(ClassifyMotion, SingleDetectionIsLowConfidenceStatic) {
    const std::vector<Point3D> p{Vec3(0, 0, 5)};
    const std::vector<int> f{3};
    const auto m = classify_motion(p, f, MotionConfig{});
    EXPECT_EQ(m.motion_class, MotionClass::static_object);
    EXPECT_TRUE(m.low_confidence);
}

TEST(ClassifyMotion, NoisyStaticIsStaticInAtLeast95Of100Seeds) {
    int static_count = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> n(0.0, 0.5);
        std::vector<Point3D> p;
        std::vector<int> f;
        for (int i = 0; i < 20; ++i) {
            p.push_back(Vec3(3, 1.5, 25) + Vec3(n(rng), n(rng), n(rng)));
            f.push_back(i);
        }
        MotionConfig cfg;
        cfg.seed = seed;
        static_count += classify_motion(p, f, cfg).motion_class == MotionClass::static_object;
    }
    EXPECT_GE(static_count, 95);
}

TEST(ClassifyMotion, InvariantToRigidWorldTransform) {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 20; ++trial) {
        const auto line = mt::make_noisy_line(100 + trial, 12, trial % 2 ? 0.4 : 0.05, 0.05, 0.2);
        const SE3Transform g = mt::random_se3(rng, 50.0);
        std::vector<Point3D> moved;
        for (const auto& p : line.positions) moved.push_back(g.apply(p));
        EXPECT_EQ(classify_motion(line.positions, line.frames, MotionConfig{}).motion_class,
                  classify_motion(moved, line.frames, MotionConfig{}).motion_class);
    }
}

TEST(FitDirection, CollinearPoints) {
    std::vector<Point3D> p;
    const Vec3 dir = Vec3(1, 0, 2).normalized();
    for (int i = 0; i < 7; ++i) p.push_back(Vec3(1, 1.5, 4) + 0.7 * i * dir);
    const auto fit = fit_direction_ransac(p, MotionConfig{});
    EXPECT_NEAR(fit.direction.dot(dir), 1.0, 1e-12);
    EXPECT_EQ(fit.inlier_count, 7);
    EXPECT_NEAR(fit.direction.norm(), 1.0, 1e-9);
}

TEST(FitDirection, ReversedOrderNegates) {
    std::vector<Point3D> p;
    for (int i = 0; i < 9; ++i) p.emplace_back(0.5 * i, 1.5, 10 - 0.2 * i);
    const auto fwd = fit_direction_ransac(p, MotionConfig{});
    std::reverse(p.begin(), p.end());
    const auto bwd = fit_direction_ransac(p, MotionConfig{});
    EXPECT_LE((fwd.direction + bwd.direction).norm(), 1e-9);
}

TEST(FitDirection, TimeReversalAntisymmetricOnNoisyTracks) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto line = mt::make_noisy_line(seed, 25);
        MotionConfig cfg;
        cfg.seed = seed;
        const auto fwd = fit_direction_ransac(line.positions, cfg);
        std::reverse(line.positions.begin(), line.positions.end());
        const auto bwd = fit_direction_ransac(line.positions, cfg);
        EXPECT_LE((fwd.direction + bwd.direction).norm(), 1e-9) << "seed " << seed;
    }
}

TEST(FitDirection, OutliersAndNoise) {
    int good = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const auto line = mt::make_noisy_line(seed);
        MotionConfig cfg;
        cfg.seed = seed;
        const auto fit = fit_direction_ransac(line.positions, cfg);
        EXPECT_NEAR(fit.direction.norm(), 1.0, 1e-9);
        good += mt::angle_deg(fit.direction, line.direction) <= 2.0;
    }
    EXPECT_GE(good, 95);
}

TEST(FitDirection, DegenerateInputsThrow) {
    EXPECT_THROW(fit_direction_ransac(std::vector<Point3D>{Vec3(1, 2, 3)}, MotionConfig{}), DegenerateFitError);
    EXPECT_THROW(fit_direction_ransac(std::vector<Point3D>(4, Vec3(1, 2, 3)), MotionConfig{}), DegenerateFitError);
}

TEST(SpeedEstimate, ConstantMotion) {
    std::vector<Point3D> p;
    std::vector<int> f;
    for (int i = 0; i < 6; ++i) {
        p.emplace_back(0, 0, 2.0 * i);
        f.push_back(2 * i);  // every other frame
    }
    const std::vector<char> in(6, 1);
    EXPECT_NEAR(speed_estimate(p, f, in, Vec3::UnitZ()), 1.0, 1e-12);
}

TEST(SpeedEstimate, StaticIsZero) {
    const std::vector<Point3D> p(5, Vec3(1, 1, 1));
    const std::vector<int> f{0, 1, 2, 3, 4};
    const std::vector<char> in(5, 1);
    EXPECT_EQ(speed_estimate(p, f, in, Vec3::UnitX()), 0.0);
}

TEST(SpeedEstimate, SkipsOutliers) {
    std::vector<Point3D> p{Vec3(0, 0, 0), Vec3(50, 0, 0), Vec3(2, 0, 0), Vec3(3, 0, 0)};
    const std::vector<int> f{0, 1, 2, 3};
    const std::vector<char> in{1, 0, 1, 1};
    EXPECT_NEAR(speed_estimate(p, f, in, Vec3::UnitX()), 1.0, 1e-12);
}

TEST(SpeedEstimate, FewerThanTwoInliersThrows) {
    const std::vector<Point3D> p{Vec3(0, 0, 0), Vec3(1, 0, 0)};
    const std::vector<int> f{0, 1};
    const std::vector<char> in{1, 0};
    EXPECT_THROW(speed_estimate(p, f, in, Vec3::UnitX()), DegenerateFitError);
}

TEST(SpeedEstimate, NoisyMedianWithinTenPercent) {
    std::vector<double> rel;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const auto line = mt::make_noisy_line(seed);
        MotionConfig cfg;
        cfg.seed = seed;
        const auto fit = fit_direction_ransac(line.positions, cfg);
        rel.push_back(std::abs(speed_estimate(line.positions, line.frames, fit.inliers, fit.direction) - line.speed) /
                      line.speed);
    }
    std::nth_element(rel.begin(), rel.begin() + 50, rel.end());
    EXPECT_LE(rel[50], 0.10);
}

TEST(DisplacementVector, StaticAndSameFrameAreZero) {
    Track t = track_from({Vec3(0, 0, 10), Vec3(1, 0, 10)}, MotionClass::moving);
    t.direction = Vec3::UnitX();
    t.speed = 1.0;
    const auto poses = identity_poses(2);
    EXPECT_EQ(displacement_vector(t, 1, 1, poses), Vec3::Zero());
    t.motion_class = MotionClass::static_object;
    EXPECT_EQ(displacement_vector(t, 0, 1, poses), Vec3::Zero());
}

TEST(DisplacementVector, MovingWithoutFitThrows) {
    Track t = track_from({Vec3(0, 0, 10), Vec3(1, 0, 10)}, MotionClass::moving);
    EXPECT_THROW(displacement_vector(t, 0, 1, identity_poses(2)), DegenerateFitError);
}

TEST(DisplacementVector, IdentityEgoMatchesTrueDisplacement) {
    Track t;
    for (int f = 0; f < 10; ++f) t.detections.push_back(det_at(f, Vec3(-3 + 0.8 * f, 1.5, 15 + 0.3 * f)));
    const auto poses = identity_poses(10);
    estimate_track_motion(t, poses, MotionConfig{});
    ASSERT_EQ(t.motion_class, MotionClass::moving);
    const Vec3 v = displacement_vector(t, 2, 5, poses);
    EXPECT_LE((v - 3.0 * Vec3(0.8, 0, 0.3)).norm(), 1e-9);
}

TEST(DisplacementVector, AntisymmetricUnderRelativeRotation) {
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<SE3Transform> poses;
        for (int f = 0; f < 6; ++f) poses.push_back(mt::random_se3(rng));
        Track t = track_from(std::vector<Point3D>(6, Vec3::Zero()), MotionClass::moving);
        t.direction = mt::random_rotation(rng) * Vec3::UnitX();
        t.speed = 0.7;
        const int i = trial % 6, k = (trial * 5 + 1) % 6;
        const Mat3 r = frame_transform(poses, i, k).rotation();
        EXPECT_LE((displacement_vector(t, i, k, poses) + r * displacement_vector(t, k, i, poses)).norm(), 1e-9);
    }
}

TEST(DisplacementVector, ConsistentWithWarp) {
    // Object moving in the world, camera moving and turning: warping the true
    // frame-i pose with v lands on the true frame-k pose.
    std::mt19937_64 rng(13);
    std::vector<SE3Transform> poses;
    for (int f = 0; f < 8; ++f) poses.push_back(SE3Transform(rot_y(0.05 * f), Vec3(0.1 * f, 0, 1.0 * f)));
    const Vec3 world_dir = Vec3(1, 0, 1).normalized();
    Track t;
    for (int f = 0; f < 8; ++f) {
        const Vec3 world = Vec3(-2, 1.5, 15) + world_dir * 0.9 * f;
        t.detections.push_back(det_at(f, invert(poses[static_cast<std::size_t>(f)]).apply(world)));
    }
    estimate_track_motion(t, poses, MotionConfig{});
    ASSERT_EQ(t.motion_class, MotionClass::moving);
    EXPECT_NEAR(t.speed, 0.9, 1e-9);
    const int i = 1, k = 6;
    const ObjectPose warped =
        warp_pose(t.detections[i].pose, frame_transform(poses, i, k), displacement_vector(t, i, k, poses));
    EXPECT_LE((warped.t_c - t.detections[k].pose.t_c).norm(), 1e-9);
}
