#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "monolabel/synth.hpp"
#include "test_util.hpp"

using namespace monolabel;
namespace mt = monolabel::testing;
namespace fs = std::filesystem;

namespace {

SceneSpec small_static_scene() {
    SceneSpec s;
    s.frames = 2;
    s.width = 160;
    s.height = 80;
    s.fx = s.fy = 100.0;
    s.cx = 80.0;
    s.cy = 40.0;
    s.objects = {ObjectSpec{}, ObjectSpec{}};
    s.objects[0].x = -2.0;
    s.objects[0].z = 12.0;
    s.objects[1].x = 2.5;
    s.objects[1].z = 16.0;
    s.objects[1].yaw = 0.4;
    s.noise = NoiseModel{0, 0, 0, 0, 0, 0};
    return s;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST(Synth, CameraPoses) {
    SceneSpec s;
    const auto poses = scene_camera_poses(s);
    ASSERT_EQ(poses.size(), 20u);
    EXPECT_EQ(poses[0].matrix(), Mat4::Identity());
    EXPECT_NEAR((poses[7].translation() - Vec3(0, 0, 7)).norm(), 0.0, 1e-12);
    s.yaw_rate = 0.02;
    const auto arc = scene_camera_poses(s);
    for (std::size_t f = 1; f < arc.size(); ++f) {
        EXPECT_NEAR((arc[f].translation() - arc[f - 1].translation()).norm(), 1.0, 1e-12);
        EXPECT_NEAR(vertical_rotation_angle(arc[f].rotation()), 0.02 * static_cast<double>(f), 1e-12);
    }
}

TEST(Synth, DefaultSceneIsVisible) {
    SceneSpec s;
    const auto poses = scene_camera_poses(s);
    int labels = 0;
    for (int f = 0; f < s.frames; f += 5) {
        const FrameTruth t = render_frame(s, poses, f);
        labels += static_cast<int>(t.labels.size());
        for (const auto& r : t.labels) {
            EXPECT_GT(r.z, 0.0);
            EXPECT_LE(r.bbox[0], r.bbox[2]);
        }
    }
    EXPECT_GE(labels, 16);
}

TEST(Synth, MaskPixelsCarryObjectSurfaceDepth) {
    SceneSpec s;
    const auto poses = scene_camera_poses(s);
    const ShapeSpace space = cuboid_space();
    for (int f : {0, 10, 19}) {
        const FrameTruth t = render_frame(s, poses, f);
        for (std::size_t r = 0; r < t.labels.size(); ++r) {
            const ObjectPose pose = object_camera_pose(s, poses, t.label_object[r], f);
            const DepthMap alone =
                render_depth(decode(space, Eigen::VectorXd(), pose.size), pose, s.intrinsics(), RenderConfig::full_image(s.intrinsics()));
            int n = 0;
            for (int v = 0; v < s.height; ++v) {
                for (int u = 0; u < s.width; ++u) {
                    if (!t.masks[r](u, v)) continue;
                    ++n;
                    ASSERT_TRUE(t.depth.valid(u, v));
                    EXPECT_NEAR(t.depth.depth(u, v), alone.depth(u, v), 0.5 / 256.0 + 1e-12);
                }
            }
            EXPECT_GE(n, s.min_visible_pixels);
        }
    }
}

TEST(Synth, LabelsMatchObjectPoses) {
    SceneSpec s;
    const auto poses = scene_camera_poses(s);
    const FrameTruth t = render_frame(s, poses, 4);
    for (std::size_t r = 0; r < t.labels.size(); ++r) {
        const ObjectPose truth = object_camera_pose(s, poses, t.label_object[r], 4);
        const ObjectPose back = location_convention(t.labels[r]);
        EXPECT_LT((back.t_c - truth.t_c).norm(), 1e-12);
        EXPECT_NEAR(back.yaw, truth.yaw, 1e-12);
        // the ground contact sits on the road plane
        EXPECT_NEAR(t.labels[r].y, s.camera_height, 1e-12);
    }
}

TEST(Synth, RoundTripsThroughKittiIo) {
    mt::TempDir dir("synth_rt");
    const SceneSpec s = small_static_scene();
    generate(s, dir.path());
    const auto poses = scene_camera_poses(s);
    for (int f = 0; f < s.frames; ++f) {
        const FrameTruth t = render_frame(s, poses, f);
        const DepthMap d = load_depth(dir / "depth" / (frame_name(f) + ".png"));
        EXPECT_EQ(d.depth.values(), t.depth.depth.values());
        const Image img = read_png_intensity(dir / "image_2" / (frame_name(f) + ".png"));
        EXPECT_EQ(img.values(), t.image.values());
        const MaskSet ms = load_masks(dir / "masks", f);
        ASSERT_EQ(ms.size(), t.masks.size());
        for (std::size_t r = 0; r < ms.size(); ++r) {
            EXPECT_EQ(ms[r].instance_id, t.label_object[r]);
            EXPECT_EQ(ms[r].detection, static_cast<int>(r));
            EXPECT_EQ(ms[r].mask.values(), t.masks[r].values());
        }
        const std::string labels = read_text_file(dir / "labels" / (frame_name(f) + ".txt"));
        EXPECT_EQ(write_labels(parse_labels(labels)), labels);
        // zero noise: detections carry the ground-truth geometry
        const auto gt = parse_labels(labels);
        const auto det = parse_labels(read_text_file(dir / "detections" / (frame_name(f) + ".txt")));
        ASSERT_EQ(det.size(), gt.size());
        for (std::size_t r = 0; r < gt.size(); ++r) {
            EXPECT_EQ(det[r].x, gt[r].x);
            EXPECT_EQ(det[r].z, gt[r].z);
            EXPECT_EQ(det[r].rotation_y, gt[r].rotation_y);
            EXPECT_TRUE(det[r].score.has_value());
        }
    }
    const auto read_poses = parse_pose_file(read_text_file(dir / "poses.txt"));
    ASSERT_EQ(read_poses.size(), poses.size());
    for (std::size_t i = 0; i < poses.size(); ++i) EXPECT_EQ(read_poses[i].matrix(), poses[i].matrix());
    const CameraIntrinsics k = parse_calib(read_text_file(dir / "calib.txt")).intrinsics(s.width, s.height);
    EXPECT_EQ(k.fx, s.fx);
    EXPECT_EQ(k.cy, s.cy);
}

TEST(Synth, TruthIndexMarksMovers) {
    mt::TempDir dir("synth_idx");
    SceneSpec s = small_static_scene();
    s.frames = 3;
    s.objects[1].velocity = Vec3(0, 0, 1.0);
    generate(s, dir.path());
    const auto j = nlohmann::json::parse(read_text_file(dir / "truth.json"));
    EXPECT_EQ(j["objects"][0]["motion"], "static");
    EXPECT_EQ(j["objects"][1]["motion"], "moving");
    EXPECT_EQ(j["objects"][1]["velocity"], nlohmann::json::array({0.0, 0.0, 1.0}));
    EXPECT_EQ(j["objects"][1]["frames"].size(), 3u);
    EXPECT_EQ(j["label_objects"][2], nlohmann::json::array({0, 1}));
}

TEST(Synth, ByteDeterministic) {
    mt::TempDir a("synth_a"), b("synth_b");
    SceneSpec s = small_static_scene();
    s.frames = 3;
    s.noise = NoiseModel{};
    s.noise.dropout = 0.3;
    s.seed = 17;
    generate(s, a.path());
    generate(s, b.path());
    int files = 0;
    for (const auto& e : fs::recursive_directory_iterator(a.path())) {
        if (!e.is_regular_file()) continue;
        const fs::path rel = fs::relative(e.path(), a.path());
        ASSERT_TRUE(fs::exists(b.path() / rel)) << rel;
        EXPECT_EQ(slurp(e.path()), slurp(b.path() / rel)) << rel;
        ++files;
    }
    EXPECT_GT(files, 10);
}

TEST(Synth, SceneConfigRoundTrip) {
    SceneSpec s;
    s.yaw_rate = 0.01;
    s.texture = Texture::flat;
    s.noise.dropout = 0.2;
    s.objects.pop_back();
    const SceneSpec back = scene_from_json(nlohmann::json::parse(scene_to_json(s).dump()));
    EXPECT_EQ(scene_to_json(back).dump(), scene_to_json(s).dump());
    EXPECT_THROW(scene_from_json(nlohmann::json{{"frames", 1}}), ConfigError);
    EXPECT_THROW(scene_from_json(nlohmann::json{{"texture", "plaid"}}), ConfigError);
    EXPECT_THROW(scene_from_json(nlohmann::json{{"frames", "many"}}), ConfigError);
}

TEST(Perturb, ZeroNoiseIsIdentity) {
    std::vector<LabelRecord> gt;
    for (int i = 0; i < 5; ++i) {
        ObjectPose p;
        p.t_c = Vec3(i - 2.0, 0.9, 10.0 + 5 * i);
        p.yaw = 0.3 * i;
        gt.push_back(label_from_pose(p, {10, 10, 50, 40}));
    }
    const auto r = perturb(gt, NoiseModel{0, 0, 0, 0, 0, 0}, 3);
    ASSERT_EQ(r.detections.size(), gt.size());
    for (std::size_t i = 0; i < gt.size(); ++i) {
        EXPECT_NEAR(r.detections[i].x, gt[i].x, 1e-12);
        EXPECT_NEAR(r.detections[i].y, gt[i].y, 1e-12);
        EXPECT_NEAR(r.detections[i].z, gt[i].z, 1e-12);
        EXPECT_EQ(r.detections[i].rotation_y, gt[i].rotation_y);
        EXPECT_EQ(r.detections[i].bbox, gt[i].bbox);
        EXPECT_EQ(r.source[i], static_cast<int>(i));
    }
}

TEST(Perturb, FullDropoutIsEmpty) {
    ObjectPose p;
    p.t_c = Vec3(0, 1, 10);
    std::vector<LabelRecord> gt(10, label_from_pose(p, {1, 1, 5, 5}));
    NoiseModel n;
    n.dropout = 1.0;
    EXPECT_TRUE(perturb(gt, n, 1).detections.empty());
}

TEST(Perturb, DepthNoiseScalesWithDistance) {
    for (double z : {10.0, 40.0}) {
        ObjectPose p;
        p.t_c = Vec3(1.0, 0.9, z);
        const std::vector<LabelRecord> gt(10000, label_from_pose(p, {1, 1, 5, 5}));
        const auto r = perturb(gt, NoiseModel{}, 99);
        double sum = 0, sum2 = 0;
        for (const auto& d : r.detections) {
            const double e = d.z - z;
            sum += e;
            sum2 += e * e;
        }
        const double n = static_cast<double>(r.detections.size());
        const double sd = std::sqrt(sum2 / n - (sum / n) * (sum / n));
        EXPECT_NEAR(sd, 0.5 + 0.05 * z, 0.1 * (0.5 + 0.05 * z));
    }
}

TEST(Perturb, ScoresFallWithError) {
    ObjectPose p;
    p.t_c = Vec3(1.0, 0.9, 20.0);
    const std::vector<LabelRecord> gt(2000, label_from_pose(p, {1, 1, 5, 5}));
    const auto r = perturb(gt, NoiseModel{}, 5);
    double mx = 0, my = 0;
    std::vector<double> err, score;
    for (const auto& d : r.detections) {
        err.push_back((Vec3(d.x, d.y, d.z) - Vec3(gt[0].x, gt[0].y, gt[0].z)).norm());
        score.push_back(*d.score);
        mx += err.back();
        my += score.back();
    }
    mx /= static_cast<double>(err.size());
    my /= static_cast<double>(err.size());
    double cov = 0;
    for (std::size_t i = 0; i < err.size(); ++i) cov += (err[i] - mx) * (score[i] - my);
    EXPECT_LT(cov, 0.0);
    EXPECT_EQ(perturb(gt, NoiseModel{}, 5).detections.front().z, r.detections.front().z);
}
