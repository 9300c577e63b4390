#pragma once

// Deterministic synthetic driving sequences in the kitti_io layout: a level
// camera moving over a checkered ground plane, cuboid cars (static or moving
// linearly), exact masks and depth, ground-truth labels and a track index,
// plus noisy detections drawn from the truth.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "monolabel/errors.hpp"
#include "monolabel/geom.hpp"
#include "monolabel/kitti_io.hpp"
#include "monolabel/motion.hpp"
#include "monolabel/render.hpp"
#include "monolabel/shape.hpp"

namespace monolabel {

enum class Texture { flat, checker };

struct ObjectSpec {
    Vec3 size = Vec3(1.53, 1.63, 3.88);  ///< (h, w, l)
    double x = 0.0;                      ///< world ground position of the box center at frame 0
    double z = 20.0;
    double yaw = -std::numbers::pi / 2;  ///< world rotation_y
    Vec3 velocity = Vec3::Zero();        ///< world, m/frame

    bool moving() const { return velocity.norm() > 0.0; }
};

struct NoiseModel {
    double sigma_t_base = 0.5;    ///< m
    double sigma_t_per_m = 0.05;  ///< m per m of depth
    double sigma_size = 0.1;      ///< m
    double sigma_yaw = 0.05;      ///< rad
    double sigma_bbox = 1.0;      ///< px
    double dropout = 0.0;

    void validate() const {
        for (double s : {sigma_t_base, sigma_t_per_m, sigma_size, sigma_yaw, sigma_bbox}) {
            if (!(s >= 0.0)) throw ConfigError("noise sigmas must be nonnegative");
        }
        if (!(dropout >= 0.0 && dropout <= 1.0)) throw ConfigError("dropout must be in [0, 1]");
    }
};

/// Three parked cars and two moving ones (same direction and oncoming).
inline std::vector<ObjectSpec> default_objects() {
    const double pi = std::numbers::pi;
    std::vector<ObjectSpec> o(5);
    o[0].x = -5.5, o[0].z = 28.0, o[0].yaw = -pi / 2;
    o[1].x = 5.0, o[1].z = 38.0, o[1].yaw = -pi / 2 + 0.3, o[1].size = Vec3(1.45, 1.70, 4.20);
    o[2].x = -6.5, o[2].z = 48.0, o[2].yaw = pi / 2, o[2].size = Vec3(1.60, 1.75, 4.40);
    o[3].x = 2.0, o[3].z = 14.0, o[3].yaw = -pi / 2, o[3].velocity = Vec3(0, 0, 1.6);
    o[4].x = -2.5, o[4].z = 62.0, o[4].yaw = pi / 2, o[4].velocity = Vec3(0, 0, -1.2), o[4].size = Vec3(1.50, 1.60, 3.70);
    return o;
}

struct SceneSpec {
    int frames = 20;
    double speed = 1.0;           ///< camera m/frame
    double yaw_rate = 0.0;        ///< camera rad/frame, 0 = straight
    double camera_height = 1.65;  ///< m above ground
    int width = 621;
    int height = 188;
    double fx = 360.0, fy = 360.0, cx = 310.0, cy = 94.0;
    Texture texture = Texture::checker;
    std::vector<ObjectSpec> objects = default_objects();
    NoiseModel noise;
    int min_visible_pixels = 30;  ///< smaller objects get no label
    double max_depth = 120.0;     ///< ground beyond this is sky
    std::uint64_t seed = 0;

    CameraIntrinsics intrinsics() const { return {fx, fy, cx, cy, width, height}; }

    void validate() const {
        if (frames < 2) throw ConfigError("scene needs at least 2 frames");
        intrinsics().validate();
        noise.validate();
        if (!(camera_height > 0.0)) throw ConfigError("camera_height must be positive");
        for (const auto& o : objects) {
            if (!(o.size.minCoeff() > 0.0)) throw ConfigError("object sizes must be positive");
        }
    }
};

// ---- scene geometry --------------------------------------------------------

/// Camera-to-world poses; world is the camera frame at frame 0.
inline std::vector<SE3Transform> scene_camera_poses(const SceneSpec& s) {
    std::vector<SE3Transform> out;
    Vec3 pos = Vec3::Zero();
    for (int f = 0; f < s.frames; ++f) {
        const double heading = s.yaw_rate * f;
        out.emplace_back(rot_y(heading), pos);
        const double mid = heading + 0.5 * s.yaw_rate;
        pos += s.speed * Vec3(std::sin(mid), 0.0, std::cos(mid));
    }
    return out;
}

/// World-frame box pose of object `id` at frame `f`.
inline ObjectPose object_world_pose(const SceneSpec& s, int id, int f) {
    const ObjectSpec& o = s.objects.at(static_cast<std::size_t>(id));
    ObjectPose p;
    p.size = o.size;
    p.yaw = o.yaw;
    p.t_c = Vec3(o.x, s.camera_height - o.size(0) / 2, o.z) + o.velocity * f;
    p.embedding = Eigen::VectorXd();
    return p;
}

inline ObjectPose object_camera_pose(const SceneSpec& s, const std::vector<SE3Transform>& poses, int id, int f) {
    return warp_pose(object_world_pose(s, id, f), invert(poses.at(static_cast<std::size_t>(f))), Vec3::Zero());
}

// ---- frame rendering -------------------------------------------------------

struct FrameTruth {
    Image image;
    DepthMap depth;                   ///< quantized to 1/256 m
    Grid<int> object_id;              ///< -1 = ground / sky
    std::vector<LabelRecord> labels;  ///< visible objects, id order
    std::vector<int> label_object;    ///< object id per label row
    std::vector<Grid<std::uint8_t>> masks;  ///< per label row
};

namespace detail {

inline double quantize(double v, double step) { return std::round(v / step) * step; }

inline bool checker(double a, double b, double c, double cell) {
    const long k = static_cast<long>(std::floor(a / cell)) + static_cast<long>(std::floor(b / cell)) +
                   static_cast<long>(std::floor(c / cell));
    return (k & 1) != 0;
}

inline int occlusion_level(double visible_fraction) {
    if (visible_fraction >= 0.8) return 0;
    if (visible_fraction >= 0.4) return 1;
    return 2;
}

}  // namespace detail

inline FrameTruth render_frame(const SceneSpec& s, const std::vector<SE3Transform>& poses, int f) {
    const CameraIntrinsics intr = s.intrinsics();
    const RenderConfig full = RenderConfig::full_image(intr);
    const ShapeSpace space = cuboid_space();
    const int w = s.width, h = s.height;
    FrameTruth out;
    out.image = Image(w, h, 0.0f);
    out.depth.depth = Grid<double>(w, h, 0.0);
    out.object_id = Grid<int>(w, h, -1);
    Grid<double> zbuf(w, h, std::numeric_limits<double>::infinity());

    const SE3Transform& cam = poses.at(static_cast<std::size_t>(f));
    // ground plane y_world = camera_height
    for (int v = 0; v < h; ++v) {
        for (int u = 0; u < w; ++u) {
            const Vec3 dir = cam.rotation() * intr.ray(Vec2(u, v));
            if (dir.y() <= 1e-9) continue;
            const double t = (s.camera_height - cam.translation().y()) / dir.y();
            if (t > s.max_depth) continue;
            zbuf(u, v) = t;
        }
    }

    struct Visible {
        int id;
        ObjectPose pose;
        int full_pixels;
    };
    std::vector<Visible> candidates;
    for (int id = 0; id < static_cast<int>(s.objects.size()); ++id) {
        const ObjectPose pose = object_camera_pose(s, poses, id, f);
        const Mesh mesh = decode(space, Eigen::VectorXd(), pose.size);
        const VertexMatrix cv = posed_vertices(mesh, pose);
        if (cv.col(2).minCoeff() <= full.near) continue;
        DepthRaster r(mesh, pose, intr, full);
        const DepthMap d = r.map();
        int n = 0;
        for (int v = 0; v < h; ++v) {
            for (int u = 0; u < w; ++u) {
                if (!d.valid(u, v)) continue;
                ++n;
                if (d.depth(u, v) < zbuf(u, v)) {
                    zbuf(u, v) = d.depth(u, v);
                    out.object_id(u, v) = id;
                }
            }
        }
        if (n > 0) candidates.push_back({id, pose, n});
    }

    const Vec3 shade_base(0.35, 0.5, 0.65);
    for (int v = 0; v < h; ++v) {
        for (int u = 0; u < w; ++u) {
            const double z = zbuf(u, v);
            double value = 0.85;  // sky
            if (std::isfinite(z)) {
                out.depth.depth(u, v) = std::max(1.0 / 256.0, detail::quantize(z, 1.0 / 256.0));
                const Vec3 pc = intr.ray(Vec2(u, v)) * z;
                const int id = out.object_id(u, v);
                if (id < 0) {
                    const Vec3 pw = cam.apply(pc);
                    value = s.texture == Texture::flat ? 0.45 : (detail::checker(pw.x(), 0.0, pw.z(), 1.0) ? 0.35 : 0.55);
                } else {
                    const ObjectPose pose = object_camera_pose(s, poses, id, f);
                    const Vec3 local = object_rotation(pose.yaw).transpose() * (pc - pose.t_c);
                    const double base = shade_base(id % 3);
                    value = s.texture == Texture::flat
                                ? base
                                : base + (detail::checker(local.x() + 7.0, local.y() + 7.0, local.z() + 7.0, 0.5) ? 0.2 : -0.2);
                }
            }
            out.image(u, v) = static_cast<float>(std::lround(std::clamp(value, 0.0, 1.0) * 255.0) / 255.0);
        }
    }

    for (const auto& c : candidates) {
        Grid<std::uint8_t> mask(w, h, 0);
        int visible = 0;
        for (std::size_t i = 0; i < mask.size(); ++i) {
            if (out.object_id.data()[i] == c.id) {
                mask.data()[i] = 1;
                ++visible;
            }
        }
        if (visible < s.min_visible_pixels) continue;
        const Mesh mesh = decode(space, Eigen::VectorXd(), c.pose.size);
        const ImageBox box = projected_box(mesh, c.pose, intr, full.near);
        const std::array<double, 4> clipped{std::clamp(box.u0, 0.0, w - 1.0), std::clamp(box.v0, 0.0, h - 1.0),
                                            std::clamp(box.u1, 0.0, w - 1.0), std::clamp(box.v1, 0.0, h - 1.0)};
        const double full_area = (box.u1 - box.u0) * (box.v1 - box.v0);
        const double clip_area = (clipped[2] - clipped[0]) * (clipped[3] - clipped[1]);
        LabelRecord r = label_from_pose(c.pose, clipped, std::nullopt, "Car");
        r.truncated = full_area > 0 ? std::clamp(1.0 - clip_area / full_area, 0.0, 1.0) : 1.0;
        r.occluded = detail::occlusion_level(static_cast<double>(visible) / c.full_pixels);
        out.labels.push_back(r);
        out.label_object.push_back(c.id);
        out.masks.push_back(std::move(mask));
    }
    return out;
}

// ---- detection noise -------------------------------------------------------

struct PerturbResult {
    std::vector<LabelRecord> detections;
    std::vector<int> source;  ///< gt row per detection
};

/// Noisy detections from ground-truth labels. Translation noise is per axis
/// with sigma growing linearly in depth; scores fall with the error.
inline PerturbResult perturb(const std::vector<LabelRecord>& gt, const NoiseModel& noise, std::uint64_t seed) {
    noise.validate();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n01(0.0, 1.0);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    PerturbResult out;
    for (std::size_t i = 0; i < gt.size(); ++i) {
        const LabelRecord& g = gt[i];
        // every draw happens regardless of dropout, so rows stay independent
        const double drop = u01(rng);
        const double st = noise.sigma_t_base + noise.sigma_t_per_m * std::max(0.0, g.z);
        const Vec3 dt(st * n01(rng), st * n01(rng), st * n01(rng));
        const Vec3 ds(noise.sigma_size * n01(rng), noise.sigma_size * n01(rng), noise.sigma_size * n01(rng));
        const double dyaw = noise.sigma_yaw * n01(rng);
        std::array<double, 4> db;
        for (double& b : db) b = noise.sigma_bbox * n01(rng);
        const double jitter = u01(rng);
        if (g.dont_care() || drop < noise.dropout) continue;

        ObjectPose p = location_convention(g);
        p.t_c += dt;
        p.size = (p.size + ds).cwiseMax(0.3);
        p.yaw = wrap_angle(p.yaw + dyaw);
        std::array<double, 4> bbox{g.bbox[0] + db[0], g.bbox[1] + db[1], g.bbox[2] + db[2], g.bbox[3] + db[3]};
        if (bbox[2] < bbox[0]) std::swap(bbox[0], bbox[2]);
        if (bbox[3] < bbox[1]) std::swap(bbox[1], bbox[3]);
        const double score = std::clamp(0.9 * std::exp(-dt.norm() / 2.0) + 0.1 * jitter, 0.0, 1.0);
        LabelRecord d = label_from_pose(p, bbox, score, g.type);
        d.truncated = 0.0;
        d.occluded = 0;
        out.detections.push_back(d);
        out.source.push_back(static_cast<int>(i));
    }
    return out;
}

inline std::uint64_t frame_seed(std::uint64_t seed, int frame) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(frame), 0x5eedu};
    std::array<std::uint32_t, 2> out;
    seq.generate(out.begin(), out.end());
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

// ---- scene config ----------------------------------------------------------

inline nlohmann::ordered_json scene_to_json(const SceneSpec& s) {
    nlohmann::ordered_json j;
    j["frames"] = s.frames;
    j["speed"] = s.speed;
    j["yaw_rate"] = s.yaw_rate;
    j["camera_height"] = s.camera_height;
    j["width"] = s.width;
    j["height"] = s.height;
    j["fx"] = s.fx;
    j["fy"] = s.fy;
    j["cx"] = s.cx;
    j["cy"] = s.cy;
    j["texture"] = s.texture == Texture::flat ? "flat" : "checker";
    j["min_visible_pixels"] = s.min_visible_pixels;
    j["max_depth"] = s.max_depth;
    j["seed"] = s.seed;
    j["noise"] = {{"sigma_t_base", s.noise.sigma_t_base}, {"sigma_t_per_m", s.noise.sigma_t_per_m},
                  {"sigma_size", s.noise.sigma_size},     {"sigma_yaw", s.noise.sigma_yaw},
                  {"sigma_bbox", s.noise.sigma_bbox},     {"dropout", s.noise.dropout}};
    j["objects"] = nlohmann::ordered_json::array();
    for (const auto& o : s.objects) {
        j["objects"].push_back({{"size", {o.size(0), o.size(1), o.size(2)}},
                                {"x", o.x},
                                {"z", o.z},
                                {"yaw", o.yaw},
                                {"velocity", {o.velocity(0), o.velocity(1), o.velocity(2)}}});
    }
    return j;
}

/// Missing keys keep their defaults; an "objects" array replaces the default cars.
inline SceneSpec scene_from_json(const nlohmann::json& j) {
    SceneSpec s;
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    try {
        get("frames", s.frames);
        get("speed", s.speed);
        get("yaw_rate", s.yaw_rate);
        get("camera_height", s.camera_height);
        get("width", s.width);
        get("height", s.height);
        get("fx", s.fx);
        get("fy", s.fy);
        get("cx", s.cx);
        get("cy", s.cy);
        get("min_visible_pixels", s.min_visible_pixels);
        get("max_depth", s.max_depth);
        get("seed", s.seed);
        if (j.contains("texture")) {
            const auto t = j.at("texture").get<std::string>();
            if (t == "flat") s.texture = Texture::flat;
            else if (t == "checker") s.texture = Texture::checker;
            else throw ConfigError("texture must be 'flat' or 'checker'");
        }
        if (j.contains("noise")) {
            const auto& n = j.at("noise");
            auto nget = [&](const char* key, double& field) {
                if (n.contains(key)) field = n.at(key).get<double>();
            };
            nget("sigma_t_base", s.noise.sigma_t_base);
            nget("sigma_t_per_m", s.noise.sigma_t_per_m);
            nget("sigma_size", s.noise.sigma_size);
            nget("sigma_yaw", s.noise.sigma_yaw);
            nget("sigma_bbox", s.noise.sigma_bbox);
            nget("dropout", s.noise.dropout);
        }
        if (j.contains("objects")) {
            s.objects.clear();
            for (const auto& jo : j.at("objects")) {
                ObjectSpec o;
                if (jo.contains("size")) {
                    const auto v = jo.at("size").get<std::vector<double>>();
                    if (v.size() != 3) throw ConfigError("object size needs 3 values (h, w, l)");
                    o.size = Vec3(v[0], v[1], v[2]);
                }
                if (jo.contains("x")) o.x = jo.at("x").get<double>();
                if (jo.contains("z")) o.z = jo.at("z").get<double>();
                if (jo.contains("yaw")) o.yaw = jo.at("yaw").get<double>();
                if (jo.contains("velocity")) {
                    const auto v = jo.at("velocity").get<std::vector<double>>();
                    if (v.size() != 3) throw ConfigError("object velocity needs 3 values");
                    o.velocity = Vec3(v[0], v[1], v[2]);
                }
                s.objects.push_back(o);
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("scene config: ") + e.what());
    }
    s.validate();
    return s;
}

// ---- dataset generation ----------------------------------------------------

struct GenerateSummary {
    int frames = 0;
    int labels = 0;
    int detections = 0;
};

/// Ground-truth track and motion-class index.
inline nlohmann::ordered_json truth_index(const SceneSpec& s, const std::vector<std::vector<int>>& label_objects) {
    nlohmann::ordered_json j;
    j["frames"] = s.frames;
    j["objects"] = nlohmann::ordered_json::array();
    for (std::size_t id = 0; id < s.objects.size(); ++id) {
        const auto& o = s.objects[id];
        std::vector<int> frames;
        for (std::size_t f = 0; f < label_objects.size(); ++f) {
            if (std::find(label_objects[f].begin(), label_objects[f].end(), static_cast<int>(id)) != label_objects[f].end()) {
                frames.push_back(static_cast<int>(f));
            }
        }
        j["objects"].push_back({{"id", id},
                                {"motion", to_string(o.moving() ? MotionClass::moving : MotionClass::static_object)},
                                {"velocity", {o.velocity(0), o.velocity(1), o.velocity(2)}},
                                {"size", {o.size(0), o.size(1), o.size(2)}},
                                {"frames", frames}});
    }
    j["label_objects"] = label_objects;
    return j;
}

/// Writes calib.txt, poses.txt, image_2/, depth/, masks/, labels/,
/// detections/, truth.json and scene.json under `out`.
inline GenerateSummary generate(const SceneSpec& s, const std::filesystem::path& out) {
    s.validate();
    namespace fs = std::filesystem;
    std::error_code ec;
    for (const char* sub : {"image_2", "depth", "masks", "labels", "detections"}) {
        fs::create_directories(out / sub, ec);
        if (ec) throw IoError("cannot create " + (out / sub).string() + ": " + ec.message());
    }
    const auto poses = scene_camera_poses(s);
    write_text_file(out / "calib.txt", write_calib(calib_from_intrinsics(s.intrinsics())));
    write_text_file(out / "poses.txt", write_pose_file(poses));
    write_text_file(out / "scene.json", scene_to_json(s).dump(2) + "\n");
    GenerateSummary sum;
    std::vector<std::vector<int>> label_objects;
    for (int f = 0; f < s.frames; ++f) {
        const FrameTruth t = render_frame(s, poses, f);
        const std::string name = frame_name(f);
        write_png_intensity(out / "image_2" / (name + ".png"), t.image);
        write_depth(out / "depth" / (name + ".png"), t.depth);
        write_text_file(out / "labels" / (name + ".txt"), write_labels(t.labels));
        const PerturbResult det = perturb(t.labels, s.noise, frame_seed(s.seed, f));
        write_text_file(out / "detections" / (name + ".txt"), write_labels(det.detections));
        MaskSet masks;
        for (std::size_t r = 0; r < t.labels.size(); ++r) {
            InstanceMask m;
            m.instance_id = t.label_object[r];
            const auto it = std::find(det.source.begin(), det.source.end(), static_cast<int>(r));
            m.detection = it == det.source.end() ? -1 : static_cast<int>(it - det.source.begin());
            m.mask = t.masks[r];
            masks.push_back(std::move(m));
        }
        write_masks(out / "masks", f, masks);
        label_objects.push_back(t.label_object);
        ++sum.frames;
        sum.labels += static_cast<int>(t.labels.size());
        sum.detections += static_cast<int>(det.detections.size());
    }
    write_text_file(out / "truth.json", truth_index(s, label_objects).dump(2) + "\n");
    return sum;
}

}  // namespace monolabel
