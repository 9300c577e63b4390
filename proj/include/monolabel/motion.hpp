#pragma once

// Tracks from per-frame detections, static/moving classification and a robust
// straight-line motion model per track.

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <tuple>
#include <vector>

#include <Eigen/SVD>

#include "monolabel/errors.hpp"
#include "monolabel/geom.hpp"

namespace monolabel {

struct Detection {
    int frame = 0;
    ObjectPose pose;
    std::array<double, 4> bbox2d{0, 0, 1, 1};  ///< u_min, v_min, u_max, v_max
    double score = 1.0;
    int mask_id = -1;  ///< instance id in the frame's mask set, -1 if none

    bool valid() const {
        return bbox2d[0] < bbox2d[2] && bbox2d[1] < bbox2d[3] && score >= 0.0 && score <= 1.0;
    }
};

enum class MotionClass { static_object, moving };

inline const char* to_string(MotionClass m) { return m == MotionClass::moving ? "moving" : "static"; }

struct Track {
    int id = 0;
    std::vector<Detection> detections;  ///< strictly increasing frames
    MotionClass motion_class = MotionClass::static_object;
    std::optional<Vec3> direction;  ///< world frame, present iff moving
    double speed = 0.0;             ///< meters per frame
    bool low_confidence = false;

    std::vector<int> frames() const {
        std::vector<int> f;
        f.reserve(detections.size());
        for (const auto& d : detections) f.push_back(d.frame);
        return f;
    }

    const Detection* at_frame(int frame) const {
        const auto it = std::lower_bound(detections.begin(), detections.end(), frame,
                                         [](const Detection& d, int f) { return d.frame < f; });
        return it != detections.end() && it->frame == frame ? &*it : nullptr;
    }
};

struct MotionConfig {
    double gate_radius = 3.0;        ///< m
    int max_misses = 3;              ///< consecutive frames without a match before a track ends
    double moving_threshold = 0.1;   ///< m/frame
    int ransac_iterations = 100;
    double inlier_threshold = 0.5;   ///< m, point-to-line distance
    std::uint64_t seed = 0;

    void validate() const {
        if (!(gate_radius > 0.0)) throw ConfigError("gate_radius must be positive");
        if (max_misses < 0) throw ConfigError("max_misses must be nonnegative");
        if (!(moving_threshold >= 0.0)) throw ConfigError("moving_threshold must be nonnegative");
        if (ransac_iterations < 1) throw ConfigError("ransac_iterations must be at least 1");
        if (!(inlier_threshold > 0.0)) throw ConfigError("inlier_threshold must be positive");
    }
};

inline const SE3Transform& camera_pose(std::span<const SE3Transform> poses, int frame) {
    if (frame < 0 || static_cast<std::size_t>(frame) >= poses.size()) {
        throw LookupError("no camera pose for frame " + std::to_string(frame));
    }
    return poses[static_cast<std::size_t>(frame)];
}

/// Greedy frame-to-frame association on predicted world-frame centers.
/// `per_frame[f]` holds the detections of frame f.
inline std::vector<Track> associate(const std::vector<std::vector<Detection>>& per_frame,
                                    std::span<const SE3Transform> poses, const MotionConfig& cfg) {
    cfg.validate();
    // Constant-velocity model fitted by least squares to the track so far.
    struct Live {
        std::size_t track;
        std::vector<Vec3> positions;
        std::vector<int> frames;
        int last_frame;

        Vec3 predict(int f) const {
            const double n = static_cast<double>(frames.size());
            double mean_f = 0.0;
            Vec3 mean_p = Vec3::Zero();
            for (std::size_t k = 0; k < frames.size(); ++k) {
                mean_f += frames[k] / n;
                mean_p += positions[k] / n;
            }
            double sff = 0.0;
            Vec3 sfp = Vec3::Zero();
            for (std::size_t k = 0; k < frames.size(); ++k) {
                sff += (frames[k] - mean_f) * (frames[k] - mean_f);
                sfp += (frames[k] - mean_f) * (positions[k] - mean_p);
            }
            const Vec3 velocity = sff > 0.0 ? Vec3(sfp / sff) : Vec3::Zero();
            return mean_p + velocity * (f - mean_f);
        }
    };
    std::vector<Track> tracks;
    std::vector<Live> live;
    for (std::size_t fi = 0; fi < per_frame.size(); ++fi) {
        const int f = static_cast<int>(fi);
        const auto& dets = per_frame[fi];
        std::erase_if(live, [&](const Live& l) { return f - l.last_frame - 1 > cfg.max_misses; });
        if (dets.empty()) continue;
        const SE3Transform& pose = camera_pose(poses, f);
        std::vector<Vec3> world(dets.size());
        for (std::size_t d = 0; d < dets.size(); ++d) world[d] = pose.apply(dets[d].pose.t_c);

        std::vector<std::tuple<double, std::size_t, std::size_t>> pairs;
        for (std::size_t l = 0; l < live.size(); ++l) {
            const Vec3 predicted = live[l].predict(f);
            for (std::size_t d = 0; d < dets.size(); ++d) {
                const double dist = (world[d] - predicted).norm();
                if (dist <= cfg.gate_radius) pairs.emplace_back(dist, l, d);
            }
        }
        std::sort(pairs.begin(), pairs.end());
        std::vector<char> live_used(live.size(), 0), det_used(dets.size(), 0);
        for (const auto& [dist, l, d] : pairs) {
            if (live_used[l] || det_used[d]) continue;
            live_used[l] = det_used[d] = 1;
            Live& t = live[l];
            t.positions.push_back(world[d]);
            t.frames.push_back(f);
            t.last_frame = f;
            Detection det = dets[d];
            det.frame = f;
            tracks[t.track].detections.push_back(det);
        }
        for (std::size_t d = 0; d < dets.size(); ++d) {
            if (det_used[d]) continue;
            Track t;
            t.id = static_cast<int>(tracks.size());
            Detection det = dets[d];
            det.frame = f;
            t.detections.push_back(det);
            live.push_back(Live{tracks.size(), {world[d]}, {f}, f});
            tracks.push_back(std::move(t));
        }
    }
    return tracks;
}

inline std::vector<Point3D> world_positions(const Track& track, std::span<const SE3Transform> poses) {
    std::vector<Point3D> out;
    out.reserve(track.detections.size());
    for (const auto& d : track.detections) out.push_back(camera_pose(poses, d.frame).apply(d.pose.t_c));
    return out;
}

struct LineFit {
    Vec3 direction = Vec3::UnitX();
    Vec3 point = Vec3::Zero();  ///< a point on the line (inlier centroid)
    std::vector<char> inliers;
    int inlier_count = 0;
};

namespace detail {

inline double line_distance(const Vec3& p, const Vec3& a, const Vec3& unit_dir) {
    const Vec3 r = p - a;
    return (r - r.dot(unit_dir) * unit_dir).norm();
}

inline bool lex_less(const Vec3& a, const Vec3& b) {
    return std::lexicographical_compare(a.data(), a.data() + 3, b.data(), b.data() + 3);
}

}  // namespace detail

/// RANSAC line through positions given in frame order. Candidate lines come
/// from point pairs: every pair when there are at most `ransac_iterations` of
/// them, otherwise seeded samples. Pairs are drawn over a position-sorted
/// ordering, so the fit does not depend on input order.
inline LineFit fit_direction_ransac(std::span<const Point3D> positions, const MotionConfig& cfg) {
    cfg.validate();
    const std::size_t n = positions.size();
    if (n < 2) throw DegenerateFitError("line fit needs at least 2 positions");

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return detail::lex_less(positions[a], positions[b]); });

    std::vector<std::pair<std::size_t, std::size_t>> candidates;
    const std::size_t all_pairs = n * (n - 1) / 2;
    if (all_pairs <= static_cast<std::size_t>(cfg.ransac_iterations)) {
        for (std::size_t a = 0; a < n; ++a)
            for (std::size_t b = a + 1; b < n; ++b) candidates.emplace_back(order[a], order[b]);
    } else {
        std::mt19937_64 rng(cfg.seed);
        std::uniform_int_distribution<std::size_t> pick(0, n - 1);
        for (int it = 0; it < cfg.ransac_iterations; ++it) {
            std::size_t a = pick(rng), b = pick(rng);
            while (b == a) b = pick(rng);
            candidates.emplace_back(order[std::min(a, b)], order[std::max(a, b)]);
        }
    }

    int best_count = -1;
    double best_residual = 0.0;
    std::vector<char> best;
    for (const auto& [a, b] : candidates) {
        const Vec3 dir = positions[b] - positions[a];
        if (dir.norm() <= 1e-9) continue;
        const Vec3 u = dir.normalized();
        std::vector<char> in(n, 0);
        int count = 0;
        double residual = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double d = detail::line_distance(positions[i], positions[a], u);
            if (d <= cfg.inlier_threshold) {
                in[i] = 1;
                ++count;
                residual += d;
            }
        }
        if (count > best_count || (count == best_count && residual < best_residual)) {
            best_count = count;
            best_residual = residual;
            best = std::move(in);
        }
    }
    if (best_count < 0) throw DegenerateFitError("line fit needs at least 2 distinct positions");

    LineFit fit;
    fit.inliers = best;
    fit.inlier_count = best_count;
    Vec3 mean = Vec3::Zero();
    for (std::size_t i = 0; i < n; ++i)
        if (best[i]) mean += positions[i];
    mean /= best_count;
    Mat3 scatter = Mat3::Zero();
    for (std::size_t i = 0; i < n; ++i)
        if (best[i]) scatter += (positions[i] - mean) * (positions[i] - mean).transpose();
    Eigen::JacobiSVD<Mat3> svd(scatter, Eigen::ComputeFullU);
    Vec3 dir = svd.matrixU().col(0).normalized();
    // Point along increasing frame order.
    double trend = 0.0;
    const double mid = 0.5 * static_cast<double>(n - 1);
    for (std::size_t i = 0; i < n; ++i)
        if (best[i]) trend += (static_cast<double>(i) - mid) * (positions[i] - mean).dot(dir);
    if (trend < 0.0) dir = -dir;
    fit.direction = dir;
    fit.point = mean;
    return fit;
}

/// Mean per-frame advance along `direction` over consecutive inlier pairs.
inline double speed_estimate(std::span<const Point3D> positions, std::span<const int> frames,
                             std::span<const char> inliers, const Vec3& direction) {
    if (positions.size() != frames.size() || positions.size() != inliers.size()) {
        throw DimensionError("speed_estimate: positions, frames and inlier mask differ in length");
    }
    double sum = 0.0;
    int segments = 0;
    std::optional<std::size_t> prev;
    for (std::size_t i = 0; i < positions.size(); ++i) {
        if (!inliers[i]) continue;
        if (prev) {
            const int gap = frames[i] - frames[*prev];
            if (gap <= 0) throw DegenerateFitError("speed_estimate: frames must be strictly increasing");
            sum += (positions[i] - positions[*prev]).dot(direction) / gap;
            ++segments;
        }
        prev = i;
    }
    if (segments == 0) throw DegenerateFitError("speed_estimate needs at least 2 inliers");
    return std::max(0.0, sum / segments);
}

struct MotionEstimate {
    MotionClass motion_class = MotionClass::static_object;
    bool low_confidence = false;
    std::optional<LineFit> fit;
    Vec3 velocity = Vec3::Zero();  ///< least-squares world velocity over inliers, m/frame
};

/// Moving iff the least-squares velocity of the RANSAC inliers exceeds the
/// threshold. Identical positions are static.
inline MotionEstimate classify_motion(std::span<const Point3D> positions, std::span<const int> frames,
                                      const MotionConfig& cfg) {
    if (positions.size() != frames.size()) throw DimensionError("classify_motion: positions and frames differ in length");
    MotionEstimate out;
    if (positions.size() < 2) {
        out.low_confidence = true;
        return out;
    }
    try {
        out.fit = fit_direction_ransac(positions, cfg);
    } catch (const DegenerateFitError&) {
        return out;
    }
    double fm = 0.0;
    Vec3 pm = Vec3::Zero();
    int n = 0;
    for (std::size_t i = 0; i < positions.size(); ++i) {
        if (!out.fit->inliers[i]) continue;
        fm += frames[i];
        pm += positions[i];
        ++n;
    }
    fm /= n;
    pm /= n;
    double sff = 0.0;
    Vec3 sfp = Vec3::Zero();
    for (std::size_t i = 0; i < positions.size(); ++i) {
        if (!out.fit->inliers[i]) continue;
        sff += (frames[i] - fm) * (frames[i] - fm);
        sfp += (frames[i] - fm) * (positions[i] - pm);
    }
    if (sff > 0.0) out.velocity = sfp / sff;
    if (out.velocity.norm() > cfg.moving_threshold) out.motion_class = MotionClass::moving;
    return out;
}

/// Fills motion_class, direction and speed of a track.
inline void estimate_track_motion(Track& track, std::span<const SE3Transform> poses, const MotionConfig& cfg) {
    const auto positions = world_positions(track, poses);
    const auto frames = track.frames();
    const MotionEstimate m = classify_motion(positions, frames, cfg);
    track.motion_class = m.motion_class;
    track.low_confidence = m.low_confidence;
    track.direction.reset();
    track.speed = 0.0;
    if (m.motion_class == MotionClass::moving) {
        track.direction = m.fit->direction;
        track.speed = speed_estimate(positions, frames, m.fit->inliers, m.fit->direction);
    }
}

/// Object displacement from frame i to frame k in frame-k camera coordinates.
inline Vec3 displacement_vector(const Track& track, int i, int k, std::span<const SE3Transform> poses) {
    const SE3Transform& pose_k = camera_pose(poses, k);
    camera_pose(poses, i);
    if (track.motion_class == MotionClass::static_object || i == k) return Vec3::Zero();
    if (!track.direction) throw DegenerateFitError("moving track " + std::to_string(track.id) + " has no direction fit");
    const Vec3 world = *track.direction * (track.speed * (k - i));
    return pose_k.rotation().transpose() * world;
}

}  // namespace monolabel
