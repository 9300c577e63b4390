#pragma once

// Per-(track, frame) pose refinement: view sampling, the observed depth
// center and its gate, and Adam descent on the weighted loss over the box
// translation and size with yaw and shape held fixed.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "monolabel/errors.hpp"
#include "monolabel/geom.hpp"
#include "monolabel/kitti_io.hpp"
#include "monolabel/losses.hpp"
#include "monolabel/motion.hpp"
#include "monolabel/render.hpp"
#include "monolabel/shape.hpp"

namespace monolabel {

struct RefineConfig {
    int n_views = 4;
    int window = 15;                  ///< frames either side for static view sampling
    int steps = 100;
    double lr_translation = 0.02;     ///< m/step
    double lr_size = 0.005;           ///< m/step
    double depth_gate_radius = 6.0;   ///< m
    double depth_min = 0.0;           ///< m, exclusive
    double depth_max = 80.0;          ///< m, exclusive
    int patience = 15;                ///< steps without relative improvement before stopping
    double plateau_tolerance = 1e-4;
    double crop_pad = 0.2;            ///< render window padding, fraction of the box size
    double sigma = 1e-4;              ///< soft silhouette sharpness
    double size_min = 0.3;
    double size_max = 8.0;
    int min_depth_pixels = 10;
    double mad_factor = 3.0;
    bool use_photo = true;

    void validate() const {
        if (n_views < 1) throw ConfigError("n_views must be at least 1");
        if (window < 1) throw ConfigError("window must be at least 1");
        if (steps < 0) throw ConfigError("steps must be nonnegative");
        if (!(lr_translation > 0.0 && lr_size > 0.0)) throw ConfigError("step sizes must be positive");
        if (!(depth_gate_radius > 0.0)) throw ConfigError("depth_gate_radius must be positive");
        if (!(depth_max > depth_min && depth_min >= 0.0)) throw ConfigError("depth range must satisfy 0 <= min < max");
        if (patience < 1) throw ConfigError("patience must be at least 1");
        if (!(plateau_tolerance >= 0.0)) throw ConfigError("plateau_tolerance must be nonnegative");
        if (!(crop_pad >= 0.0)) throw ConfigError("crop_pad must be nonnegative");
        if (!(sigma > 0.0)) throw ConfigError("sigma must be positive");
        if (!(size_min > 0.0 && size_max > size_min)) throw ConfigError("size clamp must satisfy 0 < min < max");
        if (min_depth_pixels < 1) throw ConfigError("min_depth_pixels must be at least 1");
        if (!(mad_factor > 0.0)) throw ConfigError("mad_factor must be positive");
    }
};

// ---- sequence data ---------------------------------------------------------

struct FrameData {
    Image image;                          ///< empty when unavailable
    DepthMap depth;                       ///< empty grid when unavailable
    MaskSet masks;
    std::vector<LabelRecord> detections;  ///< rows of the detection file
};

struct SequenceData {
    CameraIntrinsics intr;
    std::vector<SE3Transform> poses;  ///< camera-to-world per frame
    std::vector<FrameData> frames;
};

/// Full-image mask of instance `id`, or nullptr.
inline const Grid<std::uint8_t>* find_mask(const FrameData& f, int id) {
    if (id < 0) return nullptr;
    for (const auto& m : f.masks)
        if (m.instance_id == id) return &m.mask;
    return nullptr;
}

/// Detections of one frame with their masks attached through the mask index.
inline std::vector<Detection> frame_detections(const FrameData& f, int frame, const std::string& object_class = "Car") {
    std::vector<Detection> out;
    for (std::size_t r = 0; r < f.detections.size(); ++r) {
        const LabelRecord& l = f.detections[r];
        if (l.type != object_class) continue;
        Detection d;
        d.frame = frame;
        d.pose = location_convention(l);
        d.bbox2d = l.bbox;
        if (!(d.bbox2d[0] < d.bbox2d[2] && d.bbox2d[1] < d.bbox2d[3])) {
            d.bbox2d = {l.bbox[0], l.bbox[1], std::max(l.bbox[2], l.bbox[0] + 1.0), std::max(l.bbox[3], l.bbox[1] + 1.0)};
        }
        d.score = std::clamp(l.score.value_or(1.0), 0.0, 1.0);
        for (const auto& m : f.masks) {
            if (m.detection == static_cast<int>(r)) d.mask_id = m.instance_id;
        }
        out.push_back(d);
    }
    return out;
}

// ---- view sampling ---------------------------------------------------------

struct ViewSelection {
    std::vector<int> frames;  ///< ascending; {i} alone when single_view
    bool single_view = false;
};

inline ViewSelection sample_views(const Track& track, int i, const RefineConfig& cfg) {
    const Detection* ref = track.at_frame(i);
    if (!ref) throw LookupError("track " + std::to_string(track.id) + " has no detection at frame " + std::to_string(i));
    std::vector<int> cand;
    for (const auto& d : track.detections) {
        if (d.frame == i) continue;
        if (track.motion_class == MotionClass::static_object && std::abs(d.frame - i) > cfg.window) continue;
        cand.push_back(d.frame);
    }
    ViewSelection sel;
    if (cand.empty()) {
        sel.frames = {i};
        sel.single_view = true;
        return sel;
    }
    if (track.motion_class == MotionClass::moving) {
        std::stable_sort(cand.begin(), cand.end(), [&](int a, int b) { return std::abs(a - i) < std::abs(b - i); });
        cand.resize(std::min<std::size_t>(cand.size(), static_cast<std::size_t>(cfg.n_views)));
        std::sort(cand.begin(), cand.end());
        sel.frames = cand;
        return sel;
    }
    // Farthest-point selection on the allocentric angle, seeded by frame i.
    auto angle = [&](int f) {
        const Detection* d = track.at_frame(f);
        return std::hypot(d->pose.t_c.x(), d->pose.t_c.z()) > 0.0 ? allocentric_angle(d->pose) : 0.0;
    };
    std::vector<double> chosen_angles{angle(i)};
    std::vector<char> used(cand.size(), 0);
    for (int n = 0; n < cfg.n_views && n < static_cast<int>(cand.size()); ++n) {
        int best = -1;
        double best_sep = -1.0;
        for (std::size_t c = 0; c < cand.size(); ++c) {
            if (used[c]) continue;
            const double a = angle(cand[c]);
            double sep = std::numeric_limits<double>::infinity();
            for (double b : chosen_angles) sep = std::min(sep, std::abs(wrap_angle(a - b)));
            const bool closer = best >= 0 && std::abs(cand[c] - i) < std::abs(cand[static_cast<std::size_t>(best)] - i);
            if (sep > best_sep + 1e-12 || (std::abs(sep - best_sep) <= 1e-12 && closer)) {
                best = static_cast<int>(c);
                best_sep = sep;
            }
        }
        used[static_cast<std::size_t>(best)] = 1;
        chosen_angles.push_back(angle(cand[static_cast<std::size_t>(best)]));
        sel.frames.push_back(cand[static_cast<std::size_t>(best)]);
    }
    std::sort(sel.frames.begin(), sel.frames.end());
    return sel;
}

// ---- depth cue -------------------------------------------------------------

struct DepthCenter {
    std::optional<Point3D> center;
    int pixels = 0;  ///< fg pixels with valid depth before filtering
    int kept = 0;    ///< survivors of the outlier filter
    std::string reason;
};

/// Mean of the back-projected mask pixels after dropping depths farther
/// than mad_factor * MAD from the median.
inline DepthCenter depth_center(const Grid<std::uint8_t>& mask, const DepthMap& depth, const CameraIntrinsics& intr,
                                const RefineConfig& cfg = {}) {
    DepthCenter out;
    if (!mask.same_shape(depth.depth)) {
        out.reason = "mask and depth sizes differ";
        return out;
    }
    std::vector<std::pair<int, double>> pts;
    for (int y = 0; y < mask.height(); ++y) {
        for (int x = 0; x < mask.width(); ++x) {
            if (mask(x, y) && depth.valid(x, y)) pts.emplace_back(y * mask.width() + x, depth.depth(x, y));
        }
    }
    out.pixels = static_cast<int>(pts.size());
    if (out.pixels < cfg.min_depth_pixels) {
        out.reason = "only " + std::to_string(out.pixels) + " mask pixels with valid depth";
        return out;
    }
    std::vector<double> d(pts.size());
    for (std::size_t k = 0; k < pts.size(); ++k) d[k] = pts[k].second;
    auto median = [](std::vector<double> v) {
        const std::size_t m = v.size() / 2;
        std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(m), v.end());
        const double hi = v[m];
        if (v.size() % 2) return hi;
        return 0.5 * (hi + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(m)));
    };
    const double med = median(d);
    std::vector<double> dev(d.size());
    for (std::size_t k = 0; k < d.size(); ++k) dev[k] = std::abs(d[k] - med);
    const double limit = cfg.mad_factor * median(dev) + 1e-9;
    Vec3 sum = Vec3::Zero();
    for (const auto& [idx, z] : pts) {
        if (std::abs(z - med) > limit) continue;
        sum += backproject(intr, Vec2(idx % mask.width(), idx / mask.width()), z);
        ++out.kept;
    }
    out.center = sum / out.kept;
    return out;
}

struct GateResult {
    bool accept = false;
    std::string reason;  ///< "", "range" or "radius"
};

inline GateResult gate_depth(const Point3D& center, const ObjectPose& initial, const RefineConfig& cfg = {}) {
    if (!(center.z() > cfg.depth_min && center.z() < cfg.depth_max)) return {false, "range"};
    if (!((center - initial.t_c).norm() <= cfg.depth_gate_radius)) return {false, "radius"};
    return {true, ""};
}

// ---- single pose refinement ------------------------------------------------

struct RefineResult {
    ObjectPose initial;
    ObjectPose refined;
    std::vector<LossBreakdown> history;  ///< one entry per evaluated iterate
    int best_step = -1;
    double final_total = 0.0;  ///< loss at the returned pose
    std::vector<int> views;
    bool single_view = false;
    bool depth_available = false;
    GateResult depth_gate;
    bool unoptimized = false;
    bool size_clamped = false;
    bool loss_decreased = false;
};

namespace detail {

inline ImageBox bbox_union(ImageBox a, const ImageBox& b) {
    if (a.empty()) return b;
    if (b.empty()) return a;
    return {std::min(a.u0, b.u0), std::min(a.v0, b.v0), std::max(a.u1, b.u1), std::max(a.v1, b.v1)};
}

inline ImageBox mask_box(const Grid<std::uint8_t>& m) {
    ImageBox b{1e300, 1e300, -1e300, -1e300};
    bool any = false;
    for (int y = 0; y < m.height(); ++y) {
        for (int x = 0; x < m.width(); ++x) {
            if (!m(x, y)) continue;
            any = true;
            b.u0 = std::min(b.u0, double(x));
            b.v0 = std::min(b.v0, double(y));
            b.u1 = std::max(b.u1, double(x));
            b.v1 = std::max(b.v1, double(y));
        }
    }
    return any ? b : ImageBox{};
}

/// Instance mask cropped to the window, with other instances excluded from
/// the background.
inline MaskObs crop_mask(const FrameData& f, int id, const RenderConfig& crop) {
    const Grid<std::uint8_t>* own = find_mask(f, id);
    Grid<std::uint8_t> inst(crop.width, crop.height, 0), other(crop.width, crop.height, 0);
    if (own) inst = crop_grid(*own, crop, std::uint8_t{0});
    for (const auto& m : f.masks) {
        if (m.instance_id == id) continue;
        const auto c = crop_grid(m.mask, crop, std::uint8_t{0});
        for (std::size_t k = 0; k < c.size(); ++k) other.data()[k] |= c.data()[k];
    }
    return MaskObs::from_instance(inst, &other);
}

}  // namespace detail

/// Refines the detection of `track` at frame `i`. Views whose camera pose is
/// unavailable are dropped.
inline RefineResult refine_pose(const Track& track, int i, const SequenceData& seq, const ShapeSpace& space,
                                const LossWeights& weights, const Priors& priors, const RefineConfig& cfg) {
    cfg.validate();
    weights.validate();
    priors.validate();
    const Detection* det = track.at_frame(i);
    if (!det) throw LookupError("track " + std::to_string(track.id) + " has no detection at frame " + std::to_string(i));
    if (i < 0 || static_cast<std::size_t>(i) >= seq.frames.size()) throw LookupError("frame " + std::to_string(i) + " not loaded");
    camera_pose(seq.poses, i);

    RefineResult res;
    res.initial = det->pose;
    res.initial.embedding = Eigen::VectorXd::Zero(space.dims());
    res.refined = res.initial;
    res.final_total = 0.0;
    const FrameData& fi = seq.frames[static_cast<std::size_t>(i)];
    const CameraIntrinsics& intr = seq.intr;
    RenderConfig base;
    base.sigma = cfg.sigma;

    const ViewSelection sel = sample_views(track, i, cfg);
    res.single_view = sel.single_view;

    const Mesh init_mesh = decode(space, res.initial.embedding, res.initial.size);
    auto window_for = [&](const ObjectPose& p, const FrameData& f, const Detection& d) {
        ImageBox box = projected_box(init_mesh, p, intr, base.near);
        box = detail::bbox_union(box, ImageBox{d.bbox2d[0], d.bbox2d[1], d.bbox2d[2], d.bbox2d[3]});
        if (const auto* m = find_mask(f, d.mask_id)) box = detail::bbox_union(box, detail::mask_box(*m));
        return crop_around(box, intr, cfg.crop_pad, base);
    };

    // reference view
    const RenderConfig crop_i = window_for(res.initial, fi, *det);
    const bool has_mask_i = find_mask(fi, det->mask_id) != nullptr;
    std::vector<ViewObs> ref_view;
    if (has_mask_i) {
        ViewObs v;
        v.frame = i;
        v.intr = intr;
        v.crop = crop_i;
        v.mask = detail::crop_mask(fi, det->mask_id, crop_i);
        v.image = fi.image.size() ? &fi.image : nullptr;
        ref_view.push_back(std::move(v));
    }

    // other views
    std::vector<ViewObs> views;
    if (!sel.single_view) {
        for (int k : sel.frames) {
            if (k < 0 || static_cast<std::size_t>(k) >= seq.frames.size() || static_cast<std::size_t>(k) >= seq.poses.size()) continue;
            const Detection* dk = track.at_frame(k);
            const FrameData& fk = seq.frames[static_cast<std::size_t>(k)];
            if (!dk || !find_mask(fk, dk->mask_id)) continue;
            ViewObs v;
            v.frame = k;
            v.intr = intr;
            v.g_ik = frame_transform(seq.poses, i, k);
            v.v = displacement_vector(track, i, k, seq.poses);
            const ObjectPose warped = warp_pose(res.initial, v.g_ik, v.v);
            if (!(warped.t_c.z() > base.near)) continue;
            v.crop = window_for(warped, fk, *dk);
            v.mask = detail::crop_mask(fk, dk->mask_id, v.crop);
            v.image = fk.image.size() ? &fk.image : nullptr;
            views.push_back(std::move(v));
            res.views.push_back(k);
        }
    }

    // depth cue
    std::optional<Point3D> observed_center;
    if (has_mask_i && fi.depth.depth.size()) {
        const DepthCenter dc = depth_center(*find_mask(fi, det->mask_id), fi.depth, intr, cfg);
        if (dc.center) {
            res.depth_available = true;
            res.depth_gate = gate_depth(*dc.center, res.initial, cfg);
            if (res.depth_gate.accept) observed_center = dc.center;
        } else {
            res.depth_gate = {false, "no depth"};
        }
    } else {
        res.depth_gate = {false, "no depth"};
    }

    const bool photo_possible = cfg.use_photo && has_mask_i && fi.image.size() && !views.empty();
    if (ref_view.empty() && views.empty() && !observed_center) {
        res.unoptimized = true;
        return res;
    }

    const Grid<std::uint8_t> fg_i = has_mask_i ? ref_view.front().mask.fg : Grid<std::uint8_t>();
    auto evaluate = [&](const ObjectPose& p) {
        LossTerms t;
        if (!ref_view.empty()) t.sil = mv_sil_loss(space, p, ref_view).term;
        if (!views.empty()) t.mv_sil = mv_sil_loss(space, p, views).term;
        if (observed_center) t.depth = depth_center_loss(space, p, *observed_center);
        if (photo_possible) t.photo = photo_loss(space, p, fi.image, intr, crop_i, views, &fg_i).term;
        t.size = size_loss(p.size, priors);
        t.y = vertical_loss(p, priors);
        return total_loss(t, weights);
    };

    if (cfg.steps == 0) {
        res.final_total = evaluate(res.initial).total;
        return res;
    }

    // Adam over (t_c, size)
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    Eigen::Matrix<double, 6, 1> m = Eigen::Matrix<double, 6, 1>::Zero(), v = m;
    Eigen::Matrix<double, 6, 1> lr;
    lr << Vec3::Constant(cfg.lr_translation), Vec3::Constant(cfg.lr_size);
    ObjectPose cur = res.initial;
    double best = std::numeric_limits<double>::infinity();
    double best_at_window_start = std::numeric_limits<double>::infinity();
    int since = 0;
    for (int step = 0; step < cfg.steps; ++step) {
        const LossBreakdown b = evaluate(cur);
        res.history.push_back(b);
        if (b.total < best) {
            best = b.total;
            res.refined = cur;
            res.best_step = step;
        }
        if (step == 0) best_at_window_start = best;
        if (++since >= cfg.patience) {
            const double rel = (best_at_window_start - best) / std::max(std::abs(best_at_window_start), 1e-12);
            if (rel < cfg.plateau_tolerance) break;
            best_at_window_start = best;
            since = 0;
        }
        if (step + 1 == cfg.steps) break;
        Eigen::Matrix<double, 6, 1> g;
        g << b.grad_t, b.grad_size;
        if (!g.allFinite()) break;
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g.cwiseProduct(g);
        const double c1 = 1 - std::pow(b1, step + 1), c2 = 1 - std::pow(b2, step + 1);
        const Eigen::Matrix<double, 6, 1> delta =
            lr.cwiseProduct((m / c1).cwiseQuotient(((v / c2).cwiseSqrt().array() + eps).matrix()));
        cur.t_c -= delta.head<3>();
        const Vec3 raw = cur.size - delta.tail<3>();
        cur.size = raw.cwiseMax(cfg.size_min).cwiseMin(cfg.size_max);
        if (cur.size != raw) res.size_clamped = true;
    }
    res.final_total = best;
    res.loss_decreased = best < res.history.front().total;
    // yaw and shape are not optimized; keep them bit-identical
    res.refined.yaw = res.initial.yaw;
    res.refined.embedding = res.initial.embedding;
    return res;
}

// ---- sequences -------------------------------------------------------------

struct TrackSet {
    std::vector<std::vector<Detection>> per_frame;  ///< detections of the class, file order
    std::vector<std::vector<int>> rows;             ///< detection-file row of each per_frame entry
    std::vector<Track> tracks;
    std::vector<std::string> errors;  ///< per track, empty when the motion fit succeeded
};

/// Association and motion estimation over a whole sequence.
inline TrackSet build_tracks(const SequenceData& seq, const MotionConfig& mcfg, const std::string& object_class = "Car") {
    mcfg.validate();
    TrackSet ts;
    const int n_frames = static_cast<int>(seq.frames.size());
    ts.per_frame.resize(seq.frames.size());
    ts.rows.resize(seq.frames.size());
    for (int f = 0; f < n_frames; ++f) {
        const FrameData& fd = seq.frames[static_cast<std::size_t>(f)];
        ts.per_frame[static_cast<std::size_t>(f)] = frame_detections(fd, f, object_class);
        for (std::size_t r = 0; r < fd.detections.size(); ++r) {
            if (fd.detections[r].type == object_class) ts.rows[static_cast<std::size_t>(f)].push_back(static_cast<int>(r));
        }
    }
    if (n_frames) ts.tracks = associate(ts.per_frame, seq.poses, mcfg);
    ts.errors.resize(ts.tracks.size());
    for (std::size_t t = 0; t < ts.tracks.size(); ++t) {
        try {
            estimate_track_motion(ts.tracks[t], seq.poses, mcfg);
        } catch (const Error& e) {
            ts.errors[t] = e.what();
        }
    }
    return ts;
}

/// Detection-file row of each track detection, parallel to track.detections.
inline std::vector<std::vector<int>> track_rows(const TrackSet& ts) {
    std::vector<std::vector<char>> used(ts.per_frame.size());
    for (std::size_t f = 0; f < ts.per_frame.size(); ++f) used[f].assign(ts.per_frame[f].size(), 0);
    std::vector<std::vector<int>> out(ts.tracks.size());
    for (std::size_t t = 0; t < ts.tracks.size(); ++t) {
        for (const auto& d : ts.tracks[t].detections) {
            const auto f = static_cast<std::size_t>(d.frame);
            const auto& pf = ts.per_frame[f];
            int row = -1;
            for (std::size_t k = 0; k < pf.size(); ++k) {
                if (used[f][k] || pf[k].pose.t_c != d.pose.t_c || pf[k].bbox2d != d.bbox2d || pf[k].score != d.score) continue;
                used[f][k] = 1;
                row = ts.rows[f][k];
                break;
            }
            out[t].push_back(row);
        }
    }
    return out;
}

inline nlohmann::ordered_json tracks_json(const TrackSet& ts) {
    const auto rows = track_rows(ts);
    nlohmann::ordered_json out = nlohmann::ordered_json::array();
    for (std::size_t t = 0; t < ts.tracks.size(); ++t) {
        const Track& tr = ts.tracks[t];
        nlohmann::ordered_json tj;
        tj["id"] = tr.id;
        tj["frames"] = tr.frames();
        tj["rows"] = rows[t];
        tj["motion"] = to_string(tr.motion_class);
        tj["speed"] = tr.speed;
        if (tr.direction) tj["direction"] = {tr.direction->x(), tr.direction->y(), tr.direction->z()};
        tj["low_confidence"] = tr.low_confidence;
        if (!ts.errors[t].empty()) tj["error"] = ts.errors[t];
        out.push_back(tj);
    }
    return out;
}

struct SequenceResult {
    std::vector<std::vector<LabelRecord>> labels;  ///< per frame, detection-file order
    nlohmann::ordered_json report;
};

/// Work items run on up to `jobs` threads; results are merged by
/// (track id, frame), so the output does not depend on `jobs`.
inline SequenceResult refine_sequence(const SequenceData& seq, const ShapeSpace& space, const LossWeights& weights,
                                      const Priors& priors, const RefineConfig& cfg, const MotionConfig& mcfg,
                                      int jobs = 1, const std::string& object_class = "Car") {
    cfg.validate();
    const TrackSet ts = build_tracks(seq, mcfg, object_class);
    const auto& tracks = ts.tracks;
    const auto rows = track_rows(ts);

    struct Item {
        std::size_t track;
        std::size_t index;  ///< into track.detections
    };
    std::vector<Item> items;
    for (std::size_t t = 0; t < tracks.size(); ++t)
        for (std::size_t k = 0; k < tracks[t].detections.size(); ++k) items.push_back({t, k});
    auto frame_of = [&](const Item& it) { return tracks[it.track].detections[it.index].frame; };
    std::sort(items.begin(), items.end(), [&](const Item& a, const Item& b) {
        if (tracks[a.track].id != tracks[b.track].id) return tracks[a.track].id < tracks[b.track].id;
        return frame_of(a) < frame_of(b);
    });

    std::vector<std::optional<RefineResult>> results(items.size());
    std::vector<std::string> errors(items.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t k = next++; k < items.size(); k = next++) {
            try {
                results[k] = refine_pose(tracks[items[k].track], frame_of(items[k]), seq, space, weights, priors, cfg);
            } catch (const Error& e) {
                errors[k] = e.what();
            }
        }
    };
    const int n_threads = std::max(1, std::min<int>(jobs, static_cast<int>(items.size())));
    if (n_threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }

    SequenceResult out;
    out.labels.resize(seq.frames.size());
    for (std::size_t f = 0; f < seq.frames.size(); ++f) out.labels[f] = seq.frames[f].detections;

    int refined = 0, unoptimized = 0, failed = 0, single_view = 0, decreased = 0, clamped = 0;
    int gate_accept = 0, gate_range = 0, gate_radius = 0, gate_none = 0;
    double sum_reduction = 0.0;
    int n_reduction = 0;
    nlohmann::ordered_json item_reports = nlohmann::ordered_json::array();
    for (std::size_t k = 0; k < items.size(); ++k) {
        const Track& t = tracks[items[k].track];
        const int f = frame_of(items[k]);
        const int row = rows[items[k].track][items[k].index];
        nlohmann::ordered_json ij;
        ij["track"] = t.id;
        ij["frame"] = f;
        ij["row"] = row;
        if (!results[k]) {
            ++failed;
            ij["status"] = "failed";
            ij["error"] = errors[k];
            item_reports.push_back(ij);
            continue;
        }
        const RefineResult& r = *results[k];
        if (row >= 0) {
            LabelRecord& l = out.labels[static_cast<std::size_t>(f)][static_cast<std::size_t>(row)];
            const LabelRecord src = l;
            l = label_from_pose(r.refined, src.bbox, src.score, src.type);
            l.truncated = src.truncated;
            l.occluded = src.occluded;
        }
        if (r.unoptimized) ++unoptimized;
        else ++refined;
        if (r.single_view) ++single_view;
        if (r.loss_decreased) ++decreased;
        if (r.size_clamped) ++clamped;
        if (r.depth_gate.accept) ++gate_accept;
        else if (r.depth_gate.reason == "range") ++gate_range;
        else if (r.depth_gate.reason == "radius") ++gate_radius;
        else ++gate_none;
        double initial_total = r.final_total;
        if (!r.history.empty()) {
            initial_total = r.history.front().total;
            if (initial_total > 0) {
                sum_reduction += (initial_total - r.final_total) / initial_total;
                ++n_reduction;
            }
        }
        ij["status"] = r.unoptimized ? "unoptimized" : "refined";
        ij["motion"] = to_string(t.motion_class);
        ij["views"] = r.views;
        ij["steps"] = r.history.size();
        ij["best_step"] = r.best_step;
        ij["initial_loss"] = initial_total;
        ij["final_loss"] = r.final_total;
        ij["depth_gate"] = r.depth_gate.accept ? "accept" : (r.depth_gate.reason.empty() ? "none" : r.depth_gate.reason);
        ij["shift"] = (r.refined.t_c - r.initial.t_c).norm();
        item_reports.push_back(ij);
    }

    int n_static = 0, n_moving = 0;
    for (const auto& tr : tracks) (tr.motion_class == MotionClass::moving ? n_moving : n_static)++;

    auto& rep = out.report;
    rep["frames"] = seq.frames.size();
    rep["tracks"] = tracks.size();
    rep["static_tracks"] = n_static;
    rep["moving_tracks"] = n_moving;
    rep["items"] = items.size();
    rep["refined"] = refined;
    rep["unoptimized"] = unoptimized;
    rep["failed"] = failed;
    rep["single_view"] = single_view;
    rep["loss_decreased"] = decreased;
    rep["size_clamped"] = clamped;
    rep["depth_gate"] = {{"accept", gate_accept}, {"range", gate_range}, {"radius", gate_radius}, {"unavailable", gate_none}};
    rep["mean_relative_loss_reduction"] = n_reduction ? sum_reduction / n_reduction : 0.0;
    rep["optimizer"] = {{"type", "adam"},
                        {"steps", cfg.steps},
                        {"lr_translation", cfg.lr_translation},
                        {"lr_size", cfg.lr_size},
                        {"patience", cfg.patience},
                        {"plateau_tolerance", cfg.plateau_tolerance}};
    rep["track_list"] = tracks_json(ts);
    rep["item_list"] = item_reports;
    return out;
}

// ---- dataset loading -------------------------------------------------------

/// Reads a sequence directory in the kitti_io layout. Camera poses come from
/// poses.txt when present, otherwise from oxts/. Depth and masks are optional.
inline SequenceData load_sequence(const std::filesystem::path& dir, const std::string& detections_subdir = "detections") {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
    SequenceData seq;
    const fs::path det_dir = dir / detections_subdir;
    if (!fs::is_directory(det_dir)) throw IoError("missing detections directory " + det_dir.string());
    int n = 0;
    while (fs::exists(det_dir / (frame_name(n) + ".txt"))) ++n;
    if (n == 0) {
        if (fs::exists(dir / "calib.txt")) parse_calib(read_text_file(dir / "calib.txt"), (dir / "calib.txt").string());
        return seq;
    }
    const CalibRecord calib = parse_calib(read_text_file(dir / "calib.txt"), (dir / "calib.txt").string());
    if (fs::exists(dir / "poses.txt")) {
        seq.poses = parse_pose_file(read_text_file(dir / "poses.txt"), (dir / "poses.txt").string());
    } else if (fs::is_directory(dir / "oxts")) {
        std::vector<OxtsRecord> recs;
        for (int f = 0; f < n; ++f) {
            const fs::path p = dir / "oxts" / (frame_name(f) + ".txt");
            const auto r = parse_oxts(read_text_file(p), p.string());
            if (r.size() != 1) throw ParseError(p.string(), 1, 1, "expected one oxts record");
            recs.push_back(r.front());
        }
        seq.poses = oxts_camera_poses(recs, calib.imu_to_camera().value_or(default_imu_to_camera()));
    } else {
        throw IoError("no poses.txt or oxts/ in " + dir.string());
    }
    int width = 0, height = 0;
    for (int f = 0; f < n; ++f) {
        FrameData fd;
        const std::string name = frame_name(f);
        const fs::path det = det_dir / (name + ".txt");
        fd.detections = parse_labels(read_text_file(det), det.string());
        const fs::path img = dir / "image_2" / (name + ".png");
        if (fs::exists(img)) {
            fd.image = read_png_intensity(img);
            width = fd.image.width();
            height = fd.image.height();
        }
        const fs::path dep = dir / "depth" / (name + ".png");
        if (fs::exists(dep)) {
            fd.depth = load_depth(dep);
            width = fd.depth.depth.width();
            height = fd.depth.depth.height();
        }
        if (fs::is_directory(dir / "masks")) fd.masks = load_masks(dir / "masks", f);
        seq.frames.push_back(std::move(fd));
    }
    if (width == 0) throw IoError("no images or depth maps in " + dir.string() + " to size the camera");
    seq.intr = calib.intrinsics(width, height);
    return seq;
}

inline void write_sequence_result(const std::filesystem::path& out, const SequenceResult& r) {
    std::error_code ec;
    std::filesystem::create_directories(out / "labels", ec);
    if (ec) throw IoError("cannot create " + (out / "labels").string() + ": " + ec.message());
    for (std::size_t f = 0; f < r.labels.size(); ++f) {
        write_text_file(out / "labels" / (frame_name(static_cast<int>(f)) + ".txt"), write_labels(r.labels[f]));
    }
    write_text_file(out / "report.json", r.report.dump(2) + "\n");
}

}  // namespace monolabel
