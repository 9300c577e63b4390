#pragma once

// Detection metrics: rotated IoU (BEV / 3D / 2D), interpolated AP at 11 or
// 40 recall points per difficulty, motion-aware splits, depth errors.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "monolabel/errors.hpp"
#include "monolabel/geom.hpp"
#include "monolabel/kitti_io.hpp"
#include "monolabel/motion.hpp"

namespace monolabel {

// ---- boxes -----------------------------------------------------------------

struct BevBox {
    double x = 0.0, z = 0.0;  ///< center on the ground plane
    double w = 0.0, l = 0.0;
    double yaw = 0.0;
};

struct Box3D {
    Vec3 center = Vec3::Zero();
    double h = 0.0, w = 0.0, l = 0.0;
    double yaw = 0.0;

    BevBox bev() const { return {center.x(), center.z(), w, l, yaw}; }
};

inline Box3D box_from_label(const LabelRecord& r) {
    const ObjectPose p = location_convention(r);
    return Box3D{p.t_c, r.h, r.w, r.l, r.rotation_y};
}

using Polygon2 = std::vector<Eigen::Vector2d>;

/// Counter-clockwise corners in the (x, z) plane. The length axis points
/// along (cos yaw, -sin yaw).
inline Polygon2 bev_corners(const BevBox& b) {
    const double c = std::cos(b.yaw), s = std::sin(b.yaw);
    const Eigen::Vector2d fwd(c, -s), side(s, c);
    const Eigen::Vector2d ctr(b.x, b.z);
    Polygon2 out{ctr + fwd * b.l / 2 + side * b.w / 2, ctr - fwd * b.l / 2 + side * b.w / 2,
                 ctr - fwd * b.l / 2 - side * b.w / 2, ctr + fwd * b.l / 2 - side * b.w / 2};
    double area2 = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
        const auto& a = out[i];
        const auto& n = out[(i + 1) % 4];
        area2 += a.x() * n.y() - n.x() * a.y();
    }
    if (area2 < 0.0) std::reverse(out.begin(), out.end());
    return out;
}

inline double polygon_area(const Polygon2& p) {
    double a = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const auto& u = p[i];
        const auto& v = p[(i + 1) % p.size()];
        a += u.x() * v.y() - v.x() * u.y();
    }
    return std::abs(a) / 2.0;
}

/// Sutherland-Hodgman clip of `subject` by a convex CCW `clip` polygon.
inline Polygon2 clip_convex(Polygon2 subject, const Polygon2& clip) {
    for (std::size_t i = 0; i < clip.size() && !subject.empty(); ++i) {
        const Eigen::Vector2d a = clip[i], b = clip[(i + 1) % clip.size()];
        const Eigen::Vector2d e = b - a;
        auto side = [&](const Eigen::Vector2d& p) { return e.x() * (p.y() - a.y()) - e.y() * (p.x() - a.x()); };
        Polygon2 out;
        for (std::size_t j = 0; j < subject.size(); ++j) {
            const Eigen::Vector2d p = subject[j], q = subject[(j + 1) % subject.size()];
            const double sp = side(p), sq = side(q);
            if (sp >= 0) out.push_back(p);
            if ((sp >= 0) != (sq >= 0)) out.push_back(p + (q - p) * (sp / (sp - sq)));
        }
        subject = std::move(out);
    }
    return subject;
}

constexpr double kAreaEps = 1e-12;

inline double bev_intersection(const BevBox& a, const BevBox& b) {
    return polygon_area(clip_convex(bev_corners(a), bev_corners(b)));
}

inline double iou_bev(const BevBox& a, const BevBox& b) {
    const double area_a = a.w * a.l, area_b = b.w * b.l;
    if (!(area_a > kAreaEps) || !(area_b > kAreaEps)) return 0.0;
    const double inter = bev_intersection(a, b);
    const double uni = area_a + area_b - inter;
    if (!(uni > kAreaEps)) return 0.0;
    return std::clamp(inter / uni, 0.0, 1.0);
}

inline double iou_3d(const Box3D& a, const Box3D& b) {
    const double va = a.h * a.w * a.l, vb = b.h * b.w * b.l;
    if (!(va > kAreaEps) || !(vb > kAreaEps)) return 0.0;
    const double top = std::max(a.center.y() - a.h / 2, b.center.y() - b.h / 2);
    const double bottom = std::min(a.center.y() + a.h / 2, b.center.y() + b.h / 2);
    const double overlap = std::max(0.0, bottom - top);
    if (overlap <= 0.0) return 0.0;
    const double inter = bev_intersection(a.bev(), b.bev()) * overlap;
    const double uni = va + vb - inter;
    if (!(uni > kAreaEps)) return 0.0;
    return std::clamp(inter / uni, 0.0, 1.0);
}

/// Axis-aligned image boxes (left, top, right, bottom).
inline double iou_2d(const std::array<double, 4>& a, const std::array<double, 4>& b) {
    const double aa = std::max(0.0, a[2] - a[0]) * std::max(0.0, a[3] - a[1]);
    const double ab = std::max(0.0, b[2] - b[0]) * std::max(0.0, b[3] - b[1]);
    if (aa <= kAreaEps || ab <= kAreaEps) return 0.0;
    const double iw = std::min(a[2], b[2]) - std::max(a[0], b[0]);
    const double ih = std::min(a[3], b[3]) - std::max(a[1], b[1]);
    if (iw <= 0 || ih <= 0) return 0.0;
    const double inter = iw * ih;
    return inter / (aa + ab - inter);
}

// ---- config and difficulty -------------------------------------------------

enum class Difficulty { easy = 0, moderate = 1, hard = 2, ignored = 3 };

inline const char* to_string(Difficulty d) {
    switch (d) {
        case Difficulty::easy: return "easy";
        case Difficulty::moderate: return "moderate";
        case Difficulty::hard: return "hard";
        default: return "ignored";
    }
}

constexpr std::array<Difficulty, 3> kDifficulties{Difficulty::easy, Difficulty::moderate, Difficulty::hard};

enum class BoxMetric { bev, box3d, bbox2d };

inline const char* to_string(BoxMetric m) {
    switch (m) {
        case BoxMetric::bev: return "bev";
        case BoxMetric::box3d: return "3d";
        default: return "2d";
    }
}

struct EvalConfig {
    double iou_threshold = 0.5;
    int recall_points = 40;
    std::string object_class = "Car";
    std::array<double, 3> min_height{40.0, 25.0, 25.0};     ///< px, per difficulty
    std::array<int, 3> max_occlusion{0, 1, 2};
    std::array<double, 3> max_truncation{0.15, 0.30, 0.50};

    void validate() const {
        if (!(iou_threshold > 0.0 && iou_threshold <= 1.0)) throw ConfigError("iou_threshold must be in (0, 1]");
        if (recall_points != 11 && recall_points != 40) throw ConfigError("recall_points must be 11 or 40");
    }
};

/// Easiest level whose cuts the box meets (cuts are inclusive).
inline Difficulty assign_difficulty(const LabelRecord& gt, const EvalConfig& cfg = {}) {
    for (std::size_t d = 0; d < 3; ++d) {
        if (gt.bbox_height() >= cfg.min_height[d] && gt.occluded <= cfg.max_occlusion[d] &&
            gt.truncated <= cfg.max_truncation[d]) {
            return static_cast<Difficulty>(d);
        }
    }
    return Difficulty::ignored;
}

// ---- matching and AP -------------------------------------------------------

/// Detections and ground truth of one image.
struct EvalFrame {
    std::vector<LabelRecord> gt;
    std::vector<LabelRecord> detections;
    std::vector<MotionClass> gt_motion;  ///< parallel to gt; may be empty
};

struct PRCurve {
    std::vector<std::pair<double, double>> samples;  ///< (recall, precision) per ranked detection
    int num_gt = 0;
    int num_tp = 0;
    int num_fp = 0;
    std::optional<double> ap;  ///< absent without ground truth
};

namespace detail {

inline double pair_iou(const LabelRecord& a, const LabelRecord& b, BoxMetric m) {
    switch (m) {
        case BoxMetric::bev: return iou_bev(box_from_label(a).bev(), box_from_label(b).bev());
        case BoxMetric::box3d: return iou_3d(box_from_label(a), box_from_label(b));
        default: return iou_2d(a.bbox, b.bbox);
    }
}

enum class Outcome { tp, fp, ignored };

struct RankedResult {
    double score = 0.0;
    std::size_t order = 0;   ///< global input order, breaks score ties
    Outcome outcome = Outcome::fp;
    int gt_motion = -1;      ///< matched gt's class, -1 if none
};

struct MatchResult {
    std::vector<RankedResult> ranked;
    int num_gt = 0;
    std::array<int, 2> num_gt_by_motion{0, 0};
};

inline double det_score(const LabelRecord& d) { return d.score.value_or(1.0); }

/// Greedy score-descending matching of one difficulty level. A valid gt of
/// the evaluated class at or below the level is matched at most once; a
/// detection overlapping only an out-of-level gt, a DontCare box or too
/// small to count at this level is ignored instead of a false positive.
inline MatchResult match(const std::vector<EvalFrame>& frames, Difficulty level, BoxMetric metric, const EvalConfig& cfg) {
    MatchResult res;
    const auto lvl = static_cast<std::size_t>(level);
    std::size_t order = 0;
    for (const auto& f : frames) {
        if (!f.gt_motion.empty() && f.gt_motion.size() != f.gt.size()) {
            throw DimensionError("gt_motion must be empty or parallel to gt");
        }
        std::vector<int> valid(f.gt.size(), 0);  // 1 valid, 0 ignored, -1 dont-care
        for (std::size_t g = 0; g < f.gt.size(); ++g) {
            const auto& gt = f.gt[g];
            if (gt.dont_care()) {
                valid[g] = -1;
                continue;
            }
            if (gt.type != cfg.object_class) continue;
            const Difficulty d = assign_difficulty(gt, cfg);
            if (d != Difficulty::ignored && static_cast<std::size_t>(d) <= lvl) {
                valid[g] = 1;
                ++res.num_gt;
                if (!f.gt_motion.empty()) ++res.num_gt_by_motion[static_cast<std::size_t>(f.gt_motion[g])];
            }
        }
        std::vector<std::size_t> dets;
        for (std::size_t i = 0; i < f.detections.size(); ++i) {
            if (f.detections[i].type == cfg.object_class) dets.push_back(i);
        }
        std::stable_sort(dets.begin(), dets.end(), [&](std::size_t a, std::size_t b) {
            return det_score(f.detections[a]) > det_score(f.detections[b]);
        });
        std::vector<char> taken(f.gt.size(), 0);
        std::vector<RankedResult> local(f.detections.size());
        for (std::size_t di : dets) {
            const auto& det = f.detections[di];
            RankedResult r;
            r.score = det_score(det);
            int best = -1;
            double best_iou = 0.0;
            int best_ign = -1;
            double best_ign_iou = 0.0;
            bool dont_care = false;
            for (std::size_t g = 0; g < f.gt.size(); ++g) {
                if (valid[g] == -1) {
                    if (iou_2d(det.bbox, f.gt[g].bbox) >= cfg.iou_threshold) dont_care = true;
                    continue;
                }
                if (taken[g] || f.gt[g].type != cfg.object_class) continue;
                const double iou = pair_iou(det, f.gt[g], metric);
                if (iou < cfg.iou_threshold) continue;
                if (valid[g] == 1 && iou > best_iou) {
                    best = static_cast<int>(g);
                    best_iou = iou;
                } else if (valid[g] == 0 && iou > best_ign_iou) {
                    best_ign = static_cast<int>(g);
                    best_ign_iou = iou;
                }
            }
            if (best >= 0) {
                taken[static_cast<std::size_t>(best)] = 1;
                r.outcome = Outcome::tp;
                if (!f.gt_motion.empty()) r.gt_motion = static_cast<int>(f.gt_motion[static_cast<std::size_t>(best)]);
            } else if (best_ign >= 0) {
                taken[static_cast<std::size_t>(best_ign)] = 1;
                r.outcome = Outcome::ignored;
            } else if (dont_care || det.bbox_height() < cfg.min_height[lvl]) {
                r.outcome = Outcome::ignored;
            }
            local[di] = r;
        }
        for (std::size_t di : dets) {
            local[di].order = order + di;
            res.ranked.push_back(local[di]);
        }
        order += f.detections.size();
    }
    std::stable_sort(res.ranked.begin(), res.ranked.end(), [](const RankedResult& a, const RankedResult& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.order < b.order;
    });
    return res;
}

/// Mean over the recall grid of the best precision at recall >= r.
inline double interpolated_ap(const std::vector<std::pair<double, double>>& samples, int recall_points) {
    std::vector<double> grid;
    if (recall_points == 11) {
        for (int i = 0; i <= 10; ++i) grid.push_back(i / 10.0);
    } else {
        for (int i = 1; i <= recall_points; ++i) grid.push_back(static_cast<double>(i) / recall_points);
    }
    // suffix max of precision, recall nondecreasing along samples
    std::vector<double> best(samples.size() + 1, 0.0);
    for (std::size_t i = samples.size(); i-- > 0;) best[i] = std::max(best[i + 1], samples[i].second);
    double sum = 0.0;
    for (double r : grid) {
        const auto it = std::lower_bound(samples.begin(), samples.end(), r - 1e-12,
                                         [](const std::pair<double, double>& s, double v) { return s.first < v; });
        sum += best[static_cast<std::size_t>(it - samples.begin())];
    }
    return sum / static_cast<double>(grid.size());
}

/// PR curve over ranked results. `split` < 0 keeps everything; otherwise
/// true positives of the other class drop out and false positives stay.
inline PRCurve curve_from(const MatchResult& m, int split, int recall_points) {
    PRCurve c;
    c.num_gt = split < 0 ? m.num_gt : m.num_gt_by_motion[static_cast<std::size_t>(split)];
    for (const auto& r : m.ranked) {
        if (r.outcome == Outcome::ignored) continue;
        if (r.outcome == Outcome::tp) {
            if (split >= 0 && r.gt_motion != split) continue;
            ++c.num_tp;
        } else {
            ++c.num_fp;
        }
        if (c.num_gt > 0) {
            c.samples.emplace_back(static_cast<double>(c.num_tp) / c.num_gt,
                                   static_cast<double>(c.num_tp) / (c.num_tp + c.num_fp));
        }
    }
    if (c.num_gt > 0) c.ap = interpolated_ap(c.samples, recall_points);
    return c;
}

}  // namespace detail

inline PRCurve average_precision(const std::vector<EvalFrame>& frames, Difficulty level, BoxMetric metric,
                                 const EvalConfig& cfg = {}) {
    cfg.validate();
    if (level == Difficulty::ignored) throw ConfigError("AP is not defined for the ignored level");
    return detail::curve_from(detail::match(frames, level, metric, cfg), -1, cfg.recall_points);
}

struct MotionSplitAP {
    PRCurve static_split;
    PRCurve moving_split;
    PRCurve overall;
};

/// Matched detections take their gt's motion class; unmatched ones count
/// as false positives in both splits.
inline MotionSplitAP motion_split_eval(const std::vector<EvalFrame>& frames, Difficulty level, BoxMetric metric,
                                       const EvalConfig& cfg = {}) {
    cfg.validate();
    for (const auto& f : frames) {
        if (f.gt_motion.size() != f.gt.size()) throw DimensionError("motion_split_eval needs a motion class per gt");
    }
    const detail::MatchResult m = detail::match(frames, level, metric, cfg);
    return {detail::curve_from(m, static_cast<int>(MotionClass::static_object), cfg.recall_points),
            detail::curve_from(m, static_cast<int>(MotionClass::moving), cfg.recall_points),
            detail::curve_from(m, -1, cfg.recall_points)};
}

// ---- depth errors ----------------------------------------------------------

struct DepthErrorStats {
    int count = 0;
    int excluded = 0;  ///< pairs with nonpositive gt depth
    double mae = 0.0;
    double abs_rel = 0.0;
    int filtered_count = 0;  ///< pairs with error below filter_max
    double filtered_mae = 0.0;
    double filtered_abs_rel = 0.0;
};

inline DepthErrorStats depth_error_stats(const std::vector<double>& depth, const std::vector<double>& gt,
                                         double filter_max = 6.0) {
    if (depth.size() != gt.size()) throw DimensionError("depth_error_stats: size mismatch");
    DepthErrorStats s;
    for (std::size_t i = 0; i < depth.size(); ++i) {
        if (!(gt[i] > 0.0)) {
            ++s.excluded;
            continue;
        }
        const double e = std::abs(depth[i] - gt[i]);
        ++s.count;
        s.mae += e;
        s.abs_rel += e / gt[i];
        if (e < filter_max) {
            ++s.filtered_count;
            s.filtered_mae += e;
            s.filtered_abs_rel += e / gt[i];
        }
    }
    if (s.count) {
        s.mae /= s.count;
        s.abs_rel /= s.count;
    }
    if (s.filtered_count) {
        s.filtered_mae /= s.filtered_count;
        s.filtered_abs_rel /= s.filtered_count;
    }
    return s;
}

/// Center depths of detections matched to gt in BEV, for depth_error_stats.
inline std::pair<std::vector<double>, std::vector<double>> matched_depths(const std::vector<EvalFrame>& frames,
                                                                          const EvalConfig& cfg = {}) {
    std::pair<std::vector<double>, std::vector<double>> out;
    for (const auto& f : frames) {
        std::vector<std::size_t> dets(f.detections.size());
        std::iota(dets.begin(), dets.end(), 0);
        std::stable_sort(dets.begin(), dets.end(), [&](std::size_t a, std::size_t b) {
            return detail::det_score(f.detections[a]) > detail::det_score(f.detections[b]);
        });
        std::vector<char> taken(f.gt.size(), 0);
        for (std::size_t di : dets) {
            const auto& d = f.detections[di];
            if (d.type != cfg.object_class) continue;
            int best = -1;
            double best_iou = 0.0;
            for (std::size_t g = 0; g < f.gt.size(); ++g) {
                if (taken[g] || f.gt[g].type != cfg.object_class) continue;
                const double iou = detail::pair_iou(d, f.gt[g], BoxMetric::bev);
                if (iou > best_iou) {
                    best_iou = iou;
                    best = static_cast<int>(g);
                }
            }
            if (best < 0) continue;
            taken[static_cast<std::size_t>(best)] = 1;
            out.first.push_back(d.z);
            out.second.push_back(f.gt[static_cast<std::size_t>(best)].z);
        }
    }
    return out;
}

// ---- report ----------------------------------------------------------------

struct EvalReport {
    EvalConfig config;
    /// ap[metric][difficulty]
    std::array<std::array<std::optional<double>, 3>, 3> ap{};
    std::optional<std::array<std::array<MotionSplitAP, 3>, 2>> motion;  ///< [bev, 3d][difficulty]
    std::optional<DepthErrorStats> depth;
};

inline EvalReport evaluate(const std::vector<EvalFrame>& frames, const EvalConfig& cfg, bool motion_split = false,
                           bool depth_stats = false) {
    cfg.validate();
    EvalReport rep;
    rep.config = cfg;
    for (std::size_t m = 0; m < 3; ++m) {
        for (std::size_t d = 0; d < 3; ++d) {
            rep.ap[m][d] = average_precision(frames, kDifficulties[d], static_cast<BoxMetric>(m), cfg).ap;
        }
    }
    if (motion_split) {
        rep.motion.emplace();
        for (std::size_t m = 0; m < 2; ++m) {
            for (std::size_t d = 0; d < 3; ++d) {
                (*rep.motion)[m][d] = motion_split_eval(frames, kDifficulties[d], static_cast<BoxMetric>(m), cfg);
            }
        }
    }
    if (depth_stats) {
        const auto [pred, gt] = matched_depths(frames, cfg);
        rep.depth = depth_error_stats(pred, gt);
    }
    return rep;
}

namespace detail {

inline nlohmann::ordered_json ap_json(const std::optional<double>& v) {
    return v ? nlohmann::ordered_json(std::round(*v * 1e6) / 1e6) : nlohmann::ordered_json(nullptr);
}

inline std::string ap_cell(const std::optional<double>& v) {
    if (!v) return "-";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", 100.0 * *v);
    return buf;
}

}  // namespace detail

/// AP values in [0, 1], rounded to 6 decimals; absent levels are null.
inline nlohmann::ordered_json report_json(const EvalReport& r) {
    nlohmann::ordered_json j;
    j["iou_threshold"] = r.config.iou_threshold;
    j["recall_points"] = r.config.recall_points;
    j["class"] = r.config.object_class;
    for (std::size_t m = 0; m < 3; ++m) {
        auto& row = j["ap"][to_string(static_cast<BoxMetric>(m))];
        for (std::size_t d = 0; d < 3; ++d) row[to_string(kDifficulties[d])] = detail::ap_json(r.ap[m][d]);
    }
    if (r.motion) {
        for (std::size_t m = 0; m < 2; ++m) {
            auto& row = j["motion_split"][to_string(static_cast<BoxMetric>(m))];
            for (std::size_t d = 0; d < 3; ++d) {
                const auto& s = (*r.motion)[m][d];
                auto& cell = row[to_string(kDifficulties[d])];
                cell["static"] = detail::ap_json(s.static_split.ap);
                cell["moving"] = detail::ap_json(s.moving_split.ap);
                cell["overall"] = detail::ap_json(s.overall.ap);
            }
        }
    }
    if (r.depth) {
        const auto& s = *r.depth;
        j["depth"] = {{"count", s.count},
                      {"excluded", s.excluded},
                      {"mae", s.mae},
                      {"abs_rel", s.abs_rel},
                      {"filtered_count", s.filtered_count},
                      {"filtered_mae", s.filtered_mae},
                      {"filtered_abs_rel", s.filtered_abs_rel}};
    }
    return j;
}

/// Aligned text table, AP in percent: rows are metrics (and motion splits),
/// columns easy / moderate / hard.
inline std::string report_table(const EvalReport& r) {
    std::string out;
    char buf[160];
    std::snprintf(buf, sizeof(buf), "AP_R%d @ IoU %.2f (%s)\n", r.config.recall_points, r.config.iou_threshold,
                  r.config.object_class.c_str());
    out += buf;
    std::snprintf(buf, sizeof(buf), "%-16s %9s %9s %9s\n", "", "easy", "moderate", "hard");
    out += buf;
    auto row = [&](const std::string& name, const std::array<std::optional<double>, 3>& v) {
        std::snprintf(buf, sizeof(buf), "%-16s %9s %9s %9s\n", name.c_str(), detail::ap_cell(v[0]).c_str(),
                      detail::ap_cell(v[1]).c_str(), detail::ap_cell(v[2]).c_str());
        out += buf;
    };
    row("AP BEV", r.ap[0]);
    row("AP 3D", r.ap[1]);
    row("AP 2D", r.ap[2]);
    if (r.motion) {
        for (std::size_t m = 0; m < 2; ++m) {
            const std::string tag = m == 0 ? "BEV" : "3D";
            std::array<std::optional<double>, 3> st, mv;
            for (std::size_t d = 0; d < 3; ++d) {
                st[d] = (*r.motion)[m][d].static_split.ap;
                mv[d] = (*r.motion)[m][d].moving_split.ap;
            }
            row("AP " + tag + " static", st);
            row("AP " + tag + " moving", mv);
        }
    }
    if (r.depth) {
        const auto& s = *r.depth;
        std::snprintf(buf, sizeof(buf), "depth: n=%d MAE %.3f m Abs.Rel %.4f | err<6m: n=%d MAE %.3f m Abs.Rel %.4f\n", s.count,
                      s.mae, s.abs_rel, s.filtered_count, s.filtered_mae, s.filtered_abs_rel);
        out += buf;
    }
    return out;
}

}  // namespace monolabel
