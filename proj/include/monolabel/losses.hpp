#pragma once

// The self-supervised loss terms and their weighted total. Each term returns
// its value and the gradient with respect to (t_c, size).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "monolabel/errors.hpp"
#include "monolabel/geom.hpp"
#include "monolabel/grid.hpp"
#include "monolabel/render.hpp"
#include "monolabel/shape.hpp"

namespace monolabel {

inline constexpr double kBceEpsilon = 1e-6;
inline constexpr double kSmoothL1Delta = 0.05;

/// Observed object mask inside a render window. fg and bg never overlap;
/// pixels in neither (e.g. other instances) do not contribute.
struct MaskObs {
    Grid<std::uint8_t> fg;
    Grid<std::uint8_t> bg;

    int width() const { return fg.width(); }
    int height() const { return fg.height(); }
    int fg_count() const { return static_cast<int>(std::count(fg.values().begin(), fg.values().end(), 1)); }

    /// fg = instance pixels; bg = everything else except `other` pixels.
    static MaskObs from_instance(const Grid<std::uint8_t>& instance, const Grid<std::uint8_t>* other = nullptr) {
        MaskObs m{Grid<std::uint8_t>(instance.width(), instance.height(), 0),
                  Grid<std::uint8_t>(instance.width(), instance.height(), 0)};
        for (std::size_t i = 0; i < instance.size(); ++i) {
            const bool f = instance.data()[i] != 0;
            const bool o = other != nullptr && other->data()[i] != 0;
            m.fg.data()[i] = f ? 1 : 0;
            m.bg.data()[i] = (!f && !o) ? 1 : 0;
        }
        return m;
    }
};

/// Cuts the render window `cfg` out of a full-image binary grid.
template <typename T>
Grid<T> crop_grid(const Grid<T>& full, const RenderConfig& cfg, T fill = T{}) {
    Grid<T> out(cfg.width, cfg.height, fill);
    for (int y = 0; y < cfg.height; ++y) {
        for (int x = 0; x < cfg.width; ++x) {
            const int u = x + cfg.offset_u;
            const int v = y + cfg.offset_v;
            if (full.contains(u, v)) out(x, y) = full(u, v);
        }
    }
    return out;
}

struct LossWeights {
    double sil = 1.0;
    double mv_sil = 1.0;
    double depth = 0.5;
    double photo = 10.0;
    double size = 0.5;
    double y = 1.0;

    void validate() const {
        for (double w : {sil, mv_sil, depth, photo, size, y}) {
            if (!(w >= 0.0)) throw ConfigError("loss weights must be nonnegative");
        }
    }
};

struct Priors {
    Vec3 size_mean = Vec3(1.53, 1.63, 3.88);  ///< (h, w, l)
    double y_plane = 1.65;                    ///< camera-frame y of the ground contact

    void validate() const {
        if (!(size_mean.minCoeff() > 0.0)) throw ConfigError("size_mean components must be positive");
    }
};

/// Value plus gradient with respect to (t_c, size).
struct TermResult {
    double value = 0.0;
    Vec3 grad_t = Vec3::Zero();
    Vec3 grad_size = Vec3::Zero();
    bool active = false;  ///< false when the term was gated off
};

struct LossBreakdown {
    TermResult sil, mv_sil, depth, photo, size, y;
    double total = 0.0;
    Vec3 grad_t = Vec3::Zero();
    Vec3 grad_size = Vec3::Zero();
};

struct SilLossResult {
    double value = 0.0;
    Grid<double> cotangent;  ///< d value / d prob
};

/// Mean binary cross-entropy between a soft silhouette and an observed mask.
inline SilLossResult sil_loss(const SilhouetteMap& sil, const MaskObs& mask) {
    if (!sil.prob.same_shape(mask.fg) || !sil.prob.same_shape(mask.bg)) {
        throw DimensionError("sil_loss: silhouette and mask sizes differ");
    }
    SilLossResult out;
    out.cotangent = Grid<double>(sil.prob.width(), sil.prob.height(), 0.0);
    const double n = static_cast<double>(sil.prob.size());
    if (n == 0) return out;
    double sum = 0.0;
    for (std::size_t i = 0; i < sil.prob.size(); ++i) {
        const double raw = sil.prob.data()[i];
        const double p = std::clamp(raw, kBceEpsilon, 1.0 - kBceEpsilon);
        const bool clamped = p != raw;
        if (mask.fg.data()[i]) {
            sum -= std::log(p);
            if (!clamped) out.cotangent.data()[i] = -1.0 / (p * n);
        } else if (mask.bg.data()[i]) {
            sum -= std::log(1.0 - p);
            if (!clamped) out.cotangent.data()[i] = 1.0 / ((1.0 - p) * n);
        }
    }
    out.value = sum / n;
    return out;
}

/// One observation of the optimized object in another (or the same) frame.
struct ViewObs {
    int frame = 0;
    CameraIntrinsics intr;
    RenderConfig crop;       ///< render window in this view
    MaskObs mask;            ///< cropped to `crop`
    SE3Transform g_ik;       ///< camera motion from the reference frame to this view
    Vec3 v = Vec3::Zero();   ///< object displacement in this view's camera frame
    const Image* image = nullptr;
};

struct MultiViewResult {
    TermResult term;
    std::vector<double> per_view;
    std::vector<int> skipped_frames;  ///< views where the warped object is behind the camera
};

/// Sum over views of the silhouette loss of the warped pose. Gradients reach
/// pose.t_c through the warp Jacobian.
inline MultiViewResult mv_sil_loss(const ShapeSpace& space, const ObjectPose& pose, std::span<const ViewObs> views) {
    MultiViewResult out;
    const Mesh mesh = decode(space, pose.embedding, pose.size);
    for (const auto& view : views) {
        const ObjectPose warped = warp_pose(pose, view.g_ik, view.v);
        if (!(warped.t_c.z() > view.crop.near)) {
            out.skipped_frames.push_back(view.frame);
            out.per_view.push_back(0.0);
            continue;
        }
        SoftSilhouette render(mesh, warped, view.intr, view.crop);
        if (render.empty()) {
            out.skipped_frames.push_back(view.frame);
            out.per_view.push_back(0.0);
            continue;
        }
        const auto loss = sil_loss(render.map(), view.mask);
        const PoseGradient g = chain_vertex_gradients(space, warped, render.vertex_vjp(loss.cotangent));
        out.term.value += loss.value;
        out.term.grad_t += warp_jacobian(view.g_ik).transpose() * g.t_c;
        out.term.grad_size += g.size;
        out.term.active = true;
        out.per_view.push_back(loss.value);
    }
    return out;
}

inline double smooth_l1(double r, double delta = kSmoothL1Delta) {
    const double a = std::abs(r);
    return a < delta ? 0.5 * r * r / delta : a - 0.5 * delta;
}

inline double smooth_l1_grad(double r, double delta = kSmoothL1Delta) {
    return std::abs(r) < delta ? r / delta : (r > 0 ? 1.0 : -1.0);
}

/// Bilinear sample with gradient; false when `q` falls outside the image.
inline bool sample_bilinear(const Image& img, const Vec2& q, double& value, Vec2& grad) {
    const double w = img.width();
    const double h = img.height();
    if (!(q.x() >= 0.0 && q.y() >= 0.0 && q.x() <= w - 1.0 && q.y() <= h - 1.0) || w < 2 || h < 2) return false;
    const int x0 = std::min(static_cast<int>(std::floor(q.x())), img.width() - 2);
    const int y0 = std::min(static_cast<int>(std::floor(q.y())), img.height() - 2);
    const double fx = q.x() - x0;
    const double fy = q.y() - y0;
    const double i00 = img(x0, y0), i10 = img(x0 + 1, y0), i01 = img(x0, y0 + 1), i11 = img(x0 + 1, y0 + 1);
    const double top = i00 + fx * (i10 - i00);
    const double bottom = i01 + fx * (i11 - i01);
    value = top + fy * (bottom - top);
    grad = Vec2((1 - fy) * (i10 - i00) + fy * (i11 - i01), (1 - fx) * (i01 - i00) + fx * (i11 - i10));
    return true;
}

struct PhotoResult {
    TermResult term;
    Grid<double> depth_cotangent;  ///< d value / d D over the reference render window
    int pixels = 0;                ///< residuals evaluated, summed over views
    bool no_coverage = false;
};

/// Photometric consistency between the reference image and each view:
/// residual I_i(p) - I_k(pi_k(w_ik(pi_i^-1(p, D(p))))) under a smooth-L1
/// penalty, averaged over usable pixels per view and summed over views.
/// `fg`, when given, restricts the pixels to the observed object mask.
inline PhotoResult photo_loss_depth(const Image& image_i, const CameraIntrinsics& intr_i, const RenderConfig& crop_i,
                                    const DepthMap& depth, std::span<const ViewObs> views,
                                    const Grid<std::uint8_t>* fg = nullptr) {
    PhotoResult out;
    out.depth_cotangent = Grid<double>(crop_i.width, crop_i.height, 0.0);
    if (fg && !fg->same_shape(depth.depth)) throw DimensionError("photo_loss: mask and depth sizes differ");
    std::vector<int> covered;
    for (int y = 0; y < crop_i.height; ++y) {
        for (int x = 0; x < crop_i.width; ++x) {
            if (!depth.valid(x, y)) continue;
            if (fg && !(*fg)(x, y)) continue;
            if (!image_i.contains(x + crop_i.offset_u, y + crop_i.offset_v)) continue;
            covered.push_back(y * crop_i.width + x);
        }
    }
    if (covered.empty()) {
        out.no_coverage = true;
        return out;
    }
    std::vector<double> dval;
    std::vector<int> used;
    for (const auto& view : views) {
        if (view.image == nullptr) continue;
        const Mat3& rot = view.g_ik.rotation();
        const Vec3 shift = view.g_ik.translation() + view.v;
        const bool identity_warp = rot == Mat3::Identity() && shift.isZero(0.0) && view.intr.fx == intr_i.fx &&
                                   view.intr.fy == intr_i.fy && view.intr.cx == intr_i.cx && view.intr.cy == intr_i.cy;
        double sum = 0.0;
        dval.clear();
        used.clear();
        for (int idx : covered) {
            const int x = idx % crop_i.width;
            const int y = idx / crop_i.width;
            const Vec2 p(x + crop_i.offset_u, y + crop_i.offset_v);
            const double d = depth.depth(x, y);
            const Vec3 ray = intr_i.ray(p);
            const Vec3 xk = rot * (ray * d) + shift;
            if (!(xk.z() > view.crop.near)) continue;
            const Vec2 q = identity_warp ? p : project(view.intr, xk);
            double ik = 0.0;
            Vec2 gk;
            if (!sample_bilinear(*view.image, q, ik, gk)) continue;
            const double r = image_i(static_cast<int>(p.x()), static_cast<int>(p.y())) - ik;
            sum += smooth_l1(r);
            // dr/dD = -grad I_k . J_proj . R . ray
            const double dr_dd = -gk.dot(project_jacobian(view.intr, xk) * (rot * ray));
            dval.push_back(smooth_l1_grad(r) * dr_dd);
            used.push_back(idx);
        }
        if (used.empty()) continue;
        const double n = static_cast<double>(used.size());
        out.term.value += sum / n;
        out.term.active = true;
        out.pixels += static_cast<int>(used.size());
        for (std::size_t j = 0; j < used.size(); ++j) out.depth_cotangent.data()[used[j]] += dval[j] / n;
    }
    return out;
}

/// Photometric loss with gradients routed to (t_c, size) through the rendered
/// depth at the reference frame.
inline PhotoResult photo_loss(const ShapeSpace& space, const ObjectPose& pose, const Image& image_i,
                              const CameraIntrinsics& intr_i, const RenderConfig& crop_i, std::span<const ViewObs> views,
                              const Grid<std::uint8_t>* fg = nullptr) {
    const Mesh mesh = decode(space, pose.embedding, pose.size);
    DepthRaster raster(mesh, pose, intr_i, crop_i);
    PhotoResult out = photo_loss_depth(image_i, intr_i, crop_i, raster.map(), views, fg);
    if (out.term.active) {
        const PoseGradient g = chain_vertex_gradients(space, pose, raster.vertex_vjp(out.depth_cotangent));
        out.term.grad_t = g.t_c;
        out.term.grad_size = g.size;
    }
    return out;
}

/// Squared distance between the observed depth center and the posed mesh center.
inline TermResult depth_center_loss(const ShapeSpace& space, const ObjectPose& pose, const Point3D& observed_center) {
    const Mesh mesh = decode(space, pose.embedding, pose.size);
    const VertexMatrix cam = posed_vertices(mesh, pose);
    const Vec3 center = cam.colwise().mean().transpose();
    const Vec3 diff = center - observed_center;
    TermResult out;
    out.value = diff.squaredNorm();
    VertexMatrix vg(cam.rows(), 3);
    vg.rowwise() = (2.0 * diff / static_cast<double>(cam.rows())).transpose();
    const PoseGradient g = chain_vertex_gradients(space, pose, vg);
    out.grad_t = g.t_c;
    out.grad_size = g.size;
    out.active = true;
    return out;
}

/// Bottom-face height relative to the road plane, squared.
inline TermResult vertical_loss(const ObjectPose& pose, const Priors& priors) {
    const double r = pose.t_c.y() + 0.5 * pose.height() - priors.y_plane;
    TermResult out;
    out.value = r * r;
    out.grad_t = Vec3(0.0, 2.0 * r, 0.0);
    out.grad_size = Vec3(r, 0.0, 0.0);
    out.active = true;
    return out;
}

inline TermResult size_loss(const Vec3& size, const Priors& priors) {
    const Vec3 d = size - priors.size_mean;
    TermResult out;
    out.value = d.squaredNorm();
    out.grad_size = 2.0 * d;
    out.active = true;
    return out;
}

struct LossTerms {
    TermResult sil, mv_sil, depth, photo, size, y;
};

/// Weighted sum. Inactive terms contribute exactly zero.
inline LossBreakdown total_loss(const LossTerms& t, const LossWeights& w) {
    w.validate();
    LossBreakdown b;
    b.sil = t.sil;
    b.mv_sil = t.mv_sil;
    b.depth = t.depth;
    b.photo = t.photo;
    b.size = t.size;
    b.y = t.y;
    const auto add = [&](const TermResult& term, double weight) {
        if (!term.active) return;
        b.total += weight * term.value;
        b.grad_t += weight * term.grad_t;
        b.grad_size += weight * term.grad_size;
    };
    add(t.sil, w.sil);
    add(t.mv_sil, w.mv_sil);
    add(t.depth, w.depth);
    add(t.photo, w.photo);
    add(t.size, w.size);
    add(t.y, w.y);
    return b;
}

}  // namespace monolabel
