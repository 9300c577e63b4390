#pragma once

// Soft silhouette and hard depth rasterization of a posed triangle mesh with
// reverse-mode gradients to (t_c, size, embedding).
//
// Pixel (x, y) of a render samples the image point (x + offset_u, y + offset_v);
// pixel centers sit on integer image coordinates. Faces are double-sided and a
// face with any vertex in front of the near plane is culled.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <map>
#include <utility>
#include <vector>

#include "monolabel/errors.hpp"
#include "monolabel/geom.hpp"
#include "monolabel/grid.hpp"
#include "monolabel/shape.hpp"

namespace monolabel {

struct RenderConfig {
    int width = 0;   ///< render width in pixels
    int height = 0;  ///< render height in pixels
    int offset_u = 0;  ///< image column of render pixel x = 0
    int offset_v = 0;  ///< image row of render pixel y = 0
    double sigma = 1e-4;  ///< soft-edge sharpness, NDC^2
    double near = 0.1;
    double far = 100.0;

    static RenderConfig full_image(const CameraIntrinsics& intr) {
        RenderConfig c;
        c.width = intr.width;
        c.height = intr.height;
        return c;
    }

    void validate() const {
        if (width <= 0 || height <= 0) throw GeometryError("render size must be positive");
        if (!(sigma > 0.0)) throw GeometryError("render sigma must be positive");
        if (!(near > 0.0 && near < far)) throw GeometryError("render clip range must satisfy 0 < near < far");
    }
};

/// Pixel-to-NDC scale: NDC spans [-1, 1] over the longer image side.
inline double ndc_per_pixel(const CameraIntrinsics& intr) { return 2.0 / std::max(intr.width, intr.height); }

struct SilhouetteMap {
    Grid<double> prob;
    bool empty_render = false;
};

struct DepthMap {
    Grid<double> depth;  ///< 0 marks an invalid pixel
    bool empty_render = false;

    bool valid(int x, int y) const { return depth(x, y) > 0.0; }
    int valid_count() const {
        return static_cast<int>(std::count_if(depth.values().begin(), depth.values().end(), [](double d) { return d > 0.0; }));
    }
};

/// Gradient of a scalar with respect to the free pose variables.
struct PoseGradient {
    Vec3 t_c = Vec3::Zero();
    Vec3 size = Vec3::Zero();  ///< (h, w, l)
    Eigen::VectorXd embedding;

    PoseGradient& operator+=(const PoseGradient& o) {
        t_c += o.t_c;
        size += o.size;
        if (embedding.size() == 0) embedding = o.embedding;
        else if (o.embedding.size() == embedding.size()) embedding += o.embedding;
        return *this;
    }
    PoseGradient& operator*=(double s) {
        t_c *= s;
        size *= s;
        embedding *= s;
        return *this;
    }
};

/// Chains camera-frame vertex gradients (N x 3) back to the pose variables.
/// The mesh is decode(space, pose.embedding, pose.size).
inline PoseGradient chain_vertex_gradients(const ShapeSpace& space, const ObjectPose& pose, const VertexMatrix& vertex_grad) {
    PoseGradient g;
    g.t_c = vertex_grad.colwise().sum().transpose();
    // cam = R (scale .* unit) + t  ->  object-frame gradient Rᵀ g
    const Mat3 r = object_rotation(pose.yaw);
    const VertexMatrix obj_grad = vertex_grad * r;  // rows: (Rᵀ g_v)ᵀ
    const VertexMatrix unit = shape_vertices(space, pose.embedding);
    const Vec3 scale_grad = obj_grad.cwiseProduct(unit).colwise().sum().transpose();
    g.size = Vec3(scale_grad(1), scale_grad(0), scale_grad(2));
    const Vec3 scale = axis_scale(pose.size);
    g.embedding = Eigen::VectorXd::Zero(space.dims());
    for (int j = 0; j < space.dims(); ++j) {
        g.embedding(j) = (obj_grad.cwiseProduct(space.basis[static_cast<std::size_t>(j)] * scale.asDiagonal())).sum();
    }
    return g;
}

namespace detail {

struct Tri2D {
    Vec2 p[3];
    int face = -1;
    double area2 = 0.0;  ///< twice the signed area
    bool boundary[3] = {true, true, true};  ///< edge e runs p[e] -> p[(e + 1) % 3]
};

inline double cross2(const Vec2& a, const Vec2& b) { return a.x() * b.y() - a.y() * b.x(); }

inline bool inside_tri(const Tri2D& t, const Vec2& q) {
    if (t.area2 == 0.0) return false;
    const double e0 = cross2(t.p[1] - t.p[0], q - t.p[0]);
    const double e1 = cross2(t.p[2] - t.p[1], q - t.p[1]);
    const double e2 = cross2(t.p[0] - t.p[2], q - t.p[2]);
    return (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
}

struct EdgeHit {
    double d2;
    int edge;  ///< segment p[edge] -> p[(edge + 1) % 3]
    double t;  ///< clamped parameter of the closest point
};

/// Nearest boundary edge; d2 is infinite when every edge is internal.
inline EdgeHit closest_edge(const Tri2D& tri, const Vec2& q) {
    EdgeHit best{std::numeric_limits<double>::infinity(), 0, 0.0};
    for (int e = 0; e < 3; ++e) {
        if (!tri.boundary[e]) continue;
        const Vec2& a = tri.p[e];
        const Vec2& b = tri.p[(e + 1) % 3];
        const Vec2 ab = b - a;
        const double len2 = ab.squaredNorm();
        double t = len2 > 0.0 ? (q - a).dot(ab) / len2 : 0.0;
        t = std::clamp(t, 0.0, 1.0);
        const double d2 = (q - (a + t * ab)).squaredNorm();
        if (d2 < best.d2) best = {d2, e, t};
    }
    return best;
}

inline double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

struct PixelBox {
    int x0, y0, x1, y1;  ///< inclusive; empty when x0 > x1 or y0 > y1
};

inline PixelBox tri_box(const Tri2D& t, double margin, int w, int h) {
    const double lo_x = std::min({t.p[0].x(), t.p[1].x(), t.p[2].x()}) - margin;
    const double hi_x = std::max({t.p[0].x(), t.p[1].x(), t.p[2].x()}) + margin;
    const double lo_y = std::min({t.p[0].y(), t.p[1].y(), t.p[2].y()}) - margin;
    const double hi_y = std::max({t.p[0].y(), t.p[1].y(), t.p[2].y()}) + margin;
    PixelBox b;
    b.x0 = static_cast<int>(std::max(0.0, std::ceil(lo_x)));
    b.y0 = static_cast<int>(std::max(0.0, std::ceil(lo_y)));
    b.x1 = static_cast<int>(std::min(static_cast<double>(w - 1), std::floor(hi_x)));
    b.y1 = static_cast<int>(std::min(static_cast<double>(h - 1), std::floor(hi_y)));
    return b;
}

/// Camera-frame vertices and their projections into render pixel coordinates.
struct Projection {
    VertexMatrix cam;
    std::vector<Vec2> px;
    std::vector<Tri2D> tris;  ///< faces surviving near-plane culling
    bool empty = false;

    Projection(const Mesh& mesh, const ObjectPose& pose, const CameraIntrinsics& intr, const RenderConfig& cfg) {
        cfg.validate();
        if (mesh.empty()) throw ShapeError("render: empty mesh");
        cam = posed_vertices(mesh, pose);
        const auto n = static_cast<std::size_t>(cam.rows());
        px.resize(n);
        std::vector<char> front(n, 0);
        for (std::size_t i = 0; i < n; ++i) {
            const Vec3 p = cam.row(static_cast<Eigen::Index>(i)).transpose();
            if (p.z() > cfg.near) {
                front[i] = 1;
                px[i] = project(intr, p) - Vec2(cfg.offset_u, cfg.offset_v);
            }
        }
        for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
            const Face& face = mesh.faces[f];
            if (!front[face[0]] || !front[face[1]] || !front[face[2]]) continue;
            Tri2D t;
            for (int k = 0; k < 3; ++k) t.p[k] = px[face[k]];
            t.face = static_cast<int>(f);
            t.area2 = cross2(t.p[1] - t.p[0], t.p[2] - t.p[0]);
            tris.push_back(t);
        }
        empty = tris.empty() || !(pose.t_c.z() > cfg.near);
        if (empty) tris.clear();
        mark_internal_edges(mesh);
    }

    // Edges of the image-space outline: an edge shared by two rendered faces
    // that fold onto opposite sides of it lies inside the silhouette.
    void mark_internal_edges(const Mesh& mesh) {
        std::map<std::pair<int, int>, std::vector<std::pair<int, int>>> edges;
        for (std::size_t t = 0; t < tris.size(); ++t) {
            const Face& f = mesh.faces[static_cast<std::size_t>(tris[t].face)];
            for (int e = 0; e < 3; ++e) {
                const int a = f[e], b = f[(e + 1) % 3];
                edges[{std::min(a, b), std::max(a, b)}].emplace_back(static_cast<int>(t), e);
            }
        }
        for (const auto& [key, users] : edges) {
            bool internal = false;
            if (users.size() == 2) {
                const auto [t0, e0] = users[0];
                const auto [t1, e1] = users[1];
                const Tri2D& a = tris[static_cast<std::size_t>(t0)];
                const Tri2D& b = tris[static_cast<std::size_t>(t1)];
                const Vec2& s0 = a.p[e0];
                const Vec2 dir = a.p[(e0 + 1) % 3] - s0;
                internal = cross2(dir, a.p[(e0 + 2) % 3] - s0) * cross2(dir, b.p[(e1 + 2) % 3] - s0) < 0.0;
            }
            for (const auto& [t, e] : users) tris[static_cast<std::size_t>(t)].boundary[e] = !internal;
            if (!internal && !covered_beyond(users[0].first, users[0].second)) contour.push_back(key);
        }
    }

    // A fold edge whose outer side is still covered lies inside the outline.
    bool covered_beyond(int t, int e) const {
        const Tri2D& tri = tris[static_cast<std::size_t>(t)];
        const Vec2& a = tri.p[e];
        const Vec2& b = tri.p[(e + 1) % 3];
        Vec2 n(b.y() - a.y(), a.x() - b.x());
        if (n.norm() == 0.0) return false;
        n.normalize();
        if (n.dot(tri.p[(e + 2) % 3] - a) > 0.0) n = -n;
        const Vec2 probe = 0.5 * (a + b) + 0.5 * n;
        for (const auto& other : tris)
            if (inside_tri(other, probe)) return true;
        return false;
    }

    std::vector<std::pair<int, int>> contour;  ///< outline edges as vertex index pairs
};

}  // namespace detail

/// Soft silhouette of one posed mesh. A pixel's probability is the logistic
/// of its signed squared distance to the projected outline, positive inside
/// the hard coverage. Keeps the forward state needed by vertex_vjp().
class SoftSilhouette {
public:
    SoftSilhouette(const Mesh& mesh, const ObjectPose& pose, const CameraIntrinsics& intr, const RenderConfig& cfg)
        : intr_(intr), cfg_(cfg), proj_(mesh, pose, intr, cfg) {
        const double s = ndc_per_pixel(intr);
        scale_ = s * s / cfg.sigma;
        margin_ = 10.0 * std::sqrt(cfg.sigma) / s + 1.0;
        const int w = cfg.width, h = cfg.height;
        inside_ = Grid<char>(w, h, 0);
        d2_ = Grid<double>(w, h, std::numeric_limits<double>::infinity());
        seg_ = Grid<int>(w, h, -1);
        t_ = Grid<double>(w, h, 0.0);
        for (const auto& tri : proj_.tris) {
            const auto box = detail::tri_box(tri, 0.0, w, h);
            for (int y = box.y0; y <= box.y1; ++y)
                for (int x = box.x0; x <= box.x1; ++x)
                    if (!inside_(x, y) && detail::inside_tri(tri, Vec2(x, y))) inside_(x, y) = 1;
        }
        for (std::size_t k = 0; k < proj_.contour.size(); ++k) {
            detail::Tri2D seg;
            seg.p[0] = proj_.px[static_cast<std::size_t>(proj_.contour[k].first)];
            seg.p[1] = seg.p[2] = proj_.px[static_cast<std::size_t>(proj_.contour[k].second)];
            const auto box = detail::tri_box(seg, margin_, w, h);
            const Vec2 ab = seg.p[1] - seg.p[0];
            const double len2 = ab.squaredNorm();
            for (int y = box.y0; y <= box.y1; ++y) {
                for (int x = box.x0; x <= box.x1; ++x) {
                    const Vec2 q(x, y);
                    const double t = len2 > 0.0 ? std::clamp((q - seg.p[0]).dot(ab) / len2, 0.0, 1.0) : 0.0;
                    const double d2 = (q - (seg.p[0] + t * ab)).squaredNorm();
                    if (d2 < d2_(x, y)) {
                        d2_(x, y) = d2;
                        seg_(x, y) = static_cast<int>(k);
                        t_(x, y) = t;
                    }
                }
            }
        }
    }

    bool empty() const { return proj_.empty; }

    SilhouetteMap map() const {
        SilhouetteMap out;
        out.empty_render = proj_.empty;
        out.prob = Grid<double>(cfg_.width, cfg_.height, 0.0);
        for (int y = 0; y < cfg_.height; ++y)
            for (int x = 0; x < cfg_.width; ++x) out.prob(x, y) = prob(x, y);
        return out;
    }

    /// d(sum cotangent * prob)/d(camera-frame vertices).
    VertexMatrix vertex_vjp(const Grid<double>& cotangent) const {
        if (cotangent.width() != cfg_.width || cotangent.height() != cfg_.height) {
            throw DimensionError("silhouette cotangent does not match render size");
        }
        std::vector<Vec2> gp(proj_.px.size(), Vec2::Zero());
        for (int y = 0; y < cfg_.height; ++y) {
            for (int x = 0; x < cfg_.width; ++x) {
                const int k = seg_(x, y);
                const double c = cotangent(x, y);
                if (k < 0 || c == 0.0) continue;
                const double p = prob(x, y);
                const double sign = inside_(x, y) ? 1.0 : -1.0;
                const double dd2 = c * p * (1.0 - p) * sign * scale_;
                if (dd2 == 0.0) continue;
                const auto [ia, ib] = proj_.contour[static_cast<std::size_t>(k)];
                const Vec2& a = proj_.px[static_cast<std::size_t>(ia)];
                const Vec2& b = proj_.px[static_cast<std::size_t>(ib)];
                const double t = t_(x, y);
                const Vec2 dd2_dc = 2.0 * (a + t * (b - a) - Vec2(x, y));
                gp[static_cast<std::size_t>(ia)] += dd2 * (1.0 - t) * dd2_dc;
                gp[static_cast<std::size_t>(ib)] += dd2 * t * dd2_dc;
            }
        }
        VertexMatrix g = VertexMatrix::Zero(proj_.cam.rows(), 3);
        for (std::size_t i = 0; i < gp.size(); ++i) {
            if (gp[i].isZero(0.0)) continue;
            const Vec3 p = proj_.cam.row(static_cast<Eigen::Index>(i)).transpose();
            g.row(static_cast<Eigen::Index>(i)) = (project_jacobian(intr_, p).transpose() * gp[i]).transpose();
        }
        return g;
    }

private:
    double prob(int x, int y) const {
        const double sign = inside_(x, y) ? 1.0 : -1.0;
        if (seg_(x, y) < 0) return inside_(x, y) ? 1.0 : 0.0;
        return detail::sigmoid(sign * d2_(x, y) * scale_);
    }

    CameraIntrinsics intr_;
    RenderConfig cfg_;
    detail::Projection proj_;
    double scale_ = 0.0;
    double margin_ = 0.0;
    Grid<char> inside_;
    Grid<double> d2_;  ///< squared pixel distance to the nearest outline edge within the margin
    Grid<int> seg_;
    Grid<double> t_;
};

/// Z-buffered depth of one or more posed meshes, with per-pixel face ids.
class DepthRaster {
public:
    DepthRaster(const Mesh& mesh, const ObjectPose& pose, const CameraIntrinsics& intr, const RenderConfig& cfg)
        : mesh_(&mesh), intr_(intr), cfg_(cfg), proj_(mesh, pose, intr, cfg) {
        depth_ = Grid<double>(cfg.width, cfg.height, 0.0);
        face_ = Grid<int>(cfg.width, cfg.height, -1);
        for (const auto& tri : proj_.tris) {
            const auto box = detail::tri_box(tri, 0.0, cfg.width, cfg.height);
            for (int y = box.y0; y <= box.y1; ++y) {
                for (int x = box.x0; x <= box.x1; ++x) {
                    if (!detail::inside_tri(tri, Vec2(x, y))) continue;
                    const double z = plane_depth(tri.face, x, y);
                    if (!(z >= cfg.near && z <= cfg.far)) continue;
                    if (face_(x, y) < 0 || z < depth_(x, y)) {
                        depth_(x, y) = z;
                        face_(x, y) = tri.face;
                    }
                }
            }
        }
    }

    bool empty() const { return proj_.empty; }
    const Grid<int>& faces() const { return face_; }
    const VertexMatrix& camera_vertices() const { return proj_.cam; }

    DepthMap map() const { return DepthMap{depth_, proj_.empty}; }

    /// d(sum cotangent * depth)/d(camera-frame vertices); selection of the
    /// covering face is treated as constant.
    VertexMatrix vertex_vjp(const Grid<double>& cotangent) const {
        if (cotangent.width() != cfg_.width || cotangent.height() != cfg_.height) {
            throw DimensionError("depth cotangent does not match render size");
        }
        VertexMatrix g = VertexMatrix::Zero(proj_.cam.rows(), 3);
        for (int y = 0; y < cfg_.height; ++y) {
            for (int x = 0; x < cfg_.width; ++x) {
                const int f = face_(x, y);
                const double c = cotangent(x, y);
                if (f < 0 || c == 0.0) continue;
                const Face& face = mesh_->faces[static_cast<std::size_t>(f)];
                const Vec3 p0 = proj_.cam.row(face[0]).transpose();
                const Vec3 p1 = proj_.cam.row(face[1]).transpose();
                const Vec3 p2 = proj_.cam.row(face[2]).transpose();
                const Vec3 d = intr_.ray(Vec2(x + cfg_.offset_u, y + cfg_.offset_v));
                // z = det(p0, p1, p2) / (d . n), n = (p1 - p0) x (p2 - p0)
                const double den = d.dot((p1 - p0).cross(p2 - p0));
                const double z = depth_(x, y);
                const Vec3 g0 = (p1.cross(p2) - z * (p1 - p2).cross(d)) / den;
                const Vec3 g1 = (p2.cross(p0) - z * (p2 - p0).cross(d)) / den;
                const Vec3 g2 = (p0.cross(p1) - z * (p0 - p1).cross(d)) / den;
                g.row(face[0]) += c * g0.transpose();
                g.row(face[1]) += c * g1.transpose();
                g.row(face[2]) += c * g2.transpose();
            }
        }
        return g;
    }

private:
    double plane_depth(int f, int x, int y) const {
        const Face& face = mesh_->faces[static_cast<std::size_t>(f)];
        const Vec3 p0 = proj_.cam.row(face[0]).transpose();
        const Vec3 p1 = proj_.cam.row(face[1]).transpose();
        const Vec3 p2 = proj_.cam.row(face[2]).transpose();
        const Vec3 n = (p1 - p0).cross(p2 - p0);
        const double den = n.dot(intr_.ray(Vec2(x + cfg_.offset_u, y + cfg_.offset_v)));
        if (den == 0.0) return -1.0;
        return n.dot(p0) / den;
    }

    const Mesh* mesh_;
    CameraIntrinsics intr_;
    RenderConfig cfg_;
    detail::Projection proj_;
    Grid<double> depth_;
    Grid<int> face_;
};

inline SilhouetteMap render_silhouette(const Mesh& mesh, const ObjectPose& obj_in_cam, const CameraIntrinsics& intr,
                                       const RenderConfig& cfg) {
    return SoftSilhouette(mesh, obj_in_cam, intr, cfg).map();
}

inline DepthMap render_depth(const Mesh& mesh, const ObjectPose& obj_in_cam, const CameraIntrinsics& intr,
                             const RenderConfig& cfg) {
    return DepthRaster(mesh, obj_in_cam, intr, cfg).map();
}

/// Hard coverage: 1 where some face covers the pixel center.
inline Grid<double> render_hard_silhouette(const Mesh& mesh, const ObjectPose& obj_in_cam, const CameraIntrinsics& intr,
                                           const RenderConfig& cfg) {
    DepthRaster r(mesh, obj_in_cam, intr, cfg);
    Grid<double> out(cfg.width, cfg.height, 0.0);
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = r.faces().data()[i] >= 0 ? 1.0 : 0.0;
    return out;
}

/// Gradient of sum(cotangent * silhouette) with respect to (t_c, size, embedding).
inline PoseGradient silhouette_vjp(const ShapeSpace& space, const ObjectPose& obj_in_cam, const CameraIntrinsics& intr,
                                   const RenderConfig& cfg, const Grid<double>& cotangent) {
    const Mesh mesh = decode(space, obj_in_cam.embedding, obj_in_cam.size);
    SoftSilhouette r(mesh, obj_in_cam, intr, cfg);
    return chain_vertex_gradients(space, obj_in_cam, r.vertex_vjp(cotangent));
}

/// Gradient of sum(cotangent * depth) with respect to (t_c, size, embedding).
inline PoseGradient depth_vjp(const ShapeSpace& space, const ObjectPose& obj_in_cam, const CameraIntrinsics& intr,
                              const RenderConfig& cfg, const Grid<double>& cotangent) {
    const Mesh mesh = decode(space, obj_in_cam.embedding, obj_in_cam.size);
    DepthRaster r(mesh, obj_in_cam, intr, cfg);
    return chain_vertex_gradients(space, obj_in_cam, r.vertex_vjp(cotangent));
}

/// Image-space bounding box (u0, v0, u1, v1) of the projected mesh, or
/// nullopt-like empty box (u0 > u1) when nothing lies in front of `near`.
struct ImageBox {
    double u0 = 0, v0 = 0, u1 = -1, v1 = -1;
    bool empty() const { return u0 > u1 || v0 > v1; }
};

inline ImageBox projected_box(const Mesh& mesh, const ObjectPose& pose, const CameraIntrinsics& intr, double near = 0.1) {
    const VertexMatrix cam = posed_vertices(mesh, pose);
    ImageBox b{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
               -std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
    bool any = false;
    for (Eigen::Index i = 0; i < cam.rows(); ++i) {
        const Vec3 p = cam.row(i).transpose();
        if (p.z() <= near) continue;
        const Vec2 q = project(intr, p);
        b.u0 = std::min(b.u0, q.x());
        b.v0 = std::min(b.v0, q.y());
        b.u1 = std::max(b.u1, q.x());
        b.v1 = std::max(b.v1, q.y());
        any = true;
    }
    return any ? b : ImageBox{};
}

/// Render window around an image-space box, padded by `pad` of its size on
/// each side and clipped to the image.
inline RenderConfig crop_around(const ImageBox& box, const CameraIntrinsics& intr, double pad, RenderConfig base = {}) {
    if (box.empty()) {
        base.width = intr.width;
        base.height = intr.height;
        base.offset_u = 0;
        base.offset_v = 0;
        return base;
    }
    const double pw = (box.u1 - box.u0) * pad + 2.0;
    const double ph = (box.v1 - box.v0) * pad + 2.0;
    const int u0 = std::clamp(static_cast<int>(std::floor(box.u0 - pw)), 0, intr.width - 1);
    const int v0 = std::clamp(static_cast<int>(std::floor(box.v0 - ph)), 0, intr.height - 1);
    const int u1 = std::clamp(static_cast<int>(std::ceil(box.u1 + pw)), 0, intr.width - 1);
    const int v1 = std::clamp(static_cast<int>(std::ceil(box.v1 + ph)), 0, intr.height - 1);
    base.offset_u = u0;
    base.offset_v = v0;
    base.width = std::max(1, u1 - u0 + 1);
    base.height = std::max(1, v1 - v0 + 1);
    return base;
}

}  // namespace monolabel
