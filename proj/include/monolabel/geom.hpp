#pragma once

// Rigid transforms, pinhole projection and the motion-aware pose warp.
//
// Camera frame: x right, y down, z forward. Camera poses map frame-f camera
// coordinates into the world frame, which is the camera frame at time 0.

#include <cmath>
#include <numbers>
#include <span>
#include <string>

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/SVD>

#include "monolabel/errors.hpp"

namespace monolabel {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

using Pixel2D = Vec2;  ///< (u, v) in pixels
using Point3D = Vec3;  ///< (x, y, z) in meters

/// Wraps an angle to (-pi, pi].
inline double wrap_angle(double a) {
    constexpr double pi = std::numbers::pi;
    double r = std::remainder(a, 2.0 * pi);
    if (r <= -pi) r += 2.0 * pi;
    return r;
}

inline Mat3 rot_x(double a) { return Eigen::AngleAxisd(a, Vec3::UnitX()).toRotationMatrix(); }
inline Mat3 rot_y(double a) { return Eigen::AngleAxisd(a, Vec3::UnitY()).toRotationMatrix(); }
inline Mat3 rot_z(double a) { return Eigen::AngleAxisd(a, Vec3::UnitZ()).toRotationMatrix(); }

/// Nearest rotation matrix in the Frobenius sense.
inline Mat3 orthonormalize(const Mat3& m) {
    Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 r = svd.matrixU() * svd.matrixV().transpose();
    if (r.determinant() < 0) {
        Mat3 u = svd.matrixU();
        u.col(2) *= -1.0;
        r = u * svd.matrixV().transpose();
    }
    return r;
}

class SE3Transform {
public:
    SE3Transform() : rotation_(Mat3::Identity()), translation_(Vec3::Zero()) {}

    /// Throws GeometryError when `rotation` is not a proper rotation within 1e-9.
    SE3Transform(const Mat3& rotation, const Vec3& translation) : rotation_(rotation), translation_(translation) {
        if (!is_rotation(rotation, 1e-9)) {
            throw GeometryError("SE3Transform: rotation block is not orthonormal with det +1");
        }
    }

    static SE3Transform identity() { return {}; }
    static SE3Transform translation_only(const Vec3& t) { return SE3Transform(Mat3::Identity(), t); }

    /// Builds from a possibly drifted rotation, projecting it back onto SO(3).
    static SE3Transform from_approx(const Mat3& rotation, const Vec3& translation) {
        SE3Transform g;
        g.rotation_ = orthonormalize(rotation);
        g.translation_ = translation;
        return g;
    }

    /// Row-major 3x4 [R|t], as stored in pose files.
    static SE3Transform from_3x4(std::span<const double, 12> v) {
        Mat3 r;
        Vec3 t;
        for (int row = 0; row < 3; ++row) {
            for (int col = 0; col < 3; ++col) r(row, col) = v[row * 4 + col];
            t(row) = v[row * 4 + 3];
        }
        return from_approx(r, t);
    }

    const Mat3& rotation() const noexcept { return rotation_; }
    const Vec3& translation() const noexcept { return translation_; }

    Mat4 matrix() const {
        Mat4 m = Mat4::Identity();
        m.topLeftCorner<3, 3>() = rotation_;
        m.topRightCorner<3, 1>() = translation_;
        return m;
    }

    Vec3 apply(const Vec3& p) const { return rotation_ * p + translation_; }
    Vec3 operator*(const Vec3& p) const { return apply(p); }

    static bool is_rotation(const Mat3& r, double tol) {
        if (!r.allFinite()) return false;
        const Mat3 e = r.transpose() * r - Mat3::Identity();
        return e.cwiseAbs().maxCoeff() <= tol && std::abs(r.determinant() - 1.0) <= tol;
    }

private:
    friend SE3Transform compose(const SE3Transform& a, const SE3Transform& b);
    friend SE3Transform invert(const SE3Transform& g);

    Mat3 rotation_;
    Vec3 translation_;
};

/// p_out = a * (b * p_in).
inline SE3Transform compose(const SE3Transform& a, const SE3Transform& b) {
    SE3Transform out;
    out.rotation_ = a.rotation_ * b.rotation_;
    out.translation_ = a.rotation_ * b.translation_ + a.translation_;
    if (!SE3Transform::is_rotation(out.rotation_, 1e-9)) out.rotation_ = orthonormalize(out.rotation_);
    return out;
}

inline SE3Transform operator*(const SE3Transform& a, const SE3Transform& b) { return compose(a, b); }

inline SE3Transform invert(const SE3Transform& g) {
    SE3Transform out;
    out.rotation_ = g.rotation_.transpose();
    out.translation_ = -(out.rotation_ * g.translation_);
    return out;
}

/// Transform taking frame-i camera points to frame-k camera points, given
/// camera-to-world poses indexed by frame.
inline SE3Transform frame_transform(std::span<const SE3Transform> poses, int i, int k) {
    const auto check = [&](int f) {
        if (f < 0 || static_cast<std::size_t>(f) >= poses.size()) {
            throw LookupError("no camera pose for frame " + std::to_string(f));
        }
    };
    check(i);
    check(k);
    if (i == k) return SE3Transform::identity();
    return compose(invert(poses[static_cast<std::size_t>(k)]), poses[static_cast<std::size_t>(i)]);
}

struct CameraIntrinsics {
    double fx = 0.0;
    double fy = 0.0;
    double cx = 0.0;
    double cy = 0.0;
    int width = 0;
    int height = 0;

    bool valid() const noexcept {
        return fx > 0 && fy > 0 && width > 0 && height > 0 && cx >= 0 && cx < width && cy >= 0 && cy < height;
    }

    void validate() const {
        if (!valid()) throw GeometryError("invalid camera intrinsics");
    }

    /// Ray through a pixel, scaled to unit depth.
    Vec3 ray(const Pixel2D& px) const { return {(px.x() - cx) / fx, (px.y() - cy) / fy, 1.0}; }
};

inline Pixel2D project(const CameraIntrinsics& intr, const Point3D& p) {
    if (!(p.z() > 0.0)) throw GeometryError("project: point is behind the camera (z <= 0)");
    return {intr.fx * p.x() / p.z() + intr.cx, intr.fy * p.y() / p.z() + intr.cy};
}

/// d(u, v)/d(x, y, z) at `p`.
inline Eigen::Matrix<double, 2, 3> project_jacobian(const CameraIntrinsics& intr, const Point3D& p) {
    const double iz = 1.0 / p.z();
    Eigen::Matrix<double, 2, 3> j;
    j << intr.fx * iz, 0.0, -intr.fx * p.x() * iz * iz,
         0.0, intr.fy * iz, -intr.fy * p.y() * iz * iz;
    return j;
}

inline Point3D backproject(const CameraIntrinsics& intr, const Pixel2D& px, double depth) {
    if (!(depth > 0.0)) throw GeometryError("backproject: depth must be positive");
    return intr.ray(px) * depth;
}

/// Optimizable per-frame object state. `t_c` is the 3D box center in the
/// camera frame; `yaw` follows the KITTI rotation_y convention (heading
/// direction (cos yaw, 0, -sin yaw)); `size` is (height, width, length).
struct ObjectPose {
    Vec3 t_c = Vec3::Zero();
    double yaw = 0.0;
    Vec3 size = Vec3(1.5, 1.6, 3.9);
    Eigen::VectorXd embedding;

    double height() const { return size(0); }
    double width() const { return size(1); }
    double length() const { return size(2); }

    bool valid() const { return size.minCoeff() > 0.0 && t_c.allFinite() && std::isfinite(yaw); }
};

/// Rotation taking object-frame points (x = width axis, y = height axis,
/// z = length axis) into the camera frame for a given yaw.
inline Mat3 object_rotation(double yaw) { return rot_y(yaw + std::numbers::pi / 2.0); }

/// Rotation of `r` about the camera vertical axis.
inline double vertical_rotation_angle(const Mat3& r) { return std::atan2(r(0, 2), r(0, 0)); }

/// Carries a pose from frame i into frame k: t_k = R t_i + t + v, where
/// g_ik = [R|t] is the camera motion and v is the object displacement in
/// frame-k coordinates. Roll and pitch of R move the translation only.
inline ObjectPose warp_pose(const ObjectPose& pose, const SE3Transform& g_ik, const Vec3& v) {
    ObjectPose out = pose;
    out.t_c = g_ik.apply(pose.t_c) + v;
    out.yaw = wrap_angle(pose.yaw + vertical_rotation_angle(g_ik.rotation()));
    return out;
}

/// Jacobian of warp_pose(...).t_c with respect to pose.t_c.
inline Mat3 warp_jacobian(const SE3Transform& g_ik) { return g_ik.rotation(); }

/// Yaw relative to the camera-to-object viewing ray.
inline double allocentric_angle(const ObjectPose& pose) {
    const double x = pose.t_c.x();
    const double z = pose.t_c.z();
    if (std::hypot(x, z) <= 0.0) throw GeometryError("allocentric_angle: object at the camera origin");
    return wrap_angle(pose.yaw - std::atan2(x, z));
}

}  // namespace monolabel
