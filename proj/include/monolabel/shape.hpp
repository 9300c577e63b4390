#pragma once

// Shape embedding decoding. A ShapeSpace is a linear (PCA-style) model:
// vertices = mean + sum_j e_j * basis_j in a unit box, then scaled per axis
// by (width, height, length) -> (x, y, z).

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "monolabel/errors.hpp"
#include "monolabel/geom.hpp"

namespace monolabel {

using Face = std::array<int, 3>;
using VertexMatrix = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

struct ShapeSpace {
    VertexMatrix mean_vertices;          ///< N x 3, unit box centered at origin
    std::vector<VertexMatrix> basis;     ///< d components, each N x 3
    std::vector<Face> faces;

    int vertex_count() const { return static_cast<int>(mean_vertices.rows()); }
    int dims() const { return static_cast<int>(basis.size()); }

    void validate() const {
        const int n = vertex_count();
        if (n == 0) throw ShapeError("shape space has no vertices");
        for (const auto& b : basis) {
            if (b.rows() != n) throw ShapeError("shape basis component has wrong vertex count");
        }
        for (const auto& f : faces) {
            for (int idx : f) {
                if (idx < 0 || idx >= n) throw ShapeError("face index out of range");
            }
        }
        const Vec3 lo = mean_vertices.colwise().minCoeff().transpose();
        const Vec3 hi = mean_vertices.colwise().maxCoeff().transpose();
        if ((lo + Vec3::Constant(0.5)).cwiseAbs().maxCoeff() > 1e-6 ||
            (hi - Vec3::Constant(0.5)).cwiseAbs().maxCoeff() > 1e-6) {
            throw ShapeError("mean shape is not normalized to the unit box [-0.5, 0.5]^3");
        }
    }
};

struct Mesh {
    VertexMatrix vertices;  ///< N x 3 meters
    std::vector<Face> faces;

    bool empty() const { return vertices.rows() == 0; }
};

/// Unit box with 12 outward-wound triangles and no deformation modes.
inline ShapeSpace cuboid_space() {
    ShapeSpace s;
    s.mean_vertices.resize(8, 3);
    for (int i = 0; i < 8; ++i) {
        s.mean_vertices(i, 0) = (i & 1) ? 0.5 : -0.5;
        s.mean_vertices(i, 1) = (i & 2) ? 0.5 : -0.5;
        s.mean_vertices(i, 2) = (i & 4) ? 0.5 : -0.5;
    }
    // Counter-clockwise seen from outside.
    s.faces = {
        Face{0, 4, 6}, Face{0, 6, 2},  // -x
        Face{1, 3, 7}, Face{1, 7, 5},  // +x
        Face{0, 1, 5}, Face{0, 5, 4},  // -y
        Face{2, 6, 7}, Face{2, 7, 3},  // +y
        Face{0, 2, 3}, Face{0, 3, 1},  // -z
        Face{4, 5, 7}, Face{4, 7, 6},  // +z
    };
    return s;
}

/// Scale applied to object-frame axes (x, y, z) for a (h, w, l) size.
inline Vec3 axis_scale(const Vec3& size) { return {size(1), size(0), size(2)}; }

/// Unscaled unit-box vertices for embedding `e`.
inline VertexMatrix shape_vertices(const ShapeSpace& space, const Eigen::VectorXd& e) {
    if (e.size() != space.dims()) {
        throw DimensionError("shape embedding has dimension " + std::to_string(e.size()) + ", space expects " +
                             std::to_string(space.dims()));
    }
    VertexMatrix v = space.mean_vertices;
    for (int j = 0; j < space.dims(); ++j) v += e(j) * space.basis[static_cast<std::size_t>(j)];
    return v;
}

inline Mesh decode(const ShapeSpace& space, const Eigen::VectorXd& e, const Vec3& size) {
    if (!(size.minCoeff() > 0.0)) throw ShapeError("decode: size components must be positive");
    Mesh m;
    m.vertices = shape_vertices(space, e) * axis_scale(size).asDiagonal();
    m.faces = space.faces;
    for (const auto& f : m.faces) {
        const Vec3 a = m.vertices.row(f[0]).transpose();
        const Vec3 b = m.vertices.row(f[1]).transpose();
        const Vec3 c = m.vertices.row(f[2]).transpose();
        if (0.5 * (b - a).cross(c - a).norm() <= 1e-12) throw ShapeError("decode produced a degenerate face");
    }
    return m;
}

inline Point3D mesh_center(const Mesh& m) {
    if (m.empty()) throw ShapeError("mesh_center: empty mesh");
    return m.vertices.colwise().mean().transpose();
}

/// Mesh vertices expressed in the camera frame for a pose.
inline VertexMatrix posed_vertices(const Mesh& m, const ObjectPose& pose) {
    const Mat3 r = object_rotation(pose.yaw);
    VertexMatrix out = m.vertices * r.transpose();
    out.rowwise() += pose.t_c.transpose();
    return out;
}

/// Signed volume of a closed triangle mesh (positive when outward-wound).
inline double signed_volume(const Mesh& m) {
    double vol = 0.0;
    for (const auto& f : m.faces) {
        const Vec3 a = m.vertices.row(f[0]).transpose();
        const Vec3 b = m.vertices.row(f[1]).transpose();
        const Vec3 c = m.vertices.row(f[2]).transpose();
        vol += a.dot(b.cross(c)) / 6.0;
    }
    return vol;
}

// Asset file layout (little-endian):
//   char[4] "MLSS", u32 version (=1), u32 N, u32 M, u32 d,
//   f32[N*3] mean vertices, f32[d*N*3] basis, i32[M*3] faces.

namespace detail {

template <typename T>
void write_le(std::ostream& os, T value) {
    static_assert(std::endian::native == std::endian::little, "big-endian hosts are not supported");
    os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_le(std::istream& is, const std::string& path) {
    T value{};
    if (!is.read(reinterpret_cast<char*>(&value), sizeof(T))) throw IoError(path + ": truncated shape asset");
    return value;
}

}  // namespace detail

inline void save_shape_space(const ShapeSpace& space, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path.string());
    os.write("MLSS", 4);
    detail::write_le<std::uint32_t>(os, 1);
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(space.vertex_count()));
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(space.faces.size()));
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(space.dims()));
    for (int i = 0; i < space.vertex_count(); ++i)
        for (int c = 0; c < 3; ++c) detail::write_le<float>(os, static_cast<float>(space.mean_vertices(i, c)));
    for (const auto& b : space.basis)
        for (int i = 0; i < b.rows(); ++i)
            for (int c = 0; c < 3; ++c) detail::write_le<float>(os, static_cast<float>(b(i, c)));
    for (const auto& f : space.faces)
        for (int idx : f) detail::write_le<std::int32_t>(os, idx);
    if (!os) throw IoError("failed writing " + path.string());
}

inline ShapeSpace load_shape_space(const std::filesystem::path& path) {
    const std::string name = path.string();
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + name);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "MLSS", 4) != 0) throw IoError(name + ": not a shape asset");
    if (detail::read_le<std::uint32_t>(is, name) != 1) throw IoError(name + ": unsupported shape asset version");
    const auto n = detail::read_le<std::uint32_t>(is, name);
    const auto m = detail::read_le<std::uint32_t>(is, name);
    const auto d = detail::read_le<std::uint32_t>(is, name);
    ShapeSpace s;
    s.mean_vertices.resize(n, 3);
    for (std::uint32_t i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c) s.mean_vertices(i, c) = detail::read_le<float>(is, name);
    s.basis.assign(d, VertexMatrix(n, 3));
    for (auto& b : s.basis)
        for (std::uint32_t i = 0; i < n; ++i)
            for (int c = 0; c < 3; ++c) b(i, c) = detail::read_le<float>(is, name);
    s.faces.resize(m);
    for (auto& f : s.faces)
        for (int& idx : f) idx = detail::read_le<std::int32_t>(is, name);
    s.validate();
    return s;
}

}  // namespace monolabel
