#pragma once

// Readers and writers for KITTI-style sequence files: calib, oxts, pose
// lists, object labels, 16-bit depth PNGs and per-instance mask PNGs.
//
// Sequence layout:
//   calib.txt               "KEY: v v v ..." per line (P0..P3, R0_rect, Tr_velo_to_cam, Tr_imu_to_velo)
//   oxts/%06d.txt           one 30-field oxts line per frame
//   poses.txt               optional, one row-major 3x4 camera-to-world matrix per frame
//   image_2/%06d.png        camera image
//   depth/%06d.png          uint16, meters * 256, 0 = invalid
//   masks/%06d.txt          "instance_id detection_row" per line
//   masks/%06d_<id>.png     8-bit, 0 = background, 255 = object
//   detections/%06d.txt     labels with score
//   labels/%06d.txt         ground-truth labels

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "monolabel/errors.hpp"
#include "monolabel/geom.hpp"
#include "monolabel/grid.hpp"
#include "monolabel/png_io.hpp"
#include "monolabel/render.hpp"

namespace monolabel {

namespace detail {

struct Token {
    std::string_view text;
    int column;  ///< 1-based
};

inline std::vector<Token> split_ws(std::string_view line) {
    std::vector<Token> out;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
        const std::size_t start = i;
        while (i < line.size() && line[i] != ' ' && line[i] != '\t' && line[i] != '\r') ++i;
        if (i > start) out.push_back({line.substr(start, i - start), static_cast<int>(start) + 1});
    }
    return out;
}

/// Lines of a text, without terminators. A trailing newline does not add an empty line.
inline std::vector<std::string_view> split_lines(std::string_view text) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (start < text.size()) {
        const std::size_t end = text.find('\n', start);
        if (end == std::string_view::npos) {
            out.push_back(text.substr(start));
            break;
        }
        out.push_back(text.substr(start, end - start));
        start = end + 1;
    }
    return out;
}

inline double parse_double(const Token& t, const std::string& file, int line) {
    double v = 0.0;
    const char* first = t.text.data();
    const char* last = first + t.text.size();
    if (first != last && *first == '+') ++first;
    const auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || ptr != last || !std::isfinite(v)) {
        throw ParseError(file, line, t.column, "expected a number, got '" + std::string(t.text) + "'");
    }
    return v;
}

inline int parse_int(const Token& t, const std::string& file, int line) {
    int v = 0;
    const auto [ptr, ec] = std::from_chars(t.text.data(), t.text.data() + t.text.size(), v);
    if (ec != std::errc() || ptr != t.text.data() + t.text.size()) {
        throw ParseError(file, line, t.column, "expected an integer, got '" + std::string(t.text) + "'");
    }
    return v;
}

/// Shortest text that parses back to exactly `v`.
inline std::string format_shortest(double v) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

inline std::string format_fixed(double v, int decimals) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
    return buf;
}

inline bool blank(std::string_view line) {
    return line.find_first_not_of(" \t\r") == std::string_view::npos;
}

}  // namespace detail

inline std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("failed writing " + path.string());
}

inline std::string frame_name(int frame) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%06d", frame);
    return buf;
}

// ---- calib -----------------------------------------------------------------

struct CalibRecord {
    std::vector<std::pair<std::string, std::vector<double>>> entries;  ///< file order

    const std::vector<double>* find(std::string_view key) const {
        for (const auto& [k, v] : entries)
            if (k == key) return &v;
        return nullptr;
    }

    void set(const std::string& key, std::vector<double> values) {
        for (auto& [k, v] : entries) {
            if (k == key) {
                v = std::move(values);
                return;
            }
        }
        entries.emplace_back(key, std::move(values));
    }

    /// Pinhole intrinsics from P2. The translation column of P2 (stereo
    /// baseline offset) is not part of the model.
    CameraIntrinsics intrinsics(int width, int height) const {
        const auto* p = find("P2");
        if (!p || p->size() != 12) throw ConfigError("calib has no 12-value P2 entry");
        CameraIntrinsics k{(*p)[0], (*p)[5], (*p)[2], (*p)[6], width, height};
        if (!(k.fx > 0 && k.fy > 0)) throw GeometryError("calib P2 has nonpositive focal length");
        return k;
    }

    std::optional<SE3Transform> transform(std::string_view key) const {
        const auto* v = find(key);
        if (!v || v->size() != 12) return std::nullopt;
        return SE3Transform::from_3x4(std::span<const double, 12>(v->data(), 12));
    }

    /// Rectified-camera-from-IMU transform, when the calib carries the chain.
    std::optional<SE3Transform> imu_to_camera() const {
        auto velo_cam = transform("Tr_velo_to_cam");
        if (!velo_cam) velo_cam = transform("Tr_velo_cam");
        auto imu_velo = transform("Tr_imu_to_velo");
        if (!imu_velo) imu_velo = transform("Tr_imu_velo");
        if (!velo_cam || !imu_velo) return std::nullopt;
        SE3Transform rect;
        const auto* r = find("R0_rect");
        if (!r) r = find("R_rect");
        if (r && r->size() == 9) {
            Mat3 m;
            for (int i = 0; i < 9; ++i) m(i / 3, i % 3) = (*r)[static_cast<std::size_t>(i)];
            rect = SE3Transform::from_approx(m, Vec3::Zero());
        }
        return rect * *velo_cam * *imu_velo;
    }
};

inline CalibRecord parse_calib(std::string_view text, const std::string& file = "") {
    CalibRecord c;
    int p2_line = 0;
    int p2_col = 0;
    const auto lines = detail::split_lines(text);
    for (std::size_t li = 0; li < lines.size(); ++li) {
        const int line_no = static_cast<int>(li) + 1;
        const auto tokens = detail::split_ws(lines[li]);
        if (tokens.empty()) continue;
        std::string key(tokens[0].text);
        if (!key.empty() && key.back() == ':') key.pop_back();
        if (key.empty()) throw ParseError(file, line_no, tokens[0].column, "empty calib key");
        std::vector<double> values;
        for (std::size_t t = 1; t < tokens.size(); ++t) values.push_back(detail::parse_double(tokens[t], file, line_no));
        if (key == "P2") {
            p2_line = line_no;
            p2_col = tokens.size() > 1 ? tokens[1].column : tokens[0].column;
        }
        c.entries.emplace_back(std::move(key), std::move(values));
    }
    const auto* p2 = c.find("P2");
    if (!p2) throw ParseError(file, static_cast<int>(lines.size()) + 1, 1, "missing calib key P2");
    if (p2->size() != 12) throw ParseError(file, p2_line, p2_col, "P2 must have 12 values");
    if (!((*p2)[0] > 0 && (*p2)[5] > 0)) throw ParseError(file, p2_line, p2_col, "P2 focal lengths must be positive");
    return c;
}

inline std::string write_calib(const CalibRecord& c) {
    std::string out;
    for (const auto& [k, v] : c.entries) {
        out += k + ":";
        for (double x : v) out += " " + detail::format_shortest(x);
        out += "\n";
    }
    return out;
}

inline CalibRecord calib_from_intrinsics(const CameraIntrinsics& k) {
    CalibRecord c;
    const std::vector<double> p{k.fx, 0, k.cx, 0, 0, k.fy, k.cy, 0, 0, 0, 1, 0};
    for (const char* name : {"P0", "P1", "P2", "P3"}) c.entries.emplace_back(name, p);
    c.entries.emplace_back("R0_rect", std::vector<double>{1, 0, 0, 0, 1, 0, 0, 0, 1});
    return c;
}

// ---- oxts ------------------------------------------------------------------

struct OxtsRecord {
    std::array<double, 30> fields{};

    double lat() const { return fields[0]; }
    double lon() const { return fields[1]; }
    double alt() const { return fields[2]; }
    double roll() const { return fields[3]; }
    double pitch() const { return fields[4]; }
    double yaw() const { return fields[5]; }
};

inline std::vector<OxtsRecord> parse_oxts(std::string_view text, const std::string& file = "") {
    std::vector<OxtsRecord> out;
    const auto lines = detail::split_lines(text);
    for (std::size_t li = 0; li < lines.size(); ++li) {
        const int line_no = static_cast<int>(li) + 1;
        if (detail::blank(lines[li])) continue;
        const auto tokens = detail::split_ws(lines[li]);
        if (tokens.size() != 30) {
            const int col = tokens.size() > 30 ? tokens[30].column : static_cast<int>(lines[li].size()) + 1;
            throw ParseError(file, line_no, col, "oxts line has " + std::to_string(tokens.size()) + " fields, expected 30");
        }
        OxtsRecord r;
        for (std::size_t i = 0; i < 30; ++i) r.fields[i] = detail::parse_double(tokens[i], file, line_no);
        out.push_back(r);
    }
    return out;
}

inline std::string write_oxts(const std::vector<OxtsRecord>& records) {
    std::string out;
    for (const auto& r : records) {
        for (std::size_t i = 0; i < 30; ++i) {
            if (i) out += ' ';
            out += detail::format_shortest(r.fields[i]);
        }
        out += '\n';
    }
    return out;
}

constexpr double kEarthRadius = 6378137.0;

/// IMU-to-world poses (x forward, y left, z up) from GPS/IMU records, via a
/// Mercator projection scaled by cos(lat0); the first pose is the identity.
inline std::vector<SE3Transform> oxts_imu_poses(const std::vector<OxtsRecord>& records) {
    std::vector<SE3Transform> raw;
    if (records.empty()) return raw;
    constexpr double deg = std::numbers::pi / 180.0;
    const double scale = std::cos(records.front().lat() * deg);
    for (const auto& r : records) {
        const double mx = scale * r.lon() * deg * kEarthRadius;
        const double my = scale * kEarthRadius * std::log(std::tan((90.0 + r.lat()) * std::numbers::pi / 360.0));
        const Mat3 rot = rot_z(r.yaw()) * rot_y(r.pitch()) * rot_x(r.roll());
        raw.emplace_back(SE3Transform::from_approx(rot, Vec3(mx, my, r.alt())));
    }
    const SE3Transform inv0 = invert(raw.front());
    std::vector<SE3Transform> out;
    out.reserve(raw.size());
    out.push_back(SE3Transform::identity());
    for (std::size_t i = 1; i < raw.size(); ++i) out.push_back(inv0 * raw[i]);
    return out;
}

/// Axis permutation from IMU (x fwd, y left, z up) to camera (x right, y down, z fwd).
inline SE3Transform default_imu_to_camera() {
    Mat3 r;
    r << 0, -1, 0,
         0, 0, -1,
         1, 0, 0;
    return SE3Transform(r, Vec3::Zero());
}

/// Camera-to-world poses, world = camera frame at time 0.
inline std::vector<SE3Transform> oxts_camera_poses(const std::vector<OxtsRecord>& records,
                                                   const SE3Transform& imu_to_cam = default_imu_to_camera()) {
    const SE3Transform cam_to_imu = invert(imu_to_cam);
    std::vector<SE3Transform> out;
    for (const auto& p : oxts_imu_poses(records)) out.push_back(imu_to_cam * p * cam_to_imu);
    return out;
}

// ---- pose list -------------------------------------------------------------

inline std::vector<SE3Transform> parse_pose_file(std::string_view text, const std::string& file = "") {
    std::vector<SE3Transform> out;
    const auto lines = detail::split_lines(text);
    for (std::size_t li = 0; li < lines.size(); ++li) {
        const int line_no = static_cast<int>(li) + 1;
        if (detail::blank(lines[li])) continue;
        const auto tokens = detail::split_ws(lines[li]);
        if (tokens.size() != 12) {
            throw ParseError(file, line_no, 1, "pose line has " + std::to_string(tokens.size()) + " values, expected 12");
        }
        std::array<double, 12> v;
        for (std::size_t i = 0; i < 12; ++i) v[i] = detail::parse_double(tokens[i], file, line_no);
        out.push_back(SE3Transform::from_3x4(v));
    }
    return out;
}

inline std::string write_pose_file(const std::vector<SE3Transform>& poses) {
    std::string out;
    for (const auto& p : poses) {
        for (int r = 0; r < 3; ++r) {
            for (int c = 0; c < 4; ++c) {
                if (r || c) out += ' ';
                out += detail::format_shortest(c < 3 ? p.rotation()(r, c) : p.translation()(r));
            }
        }
        out += '\n';
    }
    return out;
}

// ---- labels ----------------------------------------------------------------

struct LabelRecord {
    std::string type = "Car";
    double truncated = 0.0;
    int occluded = 0;
    double alpha = 0.0;
    std::array<double, 4> bbox{0, 0, 0, 0};  ///< left, top, right, bottom
    double h = 0.0, w = 0.0, l = 0.0;
    double x = 0.0, y = 0.0, z = 0.0;  ///< bottom-face center, camera frame
    double rotation_y = 0.0;
    std::optional<double> score;

    bool dont_care() const { return type == "DontCare"; }
    double bbox_height() const { return bbox[3] - bbox[1]; }
};

inline std::vector<LabelRecord> parse_labels(std::string_view text, const std::string& file = "") {
    std::vector<LabelRecord> out;
    const auto lines = detail::split_lines(text);
    for (std::size_t li = 0; li < lines.size(); ++li) {
        const int n = static_cast<int>(li) + 1;
        if (detail::blank(lines[li])) continue;
        const auto t = detail::split_ws(lines[li]);
        if (t.size() != 15 && t.size() != 16) {
            throw ParseError(file, n, 1, "label line has " + std::to_string(t.size()) + " fields, expected 15 or 16");
        }
        LabelRecord r;
        r.type = std::string(t[0].text);
        r.truncated = detail::parse_double(t[1], file, n);
        r.occluded = detail::parse_int(t[2], file, n);
        r.alpha = detail::parse_double(t[3], file, n);
        for (int i = 0; i < 4; ++i) r.bbox[static_cast<std::size_t>(i)] = detail::parse_double(t[4 + i], file, n);
        r.h = detail::parse_double(t[8], file, n);
        r.w = detail::parse_double(t[9], file, n);
        r.l = detail::parse_double(t[10], file, n);
        r.x = detail::parse_double(t[11], file, n);
        r.y = detail::parse_double(t[12], file, n);
        r.z = detail::parse_double(t[13], file, n);
        r.rotation_y = detail::parse_double(t[14], file, n);
        if (t.size() == 16) r.score = detail::parse_double(t[15], file, n);
        if (!r.dont_care()) {
            if (!(r.h > 0 && r.w > 0 && r.l > 0)) throw ParseError(file, n, t[8].column, "object dimensions must be positive");
            if (std::abs(r.rotation_y) > std::numbers::pi + 0.005) {
                throw ParseError(file, n, t[14].column, "rotation_y outside [-pi, pi]");
            }
        }
        out.push_back(std::move(r));
    }
    return out;
}

inline std::string write_label_line(const LabelRecord& r) {
    char buf[512];
    std::snprintf(buf, sizeof(buf), "%s %.2f %d %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f %.2f", r.type.c_str(),
                  r.truncated, r.occluded, r.alpha, r.bbox[0], r.bbox[1], r.bbox[2], r.bbox[3], r.h, r.w, r.l, r.x, r.y, r.z,
                  r.rotation_y);
    std::string line = buf;
    if (r.score) line += " " + detail::format_fixed(*r.score, 4);
    return line;
}

inline std::string write_labels(const std::vector<LabelRecord>& labels) {
    std::string out;
    for (const auto& r : labels) out += write_label_line(r) + "\n";
    return out;
}

/// Label files of a directory keyed by frame number. Only names of the form
/// %06d.txt are read.
inline std::map<int, std::vector<LabelRecord>> load_label_dir(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw IoError("not a directory: " + dir.string());
    std::map<int, std::vector<LabelRecord>> out;
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
        const std::string stem = e.path().stem().string();
        if (e.path().extension() != ".txt" || stem.size() != 6 ||
            !std::all_of(stem.begin(), stem.end(), [](unsigned char c) { return std::isdigit(c); })) {
            continue;
        }
        out[std::stoi(stem)] = parse_labels(read_text_file(e.path()), e.path().string());
    }
    return out;
}

/// Box-center pose of a label (labels store the bottom-face center).
inline ObjectPose location_convention(const LabelRecord& r) {
    ObjectPose p;
    p.t_c = Vec3(r.x, r.y - r.h / 2.0, r.z);
    p.yaw = r.rotation_y;
    p.size = Vec3(r.h, r.w, r.l);
    return p;
}

/// Inverse of location_convention; alpha is recomputed from the pose.
inline LabelRecord label_from_pose(const ObjectPose& p, const std::array<double, 4>& bbox,
                                   std::optional<double> score = std::nullopt, const std::string& type = "Car") {
    LabelRecord r;
    r.type = type;
    r.bbox = bbox;
    r.h = p.size(0);
    r.w = p.size(1);
    r.l = p.size(2);
    r.x = p.t_c.x();
    r.y = p.t_c.y() + p.size(0) / 2.0;
    r.z = p.t_c.z();
    r.rotation_y = wrap_angle(p.yaw);
    r.alpha = std::hypot(r.x, r.z) > 0.0 ? allocentric_angle(p) : 0.0;
    r.score = score;
    return r;
}

// ---- depth -----------------------------------------------------------------

inline DepthMap depth_from_u16(const Grid<std::uint16_t>& raw) {
    DepthMap d;
    d.depth = Grid<double>(raw.width(), raw.height(), 0.0);
    for (std::size_t i = 0; i < raw.size(); ++i) d.depth.data()[i] = raw.data()[i] / 256.0;
    return d;
}

/// Meters to the 1/256 m encoding; nonpositive or nonfinite -> 0, clamped to 65535.
inline Grid<std::uint16_t> depth_to_u16(const DepthMap& d) {
    Grid<std::uint16_t> raw(d.depth.width(), d.depth.height(), 0);
    for (std::size_t i = 0; i < raw.size(); ++i) {
        const double m = d.depth.data()[i];
        if (!(m > 0.0) || !std::isfinite(m)) continue;
        raw.data()[i] = static_cast<std::uint16_t>(std::clamp(std::lround(m * 256.0), 1L, 65535L));
    }
    return raw;
}

inline DepthMap load_depth(const std::filesystem::path& path) { return depth_from_u16(read_png_gray16(path)); }

inline void write_depth(const std::filesystem::path& path, const DepthMap& d) { write_png_gray16(path, depth_to_u16(d)); }

// ---- masks -----------------------------------------------------------------

struct InstanceMask {
    int instance_id = 0;
    int detection = -1;  ///< row in the frame's detection file
    Grid<std::uint8_t> mask;  ///< 1 = object
};

using MaskSet = std::vector<InstanceMask>;

inline std::filesystem::path mask_index_path(const std::filesystem::path& dir, int frame) {
    return dir / (frame_name(frame) + ".txt");
}

inline std::filesystem::path mask_png_path(const std::filesystem::path& dir, int frame, int instance) {
    return dir / (frame_name(frame) + "_" + std::to_string(instance) + ".png");
}

/// Masks of one frame; a frame without an index file has no masks.
inline MaskSet load_masks(const std::filesystem::path& dir, int frame) {
    MaskSet out;
    const auto index = mask_index_path(dir, frame);
    if (!std::filesystem::exists(index)) return out;
    const std::string text = read_text_file(index);
    const auto lines = detail::split_lines(text);
    for (std::size_t li = 0; li < lines.size(); ++li) {
        const int n = static_cast<int>(li) + 1;
        if (detail::blank(lines[li])) continue;
        const auto t = detail::split_ws(lines[li]);
        if (t.size() != 2) throw ParseError(index.string(), n, 1, "mask index line needs 'instance_id detection_row'");
        InstanceMask m;
        m.instance_id = detail::parse_int(t[0], index.string(), n);
        m.detection = detail::parse_int(t[1], index.string(), n);
        const Grid<std::uint8_t> raw = read_png_gray8(mask_png_path(dir, frame, m.instance_id));
        m.mask = Grid<std::uint8_t>(raw.width(), raw.height(), 0);
        for (std::size_t i = 0; i < raw.size(); ++i) m.mask.data()[i] = raw.data()[i] > 127 ? 1 : 0;
        if (!out.empty() && !m.mask.same_shape(out.front().mask)) {
            throw IoError(mask_png_path(dir, frame, m.instance_id).string() + ": mask size differs from the frame's other masks");
        }
        out.push_back(std::move(m));
    }
    return out;
}

inline void write_masks(const std::filesystem::path& dir, int frame, const MaskSet& masks) {
    std::string index;
    for (const auto& m : masks) {
        index += std::to_string(m.instance_id) + " " + std::to_string(m.detection) + "\n";
        Grid<std::uint8_t> raw(m.mask.width(), m.mask.height(), 0);
        for (std::size_t i = 0; i < raw.size(); ++i) raw.data()[i] = m.mask.data()[i] ? 255 : 0;
        write_png_gray8(mask_png_path(dir, frame, m.instance_id), raw);
    }
    write_text_file(mask_index_path(dir, frame), index);
}

}  // namespace monolabel
