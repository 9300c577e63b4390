#pragma once

// Pipeline configuration file: a JSON object with one section per module.
//
//   {
//     "seed": 0,
//     "jobs": 4,
//     "refine":  {"n_views": 4, "window": 15, "steps": 100, ...},
//     "weights": {"sil": 1, "mv_sil": 1, "depth": 0.5, "photo": 10, "size": 0.5, "y": 1},
//     "priors":  {"size_mean": [1.53, 1.63, 3.88], "y_plane": 1.65},
//     "motion":  {"gate_radius": 3, "max_misses": 3, ...},
//     "eval":    {"iou_threshold": 0.5, "recall_points": 40, ...}
//   }
//
// Every key is optional. Unknown keys are errors.

#include <cstdint>
#include <filesystem>
#include <string>
#include <thread>

#include <json.hpp>

#include "monolabel/errors.hpp"
#include "monolabel/eval.hpp"
#include "monolabel/kitti_io.hpp"
#include "monolabel/losses.hpp"
#include "monolabel/motion.hpp"
#include "monolabel/refine.hpp"

namespace monolabel {

struct PipelineConfig {
    std::uint64_t seed = 0;
    int jobs = 0;  ///< 0 = available cores
    RefineConfig refine;
    LossWeights weights;
    Priors priors;
    MotionConfig motion;
    EvalConfig eval;

    int effective_jobs() const {
        if (jobs > 0) return jobs;
        return std::max(1u, std::thread::hardware_concurrency());
    }

    void validate() const {
        if (jobs < 0) throw ConfigError("jobs must be nonnegative");
        refine.validate();
        weights.validate();
        priors.validate();
        motion.validate();
        eval.validate();
    }
};

namespace detail {

template <typename T>
void read_key(const nlohmann::json& section, const std::string& where, const char* key, T& out) {
    if (!section.contains(key)) return;
    try {
        out = section.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(where + "." + key + ": wrong type (" + section.at(key).dump() + ")");
    }
}

inline void read_vec3(const nlohmann::json& section, const std::string& where, const char* key, Vec3& out) {
    if (!section.contains(key)) return;
    std::vector<double> v;
    read_key(section, where, key, v);
    if (v.size() != 3) throw ConfigError(where + "." + key + ": needs 3 values");
    out = Vec3(v[0], v[1], v[2]);
}

inline void check_keys(const nlohmann::json& section, const std::string& where, std::initializer_list<const char*> known) {
    if (!section.is_object()) throw ConfigError(where + " must be an object");
    for (const auto& [k, _] : section.items()) {
        if (std::find_if(known.begin(), known.end(), [&](const char* n) { return k == n; }) == known.end()) {
            throw ConfigError("unknown config key " + (where.empty() ? k : where + "." + k));
        }
    }
}

}  // namespace detail

/// Applies the keys present in `j` on top of `cfg`.
inline void merge_config(PipelineConfig& cfg, const nlohmann::json& j) {
    using detail::check_keys;
    using detail::read_key;
    check_keys(j, "", {"seed", "jobs", "refine", "weights", "priors", "motion", "eval"});
    read_key(j, "", "seed", cfg.seed);
    read_key(j, "", "jobs", cfg.jobs);
    if (j.contains("refine")) {
        const auto& s = j.at("refine");
        check_keys(s, "refine",
                   {"n_views", "window", "steps", "lr_translation", "lr_size", "depth_gate_radius", "depth_min", "depth_max",
                    "patience", "plateau_tolerance", "crop_pad", "sigma", "size_min", "size_max", "min_depth_pixels",
                    "mad_factor", "use_photo"});
        auto& r = cfg.refine;
        read_key(s, "refine", "n_views", r.n_views);
        read_key(s, "refine", "window", r.window);
        read_key(s, "refine", "steps", r.steps);
        read_key(s, "refine", "lr_translation", r.lr_translation);
        read_key(s, "refine", "lr_size", r.lr_size);
        read_key(s, "refine", "depth_gate_radius", r.depth_gate_radius);
        read_key(s, "refine", "depth_min", r.depth_min);
        read_key(s, "refine", "depth_max", r.depth_max);
        read_key(s, "refine", "patience", r.patience);
        read_key(s, "refine", "plateau_tolerance", r.plateau_tolerance);
        read_key(s, "refine", "crop_pad", r.crop_pad);
        read_key(s, "refine", "sigma", r.sigma);
        read_key(s, "refine", "size_min", r.size_min);
        read_key(s, "refine", "size_max", r.size_max);
        read_key(s, "refine", "min_depth_pixels", r.min_depth_pixels);
        read_key(s, "refine", "mad_factor", r.mad_factor);
        read_key(s, "refine", "use_photo", r.use_photo);
    }
    if (j.contains("weights")) {
        const auto& s = j.at("weights");
        check_keys(s, "weights", {"sil", "mv_sil", "depth", "photo", "size", "y"});
        auto& w = cfg.weights;
        read_key(s, "weights", "sil", w.sil);
        read_key(s, "weights", "mv_sil", w.mv_sil);
        read_key(s, "weights", "depth", w.depth);
        read_key(s, "weights", "photo", w.photo);
        read_key(s, "weights", "size", w.size);
        read_key(s, "weights", "y", w.y);
    }
    if (j.contains("priors")) {
        const auto& s = j.at("priors");
        check_keys(s, "priors", {"size_mean", "y_plane"});
        detail::read_vec3(s, "priors", "size_mean", cfg.priors.size_mean);
        read_key(s, "priors", "y_plane", cfg.priors.y_plane);
    }
    if (j.contains("motion")) {
        const auto& s = j.at("motion");
        check_keys(s, "motion", {"gate_radius", "max_misses", "moving_threshold", "ransac_iterations", "inlier_threshold"});
        auto& m = cfg.motion;
        read_key(s, "motion", "gate_radius", m.gate_radius);
        read_key(s, "motion", "max_misses", m.max_misses);
        read_key(s, "motion", "moving_threshold", m.moving_threshold);
        read_key(s, "motion", "ransac_iterations", m.ransac_iterations);
        read_key(s, "motion", "inlier_threshold", m.inlier_threshold);
    }
    if (j.contains("eval")) {
        const auto& s = j.at("eval");
        check_keys(s, "eval", {"iou_threshold", "recall_points", "object_class", "min_height", "max_occlusion", "max_truncation"});
        auto& e = cfg.eval;
        read_key(s, "eval", "iou_threshold", e.iou_threshold);
        read_key(s, "eval", "recall_points", e.recall_points);
        read_key(s, "eval", "object_class", e.object_class);
        read_key(s, "eval", "min_height", e.min_height);
        read_key(s, "eval", "max_occlusion", e.max_occlusion);
        read_key(s, "eval", "max_truncation", e.max_truncation);
    }
    cfg.motion.seed = cfg.seed;
}

inline PipelineConfig load_config(const std::filesystem::path& file, PipelineConfig base = {}) {
    const std::string text = read_text_file(file);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(file.string() + ": " + e.what());
    }
    merge_config(base, j);
    return base;
}

inline nlohmann::ordered_json config_to_json(const PipelineConfig& c) {
    nlohmann::ordered_json j;
    j["seed"] = c.seed;
    j["jobs"] = c.jobs;
    const auto& r = c.refine;
    j["refine"] = {{"n_views", r.n_views},
                   {"window", r.window},
                   {"steps", r.steps},
                   {"lr_translation", r.lr_translation},
                   {"lr_size", r.lr_size},
                   {"depth_gate_radius", r.depth_gate_radius},
                   {"depth_min", r.depth_min},
                   {"depth_max", r.depth_max},
                   {"patience", r.patience},
                   {"plateau_tolerance", r.plateau_tolerance},
                   {"crop_pad", r.crop_pad},
                   {"sigma", r.sigma},
                   {"size_min", r.size_min},
                   {"size_max", r.size_max},
                   {"min_depth_pixels", r.min_depth_pixels},
                   {"mad_factor", r.mad_factor},
                   {"use_photo", r.use_photo}};
    const auto& w = c.weights;
    j["weights"] = {{"sil", w.sil}, {"mv_sil", w.mv_sil}, {"depth", w.depth}, {"photo", w.photo}, {"size", w.size}, {"y", w.y}};
    j["priors"] = {{"size_mean", {c.priors.size_mean.x(), c.priors.size_mean.y(), c.priors.size_mean.z()}},
                   {"y_plane", c.priors.y_plane}};
    const auto& m = c.motion;
    j["motion"] = {{"gate_radius", m.gate_radius},
                   {"max_misses", m.max_misses},
                   {"moving_threshold", m.moving_threshold},
                   {"ransac_iterations", m.ransac_iterations},
                   {"inlier_threshold", m.inlier_threshold}};
    const auto& e = c.eval;
    j["eval"] = {{"iou_threshold", e.iou_threshold},
                 {"recall_points", e.recall_points},
                 {"object_class", e.object_class},
                 {"min_height", e.min_height},
                 {"max_occlusion", e.max_occlusion},
                 {"max_truncation", e.max_truncation}};
    return j;
}

// ---- label statistics ------------------------------------------------------

struct LabelStats {
    int count = 0;
    Priors priors;
};

/// Mean size and mean ground-contact height over all labels of a class.
inline LabelStats label_statistics(const std::vector<std::vector<LabelRecord>>& frames, const std::string& object_class = "Car") {
    LabelStats s;
    Vec3 size = Vec3::Zero();
    double y = 0.0;
    for (const auto& f : frames) {
        for (const auto& l : f) {
            if (l.type != object_class) continue;
            size += Vec3(l.h, l.w, l.l);
            y += l.y;
            ++s.count;
        }
    }
    if (s.count == 0) throw LookupError("no " + object_class + " labels to compute statistics from");
    s.priors.size_mean = size / s.count;
    s.priors.y_plane = y / s.count;
    return s;
}

}  // namespace monolabel
