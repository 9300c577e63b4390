// monolabel: track, refine, evaluate and synthesize monocular 3D box labels.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "monolabel/config.hpp"
#include "monolabel/eval.hpp"
#include "monolabel/kitti_io.hpp"
#include "monolabel/png_io.hpp"
#include "monolabel/refine.hpp"
#include "monolabel/synth.hpp"

namespace fs = std::filesystem;
using namespace monolabel;

namespace {

struct CommonFlags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<int> jobs;
    std::string out;
    std::string format = "json";
};

void add_common(CLI::App* cmd, CommonFlags& f, bool with_out) {
    cmd->add_option("--config", f.config, "JSON config file")->check(CLI::ExistingFile);
    cmd->add_option("--seed", f.seed, "random seed");
    cmd->add_option("--jobs", f.jobs, "worker threads (default: available cores)")->check(CLI::PositiveNumber);
    if (with_out) cmd->add_option("--out", f.out, "output directory")->required();
}

/// defaults < config file < flags
PipelineConfig resolve(const CommonFlags& f) {
    PipelineConfig cfg;
    if (!f.config.empty()) cfg = load_config(f.config, cfg);
    if (f.seed) cfg.seed = *f.seed;
    if (f.jobs) cfg.jobs = *f.jobs;
    cfg.motion.seed = cfg.seed;
    cfg.validate();
    return cfg;
}

void print_config(const char* command, const PipelineConfig& cfg, const CommonFlags& f) {
    nlohmann::ordered_json j;
    j["command"] = command;
    j["config_file"] = f.config.empty() ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(f.config);
    j["effective"] = config_to_json(cfg);
    std::cerr << j.dump() << "\n";
}

void require_dir(const fs::path& p) {
    if (!fs::is_directory(p)) throw IoError("not a directory: " + p.string());
}

void make_dir(const fs::path& p) {
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec) throw IoError("cannot create " + p.string() + ": " + ec.message());
}

// ---- commands --------------------------------------------------------------

int cmd_track(const fs::path& dataset, const CommonFlags& f) {
    const PipelineConfig cfg = resolve(f);
    print_config("track", cfg, f);
    const SequenceData seq = load_sequence(dataset);
    const TrackSet ts = build_tracks(seq, cfg.motion, cfg.eval.object_class);
    make_dir(f.out);
    nlohmann::ordered_json j;
    j["frames"] = seq.frames.size();
    j["motion"] = config_to_json(cfg)["motion"];
    j["seed"] = cfg.seed;
    j["tracks"] = tracks_json(ts);
    write_text_file(fs::path(f.out) / "tracks.json", j.dump(2) + "\n");
    std::cout << ts.tracks.size() << " tracks over " << seq.frames.size() << " frames\n";
    return 0;
}

int cmd_refine(const fs::path& dataset, const CommonFlags& f) {
    const PipelineConfig cfg = resolve(f);
    print_config("refine", cfg, f);
    require_dir(dataset);
    const SequenceData seq = load_sequence(dataset);
    SequenceResult r = refine_sequence(seq, cuboid_space(), cfg.weights, cfg.priors, cfg.refine, cfg.motion,
                                       cfg.effective_jobs(), cfg.eval.object_class);
    nlohmann::ordered_json config = config_to_json(cfg);
    config.erase("jobs");  // output must not depend on the job count
    r.report["config"] = config;
    write_sequence_result(f.out, r);
    std::cout << "refined " << r.report["refined"] << " of " << r.report["items"] << " detections, " << r.report["failed"]
              << " failed\n";
    return 0;
}

/// Motion class of every ground-truth row from a synth truth index.
std::map<int, std::vector<MotionClass>> load_motion_index(const fs::path& file) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text_file(file));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(file.string() + ": " + e.what());
    }
    std::map<int, MotionClass> object_motion;
    for (const auto& o : j.at("objects")) {
        object_motion[o.at("id").get<int>()] = o.at("motion").get<std::string>() == "moving" ? MotionClass::moving : MotionClass::static_object;
    }
    std::map<int, std::vector<MotionClass>> out;
    const auto& rows = j.at("label_objects");
    for (std::size_t f = 0; f < rows.size(); ++f) {
        for (const auto& id : rows[f]) {
            const auto it = object_motion.find(id.get<int>());
            if (it == object_motion.end()) throw ConfigError(file.string() + ": unknown object id " + id.dump());
            out[static_cast<int>(f)].push_back(it->second);
        }
    }
    return out;
}

int cmd_eval(const fs::path& pred_dir, const fs::path& gt_dir, const CommonFlags& f, std::optional<int> recall_points,
             std::optional<double> iou_threshold, bool motion_split, const std::string& truth_file, bool depth_stats) {
    PipelineConfig cfg = resolve(f);
    if (recall_points) cfg.eval.recall_points = *recall_points;
    if (iou_threshold) cfg.eval.iou_threshold = *iou_threshold;
    cfg.validate();
    print_config("eval", cfg, f);
    const auto gt = load_label_dir(gt_dir);
    const auto pred = load_label_dir(pred_dir);
    for (const auto& [frame, _] : pred) {
        if (!gt.count(frame)) throw LookupError("prediction frame " + frame_name(frame) + " has no ground-truth file in " + gt_dir.string());
    }
    std::map<int, std::vector<MotionClass>> motion;
    if (motion_split) {
        const fs::path index = truth_file.empty() ? gt_dir.parent_path() / "truth.json" : fs::path(truth_file);
        motion = load_motion_index(index);
    }
    std::vector<EvalFrame> frames;
    for (const auto& [frame, labels] : gt) {
        EvalFrame ef;
        ef.gt = labels;
        if (const auto it = pred.find(frame); it != pred.end()) ef.detections = it->second;
        if (motion_split) {
            ef.gt_motion = motion[frame];
            if (ef.gt_motion.size() != ef.gt.size()) {
                throw ConfigError("motion index has " + std::to_string(ef.gt_motion.size()) + " rows for frame " + frame_name(frame) +
                                  ", labels have " + std::to_string(ef.gt.size()));
            }
        }
        frames.push_back(std::move(ef));
    }
    const EvalReport rep = evaluate(frames, cfg.eval, motion_split, depth_stats);
    const std::string text = f.format == "table" ? report_table(rep) : report_json(rep).dump(2) + "\n";
    if (!f.out.empty()) {
        make_dir(f.out);
        write_text_file(fs::path(f.out) / (f.format == "table" ? "eval.txt" : "eval.json"), text);
    }
    std::cout << text;
    return 0;
}

int cmd_synth(const std::string& spec_file, const CommonFlags& f) {
    SceneSpec s;
    if (!spec_file.empty()) {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(read_text_file(spec_file));
        } catch (const nlohmann::json::parse_error& e) {
            throw ConfigError(spec_file + ": " + e.what());
        }
        s = scene_from_json(j);
    }
    if (f.seed) s.seed = *f.seed;
    s.validate();
    std::cerr << nlohmann::ordered_json{{"command", "synth"}, {"scene", scene_to_json(s)}}.dump() << "\n";
    make_dir(f.out);
    const GenerateSummary g = generate(s, f.out);
    std::cout << "wrote " << g.frames << " frames, " << g.labels << " labels, " << g.detections << " detections\n";
    return 0;
}

int cmd_stats(const fs::path& label_dir, const CommonFlags& f, const std::string& object_class) {
    const auto labels = load_label_dir(label_dir);
    std::vector<std::vector<LabelRecord>> frames;
    for (const auto& [_, l] : labels) frames.push_back(l);
    const LabelStats st = label_statistics(frames, object_class);
    nlohmann::ordered_json j;
    j["priors"] = {{"size_mean", {st.priors.size_mean.x(), st.priors.size_mean.y(), st.priors.size_mean.z()}},
                   {"y_plane", st.priors.y_plane}};
    const std::string text = j.dump(2) + "\n";
    if (!f.out.empty()) {
        make_dir(f.out);
        write_text_file(fs::path(f.out) / "priors.json", text);
    }
    std::cout << text;
    std::cerr << st.count << " " << object_class << " labels\n";
    return 0;
}

void draw_line(Grid<Rgb>& img, Vec2 a, Vec2 b, Rgb c) {
    const int n = static_cast<int>(std::ceil(std::max(std::abs(b.x() - a.x()), std::abs(b.y() - a.y())))) + 1;
    if (n > 20000) return;
    for (int i = 0; i <= n; ++i) {
        const Vec2 p = a + (b - a) * (static_cast<double>(i) / n);
        const int x = static_cast<int>(std::floor(p.x())), y = static_cast<int>(std::floor(p.y()));
        if (x >= 0 && y >= 0 && x < img.width() && y < img.height()) img(x, y) = c;
    }
}

/// Projects the 12 edges of each box; boxes with a corner behind the camera are skipped.
void draw_boxes(Grid<Rgb>& img, const std::vector<LabelRecord>& labels, const CameraIntrinsics& k, Rgb color) {
    static constexpr int edges[12][2] = {{0, 1}, {1, 2}, {2, 3}, {3, 0}, {4, 5}, {5, 6}, {6, 7}, {7, 4}, {0, 4}, {1, 5}, {2, 6}, {3, 7}};
    for (const auto& l : labels) {
        if (l.type == "DontCare") continue;
        const ObjectPose p = location_convention(l);
        const Mat3 r = object_rotation(p.yaw);
        std::array<Vec2, 8> px;
        bool visible = true;
        for (int c = 0; c < 8; ++c) {
            const Vec3 local(((c & 1) ^ ((c >> 1) & 1) ? 0.5 : -0.5) * l.w, (c & 4 ? 0.5 : -0.5) * l.h, (c & 2 ? 0.5 : -0.5) * l.l);
            const Vec3 cam = r * local + p.t_c;
            if (cam.z() <= 0.1) visible = false;
            else px[static_cast<std::size_t>(c)] = project(k, cam);
        }
        if (!visible) continue;
        for (const auto& e : edges) draw_line(img, px[static_cast<std::size_t>(e[0])], px[static_cast<std::size_t>(e[1])], color);
    }
}

int cmd_overlay(const fs::path& dataset, const fs::path& label_dir, const CommonFlags& f) {
    require_dir(dataset);
    const auto labels = load_label_dir(label_dir);
    const CalibRecord calib = parse_calib(read_text_file(dataset / "calib.txt"), (dataset / "calib.txt").string());
    std::optional<std::map<int, std::vector<LabelRecord>>> gt;
    if (fs::is_directory(dataset / "labels") && fs::canonical(dataset / "labels") != fs::canonical(label_dir)) {
        gt = load_label_dir(dataset / "labels");
    }
    make_dir(f.out);
    int written = 0;
    for (const auto& [frame, rows] : labels) {
        const fs::path img_path = dataset / "image_2" / (frame_name(frame) + ".png");
        if (!fs::exists(img_path)) throw IoError("missing image " + img_path.string());
        const Image gray = read_png_intensity(img_path);
        Grid<Rgb> img(gray.width(), gray.height());
        for (std::size_t i = 0; i < gray.size(); ++i) {
            const auto v = static_cast<std::uint8_t>(std::lround(std::clamp(gray.data()[i], 0.0f, 1.0f) * 255.0f));
            img.data()[i] = Rgb{v, v, v};
        }
        const CameraIntrinsics k = calib.intrinsics(gray.width(), gray.height());
        if (gt) {
            if (const auto it = gt->find(frame); it != gt->end()) draw_boxes(img, it->second, k, Rgb{40, 220, 40});
        }
        draw_boxes(img, rows, k, Rgb{230, 40, 40});
        write_png_rgb8(fs::path(f.out) / (frame_name(frame) + ".png"), img);
        ++written;
    }
    std::cout << "wrote " << written << " overlays\n";
    return 0;
}

int report_error(const char* type, const std::string& message) {
    std::cerr << nlohmann::ordered_json{{"error", {{"type", type}, {"message", message}}}}.dump() << "\n";
    return 2;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Refine noisy monocular 3D car detections into pseudo-labels using multi-view, motion-aware fitting."};
    app.require_subcommand(1);

    CommonFlags common;
    std::string dataset, pred_dir, gt_dir, label_dir, spec_file, truth_file, object_class = "Car";
    std::optional<int> recall_points;
    std::optional<double> iou_threshold;
    bool motion_split = false, depth_stats = false;

    auto* track = app.add_subcommand("track", "associate detections into tracks and classify their motion");
    track->add_option("dataset", dataset, "sequence directory")->required();
    add_common(track, common, true);

    auto* refine = app.add_subcommand("refine", "refine detections into pseudo-labels");
    refine->add_option("dataset", dataset, "sequence directory")->required();
    add_common(refine, common, true);

    auto* eval = app.add_subcommand("eval", "average precision of predicted labels against ground truth");
    eval->add_option("pred", pred_dir, "directory of predicted label files")->required();
    eval->add_option("gt", gt_dir, "directory of ground-truth label files")->required();
    add_common(eval, common, false);
    eval->add_option("--out", common.out, "also write the report here");
    eval->add_option("--recall-points", recall_points, "11 or 40")->check(CLI::IsMember({11, 40}));
    eval->add_option("--iou-threshold", iou_threshold, "IoU for a true positive")->check(CLI::Range(0.0, 1.0));
    eval->add_flag("--motion-split", motion_split, "split AP by ground-truth motion class");
    eval->add_option("--truth", truth_file, "motion index (default: truth.json next to the ground-truth directory)");
    eval->add_flag("--depth-stats", depth_stats, "per-object depth error of matched boxes");
    eval->add_option("--format", common.format, "json or table")->check(CLI::IsMember({"json", "table"}));

    auto* synth = app.add_subcommand("synth", "generate a synthetic sequence");
    synth->add_option("spec", spec_file, "scene JSON (default scene when omitted)")->check(CLI::ExistingFile);
    synth->add_option("--seed", common.seed, "overrides the scene seed");
    synth->add_option("--out", common.out, "output directory")->required();

    auto* stats = app.add_subcommand("stats", "mean size and ground height of a label corpus, as a priors config");
    stats->add_option("labels", label_dir, "directory of label files")->required();
    stats->add_option("--class", object_class, "object class");
    stats->add_option("--out", common.out, "also write priors.json here");

    auto* overlay = app.add_subcommand("overlay", "draw projected boxes onto the sequence images");
    overlay->add_option("dataset", dataset, "sequence directory")->required();
    overlay->add_option("labels", label_dir, "directory of label files to draw")->required();
    overlay->add_option("--out", common.out, "output directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (track->parsed()) return cmd_track(dataset, common);
        if (refine->parsed()) return cmd_refine(dataset, common);
        if (eval->parsed()) return cmd_eval(pred_dir, gt_dir, common, recall_points, iou_threshold, motion_split, truth_file, depth_stats);
        if (synth->parsed()) return cmd_synth(spec_file, common);
        if (stats->parsed()) return cmd_stats(label_dir, common, object_class);
        if (overlay->parsed()) return cmd_overlay(dataset, label_dir, common);
    } catch (const ParseError& e) {
        return report_error("parse", e.what());
    } catch (const IoError& e) {
        return report_error("io", e.what());
    } catch (const ConfigError& e) {
        return report_error("config", e.what());
    } catch (const LookupError& e) {
        return report_error("lookup", e.what());
    } catch (const Error& e) {
        return report_error("error", e.what());
    } catch (const nlohmann::json::exception& e) {
        return report_error("config", e.what());
    } catch (const std::filesystem::filesystem_error& e) {
        return report_error("io", e.what());
    }
    return 1;
}
