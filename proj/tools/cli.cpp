#include "cli.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "cryoar/csv.hpp"
#include "cryoar/ctf.hpp"
#include "cryoar/error.hpp"
#include "cryoar/geometry.hpp"
#include "cryoar/metrics.hpp"
#include "cryoar/model.hpp"
#include "cryoar/mrc.hpp"
#include "cryoar/planarmap.hpp"
#include "cryoar/reconstruct.hpp"
#include "cryoar/simulator.hpp"

namespace cryoar::cli {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct Context {
    json config;
    fs::path out_dir;
    int threads = 1;
};

using Command = std::function<json(const Context&)>;

json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError(path.string() + ": invalid JSON: " + e.what());
    }
}

void write_json_file(const fs::path& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

// --set values are parsed as JSON when possible, otherwise kept as strings.
json parse_value(const std::string& text) {
    try {
        return json::parse(text);
    } catch (const json::parse_error&) {
        return text;
    }
}

void apply_override(json& config, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects KEY=VALUE, got '" + assignment + "'");
    const std::string key = assignment.substr(0, eq);
    json* node = &config;
    std::size_t start = 0;
    // Dotted keys reach into nested objects, e.g. model.d_enc=64.
    for (auto dot = key.find('.'); dot != std::string::npos; dot = key.find('.', start)) {
        const std::string part = key.substr(start, dot - start);
        if (!node->contains(part) || !(*node)[part].is_object()) throw ConfigError("unknown config key '" + key + "'");
        node = &(*node)[part];
        start = dot + 1;
    }
    const std::string leaf = key.substr(start);
    if (!node->contains(leaf)) throw ConfigError("unknown config key '" + key + "'");
    (*node)[leaf] = parse_value(assignment.substr(eq + 1));
}

void merge_checked(json& base, const json& overlay, const std::string& where) {
    if (!overlay.is_object()) throw ConfigError(where + ": config must be a JSON object");
    for (const auto& [key, value] : overlay.items()) {
        if (!base.contains(key)) throw ConfigError(where + ": unknown config key '" + key + "'");
        if (base[key].is_object() && value.is_object() && !base[key].empty())
            merge_checked(base[key], value, where + "." + key);
        else
            base[key] = value;
    }
}

fs::path input_path(const json& cfg, const char* key) {
    if (!cfg.contains(key) || !cfg[key].is_string() || cfg[key].get<std::string>().empty())
        throw ConfigError(std::string("config key '") + key + "' must name an input file");
    fs::path p = cfg[key].get<std::string>();
    if (!fs::is_regular_file(p)) throw IoError(std::string(key) + ": no such file " + p.string());
    return p;
}

std::optional<fs::path> optional_input(const json& cfg, const char* key) {
    if (cfg[key].is_null()) return std::nullopt;
    return input_path(cfg, key);
}

double snr_value(const json& v) {
    if (v.is_null()) return kNoiseless;
    if (v.is_string()) {
        if (v.get<std::string>() == "inf") return kNoiseless;
        throw ConfigError("snr must be a number or \"inf\"");
    }
    return v.get<double>();
}

Range range_value(const json& v, const char* key) {
    if (!v.is_array() || v.size() != 2) throw ConfigError(std::string(key) + " must be a [min, max] pair");
    return {v[0].get<double>(), v[1].get<double>()};
}

RegressionConfig regression_config(const json& cfg) {
    RegressionConfig r;
    const std::string mode = cfg["translation_mode"].get<std::string>();
    if (mode == "normalized")
        r.translation_mode = TranslationMode::Normalized;
    else if (mode == "paper_literal")
        r.translation_mode = TranslationMode::PaperLiteral;
    else
        throw ConfigError("translation_mode must be 'normalized' or 'paper_literal'");
    r.ransac_enabled = cfg["ransac_enabled"].get<bool>();
    r.ransac_threshold = cfg["ransac_threshold"].get<double>();
    r.ransac_iters = cfg["ransac_iters"].get<int>();
    r.min_inlier_fraction = cfg["min_inlier_fraction"].get<double>();
    r.seed = cfg["seed"].get<std::uint64_t>();
    r.validate();
    return r;
}

json regression_defaults() {
    return {{"translation_mode", "normalized"},
            {"ransac_enabled", false},
            {"ransac_threshold", 0.05},
            {"ransac_iters", 256},
            {"min_inlier_fraction", 0.3}};
}

// ---- phantom ----

json phantom_defaults() {
    const PhantomSpec d;
    return {{"grid_size", d.grid_size},
            {"n_blobs", d.n_blobs},
            {"amp_range", {d.amp_range.min, d.amp_range.max}},
            {"sigma_range_px", {d.sigma_range_px.min, d.sigma_range_px.max}},
            {"support_radius_fraction", d.support_radius_fraction},
            {"voxel_size", d.voxel_size},
            {"seed", d.seed}};
}

json cmd_phantom(const Context& ctx) {
    const json& c = ctx.config;
    PhantomSpec spec;
    spec.grid_size = c["grid_size"].get<int>();
    spec.n_blobs = c["n_blobs"].get<int>();
    spec.amp_range = range_value(c["amp_range"], "amp_range");
    spec.sigma_range_px = range_value(c["sigma_range_px"], "sigma_range_px");
    spec.support_radius_fraction = c["support_radius_fraction"].get<double>();
    spec.voxel_size = c["voxel_size"].get<double>();
    spec.seed = c["seed"].get<std::uint64_t>();
    spec.validate();
    const Volume vol = make_phantom(spec);
    mrc::write_volume(ctx.out_dir / "phantom.mrc", vol);
    write_json_file(ctx.out_dir / "phantom_spec.json", c);
    return {{"outputs", {"phantom.mrc", "phantom_spec.json"}}};
}

// ---- simulate ----

json simulate_defaults() {
    const CtfRanges r;
    return {{"volume", ""},
            {"n_particles", 1000},
            {"pixel_size", nullptr},
            {"snr", "inf"},
            {"shift_range_px", 0.0},
            {"ctf_enabled", false},
            {"defocus_range_um", {r.defocus_min_um, r.defocus_max_um}},
            {"voltage_kv", r.voltage_kv},
            {"cs_mm", r.cs},
            {"amplitude_contrast", r.w},
            {"seed", 0}};
}

json cmd_simulate(const Context& ctx) {
    const json& c = ctx.config;
    const fs::path vol_path = input_path(c, "volume");
    DatasetManifest m;
    m.n_particles = c["n_particles"].get<std::size_t>();
    m.snr = snr_value(c["snr"]);
    m.shift_range_px = c["shift_range_px"].get<double>();
    m.ctf_enabled = c["ctf_enabled"].get<bool>();
    m.seed = c["seed"].get<std::uint64_t>();
    SimulationOptions opt;
    const Range defocus = range_value(c["defocus_range_um"], "defocus_range_um");
    opt.ctf_ranges.defocus_min_um = defocus.min;
    opt.ctf_ranges.defocus_max_um = defocus.max;
    opt.ctf_ranges.voltage_kv = c["voltage_kv"].get<double>();
    opt.ctf_ranges.cs = c["cs_mm"].get<double>();
    opt.ctf_ranges.w = c["amplitude_contrast"].get<double>();
    opt.threads = ctx.threads;

    const Volume vol = mrc::read_volume(vol_path);
    m.image_size = static_cast<int>(vol.n);
    m.pixel_size = c["pixel_size"].is_null() ? vol.voxel_size : c["pixel_size"].get<double>();
    m.validate();

    const Dataset ds = simulate_dataset(vol, m, opt);
    mrc::write_stack(ctx.out_dir / "stack.mrc", ds.images);
    write_pose_csv(ctx.out_dir / "poses.csv", ds.poses);
    json outputs = {"stack.mrc", "poses.csv", "manifest.json"};
    if (m.ctf_enabled) {
        write_ctf_csv(ctx.out_dir / "ctf.csv", ds.ctfs);
        outputs.push_back("ctf.csv");
    }
    write_json_file(ctx.out_dir / "manifest.json", to_json(m));
    return {{"outputs", outputs}, {"snr_signal", "post-CTF full-frame variance"}};
}

// ---- train ----

json train_defaults() {
    ModelConfig mc;
    return {{"volume", ""},
            {"model", to_json(mc)},
            {"stages", "default"},
            {"total_steps", 3000},
            {"batch_size", 8},
            {"fixed_samples", 0},
            {"shift_range_px", 0.0},
            {"seed", 0}};
}

json cmd_train(const Context& ctx) {
    const json& c = ctx.config;
    const fs::path vol_path = input_path(c, "volume");
    ModelConfig mc = model_config_from_json(c["model"]);
    std::vector<TrainStage> stages;
    if (c["stages"].is_string()) {
        if (c["stages"].get<std::string>() != "default") throw ConfigError("stages must be \"default\" or a list");
        stages = default_curriculum(c["total_steps"].get<int>());
    } else if (c["stages"].is_array()) {
        for (const auto& s : c["stages"]) stages.push_back(train_stage_from_json(s));
    } else {
        throw ConfigError("stages must be \"default\" or a list");
    }
    if (stages.empty()) throw ConfigError("stages must not be empty");
    for (auto& s : stages) s.validate();

    TrainData data;
    data.phantom = mrc::read_volume(vol_path);
    data.batch_size = c["batch_size"].get<int>();
    data.fixed_samples = c["fixed_samples"].get<std::size_t>();
    data.shift_range_px = c["shift_range_px"].get<double>();
    data.seed = c["seed"].get<std::uint64_t>();

    ToyModel model(mc);
    const TrainResult r = train_toy(model, stages, data);
    model.save(ctx.out_dir / "checkpoint.bin");
    write_loss_trace(ctx.out_dir / "loss_trace.csv", r.trace);
    write_json_file(ctx.out_dir / "model_config.json", to_json(mc));
    json stage_json = json::array();
    for (const auto& s : stages) stage_json.push_back(to_json(s));
    return {{"outputs", {"checkpoint.bin", "loss_trace.csv", "model_config.json"}},
            {"stages_resolved", stage_json},
            {"parameters", model.parameter_count()},
            {"initial_loss", r.trace.front().loss},
            {"final_loss", r.trace.back().loss}};
}

// ---- predict ----

json predict_defaults() {
    json d = {{"stack", ""}, {"checkpoint", ""}, {"model_config", ""}, {"chunk_size", 16}, {"seed", 0}};
    d.update(regression_defaults());
    return d;
}

json cmd_predict(const Context& ctx) {
    const json& c = ctx.config;
    const fs::path stack_path = input_path(c, "stack");
    const fs::path ckpt = input_path(c, "checkpoint");
    const fs::path mc_path = input_path(c, "model_config");
    const RegressionConfig reg = regression_config(c);
    const int chunk = c["chunk_size"].get<int>();

    ToyModel model(model_config_from_json(read_json_file(mc_path)));
    model.load(ckpt);
    const std::vector<Image> stack = mrc::read_stack(stack_path);
    if (chunk < 2) throw ConfigError("chunk_size must be >= 2");
    const std::vector<Pose> poses = infer_poses(model, stack, chunk, reg, ctx.threads);

    // Maps file: the reference view's map from the first chunk, then every target's map.
    std::vector<PlanarMap> maps;
    const std::size_t per = static_cast<std::size_t>(chunk - 1);
    for (std::size_t first = 1; first < std::max<std::size_t>(stack.size(), 2); first += per) {
        std::vector<Image> views{stack[0]};
        for (std::size_t k = first; k < std::min(stack.size(), first + per); ++k) views.push_back(stack[k]);
        std::vector<PlanarMap> m = model.predict_maps(views);
        if (maps.empty()) maps.push_back(m[0]);
        maps.insert(maps.end(), m.begin() + 1, m.end());
        if (stack.size() == 1) break;
    }
    write_planar_maps(ctx.out_dir / "maps.bin", maps);
    write_pose_csv(ctx.out_dir / "poses.csv", poses);
    return {{"outputs", {"maps.bin", "poses.csv"}}, {"n_particles", stack.size()}};
}

// ---- regress ----

json regress_defaults() {
    json d = {{"maps", ""}, {"image_size", nullptr}, {"seed", 0}};
    d.update(regression_defaults());
    return d;
}

json cmd_regress(const Context& ctx) {
    const json& c = ctx.config;
    const fs::path maps_path = input_path(c, "maps");
    const RegressionConfig reg = regression_config(c);
    const std::vector<PlanarMap> maps = read_planar_maps(maps_path);
    if (maps.empty()) throw IoError(maps_path.string() + ": no planar maps");
    const int image_size = c["image_size"].is_null() ? maps[0].width : c["image_size"].get<int>();
    const std::vector<Pose> poses = maps_to_poses(maps, image_size, reg);
    write_pose_csv(ctx.out_dir / "poses.csv", poses);
    return {{"outputs", {"poses.csv"}}, {"n_views", maps.size()}};
}

// ---- reconstruct ----

json reconstruct_defaults() {
    return {{"stack", ""}, {"poses", ""}, {"ctf", nullptr}, {"wiener_eps", nullptr}, {"use_ctf", true}, {"seed", 0}};
}

json cmd_reconstruct(const Context& ctx) {
    const json& c = ctx.config;
    const fs::path stack_path = input_path(c, "stack");
    const fs::path pose_path = input_path(c, "poses");
    const std::optional<fs::path> ctf_path = optional_input(c, "ctf");
    BackprojectOptions opt;
    if (!c["wiener_eps"].is_null()) opt.wiener_eps = c["wiener_eps"].get<double>();
    opt.use_ctf = c["use_ctf"].get<bool>();
    opt.threads = ctx.threads;

    const std::vector<Image> stack = mrc::read_stack(stack_path);
    const std::vector<Pose> poses = read_pose_csv(pose_path);
    std::vector<CtfParams> ctfs;
    if (ctf_path) ctfs = read_ctf_csv(*ctf_path);
    if (poses.size() != stack.size())
        throw ConfigError("stack has " + std::to_string(stack.size()) + " images but the pose file has " +
                          std::to_string(poses.size()) + " rows");
    if (ctf_path && ctfs.size() != stack.size())
        throw ConfigError("stack has " + std::to_string(stack.size()) + " images but the CTF file has " +
                          std::to_string(ctfs.size()) + " rows");

    const Reconstruction rec = backproject_dataset(stack, poses, ctfs, opt);
    mrc::write_volume(ctx.out_dir / "volume.mrc", rec.volume);
    const json diag = diagnostics_json(rec);
    write_json_file(ctx.out_dir / "volume_diagnostics.json", diag);
    return {{"outputs", {"volume.mrc", "volume_diagnostics.json"}}, {"diagnostics", diag}};
}

// ---- eval ----

json eval_defaults() {
    return {{"gt_poses", nullptr},
            {"est_poses", nullptr},
            {"volume", nullptr},
            {"reference_volume", nullptr},
            {"threshold", 0.5},
            {"n_reference_samples", 5000},
            {"seed", 0}};
}

json cmd_eval(const Context& ctx) {
    const json& c = ctx.config;
    const std::optional<fs::path> gt_path = optional_input(c, "gt_poses");
    const std::optional<fs::path> est_path = optional_input(c, "est_poses");
    const std::optional<fs::path> vol_path = optional_input(c, "volume");
    const std::optional<fs::path> ref_path = optional_input(c, "reference_volume");
    if (gt_path.has_value() != est_path.has_value())
        throw ConfigError("gt_poses and est_poses must be given together");
    if (vol_path.has_value() != ref_path.has_value())
        throw ConfigError("volume and reference_volume must be given together");
    if (!gt_path && !vol_path) throw ConfigError("eval needs poses, volumes, or both");
    const double threshold = c["threshold"].get<double>();
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("threshold must lie in (0, 1)");

    json report;
    report["threshold"] = threshold;
    if (gt_path) {
        const std::vector<Pose> gt = read_pose_csv(*gt_path), est = read_pose_csv(*est_path);
        if (gt.size() != est.size())
            throw ConfigError("gt_poses has " + std::to_string(gt.size()) + " rows but est_poses has " +
                              std::to_string(est.size()));
        std::vector<Rotation> rg, re;
        std::vector<Vec2> tg, te;
        for (std::size_t i = 0; i < gt.size(); ++i) {
            rg.push_back(gt[i].rot);
            re.push_back(est[i].rot);
            tg.push_back(gt[i].shift);
            te.push_back(est[i].shift);
        }
        const RotationError r = rotation_fnorm_error(rg, re, c["n_reference_samples"].get<std::size_t>(),
                                                     c["seed"].get<std::uint64_t>(), ctx.threads);
        report["rot_fnorm"] = r.min;
        report["rot_fnorm_median"] = r.median;
        report["rot_references"] = r.references;
        report["trans_err_px"] = translation_error(tg, te);
    }
    if (vol_path) {
        const Volume a = mrc::read_volume(*vol_path), b = mrc::read_volume(*ref_path);
        const FscCurve curve = fsc(a, b);
        const Resolution res = resolution_at_threshold(curve, threshold);
        report["fsc"] = fsc_json(curve);
        report["resolution_A"] = res.angstrom;
        report["resolution_at_nyquist"] = res.at_nyquist;
        write_fsc_text(ctx.out_dir / "fsc.txt", curve);
    }
    write_json_file(ctx.out_dir / "eval.json", report);
    return {{"outputs", vol_path ? json{"eval.json", "fsc.txt"} : json{"eval.json"}}, {"metrics", report}};
}

struct Spec {
    const char* description;
    std::function<json()> defaults;
    Command run;
};

const std::map<std::string, Spec>& commands() {
    static const std::map<std::string, Spec> table = {
        {"phantom", {"Generate a Gaussian-blob phantom volume", phantom_defaults, cmd_phantom}},
        {"simulate", {"Simulate a particle stack with poses, CTF and noise", simulate_defaults, cmd_simulate}},
        {"train", {"Train the toy pose network", train_defaults, cmd_train}},
        {"predict", {"Predict planar maps and poses with a trained network", predict_defaults, cmd_predict}},
        {"regress", {"Regress poses from stored planar maps", regress_defaults, cmd_regress}},
        {"reconstruct", {"Fourier back-projection from known poses", reconstruct_defaults, cmd_reconstruct}},
        {"eval", {"Pose errors and Fourier shell correlation", eval_defaults, cmd_eval}},
    };
    return table;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Cryo-EM pose estimation toolkit"};
    app.require_subcommand(1);
    struct Flags {
        std::string config;
        std::vector<std::string> sets;
        int threads = 1;
        std::optional<std::uint64_t> seed;
        std::string out = ".";
    };
    std::map<std::string, Flags> flags;
    for (const auto& [name, spec] : commands()) {
        CLI::App* sub = app.add_subcommand(name, spec.description);
        Flags& f = flags[name];
        sub->add_option("--config", f.config, "JSON config file");
        sub->add_option("--set", f.sets, "Override a config key (KEY=VALUE, repeatable)");
        sub->add_option("--threads", f.threads, "Worker threads")->check(CLI::PositiveNumber);
        sub->add_option("--seed", f.seed, "Random seed");
        sub->add_option("--out", f.out, "Output directory");
    }

    std::vector<std::string> rev(args.rbegin(), args.rend());
    try {
        app.parse(rev);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    }

    const CLI::App* chosen = app.get_subcommands().front();
    const std::string name = chosen->get_name();
    const Spec& spec = commands().at(name);
    const Flags& f = flags.at(name);
    try {
        const auto start = std::chrono::steady_clock::now();
        Context ctx;
        ctx.config = spec.defaults();
        if (!f.config.empty()) merge_checked(ctx.config, read_json_file(f.config), f.config);
        for (const auto& s : f.sets) apply_override(ctx.config, s);
        if (f.seed) ctx.config["seed"] = *f.seed;
        ctx.threads = f.threads;
        ctx.out_dir = f.out;
        std::error_code ec;
        fs::create_directories(ctx.out_dir, ec);
        if (!fs::is_directory(ctx.out_dir)) throw IoError("cannot create output directory " + ctx.out_dir.string());

        json report = spec.run(ctx);
        report["command"] = name;
        report["config"] = ctx.config;
        report["threads"] = ctx.threads;
        report["wall_time_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        write_json_file(ctx.out_dir / (name + "_report.json"), report);
        out << report.dump(2) << '\n';
        return 0;
    } catch (const NumericalError& e) {
        err << "numerical error: " << e.what() << '\n';
        return 4;
    } catch (const IoError& e) {
        err << "I/O error: " << e.what() << '\n';
        return 3;
    } catch (const std::invalid_argument& e) {
        err << "config error: " << e.what() << '\n';
        return 2;
    } catch (const json::exception& e) {
        err << "config error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }
}

}  // namespace cryoar::cli
