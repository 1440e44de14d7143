#pragma once

#include <chrono>
#include <unistd.h>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include <json.hpp>

#include "dzsi/checkpoint.hpp"
#include "dzsi/classifiers.hpp"
#include "dzsi/eval.hpp"
#include "dzsi/latent_ops.hpp"
#include "dzsi/oracle.hpp"
#include "dzsi/samplers.hpp"
#include "dzsi/training.hpp"

namespace dzsi {

namespace fs = std::filesystem;
using nlohmann::json;

enum class ExperimentKind { Circle1d, Corner2d, Size, Oracle };

inline ExperimentKind experiment_kind_from_string(const std::string& s) {
    if (s == "circle-1d") return ExperimentKind::Circle1d;
    if (s == "corner-2d") return ExperimentKind::Corner2d;
    if (s == "size") return ExperimentKind::Size;
    if (s == "oracle") return ExperimentKind::Oracle;
    throw config_error("unknown experiment kind: " + s);
}

// Fully serializable experiment description; a config plus the code version
// determines every output byte.
struct ExperimentConfig {
    ExperimentKind kind = ExperimentKind::Circle1d;
    uint64_t seed = 1234;
    std::string out_dir = "run";

    // dataset
    int n_train = 5000;
    int n_heldout = 512;
    int image_size = 32;
    double radius = 2.0;
    LatentSpec latent;
    SizeDatasetConfig size_cfg;

    // schedule
    ScheduleConfig schedule;

    // models
    int denoiser_channels = 16;
    int denoiser_stages = 1;
    int temb_dim = 128;
    int classifier_channels = 8;
    int classifier_temb = 64;
    bool classifier_spectral_norm = false;
    int eval_channels = 8;

    // training budget
    DdpmTrainOptions ddpm;
    TrainOptions classifier_train;
    TrainOptions eval_train;

    // sampling / metrics
    int sample_n = 2000;
    SamplerKind sampler = SamplerKind::Ddpm;
    int substeps = 0;
    double lambda = 30.0;
    std::vector<double> lambda_grid = {3.5, 10.0, 30.0, 50.0, 75.0, 100.0};
    int bins = 20;
    int heatmap_grid = 32;

    json to_json() const;
    static ExperimentConfig from_json(const json& j);
    uint64_t hash() const;

    ModelSpec denoiser_spec() const {
        ModelSpec s;
        s.modality = Modality::Image;
        s.input_shape = {image_size, image_size, 1};
        s.hidden = {denoiser_channels};
        s.res_stages = denoiser_stages;
        s.temb_dim = temb_dim;
        s.head = HeadKind::EpsV;
        s.schedule_T = schedule.T;
        return s;
    }

    ModelSpec classifier_spec() const {
        ModelSpec s;
        s.modality = Modality::Image;
        s.input_shape = {image_size, image_size, 1};
        s.hidden = {classifier_channels};
        s.temb_dim = classifier_temb;
        s.head = HeadKind::Logits;
        s.categories = kind == ExperimentKind::Corner2d ? 4 : 2;
        s.spectral_norm = classifier_spectral_norm;
        s.schedule_T = schedule.T;
        return s;
    }

    ModelSpec eval_spec() const {
        ModelSpec s;
        s.modality = Modality::Image;
        s.input_shape = {image_size, image_size, 1};
        s.hidden = {eval_channels};
        s.temb_dim = 0;
        s.head = kind == ExperimentKind::Size ? HeadKind::Scalar : HeadKind::Logits;
        s.categories = kind == ExperimentKind::Corner2d ? 4 : 2;
        s.schedule_T = schedule.T;
        return s;
    }
};

inline json ExperimentConfig::to_json() const {
    json j;
    const char* kinds[] = {"circle-1d", "corner-2d", "size", "oracle"};
    j["kind"] = kinds[static_cast<int>(kind)];
    j["seed"] = seed;
    j["out_dir"] = out_dir;
    j["dataset"] = {{"n_train", n_train},
                    {"n_heldout", n_heldout},
                    {"image_size", image_size},
                    {"radius", radius},
                    {"regions", latent.regions},
                    {"delta", latent.delta},
                    {"epsilon", latent.epsilon},
                    {"factors", latent.factors},
                    {"r_min", size_cfg.r_min},
                    {"r_max", size_cfg.r_max}};
    j["schedule"] = schedule_config_to_json(schedule);
    j["denoiser"] = {{"channels", denoiser_channels},
                     {"res_stages", denoiser_stages},
                     {"temb_dim", temb_dim}};
    j["classifier"] = {{"channels", classifier_channels},
                       {"temb_dim", classifier_temb},
                       {"spectral_norm", classifier_spectral_norm}};
    j["eval_model"] = {{"channels", eval_channels}};
    j["train"] = {{"ddpm_steps", ddpm.steps},
                  {"batch", ddpm.batch},
                  {"lr", ddpm.lr},
                  {"ema", ddpm.ema_rate},
                  {"vlb_weight", ddpm.vlb_weight},
                  {"classifier_steps", classifier_train.steps},
                  {"classifier_batch", classifier_train.batch},
                  {"classifier_lr", classifier_train.lr},
                  {"eval_steps", eval_train.steps},
                  {"eval_batch", eval_train.batch},
                  {"eval_lr", eval_train.lr}};
    j["sample"] = {{"n", sample_n},
                   {"sampler", sampler == SamplerKind::Ddpm ? "ddpm" : "ddim"},
                   {"substeps", substeps},
                   {"lambda", lambda}};
    j["lambda_grid"] = lambda_grid;
    j["metrics"] = {{"bins", bins}, {"heatmap_grid", heatmap_grid}};
    return j;
}

inline ExperimentConfig ExperimentConfig::from_json(const json& j) {
    ExperimentConfig c;
    c.kind = experiment_kind_from_string(j.value("kind", "circle-1d"));
    c.seed = j.value("seed", uint64_t{1234});
    c.out_dir = j.value("out_dir", "run");
    if (j.contains("dataset")) {
        const auto& d = j.at("dataset");
        c.n_train = d.value("n_train", c.n_train);
        c.n_heldout = d.value("n_heldout", c.n_heldout);
        c.image_size = d.value("image_size", c.image_size);
        c.radius = d.value("radius", c.radius);
        if (d.contains("regions"))
            c.latent.regions = d.at("regions").get<std::vector<std::array<double, 2>>>();
        c.latent.delta = d.value("delta", c.latent.delta);
        c.latent.epsilon = d.value("epsilon", c.latent.epsilon);
        c.latent.factors = d.value("factors", c.kind == ExperimentKind::Corner2d ? 2 : 1);
        c.size_cfg.r_min = d.value("r_min", c.size_cfg.r_min);
        c.size_cfg.r_max = d.value("r_max", c.size_cfg.r_max);
        c.size_cfg.size = c.image_size;
    }
    if (j.contains("schedule")) c.schedule = schedule_config_from_json(j.at("schedule"));
    if (j.contains("denoiser")) {
        c.denoiser_channels = j.at("denoiser").value("channels", c.denoiser_channels);
        c.denoiser_stages = j.at("denoiser").value("res_stages", c.denoiser_stages);
        c.temb_dim = j.at("denoiser").value("temb_dim", c.temb_dim);
    }
    if (j.contains("classifier")) {
        c.classifier_channels = j.at("classifier").value("channels", c.classifier_channels);
        c.classifier_temb = j.at("classifier").value("temb_dim", c.classifier_temb);
        c.classifier_spectral_norm =
            j.at("classifier").value("spectral_norm", c.classifier_spectral_norm);
    }
    if (j.contains("eval_model"))
        c.eval_channels = j.at("eval_model").value("channels", c.eval_channels);
    if (j.contains("train")) {
        const auto& t = j.at("train");
        c.ddpm.steps = t.value("ddpm_steps", c.ddpm.steps);
        c.ddpm.batch = t.value("batch", c.ddpm.batch);
        c.ddpm.lr = t.value("lr", c.ddpm.lr);
        c.ddpm.ema_rate = t.value("ema", c.ddpm.ema_rate);
        c.ddpm.vlb_weight = t.value("vlb_weight", c.ddpm.vlb_weight);
        c.classifier_train.steps = t.value("classifier_steps", c.classifier_train.steps);
        c.classifier_train.batch = t.value("classifier_batch", c.classifier_train.batch);
        c.classifier_train.lr = t.value("classifier_lr", c.classifier_train.lr);
        c.eval_train.steps = t.value("eval_steps", c.eval_train.steps);
        c.eval_train.batch = t.value("eval_batch", c.eval_train.batch);
        c.eval_train.lr = t.value("eval_lr", c.eval_train.lr);
    }
    if (j.contains("sample")) {
        const auto& s = j.at("sample");
        c.sample_n = s.value("n", c.sample_n);
        c.sampler = sampler_from_string(s.value("sampler", "ddpm"));
        c.substeps = s.value("substeps", c.substeps);
        c.lambda = s.value("lambda", c.lambda);
    }
    if (j.contains("lambda_grid")) c.lambda_grid = j.at("lambda_grid").get<std::vector<double>>();
    if (j.contains("metrics")) {
        c.bins = j.at("metrics").value("bins", c.bins);
        c.heatmap_grid = j.at("metrics").value("heatmap_grid", c.heatmap_grid);
    }
    return c;
}

inline uint64_t ExperimentConfig::hash() const {
    const std::string s = to_json().dump();
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw config_error("cannot read config " + path);
    json j;
    try {
        j = json::parse(f);
    } catch (const std::exception& e) {
        throw config_error(std::string("config parse error: ") + e.what());
    }
    return ExperimentConfig::from_json(j);
}

// ---------------------------------------------------------------------------
// Run directory: lock file, append-only manifest, artifact paths.
// ---------------------------------------------------------------------------

class RunDir {
  public:
    explicit RunDir(const std::string& dir, bool lock = true) : dir_(dir) {
        fs::create_directories(dir_);
        fs::create_directories(dir_ / "data");
        fs::create_directories(dir_ / "ckpt");
        fs::create_directories(dir_ / "samples");
        fs::create_directories(dir_ / "reports");
        if (lock) {
            lock_path_ = dir_ / ".lock";
            std::error_code ec;
            if (fs::exists(lock_path_))
                throw artifact_error("run directory is locked: " + lock_path_.string());
            std::ofstream f(lock_path_);
            f << "pid " << ::getpid() << "\n";
            locked_ = true;
        }
    }

    ~RunDir() {
        if (locked_) {
            std::error_code ec;
            fs::remove(lock_path_, ec);
        }
    }

    RunDir(const RunDir&) = delete;
    RunDir& operator=(const RunDir&) = delete;

    fs::path path(const std::string& rel) const { return dir_ / rel; }

    void append_manifest(const std::string& stage, uint64_t config_hash, double wall_s,
                         const std::vector<std::string>& artifacts, const json& summary) {
        json manifest = json::array();
        const fs::path mp = dir_ / "manifest.json";
        if (fs::exists(mp)) {
            std::ifstream f(mp);
            manifest = json::parse(f);
        }
        json row;
        row["stage"] = stage;
        row["config_hash"] = config_hash;
        row["wall_seconds"] = wall_s;
        row["artifacts"] = artifacts;
        row["summary"] = summary;
        manifest.push_back(row);
        std::ofstream f(mp);
        f << manifest.dump(2) << "\n";
    }

    json read_manifest() const {
        const fs::path mp = dir_ / "manifest.json";
        if (!fs::exists(mp)) throw artifact_error("no manifest in " + dir_.string());
        std::ifstream f(mp);
        return json::parse(f);
    }

  private:
    fs::path dir_;
    fs::path lock_path_;
    bool locked_ = false;
};

namespace detail {

struct StageTimer {
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
};

inline void require_artifact(const fs::path& p, const std::string& what) {
    if (!fs::exists(p))
        throw artifact_error("missing upstream artifact (" + what + "): " + p.string());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

inline json stage_gen_data(const ExperimentConfig& cfg, RunDir& run) {
    detail::StageTimer timer;
    CircleDatasetConfig dc{cfg.image_size, cfg.radius};
    Rng root(cfg.seed);
    LabeledSet train, heldout;
    switch (cfg.kind) {
        case ExperimentKind::Circle1d:
            train = sample_circle_set(cfg.n_train, cfg.latent, dc, root.fork(1).state());
            heldout = sample_circle_set(cfg.n_heldout, cfg.latent, dc, root.fork(2).state());
            break;
        case ExperimentKind::Corner2d: {
            LatentSpec ls = cfg.latent;
            ls.factors = 2;
            train = sample_corner_set(cfg.n_train, ls, dc, root.fork(1).state());
            heldout = sample_corner_set(cfg.n_heldout, ls, dc, root.fork(2).state());
            break;
        }
        case ExperimentKind::Size: {
            SizeDatasetConfig sc = cfg.size_cfg;
            sc.size = cfg.image_size;
            train = sample_size_set(cfg.n_train, cfg.latent, sc, root.fork(1).state());
            heldout = sample_size_set(cfg.n_heldout, cfg.latent, sc, root.fork(2).state());
            break;
        }
        case ExperimentKind::Oracle:
            throw config_error("the oracle experiment has no dataset stage");
    }
    require(train.leakage_free(cfg.latent.delta), "generated training set leaks mild samples");
    const auto train_path = run.path("data/train.dzds");
    const auto held_path = run.path("data/heldout.dzds");
    save_labeled_set_packed(train, train_path.string());
    save_labeled_set_packed(heldout, held_path.string());
    json summary = {{"train_size", train.size()}, {"heldout_size", heldout.size()}};
    run.append_manifest("gen-data", cfg.hash(), timer.seconds(),
                        {train_path.string(), held_path.string()}, summary);
    return summary;
}

inline json stage_train_ddpm(const ExperimentConfig& cfg, RunDir& run) {
    detail::StageTimer timer;
    detail::require_artifact(run.path("data/train.dzds"), "training set; run gen-data");
    auto train = load_labeled_set_packed(run.path("data/train.dzds").string());
    auto sched = make_schedule(cfg.schedule);
    ConvDenoiser<float> net(cfg.denoiser_spec(), Rng(cfg.seed).fork(0xDD).state());
    DdpmTrainOptions opt = cfg.ddpm;
    opt.seed = Rng(cfg.seed).fork(0xDE).state();
    ParamSet<float> ema;
    auto stats = train_ddpm(net, train.x, sched, opt, ema, [](int step, double loss) {
        std::fprintf(stderr, "[train-ddpm] step %d  loss %.5f\n", step, loss);
    });
    Checkpoint ck;
    ck.model_spec = net.spec();
    ck.schedule = cfg.schedule;
    ck.meta = {{"stage", "train-ddpm"},
               {"steps", opt.steps},
               {"batch", opt.batch},
               {"lr", opt.lr},
               {"ema_rate", opt.ema_rate},
               {"final_loss", stats.final_loss},
               {"seed", cfg.seed}};
    ck.raw = net.params();
    ck.ema = ema;
    const auto path = run.path("ckpt/denoiser.dzsi");
    save_checkpoint(path.string(), ck);
    json summary = {{"final_loss", stats.final_loss}, {"steps", opt.steps}};
    run.append_manifest("train-ddpm", cfg.hash(), timer.seconds(), {path.string()}, summary);
    return summary;
}

inline json stage_train_classifier(const ExperimentConfig& cfg, RunDir& run,
                                   std::optional<bool> spectral_override = std::nullopt) {
    detail::StageTimer timer;
    detail::require_artifact(run.path("data/train.dzds"), "training set; run gen-data");
    auto train = load_labeled_set_packed(run.path("data/train.dzds").string());
    auto sched = make_schedule(cfg.schedule);
    ModelSpec spec = cfg.classifier_spec();
    if (spectral_override) spec.spectral_norm = *spectral_override;
    TrainOptions opt = cfg.classifier_train;
    opt.seed = Rng(cfg.seed).fork(0xC1).state();
    opt.spectral_norm = spec.spectral_norm;
    auto cls = train_noisy_classifier(train, sched, spec, opt);
    Checkpoint ck;
    ck.model_spec = cls.net->spec();
    ck.schedule = cfg.schedule;
    ck.meta = {{"stage", "train-classifier"},
               {"steps", opt.steps},
               {"train_accuracy", cls.train_accuracy},
               {"val_accuracy", cls.val_accuracy},
               {"spectral_norm", spec.spectral_norm}};
    ck.raw = cls.net->params();
    ck.ema = cls.net->params();
    const auto path = run.path("ckpt/classifier.dzsi");
    save_checkpoint(path.string(), ck);
    json summary = {{"val_accuracy", cls.val_accuracy}, {"spectral_norm", spec.spectral_norm}};
    run.append_manifest("train-classifier", cfg.hash(), timer.seconds(), {path.string()}, summary);
    return summary;
}

inline json stage_train_eval(const ExperimentConfig& cfg, RunDir& run) {
    detail::StageTimer timer;
    detail::require_artifact(run.path("data/train.dzds"), "training set; run gen-data");
    auto train = load_labeled_set_packed(run.path("data/train.dzds").string());
    TrainOptions opt = cfg.eval_train;
    opt.seed = Rng(cfg.seed).fork(0xE1).state();
    const EvalMode mode =
        cfg.kind == ExperimentKind::Size ? EvalMode::Regress : EvalMode::Classify;
    auto model = train_eval_model(train, cfg.eval_spec(), opt, mode);
    Checkpoint ck;
    ck.model_spec = model.net->spec();
    ck.schedule = cfg.schedule;
    ck.meta = {{"stage", "train-eval"},
               {"mode", mode == EvalMode::Regress ? "regress" : "classify"},
               {"temperature", model.temperature},
               {"train_metric", model.train_metric},
               {"val_metric", model.val_metric}};
    ck.raw = model.net->params();
    ck.ema = model.net->params();
    const auto path = run.path("ckpt/eval.dzsi");
    save_checkpoint(path.string(), ck);
    json summary = {{"val_metric", model.val_metric}};
    run.append_manifest("train-eval", cfg.hash(), timer.seconds(), {path.string()}, summary);
    return summary;
}

inline EvalModel load_eval_model(RunDir& run) {
    detail::require_artifact(run.path("ckpt/eval.dzsi"), "evaluation model; run train-eval");
    auto ck = load_checkpoint(run.path("ckpt/eval.dzsi").string());
    EvalModel m;
    m.net = classifier_from(ck);
    m.temperature = ck.meta.value("temperature", 1.0);
    return m;
}

inline json stage_calibrate(const ExperimentConfig& cfg, RunDir& run) {
    detail::StageTimer timer;
    auto model = load_eval_model(run);
    if (model.is_regression()) {
        json summary = {{"skipped", "regression mode needs no temperature"}};
        run.append_manifest("calibrate", cfg.hash(), timer.seconds(), {}, summary);
        return summary;
    }
    detail::require_artifact(run.path("data/heldout.dzds"), "held-out set; run gen-data");
    auto heldout = load_labeled_set_packed(run.path("data/heldout.dzds").string());
    const double T = calibrate_temperature(model, heldout);
    // rewrite the checkpoint with the calibrated temperature
    auto ck = load_checkpoint(run.path("ckpt/eval.dzsi").string());
    ck.meta["temperature"] = T;
    save_checkpoint(run.path("ckpt/eval.dzsi").string(), ck);
    json summary = {{"temperature", T}};
    run.append_manifest("calibrate", cfg.hash(), timer.seconds(),
                        {run.path("ckpt/eval.dzsi").string()}, summary);
    return summary;
}

inline json stage_filter(const ExperimentConfig& cfg, RunDir& run, int keep_per_side) {
    detail::StageTimer timer;
    detail::require_artifact(run.path("data/train.dzds"), "training set; run gen-data");
    detail::require_artifact(run.path("data/heldout.dzds"), "held-out set; run gen-data");
    auto pool = load_labeled_set_packed(run.path("data/train.dzds").string());
    auto heldout = load_labeled_set_packed(run.path("data/heldout.dzds").string());
    FilterConfig fc;
    fc.keep_per_side = keep_per_side;
    fc.stage1_train = cfg.eval_train;
    fc.member_train = cfg.eval_train;
    auto out = ensemble_filter(pool, fc, heldout, Rng(cfg.seed).fork(0xF1).state());
    const auto path = run.path("data/filtered.dzds");
    save_labeled_set_packed(out.kept, path.string());
    json rep = {{"input_size", out.report.input_size},
                {"stage1_size", out.report.stage1_size},
                {"ensemble_size", out.report.ensemble_size},
                {"final_size", out.report.final_size},
                {"per_side", out.report.per_side},
                {"disagreement_count", out.report.disagreement_count},
                {"tau1", out.report.tau1},
                {"tau2", out.report.tau2},
                {"keep_truncated", out.report.keep_truncated},
                {"leakage_bounds", out.report.leakage_bounds},
                {"seed", Rng(cfg.seed).fork(0xF1).state()}};
    std::ofstream rf(run.path("reports/filter.json"));
    rf << rep.dump(2) << "\n";
    run.append_manifest("filter", cfg.hash(), timer.seconds(),
                        {path.string(), run.path("reports/filter.json").string()}, rep);
    return rep;
}

// Guidance spec description used by the CLI: list of {classifier, category,
// lambda}. The classifier name resolves against run checkpoints.
struct GuidanceTermDesc {
    std::string classifier = "classifier";
    int category = 0;
    double lambda = 0.0;
};

inline std::vector<GuidanceTermDesc> parse_guidance_spec(const std::string& text) {
    std::vector<GuidanceTermDesc> out;
    if (text.empty()) return out;
    json j;
    try {
        j = json::parse(text);
    } catch (const std::exception& e) {
        throw config_error(std::string("bad guidance spec: ") + e.what());
    }
    for (const auto& row : j) {
        GuidanceTermDesc d;
        d.classifier = row.value("classifier", "classifier");
        d.category = row.at("category").get<int>();
        d.lambda = row.at("lambda").get<double>();
        out.push_back(d);
    }
    return out;
}

struct SampleStageOptions {
    std::string name = "unconditional";  // subdirectory under samples/
    int n = 0;                           // 0: config default
    SamplerKind sampler = SamplerKind::Ddpm;
    int substeps = 0;
    double ddim_eta = 0.0;
    std::vector<GuidanceTermDesc> guidance;
    uint64_t seed_salt = 0;
    int dump_pgm = 0;  // additionally write the first N samples as PGM files
};

inline json stage_sample(const ExperimentConfig& cfg, RunDir& run,
                         const SampleStageOptions& so) {
    detail::StageTimer timer;
    detail::require_artifact(run.path("ckpt/denoiser.dzsi"), "denoiser; run train-ddpm");
    auto ck = load_checkpoint(run.path("ckpt/denoiser.dzsi").string());
    auto net = conv_denoiser_from(ck, /*use_ema=*/true);
    auto sched = make_schedule(ck.schedule);

    std::shared_ptr<ClassifierNet<float>> classifier;
    GuidanceSpec<float> spec;
    for (const auto& term : so.guidance) {
        if (!classifier) {
            detail::require_artifact(run.path("ckpt/classifier.dzsi"),
                                     "guidance classifier; run train-classifier");
            classifier = classifier_from(load_checkpoint(run.path("ckpt/classifier.dzsi").string()));
        }
        spec.terms.push_back(
            {classifier.get(), term.category, static_cast<float>(term.lambda)});
    }
    SampleOptions opt;
    opt.sampler = so.sampler;
    opt.substeps = so.substeps;
    opt.ddim_eta = so.ddim_eta;
    const int n = so.n > 0 ? so.n : cfg.sample_n;
    auto samples = sample<float>(*net, n, sched, opt, spec,
                                 Rng(cfg.seed).fork(0x5A ^ so.seed_salt), net->spec().input_shape);

    LabeledSet out;
    out.modality = Modality::Image;
    out.shape = net->spec().input_shape;
    out.generator = "samples/" + so.name;
    out.seed = cfg.seed;
    for (auto& s : samples) {
        out.x.push_back(std::move(s));
        out.z.push_back({0.0f});  // latent unknown for generated samples
    }
    const auto dir = run.path("samples/" + so.name);
    fs::create_directories(dir);
    save_labeled_set_packed(out, (dir / "samples.dzds").string());
    for (int i = 0; i < std::min<int>(so.dump_pgm, static_cast<int>(out.size())); ++i) {
        char nm[32];
        std::snprintf(nm, sizeof(nm), "sample_%04d.pgm", i);
        save_pgm(out.x[static_cast<size_t>(i)], (dir / nm).string());
    }
    json settings = {{"n", n},
                     {"sampler", so.sampler == SamplerKind::Ddpm ? "ddpm" : "ddim"},
                     {"substeps", so.substeps},
                     {"eta", so.ddim_eta}};
    json gj = json::array();
    for (const auto& t : so.guidance)
        gj.push_back({{"classifier", t.classifier}, {"category", t.category}, {"lambda", t.lambda}});
    settings["guidance"] = gj;
    std::ofstream sf(dir / "settings.json");
    sf << settings.dump(2) << "\n";
    json summary = {{"name", so.name}, {"n", n}};
    run.append_manifest("sample", cfg.hash(), timer.seconds(),
                        {(dir / "samples.dzds").string()}, summary);
    return summary;
}

inline std::vector<Tensor<float>> load_samples(RunDir& run, const std::string& name) {
    const auto p = run.path("samples/" + name + "/samples.dzds");
    detail::require_artifact(p, "samples '" + name + "'; run sample");
    return load_labeled_set_packed(p.string()).x;
}

inline void write_histogram_csv(const fs::path& path, const AttributeHistogram& h) {
    std::ofstream f(path);
    f << "bin,lo,hi,count,mass\n";
    for (int b = 0; b < h.bins; ++b) {
        char line[128];
        std::snprintf(line, sizeof(line), "%d,%.6f,%.6f,%lld,%.8f\n", b,
                      static_cast<double>(b) / h.bins, static_cast<double>(b + 1) / h.bins,
                      static_cast<long long>(h.counts[static_cast<size_t>(b)]), h.mass(b));
        f << line;
    }
}

inline json stage_eval_histogram(const ExperimentConfig& cfg, RunDir& run,
                                 const std::string& name) {
    detail::StageTimer timer;
    auto samples = load_samples(run, name);
    auto model = load_eval_model(run);
    std::vector<double> probs(samples.size());
    parallel_for(static_cast<int64_t>(samples.size()), [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i)
            probs[static_cast<size_t>(i)] = model.positive_prob(samples[static_cast<size_t>(i)]);
    });
    auto h = attribute_histogram(probs, cfg.bins);
    const auto csv = run.path("reports/hist_" + name + ".csv");
    write_histogram_csv(csv, h);
    json summary = {{"name", name},
                    {"bins", cfg.bins},
                    {"mse_to_uniform", mse_to_uniform(h)},
                    {"kld_to_uniform", kld_to_uniform(h)},
                    {"temperature", model.temperature}};
    std::ofstream jf(run.path("reports/hist_" + name + ".json"));
    jf << summary.dump(2) << "\n";
    run.append_manifest("eval-histogram", cfg.hash(), timer.seconds(),
                        {csv.string(), run.path("reports/hist_" + name + ".json").string()},
                        summary);
    return summary;
}

// Per-axis positive probabilities for the 4-corner evaluation classifier:
// axis 0 groups corners {2, 3} (first factor high), axis 1 groups {1, 3}.
inline std::pair<double, double> corner_axis_probs(const EvalModel& model,
                                                   const Tensor<float>& x) {
    auto p = model.probabilities(x);
    require(p.size() == 4, "corner evaluation model must have 4 categories");
    return {p[2] + p[3], p[1] + p[3]};
}

inline json stage_eval_histogram2d(const ExperimentConfig& cfg, RunDir& run,
                                   const std::string& name) {
    detail::StageTimer timer;
    auto samples = load_samples(run, name);
    auto model = load_eval_model(run);
    std::vector<double> p1(samples.size()), p2(samples.size());
    parallel_for(static_cast<int64_t>(samples.size()), [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
            auto [a, b] = corner_axis_probs(model, samples[static_cast<size_t>(i)]);
            p1[static_cast<size_t>(i)] = a;
            p2[static_cast<size_t>(i)] = b;
        }
    });
    auto h = histogram_2d(p1, p2, cfg.bins);
    const auto csv = run.path("reports/hist2d_" + name + ".csv");
    {
        std::ofstream f(csv);
        f << "row,col,count\n";
        for (int by = 0; by < h.bins; ++by)
            for (int bx = 0; bx < h.bins; ++bx) {
                char line[64];
                std::snprintf(line, sizeof(line), "%d,%d,%lld\n", by, bx,
                              static_cast<long long>(h.at(by, bx)));
                f << line;
            }
    }
    // marginals double as the per-axis 1-D summaries
    auto h1 = attribute_histogram(p1, cfg.bins);
    auto h2 = attribute_histogram(p2, cfg.bins);
    json summary = {{"name", name},
                    {"bins", cfg.bins},
                    {"axis1_mse", mse_to_uniform(h1)},
                    {"axis1_kld", kld_to_uniform(h1)},
                    {"axis2_mse", mse_to_uniform(h2)},
                    {"axis2_kld", kld_to_uniform(h2)}};
    std::ofstream jf(run.path("reports/hist2d_" + name + ".json"));
    jf << summary.dump(2) << "\n";
    run.append_manifest("eval-histogram2d", cfg.hash(), timer.seconds(),
                        {csv.string(), run.path("reports/hist2d_" + name + ".json").string()},
                        summary);
    return summary;
}

inline json stage_eval_accuracy(const ExperimentConfig& cfg, RunDir& run,
                                const std::string& name) {
    detail::StageTimer timer;
    auto samples = load_samples(run, name);
    auto acc = interpolation_accuracy(samples, 0.2, 0.8, cfg.radius);
    json summary = {{"name", name},
                    {"accuracy", acc.accuracy},
                    {"anomalous_fraction", acc.anomalous_fraction},
                    {"n", acc.n}};
    std::ofstream jf(run.path("reports/accuracy_" + name + ".json"));
    jf << summary.dump(2) << "\n";
    run.append_manifest("eval-accuracy", cfg.hash(), timer.seconds(),
                        {run.path("reports/accuracy_" + name + ".json").string()}, summary);
    return summary;
}

inline json stage_eval_heatmap(const ExperimentConfig& cfg, RunDir& run) {
    detail::StageTimer timer;
    detail::require_artifact(run.path("ckpt/classifier.dzsi"),
                             "guidance classifier; run train-classifier");
    auto cls = classifier_from(load_checkpoint(run.path("ckpt/classifier.dzsi").string()));
    auto prob_right = [&](const Tensor<float>& img) {
        Tape<float> tape;
        auto logits = cls->forward(img, 0, tape);
        return static_cast<double>(softmax(logits)[1]);
    };
    auto heat = classifier_heatmap(prob_right, cfg.heatmap_grid, cfg.image_size, cfg.radius);
    const auto csv = run.path("reports/heatmap.csv");
    {
        std::ofstream f(csv);
        f << "row,col,p_right\n";
        for (size_t y = 0; y < heat.size(); ++y)
            for (size_t x = 0; x < heat[y].size(); ++x) {
                char line[96];
                std::snprintf(line, sizeof(line), "%zu,%zu,%.8f\n", y, x, heat[y][x]);
                f << line;
            }
    }
    json summary = {{"grid", cfg.heatmap_grid},
                    {"mid_smoothness", heatmap_mid_smoothness(heat)}};
    run.append_manifest("eval-heatmap", cfg.hash(), timer.seconds(), {csv.string()}, summary);
    return summary;
}

inline json stage_eval_nn_check(const ExperimentConfig& cfg, RunDir& run,
                                const std::string& name, int top_k = 1) {
    detail::StageTimer timer;
    auto samples = load_samples(run, name);
    detail::require_artifact(run.path("data/train.dzds"), "training set; run gen-data");
    auto train = load_labeled_set_packed(run.path("data/train.dzds").string());
    auto nn = nearest_neighbor_check(samples, train, top_k);
    std::vector<double> d1;
    d1.reserve(nn.size());
    for (const auto& row : nn) d1.push_back(row[0].distance);
    std::sort(d1.begin(), d1.end());
    json summary = {{"name", name},
                    {"min", d1.front()},
                    {"median", d1[d1.size() / 2]},
                    {"max", d1.back()},
                    {"zero_distance_count",
                     static_cast<int>(std::count(d1.begin(), d1.end(), 0.0))}};
    std::ofstream jf(run.path("reports/nn_" + name + ".json"));
    jf << summary.dump(2) << "\n";
    run.append_manifest("eval-nn-check", cfg.hash(), timer.seconds(),
                        {run.path("reports/nn_" + name + ".json").string()}, summary);
    return summary;
}

inline json stage_sweep_lambda(const ExperimentConfig& cfg, RunDir& run, int n_override = 0) {
    detail::StageTimer timer;
    json rows = json::array();
    const auto csv = run.path("reports/sweep_lambda.csv");
    std::ofstream f(csv);
    f << "lambda,accuracy,anomalous_fraction,mse_to_uniform,kld_to_uniform\n";
    for (double lam : cfg.lambda_grid) {
        SampleStageOptions so;
        char nm[48];
        std::snprintf(nm, sizeof(nm), "sweep_lambda_%g", lam);
        so.name = nm;
        so.n = n_override > 0 ? n_override : cfg.sample_n;
        so.seed_salt = Rng::mix(static_cast<uint64_t>(lam * 1000.0));
        const int cats = cfg.kind == ExperimentKind::Corner2d ? 4 : 2;
        for (int c = 0; c < cats; ++c) so.guidance.push_back({"classifier", c, lam});
        stage_sample(cfg, run, so);
        auto hist = stage_eval_histogram(cfg, run, so.name);
        auto acc = stage_eval_accuracy(cfg, run, so.name);
        char line[160];
        std::snprintf(line, sizeof(line), "%g,%.6f,%.6f,%.6f,%.6f\n", lam,
                      acc["accuracy"].get<double>(), acc["anomalous_fraction"].get<double>(),
                      hist["mse_to_uniform"].get<double>(), hist["kld_to_uniform"].get<double>());
        f << line;
        rows.push_back({{"lambda", lam},
                        {"accuracy", acc["accuracy"]},
                        {"anomalous_fraction", acc["anomalous_fraction"]},
                        {"mse_to_uniform", hist["mse_to_uniform"]},
                        {"kld_to_uniform", hist["kld_to_uniform"]}});
    }
    json summary = {{"rows", rows}};
    run.append_manifest("sweep-lambda", cfg.hash(), timer.seconds(), {csv.string()}, summary);
    return summary;
}

inline json stage_interp(const ExperimentConfig& cfg, RunDir& run, int frames) {
    detail::StageTimer timer;
    detail::require_artifact(run.path("ckpt/denoiser.dzsi"), "denoiser; run train-ddpm");
    auto ck = load_checkpoint(run.path("ckpt/denoiser.dzsi").string());
    auto net = conv_denoiser_from(ck);
    auto sched = make_schedule(ck.schedule);
    // opposite extremes as interpolation sources
    auto xa = gen_circle_image(center_from_z(0.05, cfg.image_size, cfg.radius),
                               center_from_z(0.5, cfg.image_size, cfg.radius), cfg.radius,
                               cfg.image_size);
    auto xb = gen_circle_image(center_from_z(0.95, cfg.image_size, cfg.radius),
                               center_from_z(0.5, cfg.image_size, cfg.radius), cfg.radius,
                               cfg.image_size);
    const int encode_steps = sched.T() / 2;
    auto frames_out = interpolate_latents(xa, xb, *net, encode_steps, frames, sched);
    const auto dir = run.path("samples/interp");
    fs::create_directories(dir);
    const auto csv = run.path("reports/interp.csv");
    std::ofstream f(csv);
    f << "frame,tau,components,z_x\n";
    json rows = json::array();
    for (size_t k = 0; k < frames_out.size(); ++k) {
        clamp_inplace(frames_out[k], -1.0f, 1.0f);
        char nm[32];
        std::snprintf(nm, sizeof(nm), "frame_%02zu.pgm", k);
        save_pgm(frames_out[k], (dir / nm).string());
        auto det = detect_circles(frames_out[k]);
        double z = det.components.size() == 1
                       ? z_from_center(det.components[0].cx, cfg.image_size, cfg.radius)
                       : -1.0;
        char line[96];
        std::snprintf(line, sizeof(line), "%zu,%.4f,%zu,%.6f\n", k,
                      static_cast<double>(k) / (frames_out.size() - 1), det.components.size(), z);
        f << line;
        rows.push_back({{"frame", k}, {"components", det.components.size()}, {"z_x", z}});
    }
    json summary = {{"frames", rows}, {"encode_steps", encode_steps}};
    run.append_manifest("interp", cfg.hash(), timer.seconds(), {csv.string()}, summary);
    return summary;
}

inline json stage_edit(const ExperimentConfig& cfg, RunDir& run, int n_sources, double lambda) {
    detail::StageTimer timer;
    detail::require_artifact(run.path("ckpt/denoiser.dzsi"), "denoiser; run train-ddpm");
    detail::require_artifact(run.path("ckpt/classifier.dzsi"),
                             "guidance classifier; run train-classifier");
    auto dck = load_checkpoint(run.path("ckpt/denoiser.dzsi").string());
    auto net = conv_denoiser_from(dck);
    auto cls = classifier_from(load_checkpoint(run.path("ckpt/classifier.dzsi").string()));
    auto sched = make_schedule(dck.schedule);
    const int encode_steps = sched.T() / 2;
    const auto dir = run.path("samples/edit");
    fs::create_directories(dir);
    Rng root = Rng(cfg.seed).fork(0xED);
    const auto csv = run.path("reports/edit.csv");
    std::ofstream f(csv);
    f << "index,z_source,z_edited,moved_right\n";
    int moved = 0, valid = 0;
    for (int i = 0; i < n_sources; ++i) {
        Rng r = root.fork(static_cast<uint64_t>(i));
        // left-extreme source edited toward the right category
        double z0 = r.uniform(0.0, 0.2);
        auto src = gen_circle_image(center_from_z(z0, cfg.image_size, cfg.radius),
                                    center_from_z(r.uniform(), cfg.image_size, cfg.radius),
                                    cfg.radius, cfg.image_size);
        auto edited = edit_attribute(src, *net, *cls, /*target=*/1, lambda, encode_steps, sched,
                                     r.fork(1));
        clamp_inplace(edited, -1.0f, 1.0f);
        if (i < 16) {
            char nm[32];
            std::snprintf(nm, sizeof(nm), "edit_%03d.pgm", i);
            save_pgm(edited, (dir / nm).string());
        }
        auto det = detect_circles(edited);
        double z1 = det.components.size() == 1
                        ? z_from_center(det.components[0].cx, cfg.image_size, cfg.radius)
                        : -1.0;
        const bool ok = z1 >= 0.0;
        if (ok) {
            valid += 1;
            if (z1 > z0) moved += 1;
        }
        char line[96];
        std::snprintf(line, sizeof(line), "%d,%.6f,%.6f,%d\n", i, z0, z1,
                      ok && z1 > z0 ? 1 : 0);
        f << line;
    }
    json summary = {{"n", n_sources},
                    {"lambda", lambda},
                    {"valid", valid},
                    {"moved_toward_target", moved},
                    {"moved_fraction", n_sources > 0 ? static_cast<double>(moved) / n_sources : 0.0}};
    std::ofstream jf(run.path("reports/edit.json"));
    jf << summary.dump(2) << "\n";
    run.append_manifest("edit", cfg.hash(), timer.seconds(),
                        {csv.string(), run.path("reports/edit.json").string()}, summary);
    return summary;
}

inline json stage_oracle_check(const ExperimentConfig& cfg, RunDir& run) {
    detail::StageTimer timer;
    auto sched = make_schedule(ScheduleFamily::Cosine, 1000, 0.008);
    MixtureModel mix;
    mix.means = {0.1, 0.9};
    mix.var = 0.05 * 0.05;
    mix.weights = {0.5, 0.5};
    mix.category = {0, 1};
    SampleOptions opt;
    json rows = json::array();
    auto base = mixture_density_grid(mix, -0.5, 1.5, 4096);
    for (double lam : {0.0, 1.0, 5.0, 30.0}) {
        auto xs = oracle_sample(mix, sched, lam, lam, 10000, opt,
                                Rng(cfg.seed).fork(static_cast<uint64_t>(lam * 10)).state());
        int mid = 0;
        for (double x : xs)
            if (x > 0.2 && x < 0.8) ++mid;
        double tv;
        if (lam == 0.0) {
            tv = tv_distance(xs, base, 100);
        } else {
            auto pg = product_density_grid(mix, lam, lam, -0.5, 1.5, 4096);
            tv = tv_distance(xs, pg, 100);
        }
        rows.push_back({{"lambda", lam},
                        {"tv", tv},
                        {"mid_mass", static_cast<double>(mid) / xs.size()}});
    }
    json summary = {{"rows", rows}, {"T", 1000}};
    std::ofstream jf(run.path("reports/oracle.json"));
    jf << summary.dump(2) << "\n";
    run.append_manifest("oracle-check", cfg.hash(), timer.seconds(),
                        {run.path("reports/oracle.json").string()}, summary);
    return summary;
}

inline json stage_ablate_size(const ExperimentConfig& cfg, RunDir& run,
                              const std::vector<int>& totals) {
    detail::StageTimer timer;
    detail::require_artifact(run.path("data/train.dzds"), "training set; run gen-data");
    auto pool = load_labeled_set_packed(run.path("data/train.dzds").string());
    auto eval_model = load_eval_model(run);
    auto sched = make_schedule(cfg.schedule);
    const auto csv = run.path("reports/ablate_size.csv");
    std::ofstream f(csv);
    f << "total,per_side,accuracy,anomalous_fraction,mse_to_uniform,kld_to_uniform\n";
    json rows = json::array();
    for (int total : totals) {
        const int per_side = total / 2;
        // rank by the evaluation model's probability of the labeled class,
        // keep the most extreme per side
        std::vector<std::vector<std::pair<double, size_t>>> sides(2);
        for (size_t i = 0; i < pool.size(); ++i)
            sides[static_cast<size_t>(pool.label(i))].push_back(
                {eval_model.positive_prob(pool.x[i], pool.label(i)), i});
        std::vector<size_t> idx;
        for (auto& side : sides) {
            std::sort(side.begin(), side.end(), [](const auto& a, const auto& b) {
                return a.first > b.first || (a.first == b.first && a.second < b.second);
            });
            for (size_t k = 0; k < std::min(side.size(), static_cast<size_t>(per_side)); ++k)
                idx.push_back(side[k].second);
        }
        std::sort(idx.begin(), idx.end());
        auto subset = pool.subset(idx);

        ConvDenoiser<float> net(cfg.denoiser_spec(),
                                Rng(cfg.seed).fork(0xAB ^ static_cast<uint64_t>(total)).state());
        DdpmTrainOptions topt = cfg.ddpm;
        topt.seed = Rng(cfg.seed).fork(0xAC ^ static_cast<uint64_t>(total)).state();
        ParamSet<float> ema;
        train_ddpm(net, subset.x, sched, topt, ema);
        ConvDenoiser<float> ema_net(cfg.denoiser_spec(), 0);
        copy_param_values(ema_net.params(), ema);

        detail::require_artifact(run.path("ckpt/classifier.dzsi"),
                                 "guidance classifier; run train-classifier");
        auto cls = classifier_from(load_checkpoint(run.path("ckpt/classifier.dzsi").string()));
        GuidanceSpec<float> spec;
        spec.terms.push_back({cls.get(), 0, static_cast<float>(cfg.lambda)});
        spec.terms.push_back({cls.get(), 1, static_cast<float>(cfg.lambda)});
        SampleOptions sopt;
        auto samples = sample<float>(ema_net, cfg.sample_n, sched, sopt, spec,
                                     Rng(cfg.seed).fork(0xAD ^ static_cast<uint64_t>(total)),
                                     cfg.denoiser_spec().input_shape);
        auto acc = interpolation_accuracy(samples, 0.2, 0.8, cfg.radius);
        std::vector<double> probs(samples.size());
        for (size_t i = 0; i < samples.size(); ++i)
            probs[i] = eval_model.positive_prob(samples[i]);
        auto h = attribute_histogram(probs, cfg.bins);
        char line[192];
        std::snprintf(line, sizeof(line), "%d,%d,%.6f,%.6f,%.6f,%.6f\n", total, per_side,
                      acc.accuracy, acc.anomalous_fraction, mse_to_uniform(h), kld_to_uniform(h));
        f << line;
        rows.push_back({{"total", total},
                        {"accuracy", acc.accuracy},
                        {"anomalous_fraction", acc.anomalous_fraction},
                        {"mse_to_uniform", mse_to_uniform(h)},
                        {"kld_to_uniform", kld_to_uniform(h)}});
    }
    json summary = {{"rows", rows}};
    run.append_manifest("ablate-size", cfg.hash(), timer.seconds(), {csv.string()}, summary);
    return summary;
}

// Consolidated bundle: reads the manifest, never recomputes. Prior report
// rows are excluded so repeated calls write identical bundles.
inline json stage_report(const ExperimentConfig& cfg, RunDir& run) {
    detail::StageTimer timer;
    json manifest = run.read_manifest();
    json report;
    report["config"] = cfg.to_json();
    report["stages"] = json::array();
    for (const auto& row : manifest) {
        if (row.at("stage") == "report") continue;
        report["stages"].push_back({{"stage", row.at("stage")},
                                    {"wall_seconds", row.at("wall_seconds")},
                                    {"summary", row.at("summary")}});
    }
    std::ofstream f(run.path("reports/report.json"));
    f << report.dump(2) << "\n";
    run.append_manifest("report", cfg.hash(), timer.seconds(),
                        {run.path("reports/report.json").string()}, json::object());
    return report;
}

}  // namespace dzsi
