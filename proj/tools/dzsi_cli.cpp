// Command-line front end: every subcommand reads the experiment config,
// executes one pipeline stage into the run directory, and appends to the
// run manifest. Exit codes: 0 ok, 2 config error, 3 missing upstream
// artifact, 4 numeric failure.

#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "dzsi/harness.hpp"

using namespace dzsi;

namespace {

struct CommonArgs {
    std::string config_path;
    uint64_t seed_override = 0;
    bool has_seed = false;

    ExperimentConfig load() const {
        ExperimentConfig cfg = load_config(config_path);
        if (has_seed) cfg.seed = seed_override;
        return cfg;
    }
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("-c,--config", args.config_path, "experiment config (JSON)")->required();
    cmd->add_option("--seed", args.seed_override, "override the config seed")
        ->each([&args](const std::string&) { args.has_seed = true; });
}

void print_summary(const nlohmann::json& j) { std::printf("%s\n", j.dump(2).c_str()); }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale diffusion interpolation harness"};
    app.require_subcommand(1);

    CommonArgs args;

    auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
    add_common(gen, args);

    auto* train_ddpm_cmd = app.add_subcommand("train-ddpm", "train the denoiser");
    add_common(train_ddpm_cmd, args);

    auto* train_cls = app.add_subcommand("train-classifier", "train the guidance classifier");
    add_common(train_cls, args);
    bool cls_spectral = false, cls_no_spectral = false;
    train_cls->add_flag("--spectral-norm", cls_spectral, "force spectral normalization on");
    train_cls->add_flag("--no-spectral-norm", cls_no_spectral, "force spectral normalization off");

    auto* train_eval_cmd = app.add_subcommand("train-eval", "train the evaluation model");
    add_common(train_eval_cmd, args);

    auto* calibrate_cmd = app.add_subcommand("calibrate", "temperature-scale the evaluation model");
    add_common(calibrate_cmd, args);

    auto* filter_cmd = app.add_subcommand("filter", "two-stage ensemble extreme-filter");
    add_common(filter_cmd, args);
    int keep_per_side = 1000;
    filter_cmd->add_option("--keep-per-side", keep_per_side, "samples kept per side");

    auto* sample_cmd = app.add_subcommand("sample", "run the reverse-time sampler");
    add_common(sample_cmd, args);
    std::string sample_name = "unconditional";
    std::string sampler_name = "ddpm";
    std::string guidance_spec_text;
    double lambda_flag = -1.0;
    double eta = 0.0;
    int substeps = 0, sample_n = 0;
    sample_cmd->add_option("--name", sample_name, "output name under samples/");
    sample_cmd->add_option("--sampler", sampler_name, "ddpm | ddim");
    sample_cmd->add_option("--substeps", substeps, "strided sampling steps (0 = all)");
    sample_cmd->add_option("--eta", eta, "ddim stochasticity");
    sample_cmd->add_option("-n,--num", sample_n, "sample count (0 = config default)");
    sample_cmd->add_option("--lambda", lambda_flag,
                           "multi-guidance strength on every category (-1 = unconditional)");
    sample_cmd->add_option("--guidance-spec", guidance_spec_text,
                           "explicit JSON guidance terms [{classifier, category, lambda}]");
    int dump_pgm = 0;
    sample_cmd->add_option("--pgm", dump_pgm, "also dump the first N samples as PGM files");

    auto* eval_cmd = app.add_subcommand("eval", "evaluate samples or models");
    add_common(eval_cmd, args);
    std::string eval_kind = "histogram";
    std::string eval_name = "unconditional";
    int top_k = 1;
    eval_cmd->add_option("--kind", eval_kind,
                         "histogram | histogram2d | accuracy | heatmap | nn-check")
        ->required();
    eval_cmd->add_option("--name", eval_name, "sample set name");
    eval_cmd->add_option("--top-k", top_k, "nn-check neighbors");

    auto* interp_cmd = app.add_subcommand("interp", "latent slerp interpolation frames");
    add_common(interp_cmd, args);
    int frames = 9;
    interp_cmd->add_option("--frames", frames, "frame count");

    auto* edit_cmd = app.add_subcommand("edit", "classifier-guided attribute editing");
    add_common(edit_cmd, args);
    int edit_n = 100;
    double edit_lambda = 30.0;
    edit_cmd->add_option("-n,--num", edit_n, "source count");
    edit_cmd->add_option("--lambda", edit_lambda, "guidance strength");

    auto* oracle_cmd = app.add_subcommand("oracle-check", "analytic mixture sampler gates");
    add_common(oracle_cmd, args);

    auto* sweep_cmd = app.add_subcommand("sweep-lambda", "guidance-strength sweep");
    add_common(sweep_cmd, args);
    int sweep_n = 0;
    sweep_cmd->add_option("-n,--num", sweep_n, "samples per lambda (0 = config default)");

    auto* ablate_cmd = app.add_subcommand("ablate-size", "training-set size ablation");
    add_common(ablate_cmd, args);
    std::vector<int> totals = {4000, 2000, 1000, 500};
    ablate_cmd->add_option("--sizes", totals, "total kept set sizes");

    auto* report_cmd = app.add_subcommand("report", "consolidate manifest into a bundle");
    add_common(report_cmd, args);

    CLI11_PARSE(app, argc, argv);

    try {
        ExperimentConfig cfg = args.load();
        RunDir run(cfg.out_dir);

        if (gen->parsed()) print_summary(stage_gen_data(cfg, run));
        if (train_ddpm_cmd->parsed()) print_summary(stage_train_ddpm(cfg, run));
        if (train_cls->parsed()) {
            std::optional<bool> spectral;
            if (cls_spectral && cls_no_spectral)
                throw config_error("choose one of --spectral-norm / --no-spectral-norm");
            if (cls_spectral) spectral = true;
            if (cls_no_spectral) spectral = false;
            print_summary(stage_train_classifier(cfg, run, spectral));
        }
        if (train_eval_cmd->parsed()) print_summary(stage_train_eval(cfg, run));
        if (calibrate_cmd->parsed()) print_summary(stage_calibrate(cfg, run));
        if (filter_cmd->parsed()) print_summary(stage_filter(cfg, run, keep_per_side));
        if (sample_cmd->parsed()) {
            SampleStageOptions so;
            so.name = sample_name;
            so.sampler = sampler_from_string(sampler_name);
            so.substeps = substeps;
            so.ddim_eta = eta;
            so.n = sample_n;
            so.dump_pgm = dump_pgm;
            so.seed_salt = Rng::mix(std::hash<std::string>{}(sample_name));
            if (!guidance_spec_text.empty()) {
                so.guidance = parse_guidance_spec(guidance_spec_text);
            } else if (lambda_flag >= 0.0) {
                const int cats = cfg.kind == ExperimentKind::Corner2d ? 4 : 2;
                for (int c = 0; c < cats; ++c)
                    so.guidance.push_back({"classifier", c, lambda_flag});
            }
            print_summary(stage_sample(cfg, run, so));
        }
        if (eval_cmd->parsed()) {
            if (eval_kind == "histogram") print_summary(stage_eval_histogram(cfg, run, eval_name));
            else if (eval_kind == "histogram2d")
                print_summary(stage_eval_histogram2d(cfg, run, eval_name));
            else if (eval_kind == "accuracy")
                print_summary(stage_eval_accuracy(cfg, run, eval_name));
            else if (eval_kind == "heatmap") print_summary(stage_eval_heatmap(cfg, run));
            else if (eval_kind == "nn-check")
                print_summary(stage_eval_nn_check(cfg, run, eval_name, top_k));
            else
                throw config_error("unknown eval kind: " + eval_kind);
        }
        if (interp_cmd->parsed()) print_summary(stage_interp(cfg, run, frames));
        if (edit_cmd->parsed()) print_summary(stage_edit(cfg, run, edit_n, edit_lambda));
        if (oracle_cmd->parsed()) print_summary(stage_oracle_check(cfg, run));
        if (sweep_cmd->parsed()) print_summary(stage_sweep_lambda(cfg, run, sweep_n));
        if (ablate_cmd->parsed()) print_summary(stage_ablate_size(cfg, run, totals));
        if (report_cmd->parsed()) print_summary(stage_report(cfg, run));
        return 0;
    } catch (const config_error& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return config_error::exit_code;
    } catch (const contract_error& e) {
        std::fprintf(stderr, "contract error: %s\n", e.what());
        return contract_error::exit_code;
    } catch (const artifact_error& e) {
        std::fprintf(stderr, "artifact error: %s\n", e.what());
        return artifact_error::exit_code;
    } catch (const numeric_error& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return numeric_error::exit_code;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
