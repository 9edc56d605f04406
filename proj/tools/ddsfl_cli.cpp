// ddsfl: hierarchical discriminative/shareable feature learning pipeline.
//
// Subcommands run individual stages against an output directory; `pipeline`
// runs them all in order. Exit codes: 0 ok, 2 usage, 3 data error, 4 numeric
// failure.

#include <CLI11.hpp>

#include <cmath>
#include <iostream>

#include "ddsfl/ddsfl.hpp"

namespace {

struct GlobalArgs {
    std::string config_path;
    std::string out_dir = "out";
    std::int64_t seed = -1;  // -1: take the config's seed
    int threads = 0;
    int splits = 1;
};

ddsfl::PipelineConfig resolve_config(const GlobalArgs& args) {
    ddsfl::PipelineConfig cfg = ddsfl::load_config(args.config_path);
    if (args.seed >= 0) cfg.seed = static_cast<std::uint64_t>(args.seed);
    if (args.threads > 0) cfg.threads = args.threads;
    if (cfg.threads > 0) ddsfl::set_thread_budget(cfg.threads);
    return cfg;
}

void add_global_options(CLI::App* cmd, GlobalArgs& args) {
    cmd->add_option("--config", args.config_path, "pipeline config file")->required();
    cmd->add_option("--seed", args.seed, "seed override");
    cmd->add_option("--threads", args.threads, "worker thread cap");
    cmd->add_option("--out", args.out_dir, "artifact directory");
}

void run_splits(const ddsfl::StageContext& ctx, int splits) {
    std::vector<double> accs;
    std::ostringstream report;
    for (int s = 0; s < splits; ++s) {
        const ddsfl::DatasetManifest resampled = ddsfl::resample_split(ctx.manifest, ctx.cfg.seed, s);
        const ddsfl::DeepModel model =
            ddsfl::train_deep(resampled, ctx.cfg, ddsfl::derive_seed(ctx.cfg.seed, "split-run", static_cast<std::uint64_t>(s)));
        const ddsfl::Metrics m = ddsfl::evaluate_model(model, resampled, ctx.cfg);
        accs.push_back(m.accuracy);
        report << "split_" << s << "\t" << std::fixed << std::setprecision(6) << m.accuracy << "\n";
        ddsfl::log_info("split " + std::to_string(s) + ": accuracy " + std::to_string(m.accuracy));
    }
    double mean = 0.0;
    for (double a : accs) mean += a;
    mean /= static_cast<double>(accs.size());
    double var = 0.0;
    for (double a : accs) var += (a - mean) * (a - mean);
    const double stdev = accs.size() > 1 ? std::sqrt(var / static_cast<double>(accs.size() - 1)) : 0.0;
    report << "mean\t" << std::fixed << std::setprecision(6) << mean << "\n";
    report << "std\t" << std::fixed << std::setprecision(6) << stdev << "\n";
    ddsfl::write_file_atomic(ddsfl::artifact_path(ctx.out_dir, "metrics_splits.txt"), report.str());
    std::cout << "accuracy mean " << std::fixed << std::setprecision(4) << mean << " +- " << stdev
              << " over " << splits << " splits\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"DDSFL: deep discriminative and shareable feature learning pipeline"};
    app.require_subcommand(1);

    GlobalArgs args;
    std::string encode_split_name = "train";
    std::string extract_split_name = "test";
    int extract_layer = 1;
    bool random_filters = false;

    CLI::App* c_patches = app.add_subcommand("patches", "extract and store training patches");
    CLI::App* c_exemplars = app.add_subcommand("exemplars", "select training exemplars");
    CLI::App* c_train = app.add_subcommand("train", "train the layer stack");
    CLI::App* c_codebook = app.add_subcommand("codebook", "build per-layer codebooks");
    CLI::App* c_encode = app.add_subcommand("encode", "encode a split into descriptors");
    CLI::App* c_fit = app.add_subcommand("fit-classifier", "fit the linear classifier");
    CLI::App* c_eval = app.add_subcommand("evaluate", "evaluate on the test split");
    CLI::App* c_extract = app.add_subcommand("extract", "export raw feature maps");
    CLI::App* c_pipeline = app.add_subcommand("pipeline", "run every stage in order");
    CLI::App* c_sweep = app.add_subcommand("sweep", "sequential hyperparameter search");

    for (CLI::App* c : {c_patches, c_exemplars, c_train, c_codebook, c_encode, c_fit, c_eval,
                        c_extract, c_pipeline, c_sweep}) {
        add_global_options(c, args);
    }
    c_encode->add_option("--split", encode_split_name, "train|test|val");
    c_extract->add_option("--split", extract_split_name, "train|test|val");
    c_extract->add_option("--layer", extract_layer, "layer to export (1-based)");
    c_train->add_flag("--random-filters", random_filters, "skip learning; random filter banks");
    c_pipeline->add_flag("--random-filters", random_filters, "skip learning; random filter banks");
    c_pipeline->add_option("--splits", args.splits, "resample train/test n times and report mean/std");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    auto parse_split = [](const std::string& s) {
        if (s == "train") return ddsfl::Split::train;
        if (s == "test") return ddsfl::Split::test;
        if (s == "val") return ddsfl::Split::val;
        throw ddsfl::DataError("unknown split `" + s + "`");
    };

    try {
        const ddsfl::PipelineConfig cfg = resolve_config(args);
        const ddsfl::StageContext ctx = ddsfl::make_stage_context(cfg, args.out_dir);

        if (c_patches->parsed()) {
            ddsfl::run_stage_patches(ctx);
        } else if (c_exemplars->parsed()) {
            ddsfl::run_stage_exemplars(ctx);
        } else if (c_train->parsed()) {
            ddsfl::run_stage_train(ctx, random_filters);
        } else if (c_codebook->parsed()) {
            ddsfl::run_stage_codebook(ctx);
        } else if (c_encode->parsed()) {
            ddsfl::run_stage_encode(ctx, parse_split(encode_split_name));
        } else if (c_fit->parsed()) {
            ddsfl::run_stage_fit_classifier(ctx);
        } else if (c_eval->parsed()) {
            const ddsfl::Metrics m = ddsfl::run_stage_evaluate(ctx);
            std::cout << ddsfl::format_metrics(m);
        } else if (c_extract->parsed()) {
            ddsfl::run_stage_extract(ctx, extract_layer, parse_split(extract_split_name));
        } else if (c_pipeline->parsed()) {
            if (args.splits > 1) {
                run_splits(ctx, args.splits);
            } else {
                const ddsfl::Metrics m = ddsfl::run_stage_pipeline(ctx, random_filters);
                std::cout << ddsfl::format_metrics(m);
            }
        } else if (c_sweep->parsed()) {
            const ddsfl::SweepResult sweep = ddsfl::run_sweep(ctx.manifest, ctx.cfg, ctx.cfg.seed);
            std::ostringstream report;
            for (const auto& step : sweep.steps) {
                report << step.param << "\t" << step.value << "\t" << std::fixed << std::setprecision(6)
                       << step.val_accuracy << (step.chosen ? "\tchosen" : "") << "\n";
            }
            ddsfl::write_file_atomic(ddsfl::artifact_path(ctx.out_dir, "sweep_report.tsv"), report.str());
            ddsfl::write_file_atomic(ddsfl::artifact_path(ctx.out_dir, "best_config.ini"),
                                     ddsfl::dump_config(sweep.best_config));
            const ddsfl::DeepModel model =
                ddsfl::train_deep(ctx.manifest, sweep.best_config, sweep.best_config.seed);
            const ddsfl::Metrics m = ddsfl::evaluate_model(model, ctx.manifest, sweep.best_config);
            ddsfl::write_file_atomic(ddsfl::artifact_path(ctx.out_dir, ddsfl::artifacts::metrics),
                                     ddsfl::format_metrics(m));
            std::cout << ddsfl::format_metrics(m);
        }
    } catch (const ddsfl::DataError& e) {
        ddsfl::log_error(e.what());
        return 3;
    } catch (const ddsfl::DimensionError& e) {
        ddsfl::log_error(e.what());
        return 3;
    } catch (const std::invalid_argument& e) {
        ddsfl::log_error(e.what());
        return 2;
    } catch (const std::exception& e) {
        ddsfl::log_error(e.what());
        return 4;
    }
    return 0;
}
