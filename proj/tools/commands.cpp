#include "commands.hpp"

#include <omp.h>

#include <CLI11.hpp>
#include <cstdio>
#include <iostream>
#include <json.hpp>

#include "octvae/checkpoint.hpp"
#include "octvae/data.hpp"
#include "octvae/error.hpp"
#include "octvae/evaluation.hpp"
#include "octvae/latent_tools.hpp"
#include "octvae/log.hpp"
#include "octvae/text.hpp"
#include "octvae/trainer.hpp"
#include "run_config.hpp"

namespace octvae::cli {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

struct Context {
    RunConfig& config;
    bool json = false;
    std::ostream& out;
};

using Overrides = std::vector<std::pair<std::string, std::string>>;

void bind_option(CLI::App* app, const std::string& name, std::string key, Overrides& into, const std::string& help) {
    app->add_option_function<std::string>(name, [&into, key](const std::string& v) { into.emplace_back(key, v); }, help)
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
}

void bind_flag(CLI::App* app, const std::string& name, std::string key, Overrides& into, const std::string& help) {
    app->add_flag_callback(name, [&into, key] { into.emplace_back(key, "true"); }, help);
}

std::string lower(std::string_view s) {
    std::string r(s);
    for (auto& c : r) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return r;
}

fs::path out_dir(const RunConfig& config) { return config.value("out"); }

void echo_config(const RunConfig& config, std::string_view command) {
    const fs::path dir = out_dir(config);
    fs::create_directories(dir);
    write_file_atomic(dir / ("resolved_" + std::string(command) + ".cfg"), config.resolved_text(command));
}

fs::path existing_file(const RunConfig& config, std::string_view key) {
    const auto p = config.required_path(key);
    if (!fs::is_regular_file(p)) throw ConfigError(std::string(key) + ": no such file " + p.string());
    return p;
}

DatasetManifest manifest_of(const RunConfig& config) { return read_manifest(existing_file(config, "manifest")); }

Split split_of(const RunConfig& config, Split fallback) {
    const auto v = config.value("split");
    return v.empty() ? fallback : *parse_split(v);
}

std::string counts_table(const DatasetManifest& m, std::span<const std::pair<std::string, std::optional<Split>>> rows) {
    char line[128];
    std::snprintf(line, sizeof line, "%-6s %8s %8s %8s %8s %8s\n", "split", "NORMAL", "DRUSEN", "DME", "CNV",
                  "total");
    std::string out = line;
    for (const auto& [name, split] : rows) {
        const auto c = m.class_counts(split);
        std::snprintf(line, sizeof line, "%-6s %8zu %8zu %8zu %8zu %8zu\n", name.c_str(), c[0], c[1], c[2], c[3],
                      c[0] + c[1] + c[2] + c[3]);
        out += line;
    }
    return out;
}

json counts_json(const DatasetManifest& m, std::optional<Split> split) {
    json j;
    const auto c = m.class_counts(split);
    std::size_t total = 0;
    for (std::size_t k = 0; k < kNumClasses; ++k) {
        j[std::string(class_name(k))] = c[k];
        total += c[k];
    }
    j["total"] = total;
    return j;
}

void cmd_scan(Context& ctx) {
    const auto root = ctx.config.required_path("data_root");
    if (!fs::is_directory(root)) throw ConfigError("data_root: " + root.string() + " is not a directory");
    DatasetManifest manifest;
    try {
        manifest = scan_dataset(root);
    } catch (const IoError& e) {
        // a malformed tree is bad input, not a runtime failure
        throw ConfigError(e.what());
    }
    echo_config(ctx.config, "scan");
    const auto path = out_dir(ctx.config) / "manifest.csv";
    write_manifest(manifest, path);
    if (ctx.json) {
        ctx.out << json{{"manifest", path.string()}, {"counts", counts_json(manifest, std::nullopt)}}.dump(2) << "\n";
        return;
    }
    const std::pair<std::string, std::optional<Split>> rows[] = {{"ALL", std::nullopt}};
    ctx.out << counts_table(manifest, rows) << "wrote " << path.string() << "\n";
}

void cmd_split(Context& ctx) {
    const auto manifest = manifest_of(ctx.config);
    const auto split = make_splits(manifest, ctx.config.seed(), ctx.config.count("train_per_class"),
                                   ctx.config.count("val_per_class"));
    echo_config(ctx.config, "split");
    const auto path = out_dir(ctx.config) / "splits.csv";
    write_manifest(split, path);
    if (ctx.json) {
        json counts;
        for (Split s : {Split::Train, Split::Val, Split::Test}) counts[std::string(split_name(s))] = counts_json(split, s);
        ctx.out << json{{"manifest", path.string()}, {"seed", *ctx.config.seed()}, {"counts", counts}}.dump(2)
                << "\n";
        return;
    }
    const std::pair<std::string, std::optional<Split>> rows[] = {
        {"TRAIN", Split::Train}, {"VAL", Split::Val}, {"TEST", Split::Test}};
    ctx.out << counts_table(split, rows) << "wrote " << path.string() << "\n";
}

template <typename T>
void train_as(Context& ctx, const std::optional<fs::path>& resume_from) {
    const auto manifest = manifest_of(ctx.config);
    const auto config = ctx.config.training();
    Model<T> model(ctx.config.architecture(), *config.seed);
    if (resume_from && !fs::is_regular_file(*resume_from))
        throw ConfigError("resume: no such file " + resume_from->string());
    echo_config(ctx.config, "train");
    if (!ctx.json) ctx.out << "parameters: " << model.parameter_count() << "\n";

    const TrainObserver observer = [&](const TrainLogRecord& r) {
        if (ctx.json || r.split != Split::Val) return;
        char line[200];
        std::snprintf(line, sizeof line, "epoch %zu step %zu VAL l_c %.6g l_r %.6g l_z %.6g combined %.6g acc %.4f\n",
                      r.epoch, r.step, r.l_c, r.l_r, r.l_z, r.combined, r.accuracy);
        ctx.out << line << std::flush;
    };
    const auto result = resume_from ? resume(model, *resume_from, manifest, config, observer)
                                    : train(model, manifest, config, observer);
    const auto best = out_dir(ctx.config) / kBestCheckpointName;
    if (ctx.json) {
        ctx.out << json{{"run_dir", out_dir(ctx.config).string()},
                        {"best_checkpoint", best.string()},
                        {"best_epoch", result.best_epoch},
                        {"best_val_combined", result.best_val_combined},
                        {"steps", result.steps},
                        {"epochs_completed", result.epochs_completed},
                        {"early_stopped", result.early_stopped}}
                       .dump(2)
                << "\n";
        return;
    }
    ctx.out << "best epoch " << result.best_epoch << " (VAL combined " << format_double(result.best_val_combined)
            << "), " << result.steps << " steps" << (result.early_stopped ? ", stopped early" : "") << "\n"
            << "wrote " << best.string() << "\n";
}

template <typename T>
void eval_as(Context& ctx) {
    const auto manifest = manifest_of(ctx.config);
    auto model = model_from_checkpoint<T>(load_checkpoint(existing_file(ctx.config, "checkpoint")));
    const Split split = split_of(ctx.config, Split::Test);
    echo_config(ctx.config, "eval");
    const auto result = evaluate(model, manifest, split, ctx.config.count("eval_batch_size"));
    const auto stem = out_dir(ctx.config) / ("eval_" + lower(split_name(split)));
    write_report(result.report, stem, ctx.json);
    if (ctx.config.flag("dump_predictions"))
        write_file_atomic(out_dir(ctx.config) / ("predictions_" + lower(split_name(split)) + ".csv"),
                          predictions_to_csv(manifest, result.predictions));
    if (ctx.json) {
        ctx.out << report_to_json(result.report);
        return;
    }
    ctx.out << report_to_text(result.report) << "wrote " << stem.string() << ".txt\n";
}

template <typename T>
void embed_as(Context& ctx) {
    const auto manifest = manifest_of(ctx.config);
    auto model = model_from_checkpoint<T>(load_checkpoint(existing_file(ctx.config, "checkpoint")));
    const Split split = split_of(ctx.config, Split::Train);
    const auto source = *parse_latent_source(ctx.config.value("source"));
    const auto tsne = ctx.config.tsne();
    // fail before the encoder pass
    check_perplexity(tsne.perplexity, manifest.indices(split).size());
    ctx.config.set("seed", std::to_string(tsne.seed));
    echo_config(ctx.config, "embed");
    const auto latents =
        extract_latents(model, manifest, split, source, tsne.seed, ctx.config.count("eval_batch_size"));
    const auto embedding = tsne_2d(latents, tsne);
    const auto stem =
        out_dir(ctx.config) / ("embedding_" + lower(split_name(split)) + "_" + std::string(latent_source_name(source)));
    export_embedding(embedding, stem);
    if (ctx.json) {
        ctx.out << json{{"csv", stem.string() + ".csv"},
                        {"png", stem.string() + ".png"},
                        {"rows", embedding.rows},
                        {"final_kl", embedding.final_kl},
                        {"bandwidth_fallbacks", embedding.bandwidth_fallbacks}}
                       .dump(2)
                << "\n";
        return;
    }
    ctx.out << embedding.rows << " points, final KL " << format_double(embedding.final_kl) << "\nwrote "
            << stem.string() << ".csv and .png\n";
}

template <typename T>
void sample_as(Context& ctx) {
    const auto model = model_from_checkpoint<T>(load_checkpoint(existing_file(ctx.config, "checkpoint")));
    const std::uint64_t seed = ctx.config.seed().value_or(0);
    ctx.config.set("seed", std::to_string(seed));
    const std::size_t count = ctx.config.count("count");
    if (count == 0) throw ConfigError("count must be at least 1");
    echo_config(ctx.config, "sample");
    const auto files = sample_prior(model, count, seed, out_dir(ctx.config), ctx.config.flag("mean"));
    if (ctx.json) {
        json list = json::array();
        for (const auto& f : files) list.push_back(f.string());
        ctx.out << json{{"files", list}}.dump(2) << "\n";
        return;
    }
    for (const auto& f : files) ctx.out << "wrote " << f.string() << "\n";
}

template <template <typename> class Fn, typename... Args>
void with_precision(Context& ctx, Args&&... args) {
    if (ctx.config.value("precision") == "double")
        Fn<double>{}(ctx, std::forward<Args>(args)...);
    else
        Fn<float>{}(ctx, std::forward<Args>(args)...);
}

template <typename T>
struct Train {
    void operator()(Context& ctx, const std::optional<fs::path>& resume_from) { train_as<T>(ctx, resume_from); }
};
template <typename T>
struct Eval {
    void operator()(Context& ctx) { eval_as<T>(ctx); }
};
template <typename T>
struct Embed {
    void operator()(Context& ctx) { embed_as<T>(ctx); }
};
template <typename T>
struct Sample {
    void operator()(Context& ctx) { sample_as<T>(ctx); }
};

} // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Joint classifier and variational autoencoder for retinal OCT scans", "octvae"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path;
    bool as_json = false, quiet = false;
    std::vector<std::string> assignments;
    Overrides flags;
    app.add_option("--config", config_path, "settings file with one 'key = value' per line");
    bind_option(&app, "--seed", "seed", flags, "master seed");
    bind_option(&app, "--out", "out", flags, "output directory");
    bind_option(&app, "--threads", "threads", flags, "OpenMP threads (0: runtime default)");
    app.add_flag("--json", as_json, "machine-readable output");
    app.add_flag("-q,--quiet", quiet, "only print warnings and errors from the library");
    app.add_option("--set", assignments, "override any setting, KEY=VALUE (repeatable)");

    auto* scan = app.add_subcommand("scan", "list class folders of a dataset into <out>/manifest.csv");
    bind_option(scan, "root", "data_root", flags, "dataset root");

    auto* split = app.add_subcommand("split", "draw seeded TRAIN/VAL/TEST splits into <out>/splits.csv");
    bind_option(split, "manifest", "manifest", flags, "manifest from 'scan'");
    bind_option(split, "--train-per-class", "train_per_class", flags, "TRAIN images per class");
    bind_option(split, "--val-per-class", "val_per_class", flags, "VAL images per class");

    std::string resume_from;
    auto* train_cmd = app.add_subcommand("train", "train into the run directory <out>");
    bind_option(train_cmd, "--manifest", "manifest", flags, "split manifest");
    bind_option(train_cmd, "--weights-r", "weight_r", flags, "reconstruction loss weight");
    bind_option(train_cmd, "--weights-z", "weight_z", flags, "KL loss weight");
    bind_option(train_cmd, "--epochs", "max_epochs", flags, "epoch limit");
    bind_option(train_cmd, "--lr", "learning_rate", flags, "Adam step size");
    bind_option(train_cmd, "--batch-size", "batch_size", flags, "batch size");
    train_cmd->add_option("--resume", resume_from, "continue from an epoch checkpoint");

    auto* eval_cmd = app.add_subcommand("eval", "score a checkpoint on one split");
    bind_option(eval_cmd, "--checkpoint", "checkpoint", flags, "model checkpoint");
    bind_option(eval_cmd, "--manifest", "manifest", flags, "split manifest");
    bind_option(eval_cmd, "--split", "split", flags, "train, val or test (default test)");
    bind_flag(eval_cmd, "--dump-predictions", "dump_predictions", flags, "write per-sample predictions");

    auto* embed_cmd = app.add_subcommand("embed", "t-SNE map of latent rows as CSV and PNG");
    bind_option(embed_cmd, "--checkpoint", "checkpoint", flags, "model checkpoint");
    bind_option(embed_cmd, "--manifest", "manifest", flags, "split manifest");
    bind_option(embed_cmd, "--split", "split", flags, "train, val or test (default train)");
    bind_option(embed_cmd, "--source", "source", flags, "mu, z or h");
    bind_option(embed_cmd, "--perplexity", "perplexity", flags, "t-SNE perplexity");

    auto* sample_cmd = app.add_subcommand("sample", "decode prior draws to PNG files in <out>");
    bind_option(sample_cmd, "--checkpoint", "checkpoint", flags, "model checkpoint");
    bind_option(sample_cmd, "--count", "count", flags, "number of images");
    bind_flag(sample_cmd, "--mean", "mean", flags, "decode z = 0 only");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (quiet) set_log_level(LogLevel::Warning);
        RunConfig config;
        if (!config_path.empty()) config.merge_file(config_path);
        for (const auto& a : assignments) {
            const auto eq = a.find('=');
            if (eq == std::string::npos) throw ConfigError("--set expects KEY=VALUE, got '" + a + "'");
            config.set(a.substr(0, eq), a.substr(eq + 1), "--set");
        }
        for (const auto& [key, value] : flags) config.set(key, value, "command line");
        if (const std::size_t threads = config.count("threads"); threads > 0)
            omp_set_num_threads(static_cast<int>(threads));

        Context ctx{config, as_json, out};
        if (scan->parsed())
            cmd_scan(ctx);
        else if (split->parsed())
            cmd_split(ctx);
        else if (train_cmd->parsed())
            with_precision<Train>(ctx, resume_from.empty() ? std::nullopt : std::optional<fs::path>(resume_from));
        else if (eval_cmd->parsed())
            with_precision<Eval>(ctx);
        else if (embed_cmd->parsed())
            with_precision<Embed>(ctx);
        else if (sample_cmd->parsed())
            with_precision<Sample>(ctx);
        out << std::flush;
        return kExitOk;
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const ContractViolation& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitFailure;
    }
}

} // namespace octvae::cli
