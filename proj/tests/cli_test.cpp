#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <sys/wait.h>

#include "commands.hpp"
#include "octvae/error.hpp"
#include "octvae/evaluation.hpp"
#include "octvae/text.hpp"
#include "octvae/trainer.hpp"
#include "run_config.hpp"
#include "support/fixtures.hpp"

using namespace octvae;
namespace fx = octvae::testing;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    int code = -1;
    std::string out, err;
};

// Runs the real binary so exit codes and stream separation are what a shell sees.
Outcome run_tool(const std::string& args, const fs::path& scratch) {
    const auto out = scratch / "stdout.txt", err = scratch / "stderr.txt";
    const std::string command = std::string(OCTVAE_CLI_PATH) + " " + args + " >" + out.string() + " 2>" + err.string();
    const int status = std::system(command.c_str());
    Outcome o;
    o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    o.out = read_text_file(out);
    o.err = read_text_file(err);
    return o;
}

Outcome run_inline(std::vector<std::string> args) {
    args.insert(args.begin(), "octvae");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    Outcome o;
    o.code = cli::run_cli(int(argv.size()), argv.data(), out, err);
    o.out = out.str();
    o.err = err.str();
    return o;
}

std::vector<std::vector<std::string>> log_without_wall_time(const fs::path& run) {
    std::vector<std::vector<std::string>> rows;
    const auto text = read_text_file(run / kTrainLogName);
    for (const auto& line : split_lines(text)) {
        if (line.empty()) continue;
        auto fields = split_csv_line(line, 0, "log");
        fields.pop_back();
        rows.push_back(std::move(fields));
    }
    return rows;
}

std::size_t line_count(const std::string& text) { return std::size_t(std::count(text.begin(), text.end(), '\n')); }

// 4 classes x 12 procedural 64x64 images, split 6/3/3 per class, shared by the suite.
class Cli : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        suite_dir = new fx::TempDir("cli");
        fx::write_synthetic_dataset(root() / "data", 12, 64, 5);
        std::ofstream(root() / "tiny.cfg") << "# reduced model for tests\n"
                                              "input_size = 32\n"
                                              "encoder_width = 8\n"
                                              "decoder_base_channels = 8\n"
                                              "latent_dim = 16\n"
                                              "feature_dim = 125\n"
                                              "learning_rate = 0.001\n"
                                              "batch_size = 8\n"
                                              "max_epochs = 3\n"
                                              "train_per_class = 6\n"
                                              "val_per_class = 3\n"
                                              "threads = 1\n";
        const auto scan = run_tool("-q scan " + (root() / "data").string() + " --out " + root().string(), root());
        const auto split = run_tool("-q --config " + (root() / "tiny.cfg").string() + " --seed 3 --out " +
                                        root().string() + " split " + (root() / "manifest.csv").string(),
                                    root());
        const auto train = run_tool("-q --config " + (root() / "tiny.cfg").string() + " --seed 9 --out " +
                                        (root() / "run").string() + " train --manifest " + splits().string(),
                                    root());
        setup_ok = scan.code == 0 && split.code == 0 && train.code == 0;
        if (!setup_ok) std::cerr << scan.err << split.err << train.err;
    }
    static void TearDownTestSuite() {
        delete suite_dir;
        suite_dir = nullptr;
    }
    void SetUp() override { ASSERT_TRUE(setup_ok); }

    static const fs::path& root() { return suite_dir->path(); }
    static fs::path splits() { return root() / "splits.csv"; }
    static fs::path best() { return root() / "run" / kBestCheckpointName; }
    static std::string common() { return "-q --config " + (root() / "tiny.cfg").string() + " "; }

    fx::TempDir scratch{"cli_case"};

    static inline fx::TempDir* suite_dir = nullptr;
    static inline bool setup_ok = false;
};

} // namespace

TEST(RunConfig, ParsesAndRejectsWithLineNumbers) {
    cli::RunConfig c;
    c.merge_text("# comment\n\nseed = 12\n  batch_size=4  \nsource = z\n", "a.cfg");
    EXPECT_EQ(c.seed(), 12u);
    EXPECT_EQ(c.count("batch_size"), 4u);
    EXPECT_EQ(c.value("source"), "z");
    EXPECT_EQ(c.value("perplexity"), "30");
    EXPECT_FALSE(c.is_set("perplexity"));

    auto message = [](std::string_view text) {
        try {
            cli::RunConfig r;
            r.merge_text(text, "b.cfg");
        } catch (const ConfigError& e) {
            return std::string(e.what());
        }
        return std::string("no error");
    };
    EXPECT_NE(message("seed = 1\nbatch_sise = 4\n").find("b.cfg:2: unknown key 'batch_sise'"), std::string::npos);
    EXPECT_NE(message("batch_size = -4\n").find("non-negative integer"), std::string::npos);
    EXPECT_NE(message("learning_rate = fast\n").find("finite number"), std::string::npos);
    EXPECT_NE(message("learning_rate = inf\n").find("finite number"), std::string::npos);
    EXPECT_NE(message("source = sigma\n").find("mu|z|h"), std::string::npos);
    EXPECT_NE(message("mean = maybe\n").find("true or false"), std::string::npos);
    EXPECT_NE(message("seed = 1\nseed = 2\n").find("b.cfg:2: key 'seed' is set twice"), std::string::npos);
    EXPECT_NE(message("just words\n").find("b.cfg:1"), std::string::npos);
}

TEST(RunConfig, ResolvedTextRoundTrips) {
    cli::RunConfig c;
    c.merge_text("seed = 7\nweight_r = 0\nclip_norm = 2.5\nout = runs/a\nconcat_logits = true\n", "x");
    cli::RunConfig back;
    back.merge_text(c.resolved_text("train"), "echo");
    for (const auto& key : cli::config_schema()) EXPECT_EQ(back.value(key.key), c.value(key.key)) << key.key;
    EXPECT_EQ(back.resolved_text("train"), c.resolved_text("train"));

    const auto t = back.training();
    EXPECT_EQ(t.seed, 7u);
    EXPECT_EQ(t.weight_r, 0.0);
    EXPECT_EQ(t.clip_norm, 2.5);
    EXPECT_EQ(t.checkpoint_dir, fs::path("runs/a"));
    EXPECT_TRUE(back.architecture().concat_logits);
    // an empty value resets to the default
    back.set("clip_norm", "");
    EXPECT_FALSE(back.training().clip_norm.has_value());
}

TEST(RunConfig, ArchitectureAndTrainingValidate) {
    cli::RunConfig c;
    c.set("input_channels", "2");
    EXPECT_THROW(c.architecture(), ConfigError);
    cli::RunConfig d;
    EXPECT_THROW(d.training(), ConfigError); // no seed
    d.set("seed", "1");
    d.set("batch_size", "0");
    EXPECT_THROW(d.training(), ConfigError);
}

TEST(CliArgs, HelpUsageAndPrecedence) {
    const auto help = run_inline({"--help"});
    EXPECT_EQ(help.code, cli::kExitOk);
    EXPECT_NE(help.out.find("embed"), std::string::npos);
    EXPECT_EQ(run_inline({"train", "--help"}).code, cli::kExitOk);
    EXPECT_EQ(run_inline({}).code, cli::kExitUsage);
    EXPECT_EQ(run_inline({"frobnicate"}).code, cli::kExitUsage);
    EXPECT_EQ(run_inline({"train", "--no-such-flag"}).code, cli::kExitUsage);
    EXPECT_EQ(run_inline({"--set", "no_such_key=1", "sample"}).code, cli::kExitUsage);
    const auto bad_set = run_inline({"--set", "seed", "sample"});
    EXPECT_EQ(bad_set.code, cli::kExitUsage);
    EXPECT_NE(bad_set.err.find("KEY=VALUE"), std::string::npos);
    const auto missing = run_inline({"sample"});
    EXPECT_EQ(missing.code, cli::kExitUsage);
    EXPECT_NE(missing.err.find("checkpoint is required"), std::string::npos);

    // file < --set < named flag, and global flags may follow the subcommand
    fx::TempDir dir("cli_precedence");
    std::ofstream(dir.path() / "p.cfg") << "seed = 1\ntrain_per_class = 1\nval_per_class = 1\n";
    DatasetManifest m;
    for (std::size_t k = 0; k < 4 * 5; ++k) m.entries.push_back({"img" + std::to_string(k) + ".png", k % 4});
    write_manifest(m, dir.path() / "m.csv");
    const auto r = run_inline({"--config", (dir.path() / "p.cfg").string(), "--set", "train_per_class=3", "split",
                               (dir.path() / "m.csv").string(), "--train-per-class", "2", "--out",
                               (dir.path() / "o").string()});
    ASSERT_EQ(r.code, cli::kExitOk) << r.err;
    cli::RunConfig echoed;
    echoed.merge_file(dir.path() / "o" / "resolved_split.cfg");
    EXPECT_EQ(echoed.count("train_per_class"), 2u);
    EXPECT_EQ(echoed.seed(), 1u);
    EXPECT_EQ(read_manifest(dir.path() / "o" / "splits.csv").class_counts(Split::Train)[0], 2u);
}

TEST_F(Cli, ScanWritesManifestAndRejectsEmptyClass) {
    EXPECT_EQ(read_manifest(root() / "manifest.csv").entries.size(), 48u);
    EXPECT_TRUE(fs::exists(root() / "resolved_scan.cfg"));

    const auto data = scratch.path() / "data";
    fx::write_synthetic_dataset(data, 2, 16, 1);
    for (const auto& f : fs::directory_iterator(data / "DME")) fs::remove(f.path());
    const auto r = run_tool("scan " + data.string() + " --out " + scratch.path().string(), scratch.path());
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("DME"), std::string::npos) << r.err;
    EXPECT_EQ(run_tool("scan " + (scratch.path() / "nowhere").string(), scratch.path()).code, 2);
}

TEST_F(Cli, SplitCountsSeedReplayAndClamping) {
    // defaults on a 4 x 1000 corpus; split only reads the manifest, so no images are needed
    DatasetManifest big;
    for (std::size_t k = 0; k < 4000; ++k) big.entries.push_back({"x/" + std::to_string(k) + ".png", k % 4});
    write_manifest(big, scratch.path() / "big.csv");
    const auto r = run_tool("--seed 11 --out " + scratch.path().string() + " split " +
                                (scratch.path() / "big.csv").string(),
                            scratch.path());
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("TRAIN       500      500      500      500     2000"), std::string::npos) << r.out;
    EXPECT_NE(r.out.find("VAL         250      250      250      250     1000"), std::string::npos);
    EXPECT_NE(r.out.find("TEST        250      250      250      250     1000"), std::string::npos);
    const auto first = read_text_file(scratch.path() / "splits.csv");
    const auto again = run_tool("--seed 11 --json --out " + scratch.path().string() + " split " +
                                    (scratch.path() / "big.csv").string(),
                                scratch.path());
    ASSERT_EQ(again.code, 0);
    EXPECT_EQ(read_text_file(scratch.path() / "splits.csv"), first);
    const auto doc = nlohmann::json::parse(again.out);
    EXPECT_EQ(doc["counts"]["TRAIN"]["total"], 2000);

    const auto no_seed = run_tool("split " + (scratch.path() / "big.csv").string(), scratch.path());
    EXPECT_EQ(no_seed.code, 2);
    EXPECT_NE(no_seed.err.find("seed"), std::string::npos);

    const auto clamped = run_tool("--seed 1 --out " + scratch.path().string() + " split --train-per-class 900 " +
                                      "--val-per-class 300 " + (scratch.path() / "big.csv").string(),
                                  scratch.path());
    EXPECT_EQ(clamped.code, 0);
    EXPECT_NE(clamped.err.find("warn"), std::string::npos);
    EXPECT_NE(clamped.out.find("VAL         100      100      100      100      400"), std::string::npos)
        << clamped.out;
}

TEST_F(Cli, TrainWritesRunDirectory) {
    const auto run = root() / "run";
    EXPECT_TRUE(fs::exists(best()));
    EXPECT_TRUE(fs::exists(run / "ckpt_epoch3.bin"));
    const auto log = parse_train_log(read_text_file(run / kTrainLogName));
    EXPECT_EQ(log.size(), 3u * 3u + 3u); // 24 TRAIN images at batch 8, one VAL record per epoch
    cli::RunConfig echoed;
    echoed.merge_file(run / "resolved_train.cfg");
    EXPECT_EQ(echoed.seed(), 9u);
    EXPECT_EQ(echoed.count("input_size"), 32u);
}

TEST_F(Cli, ResolvedConfigReproducesTheRun) {
    const auto again = scratch.path() / "again";
    const auto r = run_tool("-q --config " + (root() / "run" / "resolved_train.cfg").string() + " --out " +
                                again.string() + " train",
                            scratch.path());
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(log_without_wall_time(again), log_without_wall_time(root() / "run"));
    EXPECT_EQ(load_checkpoint(again / kBestCheckpointName), load_checkpoint(best()));
}

TEST_F(Cli, BaselineWeightsLogClassificationLossOnly) {
    const auto run = scratch.path() / "baseline";
    const auto r = run_tool(common() + "--seed 9 --out " + run.string() + " train --epochs 1 --weights-r 0 " +
                                "--weights-z 0 --manifest " + splits().string(),
                            scratch.path());
    ASSERT_EQ(r.code, 0) << r.err;
    const auto log = parse_train_log(read_text_file(run / kTrainLogName));
    ASSERT_FALSE(log.empty());
    for (const auto& rec : log) EXPECT_EQ(rec.combined, rec.l_c);
}

TEST_F(Cli, ResumeMatchesUninterruptedRun) {
    const auto run = scratch.path() / "part";
    const std::string base = common() + "--seed 9 --out " + run.string() + " train --manifest " + splits().string();
    ASSERT_EQ(run_tool(base + " --epochs 1", scratch.path()).code, 0);
    const auto r = run_tool(base + " --resume " + (run / "ckpt_epoch1.bin").string(), scratch.path());
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(log_without_wall_time(run), log_without_wall_time(root() / "run"));
    EXPECT_EQ(load_checkpoint(run / kBestCheckpointName), load_checkpoint(best()));

    const auto wrong_seed = run_tool(common() + "--seed 10 --out " + run.string() + " train --manifest " +
                                         splits().string() + " --resume " + (run / "ckpt_epoch1.bin").string(),
                                     scratch.path());
    EXPECT_EQ(wrong_seed.code, 2);
    EXPECT_NE(wrong_seed.err.find("train.seed"), std::string::npos);
}

TEST_F(Cli, EvalReportsAgreeWithPredictionDump) {
    const auto out = scratch.path() / "eval";
    const auto r = run_tool("--out " + out.string() + " eval --checkpoint " + best().string() + " --manifest " +
                                splits().string() + " --dump-predictions",
                            scratch.path());
    ASSERT_EQ(r.code, 0) << r.err;
    ASSERT_TRUE(fs::exists(out / "eval_test.txt"));
    ASSERT_TRUE(fs::exists(out / "eval_test_confusion.csv"));
    double accuracy = -1;
    std::size_t samples = 0;
    const auto report = read_text_file(out / "eval_test.txt");
    for (const auto& line : split_lines(report)) {
        if (line.rfind("accuracy=", 0) == 0) {
            ASSERT_TRUE(parse_double(line.substr(9), accuracy));
        }
        if (line.rfind("samples=", 0) == 0) samples = std::stoul(std::string(line.substr(8)));
    }
    EXPECT_EQ(samples, 12u);

    // independent recount from the dump
    const auto dump = read_text_file(out / "predictions_test.csv");
    const auto rows = split_lines(dump);
    ASSERT_EQ(rows[0], "entry,path,label,predicted,class_loss");
    std::size_t hits = 0, n = 0;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        if (rows[i].empty()) continue;
        const auto f = split_csv_line(rows[i], i + 1, "dump");
        hits += f[2] == f[3];
        ++n;
    }
    EXPECT_EQ(n, 12u);
    EXPECT_EQ(accuracy, double(hits) / double(n));

    const auto j = run_tool("--json --out " + out.string() + " eval --split val --checkpoint " + best().string() +
                                " --manifest " + splits().string(),
                            scratch.path());
    ASSERT_EQ(j.code, 0) << j.err;
    const auto doc = nlohmann::json::parse(j.out);
    EXPECT_EQ(doc["samples"], 12);
    EXPECT_EQ(nlohmann::json::parse(read_text_file(out / "eval_val.json")), doc);
    EXPECT_TRUE(doc["accuracy"].is_number());

    const auto missing = run_tool("eval --checkpoint " + (scratch.path() / "none.bin").string() + " --manifest " +
                                      splits().string(),
                                  scratch.path());
    EXPECT_EQ(missing.code, 2);
    fs::create_directories(scratch.path() / "junk");
    std::ofstream(scratch.path() / "junk" / "bad.bin") << "not a checkpoint";
    const auto corrupt = run_tool("--out " + out.string() + " eval --checkpoint " +
                                      (scratch.path() / "junk" / "bad.bin").string() + " --manifest " +
                                      splits().string(),
                                  scratch.path());
    EXPECT_EQ(corrupt.code, 1);
}

TEST_F(Cli, EmbedIsSeededAndChecksPerplexity) {
    const std::string args = "--set tsne_iterations=300 --out " + scratch.path().string() + " embed --checkpoint " +
                             best().string() + " --manifest " + splits().string() + " --perplexity 5";
    ASSERT_EQ(run_tool("--seed 4 " + args, scratch.path()).code, 0);
    const auto csv = scratch.path() / "embedding_train_mu.csv";
    const auto first = read_text_file(csv);
    EXPECT_EQ(line_count(first), 25u);
    EXPECT_TRUE(fs::exists(scratch.path() / "embedding_train_mu.png"));
    ASSERT_EQ(run_tool("--seed 4 " + args, scratch.path()).code, 0);
    EXPECT_EQ(read_text_file(csv), first);

    const auto z = run_tool("--seed 4 --json " + args + " --source z --split val", scratch.path());
    ASSERT_EQ(z.code, 2) << z.err; // 12 VAL points cannot carry perplexity 5
    EXPECT_NE(z.err.find("perplexity < 4"), std::string::npos) << z.err;

    const auto ok = run_tool("--seed 4 --json " + args + " --source z --split val --perplexity 3", scratch.path());
    ASSERT_EQ(ok.code, 0) << ok.err;
    EXPECT_EQ(nlohmann::json::parse(ok.out)["rows"], 12);
    EXPECT_TRUE(fs::exists(scratch.path() / "embedding_val_z.csv"));
}

TEST_F(Cli, SampleWritesSeededImages) {
    const auto a = scratch.path() / "a", b = scratch.path() / "b", m = scratch.path() / "m";
    const std::string ck = " sample --checkpoint " + best().string();
    ASSERT_EQ(run_tool("--seed 2 --out " + a.string() + ck + " --count 3", scratch.path()).code, 0);
    ASSERT_EQ(run_tool("--seed 2 --out " + b.string() + ck + " --count 3", scratch.path()).code, 0);
    for (const char* name : {"sample_0000.png", "sample_0001.png", "sample_0002.png"}) {
        ASSERT_TRUE(fs::exists(a / name)) << name;
        EXPECT_EQ(read_text_file(a / name), read_text_file(b / name));
    }
    EXPECT_FALSE(fs::exists(a / "sample_0003.png"));
    const auto mean = run_tool("--json --out " + m.string() + ck + " --mean", scratch.path());
    ASSERT_EQ(mean.code, 0);
    EXPECT_EQ(nlohmann::json::parse(mean.out)["files"].size(), 1u);
    EXPECT_TRUE(fs::exists(m / "prior_mean.png"));
    EXPECT_EQ(run_tool("--out " + m.string() + ck + " --count 0", scratch.path()).code, 2);
}
