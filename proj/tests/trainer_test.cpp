#include <gtest/gtest.h>

#include <cmath>
#include <omp.h>

#include "octvae/log.hpp"
#include "octvae/text.hpp"
#include "octvae/trainer.hpp"
#include "support/fixtures.hpp"

using namespace octvae;
namespace fx = octvae::testing;
namespace fs = std::filesystem;

namespace {

class Trainer : public ::testing::Test {
protected:
    void SetUp() override {
        set_log_level(LogLevel::Silent);
        omp_set_num_threads(1);
    }
    void TearDown() override { set_log_level(LogLevel::Info); }
};

// 4 classes x 5 images at 32x32: 3 TRAIN, 1 VAL, 1 TEST per class.
struct Toy {
    fx::TempDir dir{"trainer"};
    DatasetManifest manifest = fx::synthetic_manifest(dir.path() / "data", 5, 32, 21, 3, 1);
    ArchitectureConfig arch = fx::reduced_architecture(32);

    TrainConfig config(const std::string& run, std::size_t epochs) const {
        TrainConfig c;
        c.learning_rate = 1e-3;
        c.batch_size = 5;
        c.max_epochs = epochs;
        c.seed = 77;
        c.checkpoint_dir = run.empty() ? fs::path{} : dir.path() / run;
        return c;
    }
};

std::vector<double> combined_trace(const std::vector<TrainLogRecord>& log) {
    std::vector<double> out;
    for (const auto& r : log) out.push_back(r.combined);
    return out;
}

void expect_same_records(const std::vector<TrainLogRecord>& a, const std::vector<TrainLogRecord>& b) {
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].epoch, b[i].epoch);
        EXPECT_EQ(a[i].step, b[i].step);
        EXPECT_EQ(a[i].split, b[i].split);
        EXPECT_EQ(a[i].l_c, b[i].l_c) << "record " << i;
        EXPECT_EQ(a[i].l_r, b[i].l_r) << "record " << i;
        EXPECT_EQ(a[i].l_z, b[i].l_z) << "record " << i;
        EXPECT_EQ(a[i].combined, b[i].combined) << "record " << i;
        EXPECT_EQ(a[i].accuracy, b[i].accuracy) << "record " << i;
    }
}

} // namespace

TEST(TrainConfigCheck, RejectsInvalidValues) {
    TrainConfig c;
    EXPECT_THROW(c.validate(), ConfigError); // no seed
    c.seed = 1;
    EXPECT_NO_THROW(c.validate());
    auto bad = c;
    bad.learning_rate = 0;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = c;
    bad.batch_size = 0;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = c;
    bad.early_stop_patience = 0;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = c;
    bad.clip_norm = -1.0;
    EXPECT_THROW(bad.validate(), ConfigError);
    EXPECT_EQ(c.learning_rate, 1e-4);
    EXPECT_EQ(c.batch_size, 64u);
    EXPECT_EQ(c.max_epochs, 50u);
    EXPECT_EQ(c.early_stop_patience, 10u);
    EXPECT_EQ(c.weight_r, 0.1);
    EXPECT_EQ(c.weight_z, 0.1);
}

TEST(TrainLog, RecordsRoundTrip) {
    const std::vector<TrainLogRecord> records{{1, 0, Split::Train, 1.3862943611198906, 0.08, 12.5, 2.6, 0.25, 0.01},
                                              {1, 3, Split::Val, 1.1, 1.0 / 3.0, 2e-9, 1.2, 0.5, 0.3}};
    std::string text = std::string(kTrainLogHeader) + "\n";
    for (const auto& r : records) text += format_log_record(r) + "\n";
    const auto back = parse_train_log(text);
    expect_same_records(back, records);
    EXPECT_EQ(back[1].wall_time_s, 0.3);
    EXPECT_THROW(parse_train_log("epoch,step\n"), IoError);
    EXPECT_THROW(parse_train_log(std::string(kTrainLogHeader) + "\n1,2,TRAIN,x,0,0,0,0,0\n"), IoError);
}

TEST_F(Trainer, RunWritesLogsAndSelectsBest) {
    Toy toy;
    const auto config = toy.config("run", 3);
    Model<float> model(toy.arch, 5);
    const auto result = train(model, toy.manifest, config);

    // 12 TRAIN images in batches of 5 -> 3 steps per epoch, plus one VAL record per epoch
    ASSERT_EQ(result.log.size(), 12u);
    EXPECT_EQ(result.steps, 9u);
    EXPECT_EQ(result.epochs_completed, 3u);
    std::size_t previous = 0;
    double lowest = INFINITY;
    for (const auto& r : result.log) {
        EXPECT_GE(r.step, previous);
        previous = r.step;
        for (double v : {r.l_c, r.l_r, r.l_z, r.combined, r.accuracy, r.wall_time_s}) EXPECT_TRUE(std::isfinite(v));
        if (r.split == Split::Val) lowest = std::min(lowest, r.combined);
    }
    EXPECT_EQ(result.best_val_combined, lowest);

    const auto dir = config.checkpoint_dir;
    for (const char* name : {"ckpt_epoch1.bin", "ckpt_epoch2.bin", "ckpt_epoch3.bin", "best.bin", "train_log.csv"})
        EXPECT_TRUE(fs::exists(dir / name)) << name;
    expect_same_records(parse_train_log(read_text_file(dir / kTrainLogName)), result.log);

    const auto best = load_checkpoint(dir / kBestCheckpointName);
    EXPECT_EQ(best, result.best);
    double stored = 0;
    ASSERT_TRUE(parse_double(best.meta_at("train.val_combined"), stored));
    EXPECT_EQ(stored, lowest);
    EXPECT_EQ(best.meta_at("train.epoch"), std::to_string(result.best_epoch));

    // the selected weights reproduce the selected VAL loss
    auto reloaded = model_from_checkpoint<float>(best);
    EXPECT_EQ(validate(reloaded, toy.manifest, Split::Val, config).mean.combined, lowest);
}

TEST_F(Trainer, BaselineWeightsLogCombinedEqualToClassLoss) {
    Toy toy;
    auto config = toy.config("", 2);
    config.weight_r = 0.0;
    config.weight_z = 0.0;
    Model<float> model(toy.arch, 6);
    const auto result = train(model, toy.manifest, config);
    for (const auto& r : result.log) {
        EXPECT_EQ(r.combined, r.l_c);
        EXPECT_GT(r.l_r, 0.0);
        EXPECT_GT(r.l_z, 0.0);
    }
}

TEST_F(Trainer, SingleThreadedRunsAreIdentical) {
    Toy toy;
    const auto config = toy.config("", 2);
    Model<float> a(toy.arch, 8), b(toy.arch, 8);
    const auto ra = train(a, toy.manifest, config);
    const auto rb = train(b, toy.manifest, config);
    EXPECT_EQ(combined_trace(ra.log), combined_trace(rb.log));
    EXPECT_EQ(a.checksum(), b.checksum());
    EXPECT_EQ(ra.best, rb.best);
}

TEST_F(Trainer, ResumeMatchesUninterruptedRun) {
    Toy toy;
    Model<float> straight(toy.arch, 9);
    const auto full = train(straight, toy.manifest, toy.config("full", 3));

    Model<float> first_leg(toy.arch, 9);
    train(first_leg, toy.manifest, toy.config("split", 2));
    Model<float> second_leg(toy.arch, 1234); // different init; everything comes from the checkpoint
    const auto config = toy.config("split", 3);
    const auto resumed = resume(second_leg, config.checkpoint_dir / "ckpt_epoch2.bin", toy.manifest, config);

    expect_same_records(resumed.log, full.log);
    EXPECT_EQ(second_leg.checksum(), straight.checksum());
    EXPECT_EQ(resumed.best, full.best);
    EXPECT_EQ(resumed.best_epoch, full.best_epoch);
    expect_same_records(parse_train_log(read_text_file(config.checkpoint_dir / kTrainLogName)), full.log);
}

TEST_F(Trainer, ResumeRejectsIncompatibleCheckpoints) {
    Toy toy;
    const auto config = toy.config("gate", 1);
    Model<float> model(toy.arch, 10);
    train(model, toy.manifest, config);
    const auto epoch_ckpt = config.checkpoint_dir / "ckpt_epoch1.bin";

    auto other_arch = toy.arch;
    other_arch.latent_dim = 8;
    Model<float> other(other_arch, 10);
    try {
        resume(other, epoch_ckpt, toy.manifest, config);
        FAIL() << "latent size mismatch accepted";
    } catch (const IoError& e) {
        EXPECT_NE(std::string(e.what()).find("arch.latent_dim"), std::string::npos) << e.what();
    }

    Model<float> same(toy.arch, 10);
    try {
        resume(same, config.checkpoint_dir / kBestCheckpointName, toy.manifest, config);
        FAIL() << "checkpoint without optimizer state accepted";
    } catch (const IoError& e) {
        EXPECT_NE(std::string(e.what()).find("optimizer state"), std::string::npos) << e.what();
    }

    auto reseeded = config;
    reseeded.seed = 78;
    EXPECT_THROW(resume(same, epoch_ckpt, toy.manifest, reseeded), ConfigError);
}

TEST_F(Trainer, ValidateIsFrozenAndDeterministic) {
    Toy toy;
    const auto config = toy.config("", 1);
    Model<float> model(toy.arch, 11);
    {
        // move the running statistics away from their initial values first
        NoGradGuard guard;
        const auto batch = load_batch(toy.manifest, toy.manifest.indices(Split::Train), {32, 1});
        model.forward(batch.pixels, Mode::Train, 1);
    }
    const auto before = model.checksum();
    const auto first = validate(model, toy.manifest, Split::Val, config);
    const auto second = validate(model, toy.manifest, Split::Val, config);
    EXPECT_EQ(model.checksum(), before);
    EXPECT_EQ(first.mean.combined, second.mean.combined);
    EXPECT_EQ(first.accuracy, second.accuracy);
    EXPECT_EQ(first.samples, 4u);

    // batch size must not change the sample-weighted means beyond rounding
    auto odd = config;
    odd.batch_size = 3;
    EXPECT_NEAR(validate(model, toy.manifest, Split::Val, odd).mean.l_r, first.mean.l_r, 1e-6);
}

TEST_F(Trainer, ValidateStubModels) {
    Toy toy;
    const auto config = toy.config("", 1);
    Model<float> model(toy.arch, 12);
    for (auto& v : model.parameter("classifier.weight").mutable_values()) v = 0.0f;
    auto bias = model.parameter("classifier.bias").mutable_values();
    std::fill(bias.begin(), bias.end(), 0.0f);
    EXPECT_NEAR(validate(model, toy.manifest, Split::Val, config).mean.l_c, std::log(4.0), 1e-6);

    // VAL restricted to class DME, classifier always answering DME
    DatasetManifest only_dme = toy.manifest;
    for (auto& e : only_dme.entries)
        if (e.split == Split::Val && e.label != 2) e.split = Split::Test;
    bias[2] = 10.0f;
    EXPECT_EQ(validate(model, only_dme, Split::Val, config).accuracy, 1.0);

    DatasetManifest no_val = toy.manifest;
    for (auto& e : no_val.entries)
        if (e.split == Split::Val) e.split = Split::Test;
    EXPECT_THROW(validate(model, no_val, Split::Val, config), ContractViolation);
    EXPECT_THROW(train(model, no_val, config), ContractViolation);
}

TEST_F(Trainer, NonFiniteLossAbortsWithLastGoodState) {
    Toy toy;
    const auto config = toy.config("nan", 2);
    Model<float> model(toy.arch, 13);
    const auto initial = model.state();
    // poison a weight after the first update
    auto poison = [&](const TrainLogRecord& r) {
        if (r.step == 0) model.parameter("classifier.bias").mutable_values()[1] = NAN;
    };
    try {
        train(model, toy.manifest, config, poison);
        FAIL() << "training continued on a NaN loss";
    } catch (const TrainingAborted& e) {
        EXPECT_NE(std::string(e.what()).find("non-finite"), std::string::npos);
        for (const auto& a : initial.arrays) EXPECT_EQ(e.last_good.at(a.name), a) << a.name;
        EXPECT_EQ(load_checkpoint(config.checkpoint_dir / "last_good.bin"), e.last_good);
    }
    // the log kept the finite first step
    const auto log = parse_train_log(read_text_file(config.checkpoint_dir / kTrainLogName));
    ASSERT_EQ(log.size(), 1u);
    EXPECT_TRUE(std::isfinite(log[0].combined));
}

TEST_F(Trainer, PatienceAndStepLimit) {
    Toy toy;
    auto config = toy.config("", 50);
    config.learning_rate = 1e-9; // VAL loss barely moves, improvement stalls quickly
    config.early_stop_patience = 2;
    Model<float> model(toy.arch, 14);
    auto result = train(model, toy.manifest, config);
    EXPECT_LT(result.epochs_completed, 50u);
    EXPECT_TRUE(result.early_stopped);
    EXPECT_EQ(result.epochs_completed - result.best_epoch, 2u);

    config.learning_rate = 1e-3;
    config.max_steps = 4;
    Model<float> limited(toy.arch, 14);
    result = train(limited, toy.manifest, config);
    EXPECT_EQ(result.steps, 4u);
    EXPECT_EQ(result.log.back().split, Split::Val);
}

TEST_F(Trainer, GradientClippingKeepsRunsFinite) {
    Toy toy;
    auto config = toy.config("", 1);
    config.clip_norm = 1e-3;
    Model<float> clipped(toy.arch, 15), free(toy.arch, 15);
    const auto a = train(clipped, toy.manifest, config);
    config.clip_norm.reset();
    const auto b = train(free, toy.manifest, config);
    // first step is taken before any update, so it matches
    EXPECT_EQ(a.log[0].combined, b.log[0].combined);
    EXPECT_NE(clipped.checksum(), free.checksum());
}
