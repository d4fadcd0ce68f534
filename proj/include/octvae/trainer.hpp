#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "octvae/adam.hpp"
#include "octvae/checkpoint.hpp"
#include "octvae/data.hpp"
#include "octvae/error.hpp"
#include "octvae/losses.hpp"
#include "octvae/model.hpp"

namespace octvae {

struct TrainConfig {
    double learning_rate = 1e-4;
    std::size_t batch_size = 64;
    std::size_t max_epochs = 50;
    double weight_r = 0.1;
    double weight_z = 0.1;
    std::optional<std::uint64_t> seed;
    std::size_t early_stop_patience = 10; // epochs without VAL improvement
    std::filesystem::path checkpoint_dir;
    std::size_t eval_every = 1; // epochs
    // Rescale gradients whose global L2 norm exceeds this; off when unset.
    std::optional<double> clip_norm;
    // Stop after this many optimizer steps; 0 means no limit.
    std::size_t max_steps = 0;
    ReconReduction recon_reduction = ReconReduction::Mean;
    std::size_t prefetch = 4;
    // Write ckpt_epoch{k}.bin after every epoch.
    bool epoch_checkpoints = true;

    /// Throws ConfigError naming the offending field.
    void validate() const;
};

struct TrainLogRecord {
    std::size_t epoch = 0;
    std::size_t step = 0;
    Split split = Split::Train;
    double l_c = 0, l_r = 0, l_z = 0, combined = 0;
    double accuracy = 0;
    double wall_time_s = 0;
};

inline constexpr const char* kTrainLogHeader = "epoch,step,split,l_c,l_r,l_z,combined,accuracy,wall_time_s";
inline constexpr const char* kTrainLogName = "train_log.csv";
inline constexpr const char* kBestCheckpointName = "best.bin";

std::string format_log_record(const TrainLogRecord& record);
/// Parses a whole log file body (header included).
std::vector<TrainLogRecord> parse_train_log(std::string_view text);
std::filesystem::path epoch_checkpoint_name(std::size_t epoch);

struct ValidationResult {
    LossBreakdown mean; // sample-weighted
    double accuracy = 0;
    std::size_t samples = 0;
};

/// Eval-mode pass without updates; batch-norm statistics are left untouched.
template <typename T>
ValidationResult validate(Model<T>& model, const DatasetManifest& manifest, Split split, const TrainConfig& config);

struct TrainResult {
    Checkpoint best;
    std::vector<TrainLogRecord> log;
    std::size_t best_epoch = 0;
    double best_val_combined = 0;
    std::size_t steps = 0;
    std::size_t epochs_completed = 0;
    bool early_stopped = false;
};

/// Raised when a loss or gradient turns non-finite. `last_good` holds the
/// state at the start of the epoch in which it happened and is also written
/// to `last_good.bin` in the checkpoint directory.
class TrainingAborted : public NumericError {
public:
    TrainingAborted(const std::string& message, Checkpoint last_good)
        : NumericError(message), last_good(std::move(last_good)) {}
    Checkpoint last_good;
};

/// Optimizer state, step and epoch counters saved alongside the model.
template <typename T>
struct TrainerState {
    AdamState<T> adam;
    std::size_t epoch = 0; // completed epochs
    std::size_t step = 0;  // optimizer steps taken
    double best_val_combined = INFINITY;
    std::size_t best_epoch = 0;
    std::size_t epochs_without_improvement = 0;
};

/// Model arrays plus `adam.m.*`, `adam.v.*` and `train.*` metadata.
template <typename T>
Checkpoint training_checkpoint(const Model<T>& model, const TrainerState<T>& state, const TrainConfig& config);

/// Restores model and trainer state; rejects checkpoints without optimizer
/// state and architecture, seed or batch-size mismatches with a message
/// naming the field.
template <typename T>
TrainerState<T> restore_training(Model<T>& model, const Checkpoint& checkpoint, const TrainConfig& config);

/// Called after every logged record; lets drivers print progress.
using TrainObserver = std::function<void(const TrainLogRecord&)>;

/// Shuffled TRAIN pass per epoch (noise seed derived from the step,
/// shuffle from the epoch), then a VAL pass. Keeps the checkpoint with the
/// lowest VAL combined loss, stops on max_epochs, max_steps or patience.
template <typename T>
TrainResult train(Model<T>& model, const DatasetManifest& manifest, const TrainConfig& config,
                  const TrainObserver& observer = {});

/// Continues a run from an epoch checkpoint written by train(). The log file
/// in the checkpoint directory is cut back to the checkpoint's step and
/// extended.
template <typename T>
TrainResult resume(Model<T>& model, const std::filesystem::path& checkpoint_path, const DatasetManifest& manifest,
                   const TrainConfig& config, const TrainObserver& observer = {});

} // namespace octvae
