#include "octvae/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>

#include "octvae/error.hpp"
#include "octvae/log.hpp"
#include "octvae/rng.hpp"
#include "octvae/text.hpp"

namespace octvae {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
        throw ConfigError("learning_rate must be positive, got " + format_double(learning_rate));
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (max_epochs < 1) throw ConfigError("max_epochs must be at least 1");
    if (early_stop_patience < 1) throw ConfigError("early_stop_patience must be at least 1");
    if (eval_every < 1) throw ConfigError("eval_every must be at least 1");
    if (!(weight_r >= 0.0) || !(weight_z >= 0.0)) throw ConfigError("weight_r and weight_z must be non-negative");
    if (!seed) throw ConfigError("seed is required for training");
    if (clip_norm && !(*clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
}

std::string format_log_record(const TrainLogRecord& r) {
    return std::to_string(r.epoch) + "," + std::to_string(r.step) + "," + std::string(split_name(r.split)) + "," +
           format_double(r.l_c) + "," + format_double(r.l_r) + "," + format_double(r.l_z) + "," +
           format_double(r.combined) + "," + format_double(r.accuracy) + "," + format_double(r.wall_time_s);
}

std::vector<TrainLogRecord> parse_train_log(std::string_view text) {
    const auto lines = split_lines(text);
    if (lines.empty() || lines[0] != kTrainLogHeader) throw IoError("training log: unexpected header");
    std::vector<TrainLogRecord> out;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        if (lines[i].empty()) continue;
        const auto f = split_csv_line(lines[i], i + 1, "training log");
        TrainLogRecord r;
        const auto split = f.size() == 9 ? parse_split(f[2]) : std::nullopt;
        bool ok = split.has_value();
        try {
            r.epoch = ok ? std::stoull(f[0]) : 0;
            r.step = ok ? std::stoull(f[1]) : 0;
        } catch (const std::exception&) {
            ok = false;
        }
        ok = ok && parse_double(f[3], r.l_c) && parse_double(f[4], r.l_r) && parse_double(f[5], r.l_z) &&
             parse_double(f[6], r.combined) && parse_double(f[7], r.accuracy) && parse_double(f[8], r.wall_time_s);
        if (!ok) throw IoError("training log line " + std::to_string(i + 1) + " is malformed");
        r.split = *split;
        out.push_back(r);
    }
    return out;
}

fs::path epoch_checkpoint_name(std::size_t epoch) { return "ckpt_epoch" + std::to_string(epoch) + ".bin"; }

namespace {

template <typename T>
std::size_t count_correct(const Tensor<T>& logits, std::span<const std::size_t> labels) {
    const std::size_t classes = logits.dim(1);
    const auto v = logits.values();
    std::size_t correct = 0;
    for (std::size_t b = 0; b < labels.size(); ++b) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < classes; ++k)
            if (v[b * classes + k] > v[b * classes + best]) best = k;
        correct += best == labels[b];
    }
    return correct;
}

LossWeights weights_of(const TrainConfig& c) { return {c.weight_r, c.weight_z, c.recon_reduction}; }

template <typename T>
void clip_gradients(std::vector<NamedTensor<T>>& params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params)
        for (T g : p.tensor.grad()) sq += double(g) * double(g);
    const double norm = std::sqrt(sq);
    if (!(norm > max_norm)) return;
    const T factor = static_cast<T>(max_norm / norm);
    for (auto& p : params)
        for (T& g : p.tensor.mutable_grad()) g *= factor;
}

// Append-only CSV, flushed after every record so crashed runs stay readable.
class LogWriter {
public:
    LogWriter(const fs::path& dir, const std::vector<TrainLogRecord>& existing) {
        if (dir.empty()) return;
        path_ = dir / kTrainLogName;
        std::string body = std::string(kTrainLogHeader) + "\n";
        for (const auto& r : existing) body += format_log_record(r) + "\n";
        write_file_atomic(path_, body);
        out_.open(path_, std::ios::binary | std::ios::app);
        if (!out_) throw IoError("cannot append to " + path_.string());
    }
    void append(const TrainLogRecord& r) {
        if (!out_.is_open()) return;
        out_ << format_log_record(r) << '\n';
        out_.flush();
        if (!out_) throw IoError("write failed for " + path_.string() + " (disk full?)");
    }

private:
    fs::path path_;
    std::ofstream out_;
};

template <typename T>
Checkpoint selection_checkpoint(const Model<T>& model, const TrainerState<T>& state, const TrainConfig& config,
                                double val_combined) {
    Checkpoint ck = model.state();
    ck.metadata["train.epoch"] = std::to_string(state.epoch);
    ck.metadata["train.step"] = std::to_string(state.step);
    ck.metadata["train.seed"] = std::to_string(*config.seed);
    ck.metadata["train.val_combined"] = format_double(val_combined);
    return ck;
}

template <typename T>
TrainResult run(Model<T>& model, const DatasetManifest& manifest, const TrainConfig& config, TrainerState<T> state,
                std::vector<TrainLogRecord> log, std::optional<Checkpoint> best, const TrainObserver& observer) {
    config.validate();
    if (manifest.indices(Split::Train).empty()) throw ContractViolation("train: TRAIN split is empty");
    if (manifest.indices(Split::Val).empty()) throw ContractViolation("train: VAL split is empty");
    const fs::path& dir = config.checkpoint_dir;
    if (!dir.empty()) fs::create_directories(dir);
    LogWriter writer(dir, log);

    const double time_offset = log.empty() ? 0.0 : log.back().wall_time_s;
    const auto started = std::chrono::steady_clock::now();
    auto elapsed = [&] {
        return time_offset + std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    };
    auto emit = [&](TrainLogRecord r) {
        r.wall_time_s = elapsed();
        log.push_back(r);
        writer.append(r);
        if (observer) observer(r);
    };

    const std::uint64_t seed = *config.seed;
    const PreprocessConfig pre{model.config().input_size, model.config().input_channels};
    const LossWeights weights = weights_of(config);
    auto& params = model.parameters();
    TrainResult result;
    bool out_of_steps = config.max_steps != 0 && state.step >= config.max_steps;

    for (std::size_t epoch = state.epoch + 1; epoch <= config.max_epochs && !out_of_steps; ++epoch) {
        const Checkpoint last_good = training_checkpoint(model, state, config);
        auto abort = [&](const std::string& why) {
            const std::string message = "training aborted at epoch " + std::to_string(epoch) + ", step " +
                                        std::to_string(state.step) + ": " + why;
            log_error(message);
            if (!dir.empty()) save_checkpoint(last_good, dir / "last_good.bin");
            throw TrainingAborted(message, last_good);
        };

        BatchStream stream(manifest, Split::Train, config.batch_size, seed, epoch, pre, config.prefetch);
        while (auto batch = stream.next()) {
            if (config.max_steps != 0 && state.step >= config.max_steps) {
                out_of_steps = true;
                break;
            }
            const auto x = to_precision<T>(batch->pixels);
            model.zero_grad();
            const auto out = model.forward(x, Mode::Train, derive_seed(seed, state.step));
            std::optional<LossTerms<T>> computed;
            try {
                computed = compute_losses(out, x, batch->labels, weights);
            } catch (const NumericError& e) {
                abort(std::string("non-finite loss: ") + e.what());
            }
            const auto& terms = *computed;
            const auto& b = terms.breakdown;
            if (!std::isfinite(b.combined))
                abort("non-finite loss (l_c=" + format_double(b.l_c) + ", l_r=" + format_double(b.l_r) +
                      ", l_z=" + format_double(b.l_z) + ")");
            terms.total.backward();
            if (config.clip_norm) clip_gradients(params, *config.clip_norm);
            std::vector<std::span<T>> values;
            std::vector<std::span<const T>> grads;
            for (auto& p : params) {
                values.push_back(p.tensor.mutable_values());
                grads.push_back(p.tensor.grad());
            }
            try {
                adam_step<T>(values, grads, state.adam, config.learning_rate);
            } catch (const NumericError& e) {
                abort(e.what());
            }
            const double accuracy =
                double(count_correct(out.y_hat, batch->labels)) / double(batch->labels.size());
            emit({epoch, state.step, Split::Train, b.l_c, b.l_r, b.l_z, b.combined, accuracy, 0.0});
            ++state.step;
        }
        if (config.max_steps != 0 && state.step >= config.max_steps) out_of_steps = true;
        state.epoch = epoch;

        const bool last = epoch == config.max_epochs || out_of_steps;
        if (epoch % config.eval_every == 0 || last) {
            const auto v = validate(model, manifest, Split::Val, config);
            emit({epoch, state.step, Split::Val, v.mean.l_c, v.mean.l_r, v.mean.l_z, v.mean.combined, v.accuracy,
                  0.0});
            if (v.mean.combined < state.best_val_combined) {
                state.best_val_combined = v.mean.combined;
                state.best_epoch = epoch;
                state.epochs_without_improvement = 0;
                best = selection_checkpoint(model, state, config, v.mean.combined);
                if (!dir.empty()) save_checkpoint(*best, dir / kBestCheckpointName);
            } else {
                state.epochs_without_improvement += config.eval_every;
            }
            log_info("epoch " + std::to_string(epoch) + ": VAL combined " + format_double(v.mean.combined) +
                     ", accuracy " + format_double(v.accuracy));
        }
        if (!dir.empty() && config.epoch_checkpoints)
            save_checkpoint(training_checkpoint(model, state, config), dir / epoch_checkpoint_name(epoch));
        if (state.epochs_without_improvement >= config.early_stop_patience) {
            result.early_stopped = true;
            log_info("early stop after " + std::to_string(epoch) + " epochs");
            break;
        }
    }

    if (!best) {
        log_warning("no finite VAL loss was recorded; returning the final parameters");
        best = selection_checkpoint(model, state, config, NAN);
    }
    result.best = std::move(*best);
    result.log = std::move(log);
    result.best_epoch = state.best_epoch;
    result.best_val_combined = state.best_val_combined;
    result.steps = state.step;
    result.epochs_completed = state.epoch;
    return result;
}

std::size_t meta_count(const Checkpoint& ck, const std::string& key) {
    const auto& v = ck.meta_at(key);
    try {
        return std::stoull(v);
    } catch (const std::exception&) {
        throw IoError("checkpoint field " + key + " is not a count: '" + v + "'");
    }
}

double meta_real(const Checkpoint& ck, const std::string& key) {
    double out = 0;
    if (!parse_double(ck.meta_at(key), out)) throw IoError("checkpoint field " + key + " is not a number");
    return out;
}

} // namespace

template <typename T>
ValidationResult validate(Model<T>& model, const DatasetManifest& manifest, Split split, const TrainConfig& config) {
    if (manifest.indices(split).empty())
        throw ContractViolation("validate: split " + std::string(split_name(split)) + " is empty");
    const PreprocessConfig pre{model.config().input_size, model.config().input_channels};
    const LossWeights weights = weights_of(config);
    NoGradGuard no_grad;
    double lc = 0, lr = 0, lz = 0;
    std::size_t correct = 0, n = 0;
    BatchStream stream(manifest, manifest.indices(split), config.batch_size, pre, config.prefetch);
    while (auto batch = stream.next()) {
        const auto x = to_precision<T>(batch->pixels);
        const auto out = model.forward(x, Mode::Eval, 0);
        const auto terms = compute_losses(out, x, batch->labels, weights);
        const double count = double(batch->labels.size());
        lc += terms.breakdown.l_c * count;
        lr += terms.breakdown.l_r * count;
        lz += terms.breakdown.l_z * count;
        correct += count_correct(out.y_hat, batch->labels);
        n += batch->labels.size();
    }
    if (n == 0) throw IoError("validate: no sample of split " + std::string(split_name(split)) + " could be read");
    ValidationResult r;
    r.samples = n;
    r.accuracy = double(correct) / double(n);
    r.mean = combined_loss(lc / double(n), lr / double(n), lz / double(n), config.weight_r, config.weight_z);
    return r;
}

template <typename T>
Checkpoint training_checkpoint(const Model<T>& model, const TrainerState<T>& state, const TrainConfig& config) {
    Checkpoint ck = model.state();
    auto& m = ck.metadata;
    m["train.epoch"] = std::to_string(state.epoch);
    m["train.step"] = std::to_string(state.step);
    m["train.seed"] = std::to_string(config.seed.value_or(0));
    m["train.batch_size"] = std::to_string(config.batch_size);
    m["train.learning_rate"] = format_double(config.learning_rate);
    m["train.best_val_combined"] = format_double(state.best_val_combined);
    m["train.best_epoch"] = std::to_string(state.best_epoch);
    m["train.epochs_without_improvement"] = std::to_string(state.epochs_without_improvement);
    m["adam.step_count"] = std::to_string(state.adam.step_count);
    m["adam.beta1"] = format_double(state.adam.beta1);
    m["adam.beta2"] = format_double(state.adam.beta2);
    m["adam.epsilon"] = format_double(state.adam.epsilon);
    const auto& params = model.parameters();
    const bool fresh = state.adam.first_moment.empty();
    for (std::size_t k = 0; k < params.size(); ++k) {
        const auto& p = params[k];
        const std::size_t n = p.tensor.numel();
        std::vector<float> first(n, 0.0f), second(n, 0.0f);
        if (!fresh) {
            std::copy(state.adam.first_moment[k].begin(), state.adam.first_moment[k].end(), first.begin());
            std::copy(state.adam.second_moment[k].begin(), state.adam.second_moment[k].end(), second.begin());
        }
        ck.put("adam.m." + p.name, p.tensor.shape(), std::move(first));
        ck.put("adam.v." + p.name, p.tensor.shape(), std::move(second));
    }
    return ck;
}

template <typename T>
TrainerState<T> restore_training(Model<T>& model, const Checkpoint& ck, const TrainConfig& config) {
    if (!ck.meta("adam.step_count"))
        throw IoError("checkpoint has no optimizer state (adam.*); resume needs an epoch checkpoint such as " +
                      epoch_checkpoint_name(1).string() + ", not " + kBestCheckpointName);
    const auto& params = model.parameters();
    for (const auto& p : params)
        if (!ck.find("adam.m." + p.name) || !ck.find("adam.v." + p.name))
            throw IoError("checkpoint optimizer state is missing moments for '" + p.name + "'");
    if (config.seed && ck.meta_at("train.seed") != std::to_string(*config.seed))
        throw ConfigError("resume: train.seed is " + ck.meta_at("train.seed") + " in the checkpoint, config has " +
                          std::to_string(*config.seed));
    if (ck.meta_at("train.batch_size") != std::to_string(config.batch_size))
        throw ConfigError("resume: train.batch_size is " + ck.meta_at("train.batch_size") +
                          " in the checkpoint, config has " + std::to_string(config.batch_size));
    model.load_state(ck); // names mismatching arch.* fields and layers

    TrainerState<T> s;
    s.epoch = meta_count(ck, "train.epoch");
    s.step = meta_count(ck, "train.step");
    s.best_val_combined = meta_real(ck, "train.best_val_combined");
    s.best_epoch = meta_count(ck, "train.best_epoch");
    s.epochs_without_improvement = meta_count(ck, "train.epochs_without_improvement");
    s.adam.step_count = meta_count(ck, "adam.step_count");
    s.adam.beta1 = meta_real(ck, "adam.beta1");
    s.adam.beta2 = meta_real(ck, "adam.beta2");
    s.adam.epsilon = meta_real(ck, "adam.epsilon");
    if (s.adam.step_count > 0) {
        for (const auto& p : params) {
            const auto& m = ck.at("adam.m." + p.name);
            const auto& v = ck.at("adam.v." + p.name);
            if (m.shape != p.tensor.shape() || v.shape != p.tensor.shape())
                throw IoError("optimizer moment shape mismatch for '" + p.name + "'");
            s.adam.first_moment.emplace_back(m.values.begin(), m.values.end());
            s.adam.second_moment.emplace_back(v.values.begin(), v.values.end());
        }
    }
    return s;
}

template <typename T>
TrainResult train(Model<T>& model, const DatasetManifest& manifest, const TrainConfig& config,
                  const TrainObserver& observer) {
    return run(model, manifest, config, TrainerState<T>{}, {}, std::nullopt, observer);
}

template <typename T>
TrainResult resume(Model<T>& model, const fs::path& checkpoint_path, const DatasetManifest& manifest,
                   const TrainConfig& config, const TrainObserver& observer) {
    config.validate();
    const Checkpoint ck = load_checkpoint(checkpoint_path);
    auto state = restore_training(model, ck, config);

    std::vector<TrainLogRecord> log;
    std::optional<Checkpoint> best;
    if (!config.checkpoint_dir.empty()) {
        const auto log_path = config.checkpoint_dir / kTrainLogName;
        if (fs::exists(log_path)) {
            for (const auto& r : parse_train_log(read_text_file(log_path)))
                if (r.epoch <= state.epoch) log.push_back(r);
        }
        const auto best_path = config.checkpoint_dir / kBestCheckpointName;
        if (state.best_epoch > 0 && fs::exists(best_path)) {
            auto candidate = load_checkpoint(best_path);
            if (candidate.meta("train.epoch") == std::to_string(state.best_epoch)) best = std::move(candidate);
        }
    }
    if (state.best_epoch > 0 && !best)
        log_warning("best checkpoint of epoch " + std::to_string(state.best_epoch) +
                    " not found next to the run; selection restarts from the resumed state");
    if (!best) state.best_val_combined = INFINITY;
    log_info("resuming after epoch " + std::to_string(state.epoch) + ", step " + std::to_string(state.step));
    return run(model, manifest, config, std::move(state), std::move(log), std::move(best), observer);
}

#define OCTVAE_INSTANTIATE(T)                                                                                     \
    template ValidationResult validate<T>(Model<T>&, const DatasetManifest&, Split, const TrainConfig&);        \
    template Checkpoint training_checkpoint<T>(const Model<T>&, const TrainerState<T>&, const TrainConfig&);    \
    template TrainerState<T> restore_training<T>(Model<T>&, const Checkpoint&, const TrainConfig&);             \
    template TrainResult train<T>(Model<T>&, const DatasetManifest&, const TrainConfig&, const TrainObserver&); \
    template TrainResult resume<T>(Model<T>&, const fs::path&, const DatasetManifest&, const TrainConfig&,      \
                                   const TrainObserver&);

OCTVAE_INSTANTIATE(float)
OCTVAE_INSTANTIATE(double)

} // namespace octvae
