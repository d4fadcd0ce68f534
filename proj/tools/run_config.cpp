#include "run_config.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <set>

#include "octvae/error.hpp"
#include "octvae/text.hpp"

namespace octvae::cli {

namespace {

using K = ValueKind;

constexpr std::array kSchema{
    // data
    KeySpec{"data_root", K::Path, "", "dataset root with one folder per class (scan)"},
    KeySpec{"manifest", K::Path, "", "manifest CSV to read"},
    KeySpec{"train_per_class", K::Count, "500", "TRAIN images drawn per class (split)"},
    KeySpec{"val_per_class", K::Count, "250", "VAL images drawn per class (split)"},
    KeySpec{"split", K::Choice, "", "split to evaluate or embed (default test for eval, train for embed)",
            "train|val|test"},
    // architecture
    KeySpec{"input_size", K::Count, "224", "square input side in pixels"},
    KeySpec{"input_channels", K::Count, "1", "1 (grey) or 3 (RGB)"},
    KeySpec{"feature_dim", K::Count, "1000", "encoder feature size"},
    KeySpec{"latent_dim", K::Count, "128", "latent size"},
    KeySpec{"encoder_width", K::Count, "64", "channels of the first residual stage"},
    KeySpec{"decoder_base_channels", K::Count, "64", "channels entering the first decoder stage"},
    KeySpec{"concat_logits", K::Flag, "false", "feed logits instead of class probabilities to the latent heads"},
    KeySpec{"pretrained_weights", K::Path, "", "checkpoint with encoder.* arrays to start from"},
    KeySpec{"precision", K::Choice, "float", "arithmetic type", "float|double"},
    // training
    KeySpec{"seed", K::Count, "", "master seed (required by split and train)"},
    KeySpec{"learning_rate", K::Real, "0.0001", "Adam step size"},
    KeySpec{"batch_size", K::Count, "64", "training batch size"},
    KeySpec{"max_epochs", K::Count, "50", "epoch limit"},
    KeySpec{"max_steps", K::Count, "0", "optimizer step limit, 0 for none"},
    KeySpec{"weight_r", K::Real, "0.1", "reconstruction loss weight"},
    KeySpec{"weight_z", K::Real, "0.1", "KL loss weight"},
    KeySpec{"early_stop_patience", K::Count, "10", "epochs without VAL improvement before stopping"},
    KeySpec{"eval_every", K::Count, "1", "epochs between VAL passes"},
    KeySpec{"clip_norm", K::Real, "", "global gradient norm cap"},
    KeySpec{"recon_reduction", K::Choice, "mean", "reconstruction error reduction", "mean|sum"},
    KeySpec{"epoch_checkpoints", K::Flag, "true", "write ckpt_epoch<k>.bin after each epoch"},
    KeySpec{"prefetch", K::Count, "4", "batches decoded ahead of the trainer"},
    // inference
    KeySpec{"checkpoint", K::Path, "", "model checkpoint (eval, embed, sample)"},
    KeySpec{"eval_batch_size", K::Count, "64", "batch size for inference passes"},
    KeySpec{"dump_predictions", K::Flag, "false", "write per-sample predictions (eval)"},
    KeySpec{"source", K::Choice, "mu", "latent rows to embed", "mu|z|h"},
    KeySpec{"perplexity", K::Real, "30", "t-SNE perplexity"},
    KeySpec{"tsne_iterations", K::Count, "1000", "t-SNE iterations"},
    KeySpec{"tsne_learning_rate", K::Real, "200", "t-SNE step size"},
    KeySpec{"tsne_max_points", K::Count, "20000", "largest point count accepted by exact t-SNE"},
    KeySpec{"count", K::Count, "16", "images to draw (sample)"},
    KeySpec{"mean", K::Flag, "false", "decode z = 0 only (sample)"},
    // run
    KeySpec{"out", K::Path, ".", "output directory"},
    KeySpec{"threads", K::Count, "0", "OpenMP threads, 0 for the runtime default"},
};

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

std::optional<std::uint64_t> parse_count(std::string_view s) {
    std::uint64_t v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
    return v;
}

std::optional<bool> parse_flag(std::string_view s) {
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    return std::nullopt;
}

bool in_choices(std::string_view choices, std::string_view value) {
    while (!choices.empty()) {
        const auto bar = choices.find('|');
        if (choices.substr(0, bar) == value) return true;
        if (bar == std::string_view::npos) break;
        choices.remove_prefix(bar + 1);
    }
    return false;
}

std::string type_error(const KeySpec& spec, std::string_view value, std::string_view origin) {
    std::string expected;
    switch (spec.kind) {
    case K::Count: expected = "a non-negative integer"; break;
    case K::Real: expected = "a finite number"; break;
    case K::Flag: expected = "true or false"; break;
    case K::Choice: expected = "one of " + std::string(spec.choices); break;
    case K::Path: expected = "a path"; break;
    }
    return std::string(origin) + ": " + std::string(spec.key) + " = '" + std::string(value) + "' is not " + expected;
}

const KeySpec& spec_of(std::string_view key) {
    const KeySpec* s = find_key(key);
    if (!s) throw ContractViolation("run config: no key named " + std::string(key));
    return *s;
}

} // namespace

std::span<const KeySpec> config_schema() { return kSchema; }

const KeySpec* find_key(std::string_view key) {
    for (const auto& s : kSchema)
        if (s.key == key) return &s;
    return nullptr;
}

void RunConfig::set(std::string_view key, std::string_view value, std::string_view origin) {
    const KeySpec* spec = find_key(key);
    if (!spec) throw ConfigError(std::string(origin) + ": unknown key '" + std::string(key) + "'");
    value = trim(value);
    if (value.empty()) {
        values_.erase(std::string(key));
        return;
    }
    bool ok = true;
    double real = 0;
    switch (spec->kind) {
    case K::Count: ok = parse_count(value).has_value(); break;
    case K::Real: ok = parse_double(value, real) && std::isfinite(real); break;
    case K::Flag: ok = parse_flag(value).has_value(); break;
    case K::Choice: ok = in_choices(spec->choices, value); break;
    case K::Path: break;
    }
    if (!ok) throw ConfigError(type_error(*spec, value, origin));
    values_[std::string(key)] = std::string(value);
}

void RunConfig::merge_text(std::string_view text, const std::string& origin) {
    std::set<std::string, std::less<>> seen;
    const auto lines = split_lines(text);
    for (std::size_t i = 0; i < lines.size(); ++i) {
        const auto line = trim(lines[i]);
        if (line.empty() || line.front() == '#') continue;
        const std::string where = origin + ":" + std::to_string(i + 1);
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) throw ConfigError(where + ": expected 'key = value'");
        const auto key = trim(line.substr(0, eq));
        if (!seen.insert(std::string(key)).second)
            throw ConfigError(where + ": key '" + std::string(key) + "' is set twice");
        set(key, line.substr(eq + 1), where);
    }
}

void RunConfig::merge_file(const std::filesystem::path& path) {
    if (!std::filesystem::is_regular_file(path)) throw ConfigError("config file " + path.string() + " not found");
    merge_text(read_text_file(path), path.string());
}

bool RunConfig::is_set(std::string_view key) const {
    spec_of(key);
    return values_.find(key) != values_.end();
}

std::string RunConfig::value(std::string_view key) const {
    const auto& spec = spec_of(key);
    const auto it = values_.find(key);
    return it != values_.end() ? it->second : std::string(spec.fallback);
}

std::size_t RunConfig::count(std::string_view key) const {
    const auto v = parse_count(value(key));
    if (!v) throw ConfigError(std::string(key) + " is not set");
    return static_cast<std::size_t>(*v);
}

double RunConfig::real(std::string_view key) const {
    double v = 0;
    if (!parse_double(value(key), v)) throw ConfigError(std::string(key) + " is not set");
    return v;
}

bool RunConfig::flag(std::string_view key) const { return parse_flag(value(key)).value_or(false); }

std::optional<std::uint64_t> RunConfig::seed() const { return parse_count(value("seed")); }

std::optional<std::filesystem::path> RunConfig::path(std::string_view key) const {
    const auto v = value(key);
    if (v.empty()) return std::nullopt;
    return std::filesystem::path(v);
}

std::filesystem::path RunConfig::required_path(std::string_view key) const {
    const auto p = path(key);
    if (!p) throw ConfigError(std::string(key) + " is required (set it in the config file or with --" +
                              [&] {
                                  std::string flag(key);
                                  std::replace(flag.begin(), flag.end(), '_', '-');
                                  return flag;
                              }() +
                              ")");
    return *p;
}

ArchitectureConfig RunConfig::architecture() const {
    ArchitectureConfig a;
    a.input_size = count("input_size");
    a.input_channels = count("input_channels");
    a.feature_dim = count("feature_dim");
    a.latent_dim = count("latent_dim");
    a.encoder_width = count("encoder_width");
    a.decoder_base_channels = count("decoder_base_channels");
    a.concat_logits = flag("concat_logits");
    a.pretrained_weights_path = path("pretrained_weights");
    a.validate();
    return a;
}

TrainConfig RunConfig::training() const {
    TrainConfig t;
    t.learning_rate = real("learning_rate");
    t.batch_size = count("batch_size");
    t.max_epochs = count("max_epochs");
    t.max_steps = count("max_steps");
    t.weight_r = real("weight_r");
    t.weight_z = real("weight_z");
    t.seed = seed();
    t.early_stop_patience = count("early_stop_patience");
    t.eval_every = count("eval_every");
    if (is_set("clip_norm")) t.clip_norm = real("clip_norm");
    t.recon_reduction = value("recon_reduction") == "sum" ? ReconReduction::Sum : ReconReduction::Mean;
    t.epoch_checkpoints = flag("epoch_checkpoints");
    t.prefetch = count("prefetch");
    t.checkpoint_dir = value("out");
    t.validate();
    return t;
}

TsneConfig RunConfig::tsne() const {
    TsneConfig c;
    c.perplexity = real("perplexity");
    c.iterations = count("tsne_iterations");
    c.learning_rate = real("tsne_learning_rate");
    c.max_points = count("tsne_max_points");
    c.seed = seed().value_or(0);
    if (!(c.learning_rate > 0.0)) throw ConfigError("tsne_learning_rate must be positive");
    if (c.iterations == 0) throw ConfigError("tsne_iterations must be at least 1");
    return c;
}

std::string RunConfig::resolved_text(std::string_view command) const {
    std::string out = "# resolved settings for '" + std::string(command) + "'\n";
    for (const auto& s : kSchema) out += std::string(s.key) + " = " + value(s.key) + "\n";
    return out;
}

} // namespace octvae::cli
