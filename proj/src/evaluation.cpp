#include "octvae/evaluation.hpp"

#include <cmath>

#include <json.hpp>

#include "octvae/checkpoint.hpp"
#include "octvae/error.hpp"
#include "octvae/text.hpp"

namespace octvae {

namespace {

std::string label_of(std::size_t c, std::size_t classes) {
    return classes == kNumClasses ? std::string(class_name(c)) : std::to_string(c);
}

double ratio(std::uint64_t num, std::uint64_t den, bool& undefined) {
    if (den == 0) {
        undefined = true;
        return 0.0;
    }
    return static_cast<double>(num) / static_cast<double>(den);
}

double harmonic(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

} // namespace

std::uint64_t ConfusionMatrix::total() const {
    std::uint64_t t = 0;
    for (auto v : counts) t += v;
    return t;
}

std::uint64_t ConfusionMatrix::trace() const {
    std::uint64_t t = 0;
    for (std::size_t c = 0; c < classes; ++c) t += at(c, c);
    return t;
}

ConfusionMatrix confusion_matrix(std::span<const std::size_t> truth, std::span<const std::size_t> predicted,
                                 std::size_t classes) {
    if (truth.size() != predicted.size())
        throw ContractViolation("confusion_matrix: " + std::to_string(truth.size()) + " true labels but " +
                                std::to_string(predicted.size()) + " predictions");
    ConfusionMatrix m(classes);
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] >= classes || predicted[i] >= classes)
            throw ContractViolation("confusion_matrix: label out of range at sample " + std::to_string(i));
        ++m.at(truth[i], predicted[i]);
    }
    return m;
}

EvalReport metrics_from_confusion(const ConfusionMatrix& confusion) {
    const std::size_t n = confusion.classes;
    if (n == 0 || confusion.counts.size() != n * n)
        throw ContractViolation("metrics_from_confusion: malformed matrix");
    EvalReport r;
    r.confusion = confusion;
    r.samples = confusion.total();
    if (r.samples == 0) throw ContractViolation("metrics_from_confusion: confusion matrix is all zero");
    r.precision.resize(n);
    r.recall.resize(n);
    r.f1.resize(n);
    for (std::size_t c = 0; c < n; ++c) {
        std::uint64_t predicted = 0, actual = 0;
        for (std::size_t k = 0; k < n; ++k) {
            predicted += confusion.at(k, c);
            actual += confusion.at(c, k);
        }
        const auto tp = confusion.at(c, c);
        bool p_undef = false, r_undef = false;
        r.precision[c] = ratio(tp, predicted, p_undef);
        r.recall[c] = ratio(tp, actual, r_undef);
        if (p_undef) r.undefined.push_back("precision." + label_of(c, n));
        if (r_undef) r.undefined.push_back("recall." + label_of(c, n));
        r.f1[c] = harmonic(r.precision[c], r.recall[c]);
        r.macro_precision += r.precision[c];
        r.macro_recall += r.recall[c];
        r.macro_f1 += r.f1[c];
    }
    r.macro_precision /= double(n);
    r.macro_recall /= double(n);
    r.macro_f1 /= double(n);
    r.undefined_metric = !r.undefined.empty();
    std::uint64_t tp = 0, tp_fp = 0, tp_fn = 0;
    for (std::size_t c = 0; c < n; ++c) {
        tp += confusion.at(c, c);
        for (std::size_t k = 0; k < n; ++k) {
            tp_fp += confusion.at(k, c);
            tp_fn += confusion.at(c, k);
        }
    }
    bool unused = false;
    r.micro_precision = ratio(tp, tp_fp, unused);
    r.micro_recall = ratio(tp, tp_fn, unused);
    r.micro_f1 = harmonic(r.micro_precision, r.micro_recall);
    r.accuracy = static_cast<double>(confusion.trace()) / static_cast<double>(r.samples);
    return r;
}

template <typename T>
Evaluation evaluate(Model<T>& model, const DatasetManifest& manifest, Split split, std::size_t batch_size) {
    if (manifest.indices(split).empty())
        throw ContractViolation("evaluate: split " + std::string(split_name(split)) + " is empty");
    const PreprocessConfig pre{model.config().input_size, model.config().input_channels};
    const std::size_t classes = model.config().num_classes;
    NoGradGuard no_grad;
    Evaluation result;
    BatchStream stream(manifest, manifest.indices(split), batch_size, pre);
    while (auto batch = stream.next()) {
        const auto logits = model.classify(model.encode(to_precision<T>(batch->pixels), Mode::Eval));
        const auto v = logits.values();
        for (std::size_t b = 0; b < batch->labels.size(); ++b) {
            const auto row = v.subspan(b * classes, classes);
            std::size_t best = 0;
            double top = row[0];
            for (std::size_t k = 1; k < classes; ++k)
                if (row[k] > top) {
                    top = row[k];
                    best = k;
                }
            double denom = 0.0;
            for (std::size_t k = 0; k < classes; ++k) denom += std::exp(double(row[k]) - top);
            const double loss = -(double(row[batch->labels[b]]) - top - std::log(denom));
            result.predictions.push_back({batch->entries[b], batch->labels[b], best, loss});
        }
    }
    std::vector<std::size_t> truth, predicted;
    double loss_sum = 0.0;
    for (const auto& p : result.predictions) {
        truth.push_back(p.label);
        predicted.push_back(p.predicted);
        loss_sum += p.class_loss;
    }
    result.report = metrics_from_confusion(confusion_matrix(truth, predicted, classes));
    result.report.mean_class_loss = loss_sum / double(result.predictions.size());
    return result;
}

std::string report_to_text(const EvalReport& r) {
    const std::size_t n = r.confusion.classes;
    std::string out;
    auto put = [&](const std::string& key, const std::string& value) { out += key + "=" + value + "\n"; };
    put("samples", std::to_string(r.samples));
    put("accuracy", format_double(r.accuracy));
    put("mean_class_loss", format_double(r.mean_class_loss));
    put("macro_precision", format_double(r.macro_precision));
    put("macro_recall", format_double(r.macro_recall));
    put("macro_f1", format_double(r.macro_f1));
    put("micro_precision", format_double(r.micro_precision));
    put("micro_recall", format_double(r.micro_recall));
    put("micro_f1", format_double(r.micro_f1));
    for (std::size_t c = 0; c < n; ++c) {
        const auto name = label_of(c, n);
        put("precision." + name, format_double(r.precision[c]));
        put("recall." + name, format_double(r.recall[c]));
        put("f1." + name, format_double(r.f1[c]));
    }
    put("undefined_metric", r.undefined_metric ? "true" : "false");
    std::string undefined;
    for (const auto& u : r.undefined) undefined += (undefined.empty() ? "" : ";") + u;
    put("undefined", undefined);
    return out;
}

std::string confusion_to_csv(const ConfusionMatrix& m) {
    std::string out = "true\\predicted";
    for (std::size_t c = 0; c < m.classes; ++c) out += "," + label_of(c, m.classes);
    out += "\n";
    for (std::size_t t = 0; t < m.classes; ++t) {
        out += label_of(t, m.classes);
        for (std::size_t p = 0; p < m.classes; ++p) out += "," + std::to_string(m.at(t, p));
        out += "\n";
    }
    return out;
}

std::string report_to_json(const EvalReport& r) {
    const std::size_t n = r.confusion.classes;
    nlohmann::ordered_json doc;
    doc["samples"] = r.samples;
    doc["accuracy"] = r.accuracy;
    doc["mean_class_loss"] = r.mean_class_loss;
    doc["macro_precision"] = r.macro_precision;
    doc["macro_recall"] = r.macro_recall;
    doc["macro_f1"] = r.macro_f1;
    doc["micro_precision"] = r.micro_precision;
    doc["micro_recall"] = r.micro_recall;
    doc["micro_f1"] = r.micro_f1;
    auto per_class = nlohmann::ordered_json::object();
    for (std::size_t c = 0; c < n; ++c)
        per_class[label_of(c, n)] = {{"precision", r.precision[c]}, {"recall", r.recall[c]}, {"f1", r.f1[c]}};
    doc["per_class"] = per_class;
    auto rows = nlohmann::ordered_json::array();
    for (std::size_t t = 0; t < n; ++t) {
        auto row = nlohmann::ordered_json::array();
        for (std::size_t p = 0; p < n; ++p) row.push_back(r.confusion.at(t, p));
        rows.push_back(row);
    }
    doc["confusion"] = rows;
    doc["undefined_metric"] = r.undefined_metric;
    doc["undefined"] = r.undefined;
    return doc.dump(2) + "\n";
}

std::string predictions_to_csv(const DatasetManifest& manifest, std::span<const SamplePrediction> predictions) {
    std::string out = "entry,path,label,predicted,class_loss\n";
    for (const auto& p : predictions) {
        out += std::to_string(p.entry) + "," + csv_field(manifest.entries.at(p.entry).path) + "," +
               std::string(class_name(p.label)) + "," + std::string(class_name(p.predicted)) + "," +
               format_double(p.class_loss) + "\n";
    }
    return out;
}

void write_report(const EvalReport& report, const std::filesystem::path& stem, bool json) {
    auto with = [&](const char* suffix) {
        auto p = stem;
        p += suffix;
        return p;
    };
    if (json) {
        write_file_atomic(with(".json"), report_to_json(report));
        return;
    }
    write_file_atomic(with(".txt"), report_to_text(report));
    write_file_atomic(with("_confusion.csv"), confusion_to_csv(report.confusion));
}

template Evaluation evaluate<float>(Model<float>&, const DatasetManifest&, Split, std::size_t);
template Evaluation evaluate<double>(Model<double>&, const DatasetManifest&, Split, std::size_t);

} // namespace octvae
