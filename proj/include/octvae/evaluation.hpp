#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "octvae/data.hpp"
#include "octvae/model.hpp"

namespace octvae {

/// Square count matrix, rows = true class, columns = predicted class.
struct ConfusionMatrix {
    std::size_t classes = 0;
    std::vector<std::uint64_t> counts; // row-major classes x classes

    explicit ConfusionMatrix(std::size_t n = kNumClasses) : classes(n), counts(n * n, 0) {}

    std::uint64_t& at(std::size_t truth, std::size_t predicted) { return counts[truth * classes + predicted]; }
    std::uint64_t at(std::size_t truth, std::size_t predicted) const { return counts[truth * classes + predicted]; }
    std::uint64_t total() const;
    std::uint64_t trace() const;

    friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

ConfusionMatrix confusion_matrix(std::span<const std::size_t> truth, std::span<const std::size_t> predicted,
                                 std::size_t classes = kNumClasses);

struct EvalReport {
    ConfusionMatrix confusion;
    std::vector<double> precision, recall, f1; // per class
    // Unweighted means over classes; macro F1 is the mean of per-class F1.
    double macro_precision = 0, macro_recall = 0, macro_f1 = 0;
    // From pooled counts; all three equal the accuracy for single-label data.
    double micro_precision = 0, micro_recall = 0, micro_f1 = 0;
    double accuracy = 0;
    double mean_class_loss = 0;
    std::uint64_t samples = 0;
    // Set when some precision or recall was 0/0 and reported as 0.
    bool undefined_metric = false;
    std::vector<std::string> undefined; // e.g. "precision.DRUSEN"

    friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

/// Rates from counts. An all-zero matrix is a ContractViolation.
EvalReport metrics_from_confusion(const ConfusionMatrix& confusion);

struct SamplePrediction {
    std::size_t entry = 0; // manifest index
    std::size_t label = 0;
    std::size_t predicted = 0;
    double class_loss = 0; // -log softmax at the true label
};

struct Evaluation {
    EvalReport report;
    std::vector<SamplePrediction> predictions; // manifest order
};

/// Eval-mode pass over a split; prediction is the argmax of the logits (lowest index on ties).
template <typename T>
Evaluation evaluate(Model<T>& model, const DatasetManifest& manifest, Split split = Split::Test,
                    std::size_t batch_size = 64);

/// Flat `key=value` lines, one per field, doubles with 17 significant digits.
std::string report_to_text(const EvalReport& report);
/// Confusion matrix with a header row of predicted class names and a leading true-class column.
std::string confusion_to_csv(const ConfusionMatrix& confusion);
/// One JSON document with the same field names as the text form.
std::string report_to_json(const EvalReport& report);
/// `entry,path,label,predicted,class_loss` rows.
std::string predictions_to_csv(const DatasetManifest& manifest, std::span<const SamplePrediction> predictions);

/// Writes `<stem>.txt` and `<stem>_confusion.csv`, or `<stem>.json` when `json` is set.
void write_report(const EvalReport& report, const std::filesystem::path& stem, bool json);

extern template Evaluation evaluate<float>(Model<float>&, const DatasetManifest&, Split, std::size_t);
extern template Evaluation evaluate<double>(Model<double>&, const DatasetManifest&, Split, std::size_t);

} // namespace octvae
