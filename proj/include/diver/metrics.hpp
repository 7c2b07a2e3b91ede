#pragma once

#include <stdexcept>
#include <vector>

namespace diver {

// Classification metrics in percent.
struct MetricSet {
    double balanced_accuracy = 0.0;
    double kappa = 0.0;
    double weighted_f1 = 0.0;
};

struct MetricsError : std::runtime_error {
    explicit MetricsError(const std::string& what) : std::runtime_error(what) {}
};

// Balanced accuracy = mean per-class recall; Cohen's kappa = (p_o - p_e) /
// (1 - p_e) with p_e from the confusion-matrix marginals; weighted F1 =
// support-weighted mean of per-class F1. K >= 2; labels must lie in [0, K).
MetricSet compute_metrics(const std::vector<int>& predictions,
                          const std::vector<int>& labels, int num_classes);

// K x K confusion matrix, rows = true class, cols = predicted.
std::vector<std::vector<int>> confusion_matrix(
    const std::vector<int>& predictions, const std::vector<int>& labels,
    int num_classes);

struct MeanStd {
    double mean = 0.0;
    double stddev = 0.0;  // population std
};

MeanStd mean_std(const std::vector<double>& values);

}  // namespace diver
