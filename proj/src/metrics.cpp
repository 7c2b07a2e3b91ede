#include "diver/metrics.hpp"

#include <cmath>
#include <string>

namespace diver {

std::vector<std::vector<int>> confusion_matrix(
    const std::vector<int>& predictions, const std::vector<int>& labels,
    int num_classes) {
    if (predictions.empty()) throw MetricsError("no predictions");
    if (predictions.size() != labels.size())
        throw MetricsError("predictions and labels differ in length");
    if (num_classes < 2) throw MetricsError("need at least 2 classes");
    std::vector<std::vector<int>> cm(num_classes, std::vector<int>(num_classes, 0));
    for (size_t i = 0; i < labels.size(); ++i) {
        int t = labels[i], p = predictions[i];
        if (t < 0 || t >= num_classes || p < 0 || p >= num_classes)
            throw MetricsError("class id out of range at index " + std::to_string(i));
        ++cm[t][p];
    }
    return cm;
}

MetricSet compute_metrics(const std::vector<int>& predictions,
                          const std::vector<int>& labels, int num_classes) {
    auto cm = confusion_matrix(predictions, labels, num_classes);
    int K = num_classes;
    double total = static_cast<double>(labels.size());

    std::vector<double> support(K, 0.0), predicted(K, 0.0);
    double correct = 0.0;
    for (int t = 0; t < K; ++t)
        for (int p = 0; p < K; ++p) {
            support[t] += cm[t][p];
            predicted[p] += cm[t][p];
            if (t == p) correct += cm[t][p];
        }

    // mean per-class recall over classes that actually occur
    double recall_sum = 0.0;
    int present = 0;
    for (int k = 0; k < K; ++k) {
        if (support[k] == 0.0) continue;
        recall_sum += cm[k][k] / support[k];
        ++present;
    }
    if (present == 0) throw MetricsError("no class present");
    double bal_acc = recall_sum / present;

    double po = correct / total;
    double pe = 0.0;
    for (int k = 0; k < K; ++k) pe += (support[k] / total) * (predicted[k] / total);
    double kappa = (1.0 - pe) < 1e-12 ? 0.0 : (po - pe) / (1.0 - pe);

    double f1_weighted = 0.0;
    for (int k = 0; k < K; ++k) {
        if (support[k] == 0.0) continue;
        double prec = predicted[k] > 0.0 ? cm[k][k] / predicted[k] : 0.0;
        double rec = cm[k][k] / support[k];
        double f1 = (prec + rec) > 0.0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
        f1_weighted += (support[k] / total) * f1;
    }

    return {100.0 * bal_acc, 100.0 * kappa, 100.0 * f1_weighted};
}

MeanStd mean_std(const std::vector<double>& values) {
    if (values.empty()) throw MetricsError("mean_std of empty set");
    double m = 0.0;
    for (double v : values) m += v;
    m /= values.size();
    double var = 0.0;
    for (double v : values) var += (v - m) * (v - m);
    return {m, std::sqrt(var / values.size())};
}

}  // namespace diver
