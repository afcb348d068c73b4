#pragma once

#include <span>
#include <string>

namespace tcan {

struct MetricsOptions {
  bool weighted_f1 = false;  // default is plain binary F1 on the positive class
};

struct MetricsReport {
  double mae = 0.0;
  double corr = 0.0;
  double acc7 = 0.0;
  double acc2 = 0.0;  // zero labels excluded
  double f1 = 0.0;
  int n_total = 0;
  int n_nonzero = 0;
};

double metric_mae(std::span<const float> preds, std::span<const float> labels);

/// Pearson correlation; a constant array yields 0 with a warning on stderr.
double metric_pearson(std::span<const float> preds, std::span<const float> labels);

/// 7-class accuracy: clamp to [-3, 3], round half away from zero, compare bins.
double metric_acc7(std::span<const float> preds, std::span<const float> labels);

/// Binary accuracy over samples with label != 0; pred > 0 counts as positive.
double metric_acc2(std::span<const float> preds, std::span<const float> labels);

double metric_f1(std::span<const float> preds, std::span<const float> labels,
                 const MetricsOptions& opts = {});

MetricsReport evaluate_metrics(std::span<const float> preds, std::span<const float> labels,
                               const MetricsOptions& opts = {});

/// Flat JSON object with keys mae, corr, acc7, acc2, f1, n_total, n_nonzero.
std::string metrics_to_json(const MetricsReport& r);

}  // namespace tcan
