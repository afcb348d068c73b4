#include "tcan/metrics.hpp"

#include <cmath>
#include <cstdio>

#include <nlohmann/json.hpp>

#include "tcan/tensor.hpp"

namespace tcan {

namespace {

void require_paired(std::span<const float> preds, std::span<const float> labels,
                    const char* what, std::size_t min_len) {
  if (preds.size() != labels.size()) {
    throw ContractError(std::string(what) + ": preds and labels differ in length");
  }
  if (preds.size() < min_len) {
    throw ContractError(std::string(what) + ": need at least " + std::to_string(min_len) +
                        " samples, got " + std::to_string(preds.size()));
  }
}

int bin7(float v) {
  double x = static_cast<double>(v);
  if (x < -3.0) x = -3.0;
  if (x > 3.0) x = 3.0;
  // Round half away from zero so e.g. 1.5 -> 2 and -1.5 -> -2.
  return static_cast<int>(x >= 0.0 ? std::floor(x + 0.5) : std::ceil(x - 0.5));
}

struct BinaryCounts {
  long tp = 0, fp = 0, fn = 0, tn = 0;
  int n_nonzero = 0;
};

BinaryCounts count_binary(std::span<const float> preds, std::span<const float> labels) {
  BinaryCounts c;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (labels[i] == 0.0f) continue;
    ++c.n_nonzero;
    const bool pred_pos = preds[i] > 0.0f;
    const bool label_pos = labels[i] > 0.0f;
    if (pred_pos && label_pos) ++c.tp;
    else if (pred_pos && !label_pos) ++c.fp;
    else if (!pred_pos && label_pos) ++c.fn;
    else ++c.tn;
  }
  return c;
}

double f1_from(long tp, long fp, long fn) {
  const double denom = 2.0 * tp + fp + fn;
  return denom > 0.0 ? 2.0 * tp / denom : 0.0;
}

}  // namespace

double metric_mae(std::span<const float> preds, std::span<const float> labels) {
  require_paired(preds, labels, "mae", 1);
  double acc = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    acc += std::fabs(static_cast<double>(preds[i]) - static_cast<double>(labels[i]));
  }
  return acc / static_cast<double>(preds.size());
}

double metric_pearson(std::span<const float> preds, std::span<const float> labels) {
  require_paired(preds, labels, "pearson", 2);
  const double n = static_cast<double>(preds.size());
  double mp = 0.0, ml = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    mp += preds[i];
    ml += labels[i];
  }
  mp /= n;
  ml /= n;
  double spl = 0.0, spp = 0.0, sll = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const double dp = preds[i] - mp;
    const double dl = labels[i] - ml;
    spl += dp * dl;
    spp += dp * dp;
    sll += dl * dl;
  }
  if (spp == 0.0 || sll == 0.0) {
    std::fprintf(stderr, "warning: pearson over a constant array, reporting 0\n");
    return 0.0;
  }
  return spl / std::sqrt(spp * sll);
}

double metric_acc7(std::span<const float> preds, std::span<const float> labels) {
  require_paired(preds, labels, "acc7", 1);
  long hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (bin7(preds[i]) == bin7(labels[i])) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

double metric_acc2(std::span<const float> preds, std::span<const float> labels) {
  require_paired(preds, labels, "acc2", 1);
  const BinaryCounts c = count_binary(preds, labels);
  if (c.n_nonzero == 0) throw ContractError("acc2: all labels are zero");
  return static_cast<double>(c.tp + c.tn) / static_cast<double>(c.n_nonzero);
}

double metric_f1(std::span<const float> preds, std::span<const float> labels,
                 const MetricsOptions& opts) {
  require_paired(preds, labels, "f1", 1);
  const BinaryCounts c = count_binary(preds, labels);
  if (c.n_nonzero == 0) throw ContractError("f1: all labels are zero");
  const double pos_f1 = f1_from(c.tp, c.fp, c.fn);
  if (!opts.weighted_f1) return pos_f1;
  // Weighted variant: per-class F1 weighted by class support.
  const double neg_f1 = f1_from(c.tn, c.fn, c.fp);
  const long n_pos = c.tp + c.fn;
  const long n_neg = c.tn + c.fp;
  return (pos_f1 * n_pos + neg_f1 * n_neg) / static_cast<double>(c.n_nonzero);
}

MetricsReport evaluate_metrics(std::span<const float> preds, std::span<const float> labels,
                               const MetricsOptions& opts) {
  MetricsReport r;
  r.n_total = static_cast<int>(preds.size());
  r.mae = metric_mae(preds, labels);
  r.corr = metric_pearson(preds, labels);
  r.acc7 = metric_acc7(preds, labels);
  r.acc2 = metric_acc2(preds, labels);
  r.f1 = metric_f1(preds, labels, opts);
  r.n_nonzero = count_binary(preds, labels).n_nonzero;
  return r;
}

std::string metrics_to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["mae"] = r.mae;
  j["corr"] = r.corr;
  j["acc7"] = r.acc7;
  j["acc2"] = r.acc2;
  j["f1"] = r.f1;
  j["n_total"] = r.n_total;
  j["n_nonzero"] = r.n_nonzero;
  return j.dump();
}

}  // namespace tcan
