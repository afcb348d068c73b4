#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tcan/data.hpp"
#include "tcan/metrics.hpp"
#include "tcan/model.hpp"
#include "tcan/tensor.hpp"

namespace tcan {

struct TrainError : std::runtime_error {
  explicit TrainError(const std::string& msg) : std::runtime_error(msg) {}
};

struct CheckpointError : std::runtime_error {
  explicit CheckpointError(const std::string& msg) : std::runtime_error(msg) {}
};

enum class OptimizerKind { adam, sgd };

struct TrainConfig {
  int epochs = 50;
  int batch_size = 16;
  float learning_rate = 1e-3f;
  OptimizerKind optimizer = OptimizerKind::adam;
  float beta1 = 0.9f, beta2 = 0.999f;
  float adam_eps = 1e-8f;
  float momentum = 0.9f;  // sgd only
  std::uint64_t seed = 0;
  std::string checkpoint_dir;   // empty: keep the best epoch's metrics only
  int patience = 0;             // 0 = off; epochs without val MAE improvement before stopping
  float clip_norm = 0.0f;       // 0 = off; global gradient-norm clip
  float stop_train_mae = 0.0f;  // 0 = off; stop once train-set MAE drops below
};

/// (1/K) sum |y_pred - y|. Every pred is a [1 x 1] node on the tape.
Tensor loss_multi(Tape& tape, std::span<const Tensor> preds, std::span<const float> labels);

/// (1/K) sum_k sum_m |y_m - y_k|: summed over each sample's per-modality
/// heads, averaged over samples only.
Tensor loss_uni(Tape& tape, const std::vector<std::vector<Tensor>>& uni_preds,
                std::span<const float> labels);

/// multi + lambda * uni; with uni == nullptr the multi loss is returned as is.
Tensor loss_total(Tape& tape, const Tensor& multi, const Tensor* uni, float lambda);

class Optimizer {
 public:
  Optimizer(const ParamStore& params, const TrainConfig& cfg);

  /// One update over every parameter, in registry order. A non-finite
  /// gradient aborts with the parameter's name.
  void step(ParamStore& params);

  OptimizerKind kind() const { return kind_; }
  std::int64_t steps() const { return steps_; }
  void set_steps(std::int64_t s) { steps_ = s; }

  // First/second moment buffers aligned with the registry; second is unused
  // for sgd. Exposed for checkpointing.
  std::vector<std::vector<float>>& moment1() { return m_; }
  std::vector<std::vector<float>>& moment2() { return v_; }
  const std::vector<std::vector<float>>& moment1() const { return m_; }
  const std::vector<std::vector<float>>& moment2() const { return v_; }

 private:
  OptimizerKind kind_;
  float lr_, beta1_, beta2_, eps_, momentum_;
  std::int64_t steps_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  double loss_multi = 0.0, loss_uni = 0.0, loss_total = 0.0;
  double train_mae = 0.0;  // filled only when stop_train_mae is active
  MetricsReport val;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  MetricsReport best_val;
  std::string checkpoint_path;  // empty when checkpoint_dir was unset
};

TrainResult train(TcanModel& model, const std::vector<Sample>& train_set,
                  const std::vector<Sample>& val_set, const TrainConfig& cfg,
                  std::ostream* log = nullptr);

std::vector<float> predict_all(const TcanModel& model, const std::vector<Sample>& samples);

MetricsReport evaluate_model(const TcanModel& model, const std::vector<Sample>& samples);

/// history.csv: one comment block of effective config, a header row, one row
/// per epoch with columns epoch, loss_multi, loss_uni, loss_total, val_mae,
/// val_corr, val_acc7, val_acc2, val_f1.
void write_history_csv(const std::string& path, const std::vector<EpochRecord>& history,
                       const std::string& config_echo);

struct Checkpoint {
  ModelConfig config;
  ModalityWidths widths;
  std::uint64_t model_seed = 0;
  std::vector<NamedParam> tensors;
  bool has_optimizer = false;
  OptimizerKind opt_kind = OptimizerKind::adam;
  std::int64_t opt_steps = 0;
  std::vector<std::pair<std::string, std::vector<float>>> opt_slots;
};

void checkpoint_save(const std::string& path, const TcanModel& model, const Optimizer* opt);
Checkpoint checkpoint_read(const std::string& path);

/// Copies checkpoint tensors into the model by name; a name-set mismatch
/// raises CheckpointError listing the missing and extra names.
void checkpoint_apply(const Checkpoint& ck, TcanModel& model, Optimizer* opt = nullptr);

/// Rebuilds the model a checkpoint was written from and restores its params.
TcanModel model_from_checkpoint(const Checkpoint& ck);

}  // namespace tcan
