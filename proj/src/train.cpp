#include "tcan/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <ostream>
#include <sstream>

#include "tcan/textio.hpp"

namespace fs = std::filesystem;

namespace tcan {

// ---- losses ---------------------------------------------------------------

Tensor loss_multi(Tape& tape, std::span<const Tensor> preds, std::span<const float> labels) {
  if (preds.empty()) throw ContractError("loss_multi: no predictions");
  if (preds.size() != labels.size()) {
    throw ContractError("loss_multi: " + std::to_string(preds.size()) + " preds vs " +
                        std::to_string(labels.size()) + " labels");
  }
  Tensor acc;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i].numel() != 1) throw ContractError("loss_multi: prediction is not scalar");
    Tensor r = tape.abs(tape.sub_scalar(preds[i], labels[i]));
    acc = i == 0 ? r : tape.add(acc, r);
  }
  return tape.scale(acc, 1.0f / static_cast<float>(preds.size()));
}

Tensor loss_uni(Tape& tape, const std::vector<std::vector<Tensor>>& uni_preds,
                std::span<const float> labels) {
  if (uni_preds.empty()) throw ContractError("loss_uni: no predictions");
  if (uni_preds.size() != labels.size()) {
    throw ContractError("loss_uni: " + std::to_string(uni_preds.size()) + " samples vs " +
                        std::to_string(labels.size()) + " labels");
  }
  Tensor acc;
  bool first = true;
  for (std::size_t k = 0; k < uni_preds.size(); ++k) {
    if (uni_preds[k].empty()) throw ContractError("loss_uni: sample without modality heads");
    for (const Tensor& y : uni_preds[k]) {
      Tensor r = tape.abs(tape.sub_scalar(y, labels[k]));
      acc = first ? r : tape.add(acc, r);
      first = false;
    }
  }
  return tape.scale(acc, 1.0f / static_cast<float>(uni_preds.size()));
}

Tensor loss_total(Tape& tape, const Tensor& multi, const Tensor* uni, float lambda) {
  if (uni == nullptr) return multi;
  return tape.add(multi, tape.scale(*uni, lambda));
}

// ---- optimizer --------------------------------------------------------------

Optimizer::Optimizer(const ParamStore& params, const TrainConfig& cfg)
    : kind_(cfg.optimizer),
      lr_(cfg.learning_rate),
      beta1_(cfg.beta1),
      beta2_(cfg.beta2),
      eps_(cfg.adam_eps),
      momentum_(cfg.momentum) {
  if (!(lr_ > 0.0f)) throw TrainError("learning_rate must be > 0");
  m_.reserve(params.entries().size());
  for (const NamedParam& p : params.entries()) {
    m_.emplace_back(p.tensor.numel(), 0.0f);
  }
  if (kind_ == OptimizerKind::adam) {
    v_.reserve(params.entries().size());
    for (const NamedParam& p : params.entries()) {
      v_.emplace_back(p.tensor.numel(), 0.0f);
    }
  }
}

void Optimizer::step(ParamStore& params) {
  const auto& entries = params.entries();
  if (entries.size() != m_.size()) {
    throw TrainError("optimizer state does not match the parameter registry");
  }
  ++steps_;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Tensor t = entries[i].tensor;
    auto g = t.grad();
    auto x = t.data();
    for (std::size_t j = 0; j < g.size(); ++j) {
      if (!std::isfinite(g[j])) {
        throw TrainError("non-finite gradient in parameter '" + entries[i].name + "'");
      }
    }
    if (kind_ == OptimizerKind::adam) {
      const float bc1 = 1.0f - std::pow(beta1_, static_cast<float>(steps_));
      const float bc2 = 1.0f - std::pow(beta2_, static_cast<float>(steps_));
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < g.size(); ++j) {
        m[j] = beta1_ * m[j] + (1.0f - beta1_) * g[j];
        v[j] = beta2_ * v[j] + (1.0f - beta2_) * g[j] * g[j];
        const float mhat = m[j] / bc1;
        const float vhat = v[j] / bc2;
        x[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    } else {
      auto& mom = m_[i];
      for (std::size_t j = 0; j < g.size(); ++j) {
        mom[j] = momentum_ * mom[j] + g[j];
        x[j] -= lr_ * mom[j];
      }
    }
  }
}

// ---- evaluation --------------------------------------------------------------

std::vector<float> predict_all(const TcanModel& model, const std::vector<Sample>& samples) {
  std::vector<float> preds;
  preds.reserve(samples.size());
  for (const Sample& s : samples) {
    Tape tape;
    preds.push_back(model.forward(tape, s, false).y_pred.value());
  }
  return preds;
}

MetricsReport evaluate_model(const TcanModel& model, const std::vector<Sample>& samples) {
  const std::vector<float> preds = predict_all(model, samples);
  std::vector<float> labels;
  labels.reserve(samples.size());
  for (const Sample& s : samples) labels.push_back(s.label);
  return evaluate_metrics(preds, labels);
}

// ---- training loop -------------------------------------------------------------

namespace {

void clip_gradients(ParamStore& params, float clip_norm) {
  double sq = 0.0;
  for (const NamedParam& p : params.entries()) {
    Tensor t = p.tensor;
    for (float g : t.grad()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (norm <= clip_norm || norm == 0.0) return;
  const float s = static_cast<float>(clip_norm / norm);
  for (const NamedParam& p : params.entries()) {
    Tensor t = p.tensor;
    for (float& g : t.grad()) g *= s;
  }
}

}  // namespace

TrainResult train(TcanModel& model, const std::vector<Sample>& train_set,
                  const std::vector<Sample>& val_set, const TrainConfig& cfg, std::ostream* log) {
  if (train_set.empty()) throw TrainError("train: empty training split");
  if (val_set.empty()) throw TrainError("train: empty validation split");
  if (cfg.epochs < 1) throw TrainError("train: epochs must be >= 1");
  if (cfg.batch_size < 1) throw TrainError("train: batch_size must be >= 1");

  const bool joint = model.config().joint_learning_enabled;
  const float lambda = model.config().lambda;
  Optimizer opt(model.params(), cfg);

  TrainResult result;
  double best_mae = std::numeric_limits<double>::infinity();
  int epochs_since_best = 0;

  if (!cfg.checkpoint_dir.empty()) fs::create_directories(cfg.checkpoint_dir);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto batches =
        epoch_batches(static_cast<int>(train_set.size()), cfg.batch_size, cfg.seed, epoch);
    double sum_multi = 0.0, sum_uni = 0.0, sum_total = 0.0;
    for (const std::vector<int>& batch : batches) {
      Tape tape;
      std::vector<Tensor> preds;
      std::vector<std::vector<Tensor>> uni;
      std::vector<float> labels;
      preds.reserve(batch.size());
      labels.reserve(batch.size());
      for (int idx : batch) {
        const Sample& s = train_set[static_cast<std::size_t>(idx)];
        ForwardOutput out = model.forward(tape, s, true);
        preds.push_back(out.y_pred);
        labels.push_back(s.label);
        if (joint) {
          std::vector<Tensor> per_sample;
          per_sample.reserve(out.y_uni.size());
          for (const UniPrediction& u : out.y_uni) per_sample.push_back(u.y);
          uni.push_back(std::move(per_sample));
        }
      }
      Tensor lm = loss_multi(tape, preds, labels);
      Tensor lt = lm;
      double uni_val = 0.0;
      if (joint) {
        Tensor lu = loss_uni(tape, uni, labels);
        uni_val = lu.value();
        lt = loss_total(tape, lm, &lu, lambda);
      }
      model.params().zero_grads();
      tape.backward(lt);
      if (cfg.clip_norm > 0.0f) clip_gradients(model.params(), cfg.clip_norm);
      opt.step(model.params());

      const double bs = static_cast<double>(batch.size());
      sum_multi += static_cast<double>(lm.value()) * bs;
      sum_uni += uni_val * bs;
      sum_total += static_cast<double>(lt.value()) * bs;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    const double n = static_cast<double>(train_set.size());
    rec.loss_multi = sum_multi / n;
    rec.loss_uni = sum_uni / n;
    rec.loss_total = sum_total / n;
    rec.val = evaluate_model(model, val_set);

    if (cfg.stop_train_mae > 0.0f) {
      const std::vector<float> train_preds = predict_all(model, train_set);
      std::vector<float> train_labels;
      train_labels.reserve(train_set.size());
      for (const Sample& s : train_set) train_labels.push_back(s.label);
      rec.train_mae = metric_mae(train_preds, train_labels);
    }
    result.history.push_back(rec);

    if (rec.val.mae < best_mae) {
      best_mae = rec.val.mae;
      result.best_epoch = epoch;
      result.best_val = rec.val;
      epochs_since_best = 0;
      if (!cfg.checkpoint_dir.empty()) {
        result.checkpoint_path = (fs::path(cfg.checkpoint_dir) / "best.tckp").string();
        checkpoint_save(result.checkpoint_path, model, &opt);
      }
    } else {
      ++epochs_since_best;
    }

    if (log) {
      (*log) << "epoch " << epoch << " loss_total " << fmt_f64(rec.loss_total) << " val_mae "
             << fmt_f64(rec.val.mae) << "\n";
    }
    if (cfg.stop_train_mae > 0.0f && rec.train_mae < cfg.stop_train_mae) break;
    if (cfg.patience > 0 && epochs_since_best >= cfg.patience) break;
  }
  return result;
}

void write_history_csv(const std::string& path, const std::vector<EpochRecord>& history,
                       const std::string& config_echo) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw TrainError("cannot open " + path + " for writing");
  std::istringstream echo(config_echo);
  std::string line;
  while (std::getline(echo, line)) {
    if (!line.empty()) out << "# " << line << "\n";
  }
  out << "epoch,loss_multi,loss_uni,loss_total,val_mae,val_corr,val_acc7,val_acc2,val_f1\n";
  for (const EpochRecord& r : history) {
    out << r.epoch << "," << fmt_f64(r.loss_multi) << "," << fmt_f64(r.loss_uni) << ","
        << fmt_f64(r.loss_total) << "," << fmt_f64(r.val.mae) << "," << fmt_f64(r.val.corr) << ","
        << fmt_f64(r.val.acc7) << "," << fmt_f64(r.val.acc2) << "," << fmt_f64(r.val.f1) << "\n";
  }
}

// ---- checkpoint ------------------------------------------------------------------

namespace {

constexpr char kCkptMagic[4] = {'T', 'C', 'K', 'P'};
constexpr std::uint32_t kCkptVersion = 1;

void put_u16(std::string& buf, std::uint16_t v) {
  buf.push_back(static_cast<char>(v & 0xff));
  buf.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& buf, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(buf, bits);
}

struct CkptReader {
  const std::string& buf;
  std::size_t pos = 0;
  std::string file;

  void need(std::size_t n) const {
    if (pos + n > buf.size()) throw CheckpointError(file + ": truncated checkpoint");
  }
  std::uint16_t u16() {
    need(2);
    const auto* p = reinterpret_cast<const unsigned char*>(buf.data() + pos);
    pos += 2;
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    const auto* p = reinterpret_cast<const unsigned char*>(buf.data() + pos);
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    const auto* p = reinterpret_cast<const unsigned char*>(buf.data() + pos);
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    pos += 8;
    return v;
  }
  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace

void checkpoint_save(const std::string& path, const TcanModel& model, const Optimizer* opt) {
  std::string buf;
  buf.append(kCkptMagic, 4);
  put_u32(buf, kCkptVersion);

  std::string config_text = model.config().to_kv();
  config_text += "d_in_t = " + std::to_string(model.widths().text) + "\n";
  config_text += "d_in_v = " + std::to_string(model.widths().visual) + "\n";
  config_text += "d_in_a = " + std::to_string(model.widths().acoustic) + "\n";
  config_text += "model_seed = " + std::to_string(model.seed()) + "\n";
  put_u32(buf, static_cast<std::uint32_t>(config_text.size()));
  buf += config_text;

  const auto& entries = model.params().entries();
  put_u32(buf, static_cast<std::uint32_t>(entries.size()));
  for (const NamedParam& p : entries) {
    put_u16(buf, static_cast<std::uint16_t>(p.name.size()));
    buf += p.name;
    const Shape& sh = p.tensor.shape();
    buf.push_back(static_cast<char>(sh.rank));
    for (int i = 0; i < sh.rank; ++i) put_u32(buf, static_cast<std::uint32_t>(sh.extent[i]));
    for (float v : p.tensor.data()) put_f32(buf, v);
  }

  buf.push_back(opt != nullptr ? 1 : 0);
  if (opt != nullptr) {
    buf.push_back(opt->kind() == OptimizerKind::adam ? 0 : 1);
    put_u64(buf, static_cast<std::uint64_t>(opt->steps()));
    const bool adam = opt->kind() == OptimizerKind::adam;
    const std::uint32_t n_slots =
        static_cast<std::uint32_t>(entries.size() * (adam ? 2 : 1));
    put_u32(buf, n_slots);
    auto put_slot = [&](const std::string& name, const std::vector<float>& data) {
      put_u16(buf, static_cast<std::uint16_t>(name.size()));
      buf += name;
      put_u32(buf, static_cast<std::uint32_t>(data.size()));
      for (float v : data) put_f32(buf, v);
    };
    for (std::size_t i = 0; i < entries.size(); ++i) {
      put_slot(entries[i].name + "#m", opt->moment1()[i]);
      if (adam) put_slot(entries[i].name + "#v", opt->moment2()[i]);
    }
  }

  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot open " + path + " for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw CheckpointError("short write to " + path);
}

Checkpoint checkpoint_read(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("missing checkpoint file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string buf = ss.str();
  if (buf.size() < 8 || std::memcmp(buf.data(), kCkptMagic, 4) != 0) {
    throw CheckpointError(path + ": not a checkpoint file");
  }
  CkptReader r{buf, 4, path};
  const std::uint32_t version = r.u32();
  if (version != kCkptVersion) {
    throw CheckpointError(path + ": unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ck;
  const std::uint32_t config_len = r.u32();
  const std::string config_text = r.bytes(config_len);

  // The config section carries the model keys plus input widths and seed.
  std::string model_kv;
  for (const auto& [key, value] : kv_parse(config_text)) {
    if (key == "d_in_t") ck.widths.text = static_cast<int>(parse_int(value, key));
    else if (key == "d_in_v") ck.widths.visual = static_cast<int>(parse_int(value, key));
    else if (key == "d_in_a") ck.widths.acoustic = static_cast<int>(parse_int(value, key));
    else if (key == "model_seed") {
      std::uint64_t seed = 0;
      const auto res = std::from_chars(value.data(), value.data() + value.size(), seed);
      if (res.ec != std::errc{} || res.ptr != value.data() + value.size()) {
        throw CheckpointError(path + ": bad model_seed '" + value + "'");
      }
      ck.model_seed = seed;
    } else {
      model_kv += key + " = " + value + "\n";
    }
  }
  ck.config = ModelConfig::from_kv(model_kv);

  const std::uint32_t n_tensors = r.u32();
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    const std::uint16_t name_len = r.u16();
    NamedParam p;
    p.name = r.bytes(name_len);
    Shape sh;
    r.need(1);
    sh.rank = static_cast<int>(static_cast<unsigned char>(buf[r.pos]));
    ++r.pos;
    if (sh.rank < 1 || sh.rank > 3) {
      throw CheckpointError(path + ": tensor '" + p.name + "' has rank " +
                            std::to_string(sh.rank));
    }
    for (int k = 0; k < sh.rank; ++k) sh.extent[k] = static_cast<int>(r.u32());
    std::vector<float> data(static_cast<std::size_t>(sh.numel()));
    for (float& v : data) v = r.f32();
    p.tensor = Tensor::values(sh, std::move(data));
    ck.tensors.push_back(std::move(p));
  }

  r.need(1);
  ck.has_optimizer = buf[r.pos] != 0;
  ++r.pos;
  if (ck.has_optimizer) {
    r.need(1);
    ck.opt_kind = buf[r.pos] == 0 ? OptimizerKind::adam : OptimizerKind::sgd;
    ++r.pos;
    ck.opt_steps = static_cast<std::int64_t>(r.u64());
    const std::uint32_t n_slots = r.u32();
    for (std::uint32_t i = 0; i < n_slots; ++i) {
      const std::uint16_t name_len = r.u16();
      std::string name = r.bytes(name_len);
      const std::uint32_t len = r.u32();
      std::vector<float> data(len);
      for (float& v : data) v = r.f32();
      ck.opt_slots.emplace_back(std::move(name), std::move(data));
    }
  }
  return ck;
}

void checkpoint_apply(const Checkpoint& ck, TcanModel& model, Optimizer* opt) {
  std::vector<std::string> missing, extra;
  std::vector<bool> used(ck.tensors.size(), false);
  auto find_ck = [&](const std::string& name) -> const NamedParam* {
    for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
      if (ck.tensors[i].name == name) {
        used[i] = true;
        return &ck.tensors[i];
      }
    }
    return nullptr;
  };
  for (const NamedParam& p : model.params().entries()) {
    const NamedParam* src = find_ck(p.name);
    if (src == nullptr) {
      missing.push_back(p.name);
      continue;
    }
    if (src->tensor.shape() != p.tensor.shape()) {
      throw CheckpointError("checkpoint tensor '" + p.name + "' has shape " +
                            src->tensor.shape().str() + ", model expects " +
                            p.tensor.shape().str());
    }
    Tensor dst = p.tensor;
    std::copy(src->tensor.data().begin(), src->tensor.data().end(), dst.data().begin());
  }
  for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
    if (!used[i]) extra.push_back(ck.tensors[i].name);
  }
  if (!missing.empty() || !extra.empty()) {
    std::string msg = "checkpoint does not match the model parameter set;";
    if (!missing.empty()) {
      msg += " missing:";
      for (const std::string& n : missing) msg += " " + n;
      msg += ";";
    }
    if (!extra.empty()) {
      msg += " extra:";
      for (const std::string& n : extra) msg += " " + n;
    }
    throw CheckpointError(msg);
  }

  if (opt != nullptr && ck.has_optimizer) {
    if (opt->kind() != ck.opt_kind) {
      throw CheckpointError("checkpoint optimizer kind does not match");
    }
    opt->set_steps(ck.opt_steps);
    auto find_slot = [&](const std::string& name) -> const std::vector<float>* {
      for (const auto& [n, data] : ck.opt_slots)
        if (n == name) return &data;
      return nullptr;
    };
    const auto& entries = model.params().entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const std::vector<float>* m = find_slot(entries[i].name + "#m");
      if (m == nullptr || m->size() != opt->moment1()[i].size()) {
        throw CheckpointError("checkpoint optimizer state missing for '" + entries[i].name + "'");
      }
      opt->moment1()[i] = *m;
      if (opt->kind() == OptimizerKind::adam) {
        const std::vector<float>* v = find_slot(entries[i].name + "#v");
        if (v == nullptr || v->size() != opt->moment2()[i].size()) {
          throw CheckpointError("checkpoint optimizer state missing for '" + entries[i].name + "'");
        }
        opt->moment2()[i] = *v;
      }
    }
  }
}

TcanModel model_from_checkpoint(const Checkpoint& ck) {
  TcanModel model(ck.config, ck.widths, ck.model_seed);
  checkpoint_apply(ck, model);
  return model;
}

}  // namespace tcan
