#include "tcan/ablate.hpp"

#include <atomic>
#include <cmath>
#include <fstream>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "tcan/textio.hpp"

using nlohmann::json;

namespace tcan {

void AblationSpec::validate() const {
  if (seeds.empty()) throw ConfigError("ablation spec: seeds must be non-empty");
  std::size_t widest = 0;
  for (std::size_t n : {subsets.size(), centers.size(), gates.size(), joint.size(),
                        n_values.size()}) {
    widest = std::max(widest, n);
  }
  if (widest < 2) {
    throw ConfigError("ablation spec: at least one axis must vary (two or more values)");
  }
  base_model.validate();
}

namespace {

TrainConfig train_config_from_json(const json& j, TrainConfig base) {
  for (const auto& [key, value] : j.items()) {
    if (key == "epochs") base.epochs = value.get<int>();
    else if (key == "batch_size") base.batch_size = value.get<int>();
    else if (key == "learning_rate") base.learning_rate = value.get<float>();
    else if (key == "optimizer") {
      const std::string v = value.get<std::string>();
      if (v == "adam") base.optimizer = OptimizerKind::adam;
      else if (v == "sgd") base.optimizer = OptimizerKind::sgd;
      else throw ConfigError("ablation spec: optimizer must be 'adam' or 'sgd'");
    } else if (key == "beta1") base.beta1 = value.get<float>();
    else if (key == "beta2") base.beta2 = value.get<float>();
    else if (key == "adam_eps") base.adam_eps = value.get<float>();
    else if (key == "momentum") base.momentum = value.get<float>();
    else if (key == "patience") base.patience = value.get<int>();
    else if (key == "clip_norm") base.clip_norm = value.get<float>();
    else throw ConfigError("ablation spec: unknown train key '" + key + "'");
  }
  return base;
}

ModelConfig model_config_from_json(const json& j, ModelConfig base) {
  for (const auto& [key, value] : j.items()) {
    if (key == "d") base.d = value.get<int>();
    else if (key == "L") base.L = value.get<int>();
    else if (key == "N") base.N = value.get<int>();
    else if (key == "h") base.h = value.get<int>();
    else if (key == "ffn_mult") base.ffn_mult = value.get<int>();
    else if (key == "lambda") base.lambda = value.get<float>();
    else if (key == "pooling") {
      const std::string v = value.get<std::string>();
      if (v == "mean") base.pooling = Pooling::mean;
      else if (v == "last") base.pooling = Pooling::last;
      else throw ConfigError("ablation spec: pooling must be 'mean' or 'last'");
    } else if (key == "gates_enabled") base.gates_enabled = value.get<bool>();
    else if (key == "joint_learning_enabled") base.joint_learning_enabled = value.get<bool>();
    else if (key == "center_modality") base.center_modality = modality_from_string(value.get<std::string>());
    else if (key == "positional_encoding") base.positional_encoding = value.get<bool>();
    else if (key == "attention_residual") base.attention_residual = value.get<bool>();
    else if (key == "conv_kernel") base.conv_kernel = value.get<int>();
    else if (key == "subset") base.subset = ModalitySubset::parse(value.get<std::string>());
    else throw ConfigError("ablation spec: unknown model key '" + key + "'");
  }
  return base;
}

}  // namespace

AblationSpec ablation_spec_from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("missing ablation spec file: " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": corrupt ablation spec: " + e.what());
  }
  AblationSpec spec;
  if (j.contains("dataset")) spec.dataset_path = j["dataset"].get<std::string>();
  if (j.contains("model")) spec.base_model = model_config_from_json(j["model"], spec.base_model);
  if (j.contains("train")) spec.base_train = train_config_from_json(j["train"], spec.base_train);
  if (!j.contains("seeds") || !j["seeds"].is_array()) {
    throw ConfigError(path + ": ablation spec needs a non-empty 'seeds' array");
  }
  for (const json& s : j["seeds"]) spec.seeds.push_back(s.get<std::uint64_t>());
  if (j.contains("axes")) {
    const json& axes = j["axes"];
    for (const auto& [key, value] : axes.items()) {
      if (key == "subset") {
        for (const json& v : value) spec.subsets.push_back(v.get<std::string>());
      } else if (key == "center") {
        for (const json& v : value) spec.centers.push_back(modality_from_string(v.get<std::string>()));
      } else if (key == "gates") {
        for (const json& v : value) spec.gates.push_back(v.get<bool>());
      } else if (key == "joint") {
        for (const json& v : value) spec.joint.push_back(v.get<bool>());
      } else if (key == "N") {
        for (const json& v : value) spec.n_values.push_back(v.get<int>());
      } else {
        throw ConfigError(path + ": unknown ablation axis '" + key + "'");
      }
    }
  }
  spec.validate();
  return spec;
}

MetricsReport run_ablation_cell(const AblationSpec& spec, const AblationCell& cell,
                                std::uint64_t seed, const LoadedDataset& data) {
  ModelConfig mc = spec.base_model;
  mc.subset = ModalitySubset::parse(cell.subset);
  mc.center_modality = cell.center;
  mc.gates_enabled = cell.gates;
  mc.joint_learning_enabled = cell.joint;
  mc.N = cell.N;
  mc.validate();
  TcanModel model(mc, ModalityWidths::from_manifest(data.manifest), seed);
  TrainConfig tc = spec.base_train;
  tc.seed = seed;
  tc.checkpoint_dir.clear();
  const TrainResult r = train(model, data.train, data.val, tc);
  return r.best_val;
}

std::vector<CellResult> run_ablation(const AblationSpec& spec, const LoadedDataset& data,
                                     int jobs, std::ostream* log) {
  spec.validate();
  const std::vector<std::string> subsets =
      spec.subsets.empty() ? std::vector<std::string>{spec.base_model.subset.str()} : spec.subsets;
  const std::vector<Modality> centers =
      spec.centers.empty() ? std::vector<Modality>{spec.base_model.center_modality} : spec.centers;
  const std::vector<bool> gates =
      spec.gates.empty() ? std::vector<bool>{spec.base_model.gates_enabled} : spec.gates;
  const std::vector<bool> joint =
      spec.joint.empty() ? std::vector<bool>{spec.base_model.joint_learning_enabled} : spec.joint;
  const std::vector<int> n_values =
      spec.n_values.empty() ? std::vector<int>{spec.base_model.N} : spec.n_values;

  std::vector<CellResult> results;
  for (const std::string& subset : subsets) {
    for (Modality center : centers) {
      for (bool g : gates) {
        for (bool jn : joint) {
          for (int n : n_values) {
            CellResult r;
            r.cell = {subset, center, g, jn, n};
            r.seeds = spec.seeds;
            r.per_seed.assign(spec.seeds.size(), MetricsReport{});
            r.errors.assign(spec.seeds.size(), "");
            results.push_back(std::move(r));
          }
        }
      }
    }
  }

  struct Task {
    std::size_t cell;
    std::size_t seed_idx;
  };
  std::vector<Task> tasks;
  for (std::size_t c = 0; c < results.size(); ++c) {
    for (std::size_t s = 0; s < spec.seeds.size(); ++s) tasks.push_back({c, s});
  }

  std::atomic<std::size_t> next{0};
  std::mutex log_mu;
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= tasks.size()) return;
      const Task& t = tasks[i];
      CellResult& cell = results[t.cell];
      try {
        cell.per_seed[t.seed_idx] =
            run_ablation_cell(spec, cell.cell, cell.seeds[t.seed_idx], data);
      } catch (const std::exception& e) {
        cell.errors[t.seed_idx] = e.what();
      }
      if (log) {
        std::lock_guard<std::mutex> lock(log_mu);
        (*log) << "cell " << t.cell + 1 << "/" << results.size() << " subset=" << cell.cell.subset
               << " center=" << modality_name(cell.cell.center) << " gates=" << cell.cell.gates
               << " joint=" << cell.cell.joint << " N=" << cell.cell.N << " seed="
               << cell.seeds[t.seed_idx]
               << (cell.errors[t.seed_idx].empty() ? "" : " FAILED") << "\n";
      }
    }
  };

  const int n_workers = std::max(1, std::min<int>(jobs, static_cast<int>(tasks.size())));
  if (n_workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(n_workers);
    for (int i = 0; i < n_workers; ++i) pool.emplace_back(worker);
    for (std::thread& th : pool) th.join();
  }

  for (CellResult& r : results) {
    r.n_ok = 0;
    for (const std::string& e : r.errors) {
      if (e.empty()) ++r.n_ok;
    }
  }
  return results;
}

namespace {

struct MeanSd {
  double mean = 0.0, sd = 0.0;
};

MeanSd mean_sd(const std::vector<double>& xs) {
  MeanSd out;
  if (xs.empty()) return out;
  for (double x : xs) out.mean += x;
  out.mean /= static_cast<double>(xs.size());
  if (xs.size() < 2) return out;
  double sq = 0.0;
  for (double x : xs) sq += (x - out.mean) * (x - out.mean);
  out.sd = std::sqrt(sq / static_cast<double>(xs.size() - 1));
  return out;
}

std::string csv_safe(std::string s) {
  for (char& c : s) {
    if (c == ',' || c == '\n' || c == '\r') c = ';';
  }
  return s;
}

}  // namespace

void write_ablation_csv(const std::string& path, const AblationSpec& spec,
                        const std::vector<CellResult>& results) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open " + path + " for writing");

  out << "# seeds =";
  for (std::uint64_t s : spec.seeds) out << " " << s;
  out << "\n";
  std::istringstream cfg(spec.base_model.to_kv());
  std::string line;
  while (std::getline(cfg, line)) {
    if (!line.empty()) out << "# model." << line << "\n";
  }
  out << "# train.epochs = " << spec.base_train.epochs << "\n";
  out << "# train.batch_size = " << spec.base_train.batch_size << "\n";
  out << "# train.learning_rate = " << fmt_f32(spec.base_train.learning_rate) << "\n";
  out << "# train.optimizer = "
      << (spec.base_train.optimizer == OptimizerKind::adam ? "adam" : "sgd") << "\n";

  out << "subset,center,gates,joint,N,n_seeds,n_ok,status,"
         "mae_mean,mae_sd,corr_mean,corr_sd,acc7_mean,acc7_sd,acc2_mean,acc2_sd,"
         "f1_mean,f1_sd,error\n";
  for (const CellResult& r : results) {
    std::vector<double> mae, corr, acc7, acc2, f1;
    std::string first_error;
    for (std::size_t i = 0; i < r.seeds.size(); ++i) {
      if (!r.errors[i].empty()) {
        if (first_error.empty()) first_error = r.errors[i];
        continue;
      }
      mae.push_back(r.per_seed[i].mae);
      corr.push_back(r.per_seed[i].corr);
      acc7.push_back(r.per_seed[i].acc7);
      acc2.push_back(r.per_seed[i].acc2);
      f1.push_back(r.per_seed[i].f1);
    }
    const char* status = r.n_ok == static_cast<int>(r.seeds.size()) ? "ok"
                         : r.n_ok > 0 ? "partial"
                                      : "failed";
    const MeanSd m_mae = mean_sd(mae), m_corr = mean_sd(corr), m_acc7 = mean_sd(acc7),
                 m_acc2 = mean_sd(acc2), m_f1 = mean_sd(f1);
    out << r.cell.subset << "," << modality_name(r.cell.center) << ","
        << (r.cell.gates ? "true" : "false") << "," << (r.cell.joint ? "true" : "false") << ","
        << r.cell.N << "," << r.seeds.size() << "," << r.n_ok << "," << status << ","
        << fmt_f64(m_mae.mean) << "," << fmt_f64(m_mae.sd) << "," << fmt_f64(m_corr.mean) << ","
        << fmt_f64(m_corr.sd) << "," << fmt_f64(m_acc7.mean) << "," << fmt_f64(m_acc7.sd) << ","
        << fmt_f64(m_acc2.mean) << "," << fmt_f64(m_acc2.sd) << "," << fmt_f64(m_f1.mean) << ","
        << fmt_f64(m_f1.sd) << "," << csv_safe(first_error) << "\n";
  }
}

}  // namespace tcan
