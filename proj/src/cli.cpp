#include "tcan/cli.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include <CLI11.hpp>

#include "tcan/ablate.hpp"
#include "tcan/data.hpp"
#include "tcan/metrics.hpp"
#include "tcan/model.hpp"
#include "tcan/rng.hpp"
#include "tcan/textio.hpp"
#include "tcan/train.hpp"

namespace fs = std::filesystem;

namespace tcan {

namespace {

struct ModelFlagSet {
  int d = 32, L = 24, N = 5, h = 4, ffn_mult = 4, conv_kernel = 3;
  float lambda = 0.5f;
  std::string pooling = "mean";
  std::string center = "text";
  std::string subset = "tva";
  bool gates = true, joint = true, pos_enc = true, attn_residual = false;

  CLI::Option *o_d = nullptr, *o_L = nullptr, *o_N = nullptr, *o_h = nullptr,
              *o_ffn = nullptr, *o_kernel = nullptr, *o_lambda = nullptr, *o_pooling = nullptr,
              *o_center = nullptr, *o_subset = nullptr, *o_gates = nullptr, *o_joint = nullptr,
              *o_pos = nullptr, *o_res = nullptr;

  void attach(CLI::App* cmd) {
    o_d = cmd->add_option("--d", d, "feature width")->check(CLI::PositiveNumber);
    o_L = cmd->add_option("--L", L, "common sequence length")->check(CLI::PositiveNumber);
    o_N = cmd->add_option("--N", N, "stacked layers per branch")->check(CLI::PositiveNumber);
    o_h = cmd->add_option("--h", h, "attention heads")->check(CLI::PositiveNumber);
    o_ffn = cmd->add_option("--ffn-mult", ffn_mult, "FFN hidden width multiplier")
              ->check(CLI::PositiveNumber);
    o_kernel = cmd->add_option("--conv-kernel", conv_kernel, "temporal conv kernel width (odd)")
                 ->check(CLI::PositiveNumber);
    o_lambda = cmd->add_option("--lambda", lambda, "unimodal loss weight")
                 ->check(CLI::NonNegativeNumber);
    o_pooling = cmd->add_option("--pooling", pooling, "temporal pooling: mean or last")
                    ->check(CLI::IsMember({"mean", "last"}));
    o_center = cmd->add_option("--center", center, "center modality: text, visual or acoustic");
    o_subset = cmd->add_option("--subset", subset, "modality subset, e.g. t, tv, ta, tva");
    o_gates = cmd->add_flag("--gates,!--no-gates", gates, "gated memory fusion");
    o_joint = cmd->add_flag("--joint,!--no-joint", joint, "joint unimodal learning");
    o_pos = cmd->add_flag("--positional-encoding,!--no-positional-encoding", pos_enc,
                          "sinusoidal positional encoding");
    o_res = cmd->add_flag("--attention-residual,!--no-attention-residual", attn_residual,
                          "residual connection around attention blocks");
  }

  // Flags beat the config file, which beats the defaults.
  ModelConfig apply(ModelConfig cfg) const {
    if (o_d->count()) cfg.d = d;
    if (o_L->count()) cfg.L = L;
    if (o_N->count()) cfg.N = N;
    if (o_h->count()) cfg.h = h;
    if (o_ffn->count()) cfg.ffn_mult = ffn_mult;
    if (o_kernel->count()) cfg.conv_kernel = conv_kernel;
    if (o_lambda->count()) cfg.lambda = lambda;
    if (o_pooling->count()) cfg.pooling = pooling == "mean" ? Pooling::mean : Pooling::last;
    if (o_center->count()) cfg.center_modality = modality_from_string(center);
    if (o_subset->count()) cfg.subset = ModalitySubset::parse(subset);
    if (o_gates->count()) cfg.gates_enabled = gates;
    if (o_joint->count()) cfg.joint_learning_enabled = joint;
    if (o_pos->count()) cfg.positional_encoding = pos_enc;
    if (o_res->count()) cfg.attention_residual = attn_residual;
    return cfg;
  }
};

struct TrainFlagSet {
  int epochs = 50, batch_size = 16, patience = 0;
  float lr = 1e-3f, beta1 = 0.9f, beta2 = 0.999f, adam_eps = 1e-8f, momentum = 0.9f;
  float clip_norm = 0.0f, stop_train_mae = 0.0f;
  std::string optimizer = "adam";
  std::uint64_t seed = 0;

  void attach(CLI::App* cmd) {
    cmd->add_option("--epochs", epochs, "training epochs")->check(CLI::PositiveNumber);
    cmd->add_option("--batch-size", batch_size, "minibatch size")->check(CLI::PositiveNumber);
    cmd->add_option("--lr", lr, "learning rate")->check(CLI::PositiveNumber);
    cmd->add_option("--optimizer", optimizer, "adam or sgd")
        ->check(CLI::IsMember({"adam", "sgd"}));
    cmd->add_option("--beta1", beta1, "adam beta1")->check(CLI::Range(0.0f, 1.0f));
    cmd->add_option("--beta2", beta2, "adam beta2")->check(CLI::Range(0.0f, 1.0f));
    cmd->add_option("--adam-eps", adam_eps, "adam denominator epsilon")->check(CLI::PositiveNumber);
    cmd->add_option("--momentum", momentum, "sgd momentum")->check(CLI::Range(0.0f, 1.0f));
    cmd->add_option("--patience", patience, "early stop after this many epochs without val improvement (0 = off)")
        ->check(CLI::NonNegativeNumber);
    cmd->add_option("--clip-norm", clip_norm, "global gradient norm clip (0 = off)")
        ->check(CLI::NonNegativeNumber);
    cmd->add_option("--stop-train-mae", stop_train_mae, "stop once train MAE drops below (0 = off)")
        ->check(CLI::NonNegativeNumber);
    cmd->add_option("--seed", seed, "seed for init and batch shuffling");
  }

  TrainConfig to_config() const {
    TrainConfig tc;
    tc.epochs = epochs;
    tc.batch_size = batch_size;
    tc.learning_rate = lr;
    tc.optimizer = optimizer == "adam" ? OptimizerKind::adam : OptimizerKind::sgd;
    tc.beta1 = beta1;
    tc.beta2 = beta2;
    tc.adam_eps = adam_eps;
    tc.momentum = momentum;
    tc.patience = patience;
    tc.clip_norm = clip_norm;
    tc.stop_train_mae = stop_train_mae;
    tc.seed = seed;
    return tc;
  }

  std::string echo() const {
    std::string s;
    s += "epochs = " + std::to_string(epochs) + "\n";
    s += "batch_size = " + std::to_string(batch_size) + "\n";
    s += "learning_rate = " + fmt_f32(lr) + "\n";
    s += "optimizer = " + optimizer + "\n";
    if (optimizer == "adam") {
      s += "beta1 = " + fmt_f32(beta1) + "\n";
      s += "beta2 = " + fmt_f32(beta2) + "\n";
      s += "adam_eps = " + fmt_f32(adam_eps) + "\n";
    } else {
      s += "momentum = " + fmt_f32(momentum) + "\n";
    }
    s += "patience = " + std::to_string(patience) + "\n";
    s += "clip_norm = " + fmt_f32(clip_norm) + "\n";
    s += "seed = " + std::to_string(seed) + "\n";
    return s;
  }
};

std::string read_text_file(const std::string& path, const char* what) {
  std::ifstream in(path);
  if (!in) throw ConfigError(std::string("missing ") + what + ": " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const std::vector<Sample>& pick_split(const LoadedDataset& data, const std::string& split) {
  if (split == "train") return data.train;
  if (split == "val") return data.val;
  return data.test;
}

// ---- subcommand handlers -------------------------------------------------

struct GenDataArgs {
  std::string out_dir;
  bool binary = false;
  SyntheticConfig cfg;
};

int cmd_gen_data(const GenDataArgs& a, std::ostream& out) {
  const LoadedDataset ds = generate_synthetic(a.cfg);
  write_dataset(ds, a.out_dir, a.binary);

  std::string echo;
  echo += "seed = " + std::to_string(a.cfg.seed) + "\n";
  echo += "n_train = " + std::to_string(a.cfg.n_train) + "\n";
  echo += "n_val = " + std::to_string(a.cfg.n_val) + "\n";
  echo += "n_test = " + std::to_string(a.cfg.n_test) + "\n";
  echo += "snr_t = " + fmt_f32(a.cfg.snr_t) + "\n";
  echo += "snr_v = " + fmt_f32(a.cfg.snr_v) + "\n";
  echo += "snr_a = " + fmt_f32(a.cfg.snr_a) + "\n";
  echo += "p_flip_t = " + fmt_f32(a.cfg.p_flip_t) + "\n";
  echo += "p_flip_v = " + fmt_f32(a.cfg.p_flip_v) + "\n";
  echo += "p_flip_a = " + fmt_f32(a.cfg.p_flip_a) + "\n";
  echo += "burst_v = " + fmt_f32(a.cfg.burst_v) + "\n";
  echo += "burst_a = " + fmt_f32(a.cfg.burst_a) + "\n";
  echo += "d_t = " + std::to_string(a.cfg.d_t) + "\n";
  echo += "d_v = " + std::to_string(a.cfg.d_v) + "\n";
  echo += "d_a = " + std::to_string(a.cfg.d_a) + "\n";
  echo += "len_t = " + std::to_string(a.cfg.len_t_min) + ".." + std::to_string(a.cfg.len_t_max) + "\n";
  echo += "len_v = " + std::to_string(a.cfg.len_v_min) + ".." + std::to_string(a.cfg.len_v_max) + "\n";
  echo += "len_a = " + std::to_string(a.cfg.len_a_min) + ".." + std::to_string(a.cfg.len_a_max) + "\n";
  echo += std::string("format = ") + (a.binary ? "binary" : "ndjson") + "\n";
  std::ofstream cfg_out(fs::path(a.out_dir) / "gen_config.txt", std::ios::binary);
  cfg_out << echo;

  out << "wrote " << ds.train.size() << "/" << ds.val.size() << "/" << ds.test.size()
      << " train/val/test samples to " << a.out_dir << "\n";
  return 0;
}

struct TrainArgs {
  std::string data_path, out_dir, config_path;
  const ModelFlagSet* model_flags = nullptr;
  const TrainFlagSet* train_flags = nullptr;
};

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  ModelConfig mc;
  if (!a.config_path.empty()) {
    mc = ModelConfig::from_kv(read_text_file(a.config_path, "config file"));
  }
  mc = a.model_flags->apply(mc);
  mc.validate();

  const LoadedDataset data = load_dataset(a.data_path);
  TrainConfig tc = a.train_flags->to_config();
  tc.checkpoint_dir = a.out_dir;
  fs::create_directories(a.out_dir);

  TcanModel model(mc, ModalityWidths::from_manifest(data.manifest), tc.seed);
  const TrainResult result = train(model, data.train, data.val, tc, &err);

  std::string echo = mc.to_kv() + a.train_flags->echo();
  echo += "data = " + a.data_path + "\n";
  write_history_csv((fs::path(a.out_dir) / "history.csv").string(), result.history, echo);
  std::ofstream cfg_out(fs::path(a.out_dir) / "config.txt", std::ios::binary);
  cfg_out << echo;

  err << "best epoch " << result.best_epoch << ", checkpoint "
      << (result.checkpoint_path.empty() ? "(none)" : result.checkpoint_path) << "\n";
  out << metrics_to_json(result.best_val) << "\n";
  return 0;
}

struct EvalArgs {
  std::string checkpoint_path, data_path, split = "val";
  bool weighted_f1 = false;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const Checkpoint ck = checkpoint_read(a.checkpoint_path);
  TcanModel model = model_from_checkpoint(ck);
  const LoadedDataset data = load_dataset(a.data_path);
  const ModalityWidths w = ModalityWidths::from_manifest(data.manifest);
  if (w.text != ck.widths.text || w.visual != ck.widths.visual ||
      w.acoustic != ck.widths.acoustic) {
    throw IngestError("dataset widths (" + std::to_string(w.text) + "/" +
                      std::to_string(w.visual) + "/" + std::to_string(w.acoustic) +
                      ") do not match checkpoint widths (" + std::to_string(ck.widths.text) + "/" +
                      std::to_string(ck.widths.visual) + "/" + std::to_string(ck.widths.acoustic) +
                      ")");
  }
  const std::vector<Sample>& samples = pick_split(data, a.split);
  if (samples.empty()) throw IngestError("split '" + a.split + "' is empty");
  const std::vector<float> preds = predict_all(model, samples);
  std::vector<float> labels;
  labels.reserve(samples.size());
  for (const Sample& s : samples) labels.push_back(s.label);
  MetricsOptions opts;
  opts.weighted_f1 = a.weighted_f1;
  out << metrics_to_json(evaluate_metrics(preds, labels, opts)) << "\n";
  return 0;
}

struct AblateArgs {
  std::string spec_path, out_csv, data_path;
  int jobs = 1;
};

int cmd_ablate(const AblateArgs& a, std::ostream& out, std::ostream& err) {
  AblationSpec spec = ablation_spec_from_json_file(a.spec_path);
  const std::string data_path = a.data_path.empty() ? spec.dataset_path : a.data_path;
  if (data_path.empty()) {
    throw ConfigError("no dataset: pass --data or set 'dataset' in the spec");
  }
  const LoadedDataset data = load_dataset(data_path);
  const std::vector<CellResult> results = run_ablation(spec, data, a.jobs, &err);
  write_ablation_csv(a.out_csv, spec, results);
  int failed_runs = 0;
  for (const CellResult& r : results) {
    failed_runs += static_cast<int>(r.seeds.size()) - r.n_ok;
  }
  out << "wrote " << results.size() << " cells x " << spec.seeds.size() << " seeds to "
      << a.out_csv;
  if (failed_runs > 0) out << " (" << failed_runs << " runs failed)";
  out << "\n";
  return 0;
}

struct GradcheckArgs {
  int d = 8, L = 6, N = 1, h = 2, samples = 2;
  float eps = 1e-3f;
  double tol = 1e-3;
  std::uint64_t seed = 0;
  bool inject_bug = false;
  std::string subset = "tva";
};

int cmd_gradcheck(const GradcheckArgs& a, std::ostream& out) {
  ModelConfig mc;
  mc.d = a.d;
  mc.L = a.L;
  mc.N = a.N;
  mc.h = a.h;
  mc.subset = ModalitySubset::parse(a.subset);
  mc.validate();

  SyntheticConfig gen;
  gen.n_train = 1;
  gen.n_val = 0;
  gen.n_test = 0;
  gen.seed = mix_seed(a.seed, fnv1a64("gradcheck.sample"));
  gen.d_t = 5;
  gen.d_v = 4;
  gen.d_a = 6;
  gen.len_t_min = 6; gen.len_t_max = 10;
  gen.len_v_min = 8; gen.len_v_max = 14;
  gen.len_a_min = 10; gen.len_a_max = 16;
  const Sample sample = generate_synthetic(gen).train[0];

  TcanModel model(mc, ModalityWidths{gen.d_t, gen.d_v, gen.d_a}, a.seed);

  // Smooth scalar objective over every output head, so the check exercises
  // the full graph including the shared encoder path.
  auto f = [&](Tape& tape) {
    ForwardOutput fwd = model.forward(tape, sample, true);
    Tensor loss = fwd.y_pred;
    for (const UniPrediction& u : fwd.y_uni) {
      loss = tape.add(loss, tape.scale(u.y, 0.5f));
    }
    return loss;
  };

  GradCheckOptions opts;
  opts.eps = a.eps;
  opts.tol = a.tol;
  opts.max_coords_per_tensor = a.samples;
  opts.seed = a.seed;
  opts.inject_bug = a.inject_bug;
  const GradCheckReport report = grad_check(f, model.params().entries(), opts);

  for (const auto& [name, worst] : report.per_tensor_worst) {
    out << (worst <= a.tol ? "ok   " : "FAIL ") << name << " worst_rel=" << fmt_f64(worst)
        << "\n";
  }
  out << "checked " << report.coords_checked << " coordinates over "
      << report.per_tensor_worst.size() << " tensors";
  if (report.coords_retried > 0) {
    out << " (" << report.coords_retried << " re-probed at smaller step)";
  }
  out << "\n";
  if (!report.offenders.empty()) {
    out << "worst offenders:\n";
    for (const GradCheckCoord& c : report.offenders) {
      out << "  " << c.name << "[" << c.index << "] analytic=" << fmt_f64(c.analytic)
          << " fd=" << fmt_f64(c.fd) << " rel=" << fmt_f64(c.rel_err) << "\n";
    }
  }
  out << (report.passed ? "PASS" : "FAIL") << " worst_rel=" << fmt_f64(report.worst_rel)
      << " (" << report.worst_name << ")\n";
  return report.passed ? 0 : 1;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"temporal cross-attention trainer for multimodal sentiment"};
  app.name("tcan");
  app.require_subcommand(1);
  app.set_help_flag("--help", "print help and exit");

  // gen-data
  GenDataArgs gen;
  CLI::App* c_gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  c_gen->set_help_flag("--help", "print help and exit");
  c_gen->add_option("--out", gen.out_dir, "output directory")->required();
  c_gen->add_flag("--binary", gen.binary, "write binary splits instead of NDJSON");
  c_gen->add_option("--seed", gen.cfg.seed, "generator seed");
  c_gen->add_option("--n-train", gen.cfg.n_train, "training samples")->check(CLI::PositiveNumber);
  c_gen->add_option("--n-val", gen.cfg.n_val, "validation samples")->check(CLI::NonNegativeNumber);
  c_gen->add_option("--n-test", gen.cfg.n_test, "test samples")->check(CLI::NonNegativeNumber);
  c_gen->add_option("--snr-t", gen.cfg.snr_t, "text signal-to-noise")->check(CLI::PositiveNumber);
  c_gen->add_option("--snr-v", gen.cfg.snr_v, "visual signal-to-noise")->check(CLI::PositiveNumber);
  c_gen->add_option("--snr-a", gen.cfg.snr_a, "acoustic signal-to-noise")->check(CLI::PositiveNumber);
  c_gen->add_option("--p-flip-t", gen.cfg.p_flip_t, "text sign-flip probability")
      ->check(CLI::Range(0.0f, 0.5f));
  c_gen->add_option("--p-flip-v", gen.cfg.p_flip_v, "visual sign-flip probability")
      ->check(CLI::Range(0.0f, 0.5f));
  c_gen->add_option("--p-flip-a", gen.cfg.p_flip_a, "acoustic sign-flip probability")
      ->check(CLI::Range(0.0f, 0.5f));
  c_gen->add_option("--burst-v", gen.cfg.burst_v, "visual noise-burst rate")
      ->check(CLI::Range(0.0f, 1.0f));
  c_gen->add_option("--burst-a", gen.cfg.burst_a, "acoustic noise-burst rate")
      ->check(CLI::Range(0.0f, 1.0f));
  c_gen->add_option("--d-t", gen.cfg.d_t, "text feature width")->check(CLI::PositiveNumber);
  c_gen->add_option("--d-v", gen.cfg.d_v, "visual feature width")->check(CLI::PositiveNumber);
  c_gen->add_option("--d-a", gen.cfg.d_a, "acoustic feature width")->check(CLI::PositiveNumber);
  c_gen->add_option("--len-t-min", gen.cfg.len_t_min, "text min length")->check(CLI::PositiveNumber);
  c_gen->add_option("--len-t-max", gen.cfg.len_t_max, "text max length")->check(CLI::PositiveNumber);
  c_gen->add_option("--len-v-min", gen.cfg.len_v_min, "visual min length")->check(CLI::PositiveNumber);
  c_gen->add_option("--len-v-max", gen.cfg.len_v_max, "visual max length")->check(CLI::PositiveNumber);
  c_gen->add_option("--len-a-min", gen.cfg.len_a_min, "acoustic min length")->check(CLI::PositiveNumber);
  c_gen->add_option("--len-a-max", gen.cfg.len_a_max, "acoustic max length")->check(CLI::PositiveNumber);

  // train
  TrainArgs tr;
  ModelFlagSet model_flags;
  TrainFlagSet train_flags;
  CLI::App* c_train = app.add_subcommand("train", "train a model");
  c_train->set_help_flag("--help", "print help and exit");
  c_train->add_option("--data", tr.data_path, "dataset directory or manifest")->required();
  c_train->add_option("--out", tr.out_dir, "output directory for history and checkpoints")
      ->required();
  c_train->add_option("--config", tr.config_path, "model config file (key = value)");
  model_flags.attach(c_train);
  train_flags.attach(c_train);
  tr.model_flags = &model_flags;
  tr.train_flags = &train_flags;

  // eval
  EvalArgs ev;
  CLI::App* c_eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  c_eval->set_help_flag("--help", "print help and exit");
  c_eval->add_option("--checkpoint", ev.checkpoint_path, "checkpoint file")->required();
  c_eval->add_option("--data", ev.data_path, "dataset directory or manifest")->required();
  c_eval->add_option("--split", ev.split, "train, val or test")
      ->check(CLI::IsMember({"train", "val", "test"}));
  c_eval->add_flag("--weighted-f1", ev.weighted_f1, "class-support-weighted F1");

  // ablate
  AblateArgs ab;
  CLI::App* c_ablate = app.add_subcommand("ablate", "run an ablation grid from a spec file");
  c_ablate->set_help_flag("--help", "print help and exit");
  c_ablate->add_option("--spec", ab.spec_path, "ablation spec (JSON)")->required();
  c_ablate->add_option("--out", ab.out_csv, "grid CSV output path")->required();
  c_ablate->add_option("--data", ab.data_path, "dataset override");
  c_ablate->add_option("--jobs", ab.jobs, "parallel workers")->check(CLI::PositiveNumber);

  // gradcheck
  GradcheckArgs gc;
  CLI::App* c_gc = app.add_subcommand("gradcheck", "finite-difference gradient check");
  c_gc->set_help_flag("--help", "print help and exit");
  c_gc->add_option("--d", gc.d, "feature width")->check(CLI::PositiveNumber);
  c_gc->add_option("--L", gc.L, "sequence length")->check(CLI::PositiveNumber);
  c_gc->add_option("--N", gc.N, "layers per branch")->check(CLI::PositiveNumber);
  c_gc->add_option("--h", gc.h, "attention heads")->check(CLI::PositiveNumber);
  c_gc->add_option("--samples", gc.samples, "coordinates sampled per tensor (0 = all)")
      ->check(CLI::NonNegativeNumber);
  c_gc->add_option("--eps", gc.eps, "central-difference step")->check(CLI::PositiveNumber);
  c_gc->add_option("--tol", gc.tol, "relative error tolerance")->check(CLI::PositiveNumber);
  c_gc->add_option("--seed", gc.seed, "model/sample seed");
  c_gc->add_option("--subset", gc.subset, "modality subset");
  c_gc->add_flag("--inject-bug", gc.inject_bug,
                 "deliberately corrupt one backward rule (negative control)");

  std::vector<const char*> argv;
  argv.reserve(args.size() + 1);
  argv.push_back("tcan");
  for (const std::string& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (c_gen->parsed()) return cmd_gen_data(gen, out);
    if (c_train->parsed()) return cmd_train(tr, out, err);
    if (c_eval->parsed()) return cmd_eval(ev, out);
    if (c_ablate->parsed()) return cmd_ablate(ab, out, err);
    if (c_gc->parsed()) return cmd_gradcheck(gc, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  err << "error: no command\n";
  return 2;
}

}  // namespace tcan
