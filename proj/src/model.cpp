#include "tcan/model.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "tcan/rng.hpp"
#include "tcan/textio.hpp"

namespace tcan {

// ---- modality / subset ---------------------------------------------------

const char* modality_name(Modality m) {
  switch (m) {
    case Modality::text: return "text";
    case Modality::visual: return "visual";
    default: return "acoustic";
  }
}

char modality_letter(Modality m) {
  switch (m) {
    case Modality::text: return 't';
    case Modality::visual: return 'v';
    default: return 'a';
  }
}

Modality modality_from_string(const std::string& s) {
  std::string l = s;
  std::transform(l.begin(), l.end(), l.begin(), [](unsigned char c) { return std::tolower(c); });
  if (l == "text" || l == "t") return Modality::text;
  if (l == "visual" || l == "v") return Modality::visual;
  if (l == "acoustic" || l == "a") return Modality::acoustic;
  throw ConfigError("unknown modality: '" + s + "'");
}

std::string ModalitySubset::str() const {
  std::string s;
  if (text) s += 't';
  if (visual) s += 'v';
  if (acoustic) s += 'a';
  return s;
}

ModalitySubset ModalitySubset::parse(const std::string& in) {
  std::string l;
  for (char c : in) {
    if (c == '+' || c == ' ' || c == '_') continue;
    l += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  ModalitySubset s{false, false, false};
  if (l == "all") return ModalitySubset{true, true, true};
  for (char c : l) {
    if (c == 't') s.text = true;
    else if (c == 'v') s.visual = true;
    else if (c == 'a') s.acoustic = true;
    else throw ConfigError("unknown modality subset: '" + in + "'");
  }
  if (s.count() == 0) throw ConfigError("empty modality subset: '" + in + "'");
  return s;
}

// ---- config ----------------------------------------------------------------

void ModelConfig::validate() const {
  if (d < 1) throw ConfigError("d must be >= 1");
  if (h < 1) throw ConfigError("h must be >= 1");
  if (d % h != 0) {
    throw ConfigError("d=" + std::to_string(d) + " is not divisible by h=" + std::to_string(h));
  }
  if (N < 1) throw ConfigError("N must be >= 1");
  if (L < 2) throw ConfigError("L must be >= 2");
  if (ffn_mult < 1) throw ConfigError("ffn_mult must be >= 1");
  if (!(lambda >= 0.0f)) throw ConfigError("lambda must be >= 0");
  if (conv_kernel < 1 || conv_kernel % 2 == 0) {
    throw ConfigError("conv_kernel must be odd and >= 1, got " + std::to_string(conv_kernel));
  }
  if (subset.count() == 0) throw ConfigError("modality subset is empty");
  if (subset.count() >= 2 && !subset.has(center_modality)) {
    throw ConfigError("subset '" + subset.str() + "' does not contain the center modality '" +
                      modality_name(center_modality) + "'");
  }
}

std::string ModelConfig::to_kv() const {
  std::string s;
  s += "d = " + std::to_string(d) + "\n";
  s += "L = " + std::to_string(L) + "\n";
  s += "N = " + std::to_string(N) + "\n";
  s += "h = " + std::to_string(h) + "\n";
  s += "ffn_mult = " + std::to_string(ffn_mult) + "\n";
  s += "lambda = " + fmt_f32(lambda) + "\n";
  s += std::string("pooling = ") + (pooling == Pooling::mean ? "mean" : "last") + "\n";
  s += std::string("gates_enabled = ") + (gates_enabled ? "true" : "false") + "\n";
  s += std::string("joint_learning_enabled = ") + (joint_learning_enabled ? "true" : "false") + "\n";
  s += std::string("center_modality = ") + modality_name(center_modality) + "\n";
  s += std::string("positional_encoding = ") + (positional_encoding ? "true" : "false") + "\n";
  s += std::string("attention_residual = ") + (attention_residual ? "true" : "false") + "\n";
  s += "conv_kernel = " + std::to_string(conv_kernel) + "\n";
  s += "subset = " + subset.str() + "\n";
  return s;
}

ModelConfig ModelConfig::from_kv(const std::string& text) {
  ModelConfig cfg;
  std::vector<std::pair<std::string, std::string>> kv;
  try {
    kv = kv_parse(text);
  } catch (const std::runtime_error& e) {
    throw ConfigError(e.what());
  }
  for (const auto& [key, value] : kv) {
    try {
      if (key == "d") cfg.d = static_cast<int>(parse_int(value, key));
      else if (key == "L") cfg.L = static_cast<int>(parse_int(value, key));
      else if (key == "N") cfg.N = static_cast<int>(parse_int(value, key));
      else if (key == "h") cfg.h = static_cast<int>(parse_int(value, key));
      else if (key == "ffn_mult") cfg.ffn_mult = static_cast<int>(parse_int(value, key));
      else if (key == "lambda") cfg.lambda = parse_f32(value, key);
      else if (key == "pooling") {
        if (value == "mean") cfg.pooling = Pooling::mean;
        else if (value == "last") cfg.pooling = Pooling::last;
        else throw ConfigError("pooling must be 'mean' or 'last', got '" + value + "'");
      } else if (key == "gates_enabled") cfg.gates_enabled = parse_bool(value, key);
      else if (key == "joint_learning_enabled") cfg.joint_learning_enabled = parse_bool(value, key);
      else if (key == "center_modality") cfg.center_modality = modality_from_string(value);
      else if (key == "positional_encoding") cfg.positional_encoding = parse_bool(value, key);
      else if (key == "attention_residual") cfg.attention_residual = parse_bool(value, key);
      else if (key == "conv_kernel") cfg.conv_kernel = static_cast<int>(parse_int(value, key));
      else if (key == "subset") cfg.subset = ModalitySubset::parse(value);
      else throw ConfigError("unknown model config key: '" + key + "'");
    } catch (const ConfigError&) {
      throw;
    } catch (const std::runtime_error& e) {
      throw ConfigError(e.what());
    }
  }
  return cfg;
}

// ---- param store -----------------------------------------------------------

Tensor ParamStore::create(const std::string& name, const Shape& shape, std::uint64_t model_seed,
                          InitKind kind) {
  if (find(name) != nullptr) throw ConfigError("duplicate parameter name: " + name);
  Tensor t = Tensor::zeros(shape, true);
  if (kind == InitKind::ones) {
    std::fill(t.data().begin(), t.data().end(), 1.0f);
  } else if (kind == InitKind::xavier) {
    int fan_in = 1, fan_out = 1;
    if (shape.rank == 2) {
      fan_in = shape.extent[0];
      fan_out = shape.extent[1];
    } else if (shape.rank == 3) {
      fan_in = shape.extent[0] * shape.extent[1];
      fan_out = shape.extent[2];
    } else {
      fan_in = fan_out = shape.extent[0];
    }
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Rng rng(mix_seed(model_seed, fnv1a64(name)));
    for (float& v : t.data()) v = static_cast<float>(rng.uniform(-a, a));
  }
  entries_.push_back({name, t});
  return t;
}

Tensor* ParamStore::find(const std::string& name) {
  for (NamedParam& p : entries_)
    if (p.name == name) return &p.tensor;
  return nullptr;
}

const Tensor* ParamStore::find(const std::string& name) const {
  for (const NamedParam& p : entries_)
    if (p.name == name) return &p.tensor;
  return nullptr;
}

std::size_t ParamStore::total_coords() const {
  std::size_t n = 0;
  for (const NamedParam& p : entries_) n += static_cast<std::size_t>(p.tensor.numel());
  return n;
}

void ParamStore::zero_grads() {
  for (const NamedParam& p : entries_) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

// ---- blocks -----------------------------------------------------------------

namespace {

void fill_gate_stats(std::span<const float> g, GateStats* out) {
  if (!out || g.empty()) return;
  float mn = g[0], mx = g[0];
  double mean = 0.0;
  for (float v : g) {
    mn = std::min(mn, v);
    mx = std::max(mx, v);
    mean += v;
  }
  *out = {mn, mx, static_cast<float>(mean / static_cast<double>(g.size()))};
}

double rows_entropy(std::span<const float> a, int rows, int cols) {
  double acc = 0.0;
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) {
      const double p = a[static_cast<std::size_t>(i) * cols + j];
      if (p > 0.0) acc -= p * std::log(p);
    }
  }
  return acc / rows;
}

}  // namespace

Tensor multi_head_attention(Tape& tape, const Tensor& q_in, const Tensor& kv_in,
                            const AttentionParams& p, int heads, float* entropy) {
  const int d = p.Wq.shape().cols();
  if (heads < 1 || d % heads != 0) {
    throw ConfigError("attention: d=" + std::to_string(d) + " not divisible by heads=" +
                      std::to_string(heads));
  }
  Tensor q = tape.matmul(q_in, p.Wq);
  Tensor k = tape.matmul(kv_in, p.Wk);
  Tensor v = tape.matmul(kv_in, p.Wv);
  const int dk = d / heads;
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dk));
  double ent_acc = 0.0;
  Tensor merged;
  for (int hh = 0; hh < heads; ++hh) {
    Tensor qh = heads == 1 ? q : tape.slice_cols(q, hh * dk, (hh + 1) * dk);
    Tensor kh = heads == 1 ? k : tape.slice_cols(k, hh * dk, (hh + 1) * dk);
    Tensor vh = heads == 1 ? v : tape.slice_cols(v, hh * dk, (hh + 1) * dk);
    Tensor scores = tape.scale(tape.matmul_nt(qh, kh), inv_sqrt);
    Tensor attn = tape.softmax_rows(scores);
    if (entropy) {
      ent_acc += rows_entropy(attn.data(), attn.shape().rows(), attn.shape().cols());
    }
    Tensor oh = tape.matmul(attn, vh);
    merged = hh == 0 ? oh : tape.concat_features(merged, oh);
  }
  if (entropy) *entropy = static_cast<float>(ent_acc / heads);
  return tape.matmul(merged, p.Wo);
}

Tensor cross_attention_block(Tape& tape, const Tensor& f_text_ln, const Tensor& f_cross_ln,
                             const AttentionParams& p, int heads, float* entropy) {
  return multi_head_attention(tape, f_text_ln, f_cross_ln, p, heads, entropy);
}

Tensor self_attention_block(Tape& tape, const Tensor& f_text_ln, const AttentionParams& p,
                            int heads, float* entropy) {
  return multi_head_attention(tape, f_text_ln, f_text_ln, p, heads, entropy);
}

Tensor gated_fusion(Tape& tape, const Tensor& f_prev, const Tensor& f_attn, const Tensor& f_text,
                    const GateParams& p, bool gates_enabled, GateStats* mem_stats,
                    GateStats* fuse_stats) {
  if (!gates_enabled) return f_attn;
  Tensor gin = tape.concat_features(f_text, f_prev);
  Tensor g_mem = tape.sigmoid(tape.matmul(gin, p.Wm));
  Tensor g_fuse = tape.sigmoid(tape.matmul(gin, p.Wf));
  fill_gate_stats(g_mem.data(), mem_stats);
  fill_gate_stats(g_fuse.data(), fuse_stats);
  return tape.add(tape.mul(g_mem, f_prev), tape.mul(g_fuse, f_attn));
}

Tensor ffn_block(Tape& tape, const Tensor& x, const FfnParams& p) {
  Tensor n = tape.layer_norm(x, p.ln.gain, p.ln.bias);
  Tensor h1 = tape.relu(tape.add_row_bias(tape.matmul(n, p.W1), p.b1));
  Tensor h2 = tape.add_row_bias(tape.matmul(h1, p.W2), p.b2);
  return tape.add(x, h2);
}

Tensor project_unimodal(Tape& tape, const SeqData& raw, const ConvParams& p,
                        const ModelConfig& cfg, const Tensor* pe) {
  if (raw.len < 1) throw IngestError("project_unimodal: empty sequence");
  Tensor x = Tensor::values(Shape::mat(raw.len, raw.width), raw.values);
  const int pad = (cfg.conv_kernel - 1) / 2;
  Tensor c = tape.conv1d_temporal(x, p.kernel, p.bias, 1, pad);
  Tensor r = c.shape().rows() == cfg.L ? c : tape.resample_rows(c, cfg.L);
  if (pe != nullptr) r = tape.add(r, *pe);
  return r;
}

std::pair<Tensor, Tensor> branch_forward(Tape& tape, const Tensor& f_cross, const Tensor& f_text,
                                         const BranchParams& p, const ModelConfig& cfg,
                                         BranchDiag* diag) {
  Tensor t = f_text;
  Tensor x = f_cross;
  if (diag) {
    diag->cross = p.cross;
    diag->layers.assign(p.layers.size(), LayerDiag{});
  }
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    const CrossLayerParams& l = p.layers[i];
    LayerDiag* ld = diag ? &diag->layers[i] : nullptr;
    Tensor t_ln = tape.layer_norm(t, l.ln_text.gain, l.ln_text.bias);
    Tensor x_ln = tape.layer_norm(x, l.ln_cross.gain, l.ln_cross.bias);

    Tensor sa = self_attention_block(tape, t_ln, l.self_attn, cfg.h,
                                     ld ? &ld->self_attn_entropy : nullptr);
    if (cfg.attention_residual) sa = tape.add(sa, t);
    Tensor t_next = ffn_block(tape, sa, l.ffn_text);

    Tensor ca = cross_attention_block(tape, t_ln, x_ln, l.cross_attn, cfg.h,
                                      ld ? &ld->cross_attn_entropy : nullptr);
    if (cfg.attention_residual) ca = tape.add(ca, x);
    Tensor fused = gated_fusion(tape, x_ln, ca, t_ln, l.gate, cfg.gates_enabled,
                                ld ? &ld->gate_mem : nullptr, ld ? &ld->gate_fuse : nullptr);
    Tensor x_next = ffn_block(tape, fused, l.ffn_cross);

    t = t_next;
    x = x_next;
  }
  return {x, t};
}

Tensor solo_forward(Tape& tape, const Tensor& x_in, const SoloParams& p, const ModelConfig& cfg) {
  Tensor x = x_in;
  for (const SoloLayerParams& l : p.layers) {
    Tensor n = tape.layer_norm(x, l.ln.gain, l.ln.bias);
    Tensor a = self_attention_block(tape, n, l.attn, cfg.h);
    if (cfg.attention_residual) a = tape.add(a, x);
    x = ffn_block(tape, a, l.ffn);
  }
  return x;
}

Tensor pool_rows(Tape& tape, const Tensor& x, Pooling pooling) {
  if (pooling == Pooling::mean) return tape.mean_rows(x);
  return tape.row_at(x, x.shape().rows() - 1);
}

Tensor head_forward(Tape& tape, const Tensor& x, const HeadParams& p) {
  Tensor h1 = tape.relu(tape.add_row_bias(tape.matmul(x, p.W1), p.b1));
  return tape.add_row_bias(tape.matmul(h1, p.W2), p.b2);
}

// ---- model ------------------------------------------------------------------

namespace {

std::vector<Modality> branch_order(const ModelConfig& cfg) {
  std::vector<Modality> order;
  for (Modality m : {Modality::acoustic, Modality::visual, Modality::text}) {
    if (m != cfg.center_modality && cfg.subset.has(m)) order.push_back(m);
  }
  return order;
}

Tensor sinusoidal_table(int L, int d) {
  Tensor pe = Tensor::zeros(Shape::mat(L, d), false);
  auto v = pe.data();
  for (int pos = 0; pos < L; ++pos) {
    for (int j = 0; j < d; ++j) {
      const int pair = j / 2;
      const double freq = std::pow(10000.0, -2.0 * pair / static_cast<double>(d));
      const double angle = pos * freq;
      v[static_cast<std::size_t>(pos) * d + j] =
          static_cast<float>(j % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  return pe;
}

}  // namespace

TcanModel::TcanModel(const ModelConfig& cfg, const ModalityWidths& widths, std::uint64_t seed)
    : cfg_(cfg), widths_(widths), seed_(seed) {
  build();
}

void TcanModel::build() {
  cfg_.validate();
  for (Modality m : {Modality::text, Modality::visual, Modality::acoustic}) {
    if (cfg_.subset.has(m) && widths_.of(m) < 1) {
      throw ConfigError(std::string("modality '") + modality_name(m) +
                        "' is in the subset but has width 0");
    }
  }
  const int d = cfg_.d;
  auto create = [&](const std::string& name, const Shape& shape, InitKind kind) {
    return params_.create(name, shape, seed_, kind);
  };
  auto make_ln = [&](const std::string& prefix) {
    return LayerNormParams{create(prefix + ".gain", Shape::vec(d), InitKind::ones),
                           create(prefix + ".bias", Shape::vec(d), InitKind::zeros)};
  };
  auto make_attn = [&](const std::string& prefix) {
    return AttentionParams{create(prefix + ".Wq", Shape::mat(d, d), InitKind::xavier),
                           create(prefix + ".Wk", Shape::mat(d, d), InitKind::xavier),
                           create(prefix + ".Wv", Shape::mat(d, d), InitKind::xavier),
                           create(prefix + ".Wo", Shape::mat(d, d), InitKind::xavier)};
  };
  auto make_ffn = [&](const std::string& prefix) {
    const int w = cfg_.ffn_mult * d;
    return FfnParams{make_ln(prefix + ".ln"),
                     create(prefix + ".W1", Shape::mat(d, w), InitKind::xavier),
                     create(prefix + ".b1", Shape::vec(w), InitKind::zeros),
                     create(prefix + ".W2", Shape::mat(w, d), InitKind::xavier),
                     create(prefix + ".b2", Shape::vec(d), InitKind::zeros)};
  };
  auto make_gate = [&](const std::string& prefix) {
    return GateParams{create(prefix + ".mem.W", Shape::mat(2 * d, d), InitKind::xavier),
                      create(prefix + ".fuse.W", Shape::mat(2 * d, d), InitKind::xavier)};
  };
  auto make_head = [&](const std::string& prefix, int in) {
    return HeadParams{create(prefix + ".W1", Shape::mat(in, d), InitKind::xavier),
                      create(prefix + ".b1", Shape::vec(d), InitKind::zeros),
                      create(prefix + ".W2", Shape::mat(d, 1), InitKind::xavier),
                      create(prefix + ".b2", Shape::vec(1), InitKind::zeros)};
  };
  auto make_conv = [&](const std::string& prefix, int d_in, int d_out) {
    return ConvParams{
        create(prefix + ".kernel", Shape::cube(cfg_.conv_kernel, d_in, d_out), InitKind::xavier),
        create(prefix + ".bias", Shape::vec(d_out), InitKind::zeros)};
  };

  for (Modality m : {Modality::text, Modality::visual, Modality::acoustic}) {
    if (!cfg_.subset.has(m)) continue;
    proj_[static_cast<int>(m)] =
        make_conv(std::string("proj.") + modality_letter(m), widths_.of(m), d);
  }

  int fuse_width = 0;
  if (cfg_.subset.count() == 1) {
    for (int i = 0; i < cfg_.N; ++i) {
      const std::string prefix = "solo.layer." + std::to_string(i);
      solo_.layers.push_back(SoloLayerParams{make_ln(prefix + ".ln"), make_attn(prefix + ".attn"),
                                             make_ffn(prefix + ".ffn")});
    }
    fuse_width = d;
  } else {
    for (Modality cross : branch_order(cfg_)) {
      BranchParams bp;
      bp.cross = cross;
      const std::string bprefix = std::string("branch.") + modality_letter(cross);
      for (int i = 0; i < cfg_.N; ++i) {
        const std::string prefix = bprefix + ".layer." + std::to_string(i);
        CrossLayerParams l;
        l.ln_text = make_ln(prefix + ".ln_text");
        l.ln_cross = make_ln(prefix + ".ln_cross");
        l.self_attn = make_attn(prefix + ".attn.self");
        l.cross_attn = make_attn(prefix + ".attn.cross");
        l.gate = make_gate(prefix + ".gate");
        l.ffn_text = make_ffn(prefix + ".ffn_text");
        l.ffn_cross = make_ffn(prefix + ".ffn_cross");
        bp.layers.push_back(std::move(l));
      }
      branches_.push_back(std::move(bp));
    }
    fuse_width = static_cast<int>(branches_.size()) * 2 * d;
  }
  fuse_ = make_head("fuse.mlp", fuse_width);

  if (cfg_.joint_learning_enabled) {
    joint_encoder_ = make_conv("joint.encoder", d, d);
    for (Modality m : {Modality::text, Modality::visual, Modality::acoustic}) {
      if (!cfg_.subset.has(m)) continue;
      joint_heads_[static_cast<int>(m)] =
          make_head(std::string("joint.head.") + modality_letter(m), d);
    }
  }
  pe_ = sinusoidal_table(cfg_.L, d);
}

const ConvParams& TcanModel::projection(Modality m) const {
  if (!cfg_.subset.has(m)) {
    throw ConfigError(std::string("modality '") + modality_name(m) + "' is not in the subset");
  }
  return proj_[static_cast<int>(m)];
}

const HeadParams& TcanModel::joint_head(Modality m) const {
  if (!cfg_.joint_learning_enabled || !cfg_.subset.has(m)) {
    throw ConfigError(std::string("no joint head for modality '") + modality_name(m) + "'");
  }
  return joint_heads_[static_cast<int>(m)];
}

ForwardOutput TcanModel::forward(Tape& tape, const Sample& sample, bool training,
                                 ForwardDiag* diag) const {
  auto seq_of = [&](Modality m) -> const SeqData& {
    switch (m) {
      case Modality::text: return sample.text;
      case Modality::visual: return sample.visual;
      default: return sample.acoustic;
    }
  };
  for (Modality m : {Modality::text, Modality::visual, Modality::acoustic}) {
    if (!cfg_.subset.has(m)) continue;
    const SeqData& q = seq_of(m);
    if (q.width != widths_.of(m)) {
      throw IngestError("sample " + sample.id + ": " + modality_name(m) + " width " +
                        std::to_string(q.width) + " does not match model width " +
                        std::to_string(widths_.of(m)));
    }
  }

  const Tensor* pe = cfg_.positional_encoding ? &pe_ : nullptr;
  Tensor feat[3];
  for (Modality m : {Modality::text, Modality::visual, Modality::acoustic}) {
    if (!cfg_.subset.has(m)) continue;
    feat[static_cast<int>(m)] =
        project_unimodal(tape, seq_of(m), proj_[static_cast<int>(m)], cfg_, pe);
  }

  std::vector<Tensor> pooled;
  if (cfg_.subset.count() == 1) {
    Modality only = cfg_.subset.text ? Modality::text
                    : cfg_.subset.visual ? Modality::visual
                                         : Modality::acoustic;
    Tensor x = solo_forward(tape, feat[static_cast<int>(only)], solo_, cfg_);
    pooled.push_back(pool_rows(tape, x, cfg_.pooling));
  } else {
    if (diag) diag->branches.assign(branches_.size(), BranchDiag{});
    const Tensor& center = feat[static_cast<int>(cfg_.center_modality)];
    for (std::size_t i = 0; i < branches_.size(); ++i) {
      const BranchParams& bp = branches_[i];
      auto [cross_out, text_out] =
          branch_forward(tape, feat[static_cast<int>(bp.cross)], center, bp, cfg_,
                         diag ? &diag->branches[i] : nullptr);
      pooled.push_back(pool_rows(tape, cross_out, cfg_.pooling));
      pooled.push_back(pool_rows(tape, text_out, cfg_.pooling));
    }
  }

  Tensor z = pooled[0];
  for (std::size_t i = 1; i < pooled.size(); ++i) z = tape.concat_features(z, pooled[i]);

  ForwardOutput out;
  out.y_pred = head_forward(tape, z, fuse_);

  if (training && cfg_.joint_learning_enabled) {
    const int pad = (cfg_.conv_kernel - 1) / 2;
    for (Modality m : {Modality::text, Modality::visual, Modality::acoustic}) {
      if (!cfg_.subset.has(m)) continue;
      Tensor e = tape.conv1d_temporal(feat[static_cast<int>(m)], joint_encoder_.kernel,
                                      joint_encoder_.bias, 1, pad);
      Tensor pm = pool_rows(tape, e, cfg_.pooling);
      out.y_uni.push_back({m, head_forward(tape, pm, joint_heads_[static_cast<int>(m)])});
    }
  }
  return out;
}

}  // namespace tcan
