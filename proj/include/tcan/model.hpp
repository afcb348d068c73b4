#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tcan/data.hpp"
#include "tcan/tensor.hpp"

namespace tcan {

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

enum class Modality { text = 0, visual = 1, acoustic = 2 };

const char* modality_name(Modality m);   // "text" / "visual" / "acoustic"
char modality_letter(Modality m);        // 't' / 'v' / 'a'
Modality modality_from_string(const std::string& s);

// Which modalities take part in the run. Multi-modality subsets must
// contain the center modality, since cross-attention queries come from it.
struct ModalitySubset {
  bool text = true, visual = true, acoustic = true;

  bool has(Modality m) const {
    switch (m) {
      case Modality::text: return text;
      case Modality::visual: return visual;
      default: return acoustic;
    }
  }
  int count() const { return (text ? 1 : 0) + (visual ? 1 : 0) + (acoustic ? 1 : 0); }
  std::string str() const;
  static ModalitySubset parse(const std::string& s);  // "t", "tv", "tv+ta", "all", ...
};

enum class Pooling { mean, last };

struct ModelConfig {
  int d = 32;        // common feature width
  int L = 24;        // common sequence length after temporal resampling
  int N = 5;         // stacked layers per branch
  int h = 4;         // attention heads, must divide d
  int ffn_mult = 4;  // FFN hidden width = ffn_mult * d
  float lambda = 0.5f;
  Pooling pooling = Pooling::mean;
  bool gates_enabled = true;
  bool joint_learning_enabled = true;
  Modality center_modality = Modality::text;
  bool positional_encoding = true;
  bool attention_residual = false;  // off: attention output replaces the stream
  int conv_kernel = 3;
  ModalitySubset subset;

  void validate() const;
  std::string to_kv() const;
  static ModelConfig from_kv(const std::string& text);
};

struct ModalityWidths {
  int text = 0, visual = 0, acoustic = 0;

  int of(Modality m) const {
    switch (m) {
      case Modality::text: return text;
      case Modality::visual: return visual;
      default: return acoustic;
    }
  }
  static ModalityWidths from_manifest(const DatasetManifest& m) {
    return {m.d_t, m.d_v, m.d_a};
  }
};

enum class InitKind { xavier, zeros, ones };

// Named parameter registry. Creation order is the canonical order used by
// the optimizer and the checkpoint writer. Each tensor is initialized from
// a seed derived from (model seed, name), so two configs that share a
// parameter name initialize it identically.
class ParamStore {
 public:
  Tensor create(const std::string& name, const Shape& shape, std::uint64_t model_seed,
                InitKind kind);
  const std::vector<NamedParam>& entries() const { return entries_; }
  Tensor* find(const std::string& name);
  const Tensor* find(const std::string& name) const;
  std::size_t total_coords() const;
  void zero_grads();

 private:
  std::vector<NamedParam> entries_;
};

struct LayerNormParams {
  Tensor gain, bias;
};
struct AttentionParams {
  Tensor Wq, Wk, Wv, Wo;  // each [d x d], per-head slices of width d/h
};
struct GateParams {
  Tensor Wm, Wf;  // [2d x d]
};
struct FfnParams {
  LayerNormParams ln;
  Tensor W1, b1, W2, b2;
};
struct ConvParams {
  Tensor kernel, bias;  // [k x d_in x d_out], [d_out]
};
struct HeadParams {
  Tensor W1, b1, W2, b2;  // in -> d (relu) -> 1
};
struct CrossLayerParams {
  LayerNormParams ln_text, ln_cross;
  AttentionParams self_attn, cross_attn;
  GateParams gate;
  FfnParams ffn_text, ffn_cross;
};
struct SoloLayerParams {
  LayerNormParams ln;
  AttentionParams attn;
  FfnParams ffn;
};
struct BranchParams {
  Modality cross = Modality::visual;  // the non-center modality this branch attends over
  std::vector<CrossLayerParams> layers;
};
struct SoloParams {
  std::vector<SoloLayerParams> layers;
};

struct GateStats {
  float min = 0.0f, max = 0.0f, mean = 0.0f;
};
struct LayerDiag {
  GateStats gate_mem, gate_fuse;
  float self_attn_entropy = 0.0f;
  float cross_attn_entropy = 0.0f;
};
struct BranchDiag {
  Modality cross = Modality::visual;
  std::vector<LayerDiag> layers;
};
struct ForwardDiag {
  std::vector<BranchDiag> branches;
};

// ---- building blocks ----------------------------------------------------

/// Multi-head scaled dot-product attention; queries from q_in, keys/values
/// from kv_in, per-head width d/heads, concat + output projection.
Tensor multi_head_attention(Tape& tape, const Tensor& q_in, const Tensor& kv_in,
                            const AttentionParams& p, int heads, float* entropy = nullptr);

/// Cross-modal attention: queries from the (pre-normalized) text stream,
/// keys/values from the (pre-normalized) cross-modal stream.
Tensor cross_attention_block(Tape& tape, const Tensor& f_text_ln, const Tensor& f_cross_ln,
                             const AttentionParams& p, int heads, float* entropy = nullptr);

Tensor self_attention_block(Tape& tape, const Tensor& f_text_ln, const AttentionParams& p,
                            int heads, float* entropy = nullptr);

/// Memory/fusion gating: g_m and g_f are sigmoid([f_text | f_prev] W); output
/// is g_m*f_prev + g_f*f_attn. With gating disabled, f_attn passes through.
Tensor gated_fusion(Tape& tape, const Tensor& f_prev, const Tensor& f_attn, const Tensor& f_text,
                    const GateParams& p, bool gates_enabled, GateStats* mem_stats = nullptr,
                    GateStats* fuse_stats = nullptr);

/// Pre-norm feed-forward residual: x + W2 relu(W1 LN(x) + b1) + b2.
Tensor ffn_block(Tape& tape, const Tensor& x, const FfnParams& p);

/// Temporal conv projection to width d, linear resample to L rows, plus the
/// sinusoidal table when pe is non-null.
Tensor project_unimodal(Tape& tape, const SeqData& raw, const ConvParams& p,
                        const ModelConfig& cfg, const Tensor* pe);

/// One cross-modal branch: N stacked layers, returns (cross stream, text stream).
std::pair<Tensor, Tensor> branch_forward(Tape& tape, const Tensor& f_cross, const Tensor& f_text,
                                         const BranchParams& p, const ModelConfig& cfg,
                                         BranchDiag* diag = nullptr);

/// Single-modality stack used when the subset has one modality.
Tensor solo_forward(Tape& tape, const Tensor& x, const SoloParams& p, const ModelConfig& cfg);

Tensor pool_rows(Tape& tape, const Tensor& x, Pooling pooling);

Tensor head_forward(Tape& tape, const Tensor& x, const HeadParams& p);

// ---- model ----------------------------------------------------------------

struct UniPrediction {
  Modality modality;
  Tensor y;  // [1 x 1]
};

struct ForwardOutput {
  Tensor y_pred;                      // [1 x 1]
  std::vector<UniPrediction> y_uni;   // filled when training with joint learning on
};

class TcanModel {
 public:
  TcanModel(const ModelConfig& cfg, const ModalityWidths& widths, std::uint64_t seed);

  ForwardOutput forward(Tape& tape, const Sample& sample, bool training,
                        ForwardDiag* diag = nullptr) const;

  const ModelConfig& config() const { return cfg_; }
  const ModalityWidths& widths() const { return widths_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  std::uint64_t seed() const { return seed_; }

  const std::vector<BranchParams>& branches() const { return branches_; }
  const ConvParams& projection(Modality m) const;
  const ConvParams& joint_encoder() const { return joint_encoder_; }
  const HeadParams& joint_head(Modality m) const;
  const HeadParams& fuse_head() const { return fuse_; }
  const SoloParams& solo() const { return solo_; }
  const Tensor& positional_table() const { return pe_; }

 private:
  void build();

  ModelConfig cfg_;
  ModalityWidths widths_;
  std::uint64_t seed_ = 0;
  ParamStore params_;

  ConvParams proj_[3];
  std::vector<BranchParams> branches_;
  SoloParams solo_;
  HeadParams fuse_;
  ConvParams joint_encoder_;
  HeadParams joint_heads_[3];
  Tensor pe_;  // [L x d] constant
};

}  // namespace tcan
