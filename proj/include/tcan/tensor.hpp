#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace tcan {

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Dense shape, rank 1..3, row-major. Extents of zero are legal so that
// degenerate tensors (e.g. a T x 0 block fed to concat) behave.
struct Shape {
  std::array<int, 3> extent{0, 0, 0};
  int rank = 0;

  static Shape vec(int n) { return Shape{{n, 0, 0}, 1}; }
  static Shape mat(int r, int c) { return Shape{{r, c, 0}, 2}; }
  static Shape cube(int a, int b, int c) { return Shape{{a, b, c}, 3}; }

  int numel() const {
    int n = 1;
    for (int i = 0; i < rank; ++i) n *= extent[i];
    return rank == 0 ? 0 : n;
  }
  int rows() const { return extent[0]; }
  int cols() const { return extent[1]; }

  bool operator==(const Shape& o) const {
    if (rank != o.rank) return false;
    for (int i = 0; i < rank; ++i)
      if (extent[i] != o.extent[i]) return false;
    return true;
  }
  bool operator!=(const Shape& o) const { return !(*this == o); }
  std::string str() const;
};

class Tape;

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;     // persistent, accumulated across backward calls (leaves)
  std::vector<float> adjoint;  // scratch for a single backward pass
  std::uint64_t adjoint_pass = 0;
  std::uint64_t leaf_mark = 0;
  bool requires_grad = false;
  const Tape* tape = nullptr;  // producing tape, null for leaves/constants
  int node_id = -1;
};
}  // namespace detail

// Value-semantics handle to a shared dense buffer. Copying a Tensor copies
// the handle, not the storage; params stay shared between a model, its
// optimizer state and a checkpoint apply.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, float v, bool requires_grad = false);
  static Tensor values(const Shape& shape, std::vector<float> v, bool requires_grad = false);
  static Tensor scalar(float v);  // 1x1

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int numel() const { return impl_->shape.numel(); }

  std::span<const float> data() const { return {impl_->data.data(), impl_->data.size()}; }
  std::span<float> data() { return {impl_->data.data(), impl_->data.size()}; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }

  /// Gradient buffer, allocated (zeroed) on first access.
  std::span<float> grad();
  std::span<const float> grad() const;
  void zero_grad();

  /// Value of a one-element tensor.
  float value() const;

  bool on_tape() const { return impl_->tape != nullptr; }
  int node_id() const { return impl_->node_id; }
  bool same_storage(const Tensor& o) const { return impl_ == o.impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
  friend class Tape;
};

// Reverse-mode tape. Ops compute values eagerly and record a backward
// closure when any input is grad-connected. Single-writer: one logical
// thread builds and consumes a tape. Leaf gradients accumulate across
// backward calls; intermediate adjoints are per-pass scratch, so calling
// backward twice without zeroing exactly doubles every leaf gradient.
class Tape {
 public:
  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void clear();
  std::size_t node_count() const { return nodes_.size(); }

  Tensor matmul(const Tensor& a, const Tensor& b);
  Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a * b^T
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
  Tensor scale(const Tensor& a, float c);
  Tensor add_row_bias(const Tensor& x, const Tensor& bias);  // [T x d] + [d]
  Tensor relu(const Tensor& x);
  Tensor sigmoid(const Tensor& x);
  Tensor softmax_rows(const Tensor& x);
  Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);
  Tensor conv1d_temporal(const Tensor& x, const Tensor& kernel, const Tensor& bias,
                         int stride, int padding);
  Tensor concat_features(const Tensor& a, const Tensor& b);  // [T x d1] | [T x d2]
  Tensor slice_cols(const Tensor& x, int c0, int c1);        // columns [c0, c1)
  Tensor mean_rows(const Tensor& x);                         // [T x d] -> [1 x d]
  Tensor row_at(const Tensor& x, int r);                     // [T x d] -> [1 x d]
  Tensor resample_rows(const Tensor& x, int out_rows);       // linear temporal resample
  Tensor sum_all(const Tensor& x);                           // -> [1 x 1]
  Tensor abs(const Tensor& x);
  Tensor sub_scalar(const Tensor& x, float c);

  /// Seeds d(loss)/d(loss) = 1 and accumulates d(loss)/d(leaf) into every
  /// requires_grad leaf reached by this tape.
  void backward(const Tensor& loss);

  /// Test hook: scales the sigmoid backward rule by 2 so gradient checks
  /// have a negative control.
  void inject_backward_bug(bool on) { bug_ = on; }

 private:
  struct Node {
    std::function<void(std::uint64_t)> backward;
  };

  bool track(std::initializer_list<const Tensor*> inputs);
  Tensor make_output(const Shape& shape, bool connected);
  void push(std::function<void(std::uint64_t)> fn) { nodes_.push_back({std::move(fn)}); }

  std::vector<Node> nodes_;
  std::vector<std::shared_ptr<detail::TensorImpl>> leaves_;
  std::uint64_t epoch_ = 0;
  bool bug_ = false;
};

struct NamedParam {
  std::string name;
  Tensor tensor;
};

struct GradCheckOptions {
  float eps = 1e-3f;   // central-difference step, must lie in [1e-4, 1e-2]
  double tol = 1e-3;   // relative tolerance
  int max_coords_per_tensor = 0;  // 0 = every coordinate
  std::uint64_t seed = 0;
  bool inject_bug = false;
};

struct GradCheckCoord {
  std::string name;
  int index = 0;
  double analytic = 0, fd = 0, rel_err = 0;
};

struct GradCheckReport {
  bool passed = true;
  int coords_checked = 0;
  int coords_retried = 0;  // re-probed at eps/4 after missing tolerance
  double worst_rel = 0.0;
  std::string worst_name;
  int worst_index = -1;
  std::vector<GradCheckCoord> offenders;  // failing coordinates, worst first
  std::vector<std::pair<std::string, double>> per_tensor_worst;
};

/// Central-difference validation of analytic gradients. `f` must rebuild the
/// same deterministic scalar loss on the tape it is handed; relative error is
/// |g_analytic - g_fd| / max(1, |g_fd|). A coordinate that misses tolerance is
/// re-probed once at eps/4 and keeps the better estimate: a kink straddling
/// the probe window shrinks with the step, a wrong gradient does not.
GradCheckReport grad_check(const std::function<Tensor(Tape&)>& f,
                           std::span<const NamedParam> params,
                           const GradCheckOptions& opts = {});

}  // namespace tcan
