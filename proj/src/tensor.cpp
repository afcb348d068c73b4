#include "tcan/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <random>

namespace tcan {

using detail::TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;

std::string Shape::str() const {
  std::string s = "[";
  for (int i = 0; i < rank; ++i) {
    if (i) s += "x";
    s += std::to_string(extent[i]);
  }
  s += "]";
  return s;
}

namespace {

std::atomic<std::uint64_t> g_backward_pass{0};
std::atomic<std::uint64_t> g_tape_epoch{0};

// Adjoint scratch for the current backward pass, zeroed lazily the first
// time a pass touches the tensor.
std::span<float> adjoint_of(TensorImpl* t, std::uint64_t pass) {
  if (t->adjoint_pass != pass) {
    t->adjoint.assign(t->data.size(), 0.0f);
    t->adjoint_pass = pass;
  }
  return {t->adjoint.data(), t->adjoint.size()};
}

bool wants_adjoint(const TensorImpl* t) {
  return t->requires_grad || t->tape != nullptr;
}

#ifndef NDEBUG
void debug_check_finite(std::span<const float> v, const char* op) {
  for (float x : v) {
    if (!std::isfinite(x)) {
      throw std::logic_error(std::string(op) + ": non-finite value in op output");
    }
  }
}
#define TCAN_CHECK_FINITE(span, op) debug_check_finite(span, op)
#else
#define TCAN_CHECK_FINITE(span, op) (void)0
#endif

// c[m x p] (+)= a[m x k] * b[k x p]
void gemm_nn(const float* a, const float* b, float* c, int m, int k, int p, bool accum) {
  if (!accum) std::fill(c, c + static_cast<std::size_t>(m) * p, 0.0f);
  for (int i = 0; i < m; ++i) {
    const float* arow = a + static_cast<std::size_t>(i) * k;
    float* crow = c + static_cast<std::size_t>(i) * p;
    for (int kk = 0; kk < k; ++kk) {
      const float av = arow[kk];
      const float* brow = b + static_cast<std::size_t>(kk) * p;
      for (int j = 0; j < p; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m x n] (+)= a[m x k] * b[n x k]^T
void gemm_nt(const float* a, const float* b, float* c, int m, int k, int n, bool accum) {
  for (int i = 0; i < m; ++i) {
    const float* arow = a + static_cast<std::size_t>(i) * k;
    float* crow = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const float* brow = b + static_cast<std::size_t>(j) * k;
      float acc = 0.0f;
      for (int kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
      crow[j] = accum ? crow[j] + acc : acc;
    }
  }
}

// c[k x p] (+)= a[m x k]^T * b[m x p]
void gemm_tn(const float* a, const float* b, float* c, int m, int k, int p, bool accum) {
  if (!accum) std::fill(c, c + static_cast<std::size_t>(k) * p, 0.0f);
  for (int i = 0; i < m; ++i) {
    const float* arow = a + static_cast<std::size_t>(i) * k;
    const float* brow = b + static_cast<std::size_t>(i) * p;
    for (int kk = 0; kk < k; ++kk) {
      const float av = arow[kk];
      float* crow = c + static_cast<std::size_t>(kk) * p;
      for (int j = 0; j < p; ++j) crow[j] += av * brow[j];
    }
  }
}

void require_rank2(const Tensor& t, const char* op, const char* arg) {
  if (t.shape().rank != 2) {
    throw ShapeError(std::string(op) + ": " + arg + " must be rank-2, got " + t.shape().str());
  }
}

}  // namespace

// ---- Tensor -----------------------------------------------------------

namespace {
ImplPtr new_impl(const Shape& shape, bool requires_grad) {
  if (shape.rank < 1 || shape.rank > 3) {
    throw ShapeError("tensor: rank must be 1..3, got " + std::to_string(shape.rank));
  }
  for (int i = 0; i < shape.rank; ++i) {
    if (shape.extent[i] < 0) throw ShapeError("tensor: negative extent in " + shape.str());
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->data.assign(static_cast<std::size_t>(shape.numel()), 0.0f);
  impl->requires_grad = requires_grad;
  return impl;
}
}  // namespace

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  Tensor t;
  t.impl_ = new_impl(shape, requires_grad);
  return t;
}

Tensor Tensor::full(const Shape& shape, float v, bool requires_grad) {
  Tensor t = zeros(shape, requires_grad);
  std::fill(t.impl_->data.begin(), t.impl_->data.end(), v);
  return t;
}

Tensor Tensor::values(const Shape& shape, std::vector<float> v, bool requires_grad) {
  if (static_cast<int>(v.size()) != shape.numel()) {
    throw ShapeError("tensor: " + std::to_string(v.size()) + " values for shape " + shape.str());
  }
  Tensor t = zeros(shape, requires_grad);
  t.impl_->data = std::move(v);
  return t;
}

Tensor Tensor::scalar(float v) { return values(Shape::mat(1, 1), {v}); }

std::span<float> Tensor::grad() {
  if (impl_->grad.size() != impl_->data.size()) impl_->grad.assign(impl_->data.size(), 0.0f);
  return {impl_->grad.data(), impl_->grad.size()};
}

std::span<const float> Tensor::grad() const {
  if (impl_->grad.size() != impl_->data.size()) impl_->grad.assign(impl_->data.size(), 0.0f);
  return {impl_->grad.data(), impl_->grad.size()};
}

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

float Tensor::value() const {
  if (numel() != 1) throw ContractError("value(): tensor has " + std::to_string(numel()) + " elements");
  return impl_->data[0];
}

// ---- Tape -------------------------------------------------------------

Tape::Tape() : epoch_(++g_tape_epoch) {}

void Tape::clear() {
  nodes_.clear();
  leaves_.clear();
  epoch_ = ++g_tape_epoch;
}

bool Tape::track(std::initializer_list<const Tensor*> inputs) {
  bool connected = false;
  for (const Tensor* t : inputs) {
    if (!t->defined()) throw ContractError("op input tensor is undefined");
    TensorImpl* impl = t->impl_.get();
    if (impl->tape != nullptr && impl->tape != this) {
      throw ContractError("op input belongs to a different tape");
    }
    if (impl->tape == this || impl->requires_grad) connected = true;
    if (impl->requires_grad && impl->tape == nullptr && impl->leaf_mark != epoch_) {
      impl->leaf_mark = epoch_;
      leaves_.push_back(t->impl_);
    }
  }
  return connected;
}

Tensor Tape::make_output(const Shape& shape, bool connected) {
  Tensor t = Tensor::zeros(shape, false);
  if (connected) {
    t.impl_->tape = this;
    t.impl_->node_id = static_cast<int>(nodes_.size());
  }
  return t;
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined()) throw ContractError("backward: loss tensor is undefined");
  if (loss.numel() != 1) {
    throw ContractError("backward: loss must be scalar, got " + loss.shape().str());
  }
  if (loss.impl_->tape != this) {
    throw ContractError("backward: loss is not a node on this tape");
  }
  const std::uint64_t pass = ++g_backward_pass;
  adjoint_of(loss.impl_.get(), pass)[0] = 1.0f;
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    nodes_[i].backward(pass);
  }
  for (const ImplPtr& leaf : leaves_) {
    if (!leaf->requires_grad || leaf->adjoint_pass != pass) continue;
    if (leaf->grad.size() != leaf->data.size()) leaf->grad.assign(leaf->data.size(), 0.0f);
    for (std::size_t j = 0; j < leaf->grad.size(); ++j) leaf->grad[j] += leaf->adjoint[j];
  }
}

// ---- ops ---------------------------------------------------------------

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul", "lhs");
  require_rank2(b, "matmul", "rhs");
  if (a.shape().cols() != b.shape().rows()) {
    throw ShapeError("matmul: inner extents disagree, " + a.shape().str() + " vs " + b.shape().str());
  }
  const int m = a.shape().rows(), k = a.shape().cols(), p = b.shape().cols();
  const bool connected = track({&a, &b});
  Tensor out = make_output(Shape::mat(m, p), connected);
  gemm_nn(a.data().data(), b.data().data(), out.data().data(), m, k, p, false);
  TCAN_CHECK_FINITE(out.data(), "matmul");
  if (connected) {
    ImplPtr ai = a.impl_, bi = b.impl_, oi = out.impl_;
    push([ai, bi, oi, m, k, p](std::uint64_t pass) {
      std::span<float> dout = adjoint_of(oi.get(), pass);
      if (wants_adjoint(ai.get())) {
        gemm_nt(dout.data(), bi->data.data(), adjoint_of(ai.get(), pass).data(), m, p, k, true);
      }
      if (wants_adjoint(bi.get())) {
        gemm_tn(ai->data.data(), dout.data(), adjoint_of(bi.get(), pass).data(), m, k, p, true);
      }
    });
  }
  return out;
}

Tensor Tape::matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul_nt", "lhs");
  require_rank2(b, "matmul_nt", "rhs");
  if (a.shape().cols() != b.shape().cols()) {
    throw ShapeError("matmul_nt: inner extents disagree, " + a.shape().str() + " vs " +
                     b.shape().str());
  }
  const int m = a.shape().rows(), k = a.shape().cols(), n = b.shape().rows();
  const bool connected = track({&a, &b});
  Tensor out = make_output(Shape::mat(m, n), connected);
  gemm_nt(a.data().data(), b.data().data(), out.data().data(), m, k, n, false);
  TCAN_CHECK_FINITE(out.data(), "matmul_nt");
  if (connected) {
    ImplPtr ai = a.impl_, bi = b.impl_, oi = out.impl_;
    push([ai, bi, oi, m, k, n](std::uint64_t pass) {
      std::span<float> dout = adjoint_of(oi.get(), pass);
      if (wants_adjoint(ai.get())) {
        // da[m x k] += dout[m x n] * b[n x k]
        gemm_nn(dout.data(), bi->data.data(), adjoint_of(ai.get(), pass).data(), m, n, k, true);
      }
      if (wants_adjoint(bi.get())) {
        // db[n x k] += dout[m x n]^T * a[m x k]
        gemm_tn(dout.data(), ai->data.data(), adjoint_of(bi.get(), pass).data(), m, n, k, true);
      }
    });
  }
  return out;
}

Tensor Tape::add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shape mismatch, " + a.shape().str() + " vs " + b.shape().str());
  }
  const bool connected = track({&a, &b});
  Tensor out = make_output(a.shape(), connected);
  const auto av = a.data(); const auto bv = b.data(); auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  TCAN_CHECK_FINITE(out.data(), "add");
  if (connected) {
    ImplPtr ai = a.impl_, bi = b.impl_, oi = out.impl_;
    push([ai, bi, oi](std::uint64_t pass) {
      std::span<float> dout = adjoint_of(oi.get(), pass);
      if (wants_adjoint(ai.get())) {
        auto da = adjoint_of(ai.get(), pass);
        for (std::size_t i = 0; i < da.size(); ++i) da[i] += dout[i];
      }
      if (wants_adjoint(bi.get())) {
        auto db = adjoint_of(bi.get(), pass);
        for (std::size_t i = 0; i < db.size(); ++i) db[i] += dout[i];
      }
    });
  }
  return out;
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shape mismatch, " + a.shape().str() + " vs " + b.shape().str());
  }
  const bool connected = track({&a, &b});
  Tensor out = make_output(a.shape(), connected);
  const auto av = a.data(); const auto bv = b.data(); auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  TCAN_CHECK_FINITE(out.data(), "mul");
  if (connected) {
    ImplPtr ai = a.impl_, bi = b.impl_, oi = out.impl_;
    push([ai, bi, oi](std::uint64_t pass) {
      std::span<float> dout = adjoint_of(oi.get(), pass);
      if (wants_adjoint(ai.get())) {
        auto da = adjoint_of(ai.get(), pass);
        for (std::size_t i = 0; i < da.size(); ++i) da[i] += dout[i] * bi->data[i];
      }
      if (wants_adjoint(bi.get())) {
        auto db = adjoint_of(bi.get(), pass);
        for (std::size_t i = 0; i < db.size(); ++i) db[i] += dout[i] * ai->data[i];
      }
    });
  }
  return out;
}

Tensor Tape::scale(const Tensor& a, float c) {
  const bool connected = track({&a});
  Tensor out = make_output(a.shape(), connected);
  const auto av = a.data(); auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
  TCAN_CHECK_FINITE(out.data(), "scale");
  if (connected) {
    ImplPtr ai = a.impl_, oi = out.impl_;
    push([ai, oi, c](std::uint64_t pass) {
      std::span<float> dout = adjoint_of(oi.get(), pass);
      if (wants_adjoint(ai.get())) {
        auto da = adjoint_of(ai.get(), pass);
        for (std::size_t i = 0; i < da.size(); ++i) da[i] += dout[i] * c;
      }
    });
  }
  return out;
}

Tensor Tape::add_row_bias(const Tensor& x, const Tensor& bias) {
  require_rank2(x, "add_row_bias", "input");
  if (bias.shape().rank != 1 || bias.shape().extent[0] != x.shape().cols()) {
    throw ShapeError("add_row_bias: bias " + bias.shape().str() + " does not match " +
                     x.shape().str());
  }
  const int rows = x.shape().rows(), cols = x.shape().cols();
  const bool connected = track({&x, &bias});
  Tensor out = make_output(x.shape(), connected);
  const auto xv = x.data(); const auto bv = bias.data(); auto ov = out.data();
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) ov[i * cols + j] = xv[i * cols + j] + bv[j];
  TCAN_CHECK_FINITE(out.data(), "add_row_bias");
  if (connected) {
    ImplPtr xi = x.impl_, bi = bias.impl_, oi = out.impl_;
    push([xi, bi, oi, rows, cols](std::uint64_t pass) {
      std::span<float> dout = adjoint_of(oi.get(), pass);
      if (wants_adjoint(xi.get())) {
        auto dx = adjoint_of(xi.get(), pass);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dout[i];
      }
      if (wants_adjoint(bi.get())) {
        auto db = adjoint_of(bi.get(), pass);
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < cols; ++j) db[j] += dout[i * cols + j];
      }
    });
  }
  return out;
}

Tensor Tape::relu(const Tensor& x) {
  const bool connected = track({&x});
  Tensor out = make_output(x.shape(), connected);
  const auto xv = x.data(); auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] > 0.0f ? xv[i] : 0.0f;
  if (connected) {
    ImplPtr xi = x.impl_, oi = out.impl_;
    push([xi, oi](std::uint64_t pass) {
      std::span<float> dout = adjoint_of(oi.get(), pass);
      if (wants_adjoint(xi.get())) {
        auto dx = adjoint_of(xi.get(), pass);
        for (std::size_t i = 0; i < dx.size(); ++i)
          if (xi->data[i] > 0.0f) dx[i] += dout[i];
      }
    });
  }
  return out;
}

Tensor Tape::sigmoid(const Tensor& x) {
  const bool connected = track({&x});
  Tensor out = make_output(x.shape(), connected);
  const auto xv = x.data(); auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) {
    const float v = xv[i];
    // Branch on sign so the exponential never overflows.
    if (v >= 0.0f) {
      const float e = std::exp(-v);
      ov[i] = 1.0f / (1.0f + e);
    } else {
      const float e = std::exp(v);
      ov[i] = e / (1.0f + e);
    }
  }
  TCAN_CHECK_FINITE(out.data(), "sigmoid");
  if (connected) {
    ImplPtr xi = x.impl_, oi = out.impl_;
    const Tape* tape = this;
    push([xi, oi, tape](std::uint64_t pass) {
      std::span<float> dout = adjoint_of(oi.get(), pass);
      const float hook = tape->bug_ ? 2.0f : 1.0f;
      if (wants_adjoint(xi.get())) {
        auto dx = adjoint_of(xi.get(), pass);
        for (std::size_t i = 0; i < dx.size(); ++i) {
          const float y = oi->data[i];
          dx[i] += hook * dout[i] * y * (1.0f - y);
        }
      }
    });
  }
  return out;
}

Tensor Tape::softmax_rows(const Tensor& x) {
  require_rank2(x, "softmax_rows", "input");
  const int rows = x.shape().rows(), cols = x.shape().cols();
  if (cols < 1) throw ShapeError("softmax_rows: empty rows in " + x.shape().str());
  const bool connected = track({&x});
  Tensor out = make_output(x.shape(), connected);
  const auto xv = x.data(); auto ov = out.data();
  for (int i = 0; i < rows; ++i) {
    const float* row = xv.data() + static_cast<std::size_t>(i) * cols;
    float* orow = ov.data() + static_cast<std::size_t>(i) * cols;
    float mx = row[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
    float sum = 0.0f;
    for (int j = 0; j < cols; ++j) {
      orow[j] = std::exp(row[j] - mx);
      sum += orow[j];
    }
    const float inv = 1.0f / sum;
    for (int j = 0; j < cols; ++j) orow[j] *= inv;
  }
  TCAN_CHECK_FINITE(out.data(), "softmax_rows");
  if (connected) {
    // Saves the softmax output; backward is y * (dy - sum(dy * y)) per row.
    ImplPtr xi = x.impl_, oi = out.impl_;
    push([xi, oi, rows, cols](std::uint64_t pass) {
      std::span<float> dout = adjoint_of(oi.get(), pass);
      if (!wants_adjoint(xi.get())) return;
      auto dx = adjoint_of(xi.get(), pass);
      for (int i = 0; i < rows; ++i) {
        const float* y = oi->data.data() + static_cast<std::size_t>(i) * cols;
        const float* dy = dout.data() + static_cast<std::size_t>(i) * cols;
        float dot = 0.0f;
        for (int j = 0; j < cols; ++j) dot += dy[j] * y[j];
        float* d = dx.data() + static_cast<std::size_t>(i) * cols;
        for (int j = 0; j < cols; ++j) d[j] += y[j] * (dy[j] - dot);
      }
    });
  }
  return out;
}

Tensor Tape::layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  require_rank2(x, "layer_norm", "input");
  const int rows = x.shape().rows(), cols = x.shape().cols();
  if (gain.shape().rank != 1 || gain.shape().extent[0] != cols ||
      bias.shape().rank != 1 || bias.shape().extent[0] != cols) {
    throw ShapeError("layer_norm: gain " + gain.shape().str() + " / bias " + bias.shape().str() +
                     " do not match " + x.shape().str());
  }
  constexpr float kEps = 1e-5f;
  const bool connected = track({&x, &gain, &bias});
  Tensor out = make_output(x.shape(), connected);
  // Normalized values and inverse stddev are saved for backward.
  auto xhat = std::make_shared<std::vector<float>>(static_cast<std::size_t>(rows) * cols);
  auto inv_std = std::make_shared<std::vector<float>>(rows);
  const auto xv = x.data(); const auto gv = gain.data(); const auto bv = bias.data();
  auto ov = out.data();
  for (int i = 0; i < rows; ++i) {
    const float* row = xv.data() + static_cast<std::size_t>(i) * cols;
    float mean = 0.0f;
    for (int j = 0; j < cols; ++j) mean += row[j];
    mean /= static_cast<float>(cols);
    float var = 0.0f;
    for (int j = 0; j < cols; ++j) {
      const float d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<float>(cols);
    const float is = 1.0f / std::sqrt(var + kEps);
    (*inv_std)[i] = is;
    float* xh = xhat->data() + static_cast<std::size_t>(i) * cols;
    float* orow = ov.data() + static_cast<std::size_t>(i) * cols;
    for (int j = 0; j < cols; ++j) {
      xh[j] = (row[j] - mean) * is;
      orow[j] = gv[j] * xh[j] + bv[j];
    }
  }
  TCAN_CHECK_FINITE(out.data(), "layer_norm");
  if (connected) {
    ImplPtr xi = x.impl_, gi = gain.impl_, bi = bias.impl_, oi = out.impl_;
    push([xi, gi, bi, oi, xhat, inv_std, rows, cols](std::uint64_t pass) {
      std::span<float> dout = adjoint_of(oi.get(), pass);
      const bool need_x = wants_adjoint(xi.get());
      const bool need_g = wants_adjoint(gi.get());
      const bool need_b = wants_adjoint(bi.get());
      if (!(need_x || need_g || need_b)) return;
      std::span<float> dx = need_x ? adjoint_of(xi.get(), pass) : std::span<float>{};
      std::span<float> dg = need_g ? adjoint_of(gi.get(), pass) : std::span<float>{};
      std::span<float> db = need_b ? adjoint_of(bi.get(), pass) : std::span<float>{};
      for (int i = 0; i < rows; ++i) {
        const float* dy = dout.data() + static_cast<std::size_t>(i) * cols;
        const float* xh = xhat->data() + static_cast<std::size_t>(i) * cols;
        if (need_g || need_b) {
          for (int j = 0; j < cols; ++j) {
            if (need_g) dg[j] += dy[j] * xh[j];
            if (need_b) db[j] += dy[j];
          }
        }
        if (need_x) {
          // dxhat = dy * gain; dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
          float m1 = 0.0f, m2 = 0.0f;
          for (int j = 0; j < cols; ++j) {
            const float dxh = dy[j] * gi->data[j];
            m1 += dxh;
            m2 += dxh * xh[j];
          }
          m1 /= static_cast<float>(cols);
          m2 /= static_cast<float>(cols);
          const float is = (*inv_std)[i];
          float* d = dx.data() + static_cast<std::size_t>(i) * cols;
          for (int j = 0; j < cols; ++j) {
            const float dxh = dy[j] * gi->data[j];
            d[j] += is * (dxh - m1 - xh[j] * m2);
          }
        }
      }
    });
  }
  return out;
}

Tensor Tape::conv1d_temporal(const Tensor& x, const Tensor& kernel, const Tensor& bias,
                             int stride, int padding) {
  require_rank2(x, "conv1d_temporal", "input");
  if (kernel.shape().rank != 3) {
    throw ShapeError("conv1d_temporal: kernel must be rank-3 [k x d_in x d_out], got " +
                     kernel.shape().str());
  }
  const int t_in = x.shape().rows(), d_in = x.shape().cols();
  const int k = kernel.shape().extent[0];
  const int kd_in = kernel.shape().extent[1];
  const int d_out = kernel.shape().extent[2];
  if (k % 2 == 0 || k < 1) {
    throw ContractError("conv1d_temporal: kernel width must be odd, got " + std::to_string(k));
  }
  if (kd_in != d_in) {
    throw ShapeError("conv1d_temporal: kernel " + kernel.shape().str() + " does not match input " +
                     x.shape().str());
  }
  if (bias.shape().rank != 1 || bias.shape().extent[0] != d_out) {
    throw ShapeError("conv1d_temporal: bias " + bias.shape().str() + " does not match d_out=" +
                     std::to_string(d_out));
  }
  if (stride < 1) throw ContractError("conv1d_temporal: stride must be >= 1");
  if (padding < 0) throw ContractError("conv1d_temporal: padding must be >= 0");
  const int t_out = (t_in + 2 * padding - k) / stride + 1;
  if (t_in + 2 * padding < k || t_out < 1) {
    throw ShapeError("conv1d_temporal: sequence too short, T=" + std::to_string(t_in) + " k=" +
                     std::to_string(k) + " stride=" + std::to_string(stride) + " padding=" +
                     std::to_string(padding));
  }
  const bool connected = track({&x, &kernel, &bias});
  Tensor out = make_output(Shape::mat(t_out, d_out), connected);
  const auto xv = x.data(); const auto kv = kernel.data(); const auto bv = bias.data();
  auto ov = out.data();
  for (int t = 0; t < t_out; ++t) {
    float* orow = ov.data() + static_cast<std::size_t>(t) * d_out;
    for (int j = 0; j < d_out; ++j) orow[j] = bv[j];
    const int start = t * stride - padding;
    for (int u = 0; u < k; ++u) {
      const int src = start + u;
      if (src < 0 || src >= t_in) continue;  // zero padding
      const float* xrow = xv.data() + static_cast<std::size_t>(src) * d_in;
      const float* kslab = kv.data() + static_cast<std::size_t>(u) * d_in * d_out;
      for (int c = 0; c < d_in; ++c) {
        const float xvl = xrow[c];
        const float* krow = kslab + static_cast<std::size_t>(c) * d_out;
        for (int j = 0; j < d_out; ++j) orow[j] += xvl * krow[j];
      }
    }
  }
  TCAN_CHECK_FINITE(out.data(), "conv1d_temporal");
  if (connected) {
    ImplPtr xi = x.impl_, ki = kernel.impl_, bi = bias.impl_, oi = out.impl_;
    push([xi, ki, bi, oi, t_in, d_in, k, d_out, t_out, stride, padding](std::uint64_t pass) {
      std::span<float> dout = adjoint_of(oi.get(), pass);
      const bool need_x = wants_adjoint(xi.get());
      const bool need_k = wants_adjoint(ki.get());
      const bool need_b = wants_adjoint(bi.get());
      if (!(need_x || need_k || need_b)) return;
      std::span<float> dx = need_x ? adjoint_of(xi.get(), pass) : std::span<float>{};
      std::span<float> dk = need_k ? adjoint_of(ki.get(), pass) : std::span<float>{};
      std::span<float> db = need_b ? adjoint_of(bi.get(), pass) : std::span<float>{};
      for (int t = 0; t < t_out; ++t) {
        const float* drow = dout.data() + static_cast<std::size_t>(t) * d_out;
        if (need_b) {
          for (int j = 0; j < d_out; ++j) db[j] += drow[j];
        }
        const int start = t * stride - padding;
        for (int u = 0; u < k; ++u) {
          const int src = start + u;
          if (src < 0 || src >= t_in) continue;
          const float* kslab = ki->data.data() + static_cast<std::size_t>(u) * d_in * d_out;
          const float* xrow = xi->data.data() + static_cast<std::size_t>(src) * d_in;
          for (int c = 0; c < d_in; ++c) {
            const float* krow = kslab + static_cast<std::size_t>(c) * d_out;
            if (need_x) {
              float acc = 0.0f;
              for (int j = 0; j < d_out; ++j) acc += drow[j] * krow[j];
              dx[static_cast<std::size_t>(src) * d_in + c] += acc;
            }
            if (need_k) {
              float* dkrow = dk.data() + static_cast<std::size_t>(u) * d_in * d_out +
                             static_cast<std::size_t>(c) * d_out;
              const float xvl = xrow[c];
              for (int j = 0; j < d_out; ++j) dkrow[j] += xvl * drow[j];
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor Tape::concat_features(const Tensor& a, const Tensor& b) {
  require_rank2(a, "concat_features", "lhs");
  require_rank2(b, "concat_features", "rhs");
  if (a.shape().rows() != b.shape().rows()) {
    throw ShapeError("concat_features: first extents disagree, " + a.shape().str() + " vs " +
                     b.shape().str());
  }
  const int rows = a.shape().rows(), ca = a.shape().cols(), cb = b.shape().cols();
  const bool connected = track({&a, &b});
  Tensor out = make_output(Shape::mat(rows, ca + cb), connected);
  const auto av = a.data(); const auto bv = b.data(); auto ov = out.data();
  for (int i = 0; i < rows; ++i) {
    float* orow = ov.data() + static_cast<std::size_t>(i) * (ca + cb);
    std::copy_n(av.data() + static_cast<std::size_t>(i) * ca, ca, orow);
    std::copy_n(bv.data() + static_cast<std::size_t>(i) * cb, cb, orow + ca);
  }
  if (connected) {
    ImplPtr ai = a.impl_, bi = b.impl_, oi = out.impl_;
    push([ai, bi, oi, rows, ca, cb](std::uint64_t pass) {
      std::span<float> dout = adjoint_of(oi.get(), pass);
      if (wants_adjoint(ai.get())) {
        auto da = adjoint_of(ai.get(), pass);
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < ca; ++j)
            da[static_cast<std::size_t>(i) * ca + j] +=
                dout[static_cast<std::size_t>(i) * (ca + cb) + j];
      }
      if (wants_adjoint(bi.get())) {
        auto db = adjoint_of(bi.get(), pass);
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < cb; ++j)
            db[static_cast<std::size_t>(i) * cb + j] +=
                dout[static_cast<std::size_t>(i) * (ca + cb) + ca + j];
      }
    });
  }
  return out;
}

Tensor Tape::slice_cols(const Tensor& x, int c0, int c1) {
  require_rank2(x, "slice_cols", "input");
  const int rows = x.shape().rows(), cols = x.shape().cols();
  if (c0 < 0 || c1 > cols || c0 >= c1) {
    throw ShapeError("slice_cols: range [" + std::to_string(c0) + ", " + std::to_string(c1) +
                     ") invalid for " + x.shape().str());
  }
  const int w = c1 - c0;
  const bool connected = track({&x});
  Tensor out = make_output(Shape::mat(rows, w), connected);
  const auto xv = x.data(); auto ov = out.data();
  for (int i = 0; i < rows; ++i)
    std::copy_n(xv.data() + static_cast<std::size_t>(i) * cols + c0, w,
                ov.data() + static_cast<std::size_t>(i) * w);
  if (connected) {
    ImplPtr xi = x.impl_, oi = out.impl_;
    push([xi, oi, rows, cols, c0, w](std::uint64_t pass) {
      std::span<float> dout = adjoint_of(oi.get(), pass);
      if (!wants_adjoint(xi.get())) return;
      auto dx = adjoint_of(xi.get(), pass);
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < w; ++j)
          dx[static_cast<std::size_t>(i) * cols + c0 + j] +=
              dout[static_cast<std::size_t>(i) * w + j];
    });
  }
  return out;
}

Tensor Tape::mean_rows(const Tensor& x) {
  require_rank2(x, "mean_rows", "input");
  const int rows = x.shape().rows(), cols = x.shape().cols();
  if (rows < 1) throw ShapeError("mean_rows: no rows in " + x.shape().str());
  const bool connected = track({&x});
  Tensor out = make_output(Shape::mat(1, cols), connected);
  const auto xv = x.data(); auto ov = out.data();
  for (int j = 0; j < cols; ++j) {
    float acc = 0.0f;
    for (int i = 0; i < rows; ++i) acc += xv[static_cast<std::size_t>(i) * cols + j];
    ov[j] = acc / static_cast<float>(rows);
  }
  if (connected) {
    ImplPtr xi = x.impl_, oi = out.impl_;
    push([xi, oi, rows, cols](std::uint64_t pass) {
      std::span<float> dout = adjoint_of(oi.get(), pass);
      if (!wants_adjoint(xi.get())) return;
      auto dx = adjoint_of(xi.get(), pass);
      const float inv = 1.0f / static_cast<float>(rows);
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) dx[static_cast<std::size_t>(i) * cols + j] += dout[j] * inv;
    });
  }
  return out;
}

Tensor Tape::row_at(const Tensor& x, int r) {
  require_rank2(x, "row_at", "input");
  const int rows = x.shape().rows(), cols = x.shape().cols();
  if (r < 0 || r >= rows) {
    throw ShapeError("row_at: row " + std::to_string(r) + " out of range for " + x.shape().str());
  }
  const bool connected = track({&x});
  Tensor out = make_output(Shape::mat(1, cols), connected);
  std::copy_n(x.data().data() + static_cast<std::size_t>(r) * cols, cols, out.data().data());
  if (connected) {
    ImplPtr xi = x.impl_, oi = out.impl_;
    push([xi, oi, r, cols](std::uint64_t pass) {
      std::span<float> dout = adjoint_of(oi.get(), pass);
      if (!wants_adjoint(xi.get())) return;
      auto dx = adjoint_of(xi.get(), pass);
      for (int j = 0; j < cols; ++j) dx[static_cast<std::size_t>(r) * cols + j] += dout[j];
    });
  }
  return out;
}

Tensor Tape::resample_rows(const Tensor& x, int out_rows) {
  require_rank2(x, "resample_rows", "input");
  const int t_in = x.shape().rows(), cols = x.shape().cols();
  if (t_in < 1) throw ShapeError("resample_rows: no rows in " + x.shape().str());
  if (out_rows < 1) throw ContractError("resample_rows: out_rows must be >= 1");
  const bool connected = track({&x});
  Tensor out = make_output(Shape::mat(out_rows, cols), connected);
  const auto xv = x.data(); auto ov = out.data();

  // Row j of the output samples source position j*(t_in-1)/(out_rows-1) and
  // blends the two neighbouring rows. Weights are shared with backward.
  struct Blend { int lo; int hi; float w; };
  auto blends = std::make_shared<std::vector<Blend>>(out_rows);
  if (t_in == out_rows) {
    for (int j = 0; j < out_rows; ++j) (*blends)[j] = {j, j, 0.0f};
  } else if (t_in == 1) {
    for (int j = 0; j < out_rows; ++j) (*blends)[j] = {0, 0, 0.0f};
  } else if (out_rows == 1) {
    (*blends)[0] = {0, 0, 0.0f};
  } else {
    const double step = static_cast<double>(t_in - 1) / static_cast<double>(out_rows - 1);
    for (int j = 0; j < out_rows; ++j) {
      const double src = j * step;
      int lo = static_cast<int>(src);
      if (lo > t_in - 2) lo = t_in - 2;
      const float w = static_cast<float>(src - lo);
      (*blends)[j] = {lo, lo + 1, w};
    }
  }
  for (int j = 0; j < out_rows; ++j) {
    const Blend& b = (*blends)[j];
    const float* lo = xv.data() + static_cast<std::size_t>(b.lo) * cols;
    const float* hi = xv.data() + static_cast<std::size_t>(b.hi) * cols;
    float* orow = ov.data() + static_cast<std::size_t>(j) * cols;
    for (int c = 0; c < cols; ++c) orow[c] = lo[c] + b.w * (hi[c] - lo[c]);
  }
  if (connected) {
    ImplPtr xi = x.impl_, oi = out.impl_;
    push([xi, oi, blends, out_rows, cols](std::uint64_t pass) {
      std::span<float> dout = adjoint_of(oi.get(), pass);
      if (!wants_adjoint(xi.get())) return;
      auto dx = adjoint_of(xi.get(), pass);
      for (int j = 0; j < out_rows; ++j) {
        const Blend& b = (*blends)[j];
        const float* drow = dout.data() + static_cast<std::size_t>(j) * cols;
        float* lo = dx.data() + static_cast<std::size_t>(b.lo) * cols;
        float* hi = dx.data() + static_cast<std::size_t>(b.hi) * cols;
        for (int c = 0; c < cols; ++c) {
          lo[c] += (1.0f - b.w) * drow[c];
          if (b.hi != b.lo) hi[c] += b.w * drow[c];
        }
      }
    });
  }
  return out;
}

Tensor Tape::sum_all(const Tensor& x) {
  const bool connected = track({&x});
  Tensor out = make_output(Shape::mat(1, 1), connected);
  const auto xv = x.data();
  float acc = 0.0f;
  for (float v : xv) acc += v;
  out.data()[0] = acc;
  if (connected) {
    ImplPtr xi = x.impl_, oi = out.impl_;
    push([xi, oi](std::uint64_t pass) {
      std::span<float> dout = adjoint_of(oi.get(), pass);
      if (!wants_adjoint(xi.get())) return;
      auto dx = adjoint_of(xi.get(), pass);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dout[0];
    });
  }
  return out;
}

Tensor Tape::abs(const Tensor& x) {
  const bool connected = track({&x});
  Tensor out = make_output(x.shape(), connected);
  const auto xv = x.data(); auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = std::fabs(xv[i]);
  if (connected) {
    // Subgradient at 0 is taken as 0.
    ImplPtr xi = x.impl_, oi = out.impl_;
    push([xi, oi](std::uint64_t pass) {
      std::span<float> dout = adjoint_of(oi.get(), pass);
      if (!wants_adjoint(xi.get())) return;
      auto dx = adjoint_of(xi.get(), pass);
      for (std::size_t i = 0; i < dx.size(); ++i) {
        const float v = xi->data[i];
        if (v > 0.0f) dx[i] += dout[i];
        else if (v < 0.0f) dx[i] -= dout[i];
      }
    });
  }
  return out;
}

Tensor Tape::sub_scalar(const Tensor& x, float c) {
  const bool connected = track({&x});
  Tensor out = make_output(x.shape(), connected);
  const auto xv = x.data(); auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] - c;
  if (connected) {
    ImplPtr xi = x.impl_, oi = out.impl_;
    push([xi, oi](std::uint64_t pass) {
      std::span<float> dout = adjoint_of(oi.get(), pass);
      if (!wants_adjoint(xi.get())) return;
      auto dx = adjoint_of(xi.get(), pass);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dout[i];
    });
  }
  return out;
}

// ---- grad_check ---------------------------------------------------------

GradCheckReport grad_check(const std::function<Tensor(Tape&)>& f,
                           std::span<const NamedParam> params, const GradCheckOptions& opts) {
  if (!(opts.eps >= 1e-4f && opts.eps <= 1e-2f)) {
    throw ContractError("grad_check: eps must lie in [1e-4, 1e-2]");
  }
  if (opts.tol <= 0) throw ContractError("grad_check: tol must be positive");

  GradCheckReport report;

  for (const NamedParam& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
  {
    Tape tape;
    tape.inject_backward_bug(opts.inject_bug);
    Tensor loss = f(tape);
    tape.backward(loss);
  }
  std::vector<std::vector<float>> analytic;
  analytic.reserve(params.size());
  for (const NamedParam& p : params) {
    Tensor t = p.tensor;
    auto g = t.grad();
    analytic.emplace_back(g.begin(), g.end());
  }

  auto eval_loss = [&]() -> double {
    Tape tape;
    return static_cast<double>(f(tape).value());
  };

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor t = params[pi].tensor;
    const std::string& name = params[pi].name;
    const int n = t.numel();
    std::vector<int> coords;
    if (opts.max_coords_per_tensor <= 0 || opts.max_coords_per_tensor >= n) {
      coords.resize(n);
      for (int i = 0; i < n; ++i) coords[i] = i;
    } else {
      // Partial Fisher-Yates over the index range, seeded per tensor name.
      std::uint64_t h = 1469598103934665603ull;
      for (char c : name) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ull;
      std::mt19937_64 gen(h ^ opts.seed);
      std::vector<int> all(n);
      for (int i = 0; i < n; ++i) all[i] = i;
      for (int i = 0; i < opts.max_coords_per_tensor; ++i) {
        const int j = i + static_cast<int>(gen() % static_cast<std::uint64_t>(n - i));
        std::swap(all[i], all[j]);
      }
      coords.assign(all.begin(), all.begin() + opts.max_coords_per_tensor);
    }

    auto fd_at = [&](int idx, float step) -> double {
      auto dv = t.data();
      const float orig = dv[idx];
      dv[idx] = orig + step;
      const double lp = eval_loss();
      dv[idx] = orig - step;
      const double lm = eval_loss();
      dv[idx] = orig;
      return (lp - lm) / (2.0 * static_cast<double>(step));
    };

    double tensor_worst = 0.0;
    for (int idx : coords) {
      double fd = fd_at(idx, opts.eps);
      const double ga = static_cast<double>(analytic[pi][idx]);
      double rel = std::fabs(ga - fd) / std::max(1.0, std::fabs(fd));
      if (rel > opts.tol) {
        // A relu/abs kink inside the probe window skews the central
        // difference even when the analytic gradient is right. That artifact
        // shrinks linearly with the step; a wrong gradient does not, so a
        // smaller probe separates the two.
        const double fd_fine = fd_at(idx, opts.eps * 0.25f);
        const double rel_fine = std::fabs(ga - fd_fine) / std::max(1.0, std::fabs(fd_fine));
        ++report.coords_retried;
        if (rel_fine < rel) {
          fd = fd_fine;
          rel = rel_fine;
        }
      }
      ++report.coords_checked;
      tensor_worst = std::max(tensor_worst, rel);
      if (rel > report.worst_rel) {
        report.worst_rel = rel;
        report.worst_name = name;
        report.worst_index = idx;
      }
      if (rel > opts.tol) {
        report.passed = false;
        report.offenders.push_back({name, idx, ga, fd, rel});
      }
    }
    report.per_tensor_worst.emplace_back(name, tensor_worst);
  }
  std::sort(report.offenders.begin(), report.offenders.end(),
            [](const GradCheckCoord& a, const GradCheckCoord& b) { return a.rel_err > b.rel_err; });
  if (report.offenders.size() > 16) report.offenders.resize(16);
  return report;
}

}  // namespace tcan
