#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <functional>
#include <vector>

#include "tcan/rng.hpp"
#include "tcan/tensor.hpp"

using namespace tcan;

namespace {

// Independent finite-difference oracle. Deliberately does not reuse
// grad_check from the library: it re-evaluates the loss through a fresh tape
// for every probe and differences in double.
double eval_loss(const std::function<Tensor(Tape&)>& f) {
  Tape tape;
  return static_cast<double>(f(tape).value());
}

double fd_coord(const std::function<Tensor(Tape&)>& f, Tensor& t, int i, float eps) {
  const float orig = t.data()[i];
  t.data()[i] = orig + eps;
  const double up = eval_loss(f);
  t.data()[i] = orig - eps;
  const double dn = eval_loss(f);
  t.data()[i] = orig;
  return (up - dn) / (2.0 * static_cast<double>(eps));
}

Tensor random_tensor(const Shape& shape, Rng& rng, bool requires_grad, float lo = -1.0f,
                     float hi = 1.0f) {
  std::vector<float> v(static_cast<std::size_t>(shape.numel()));
  for (float& x : v) x = static_cast<float>(rng.uniform(lo, hi));
  return Tensor::values(shape, std::move(v), requires_grad);
}

// Keeps values away from the relu/abs kink so eps=1e-3 probes stay one-sided.
void avoid_kinks(Tensor& t, float margin = 0.05f) {
  for (float& x : t.data()) {
    if (std::fabs(x) < margin) x = x < 0 ? -margin : margin;
  }
}

// Checks every requires_grad input of a scalar-valued graph against central
// differences: rel = |ga - fd| / max(1, |fd|) must stay within tol.
void require_grads_match(const std::function<Tensor(Tape&)>& f, std::vector<Tensor> inputs,
                         double tol = 1e-3, float eps = 1e-3f) {
  for (Tensor& t : inputs) t.zero_grad();
  Tape tape;
  Tensor loss = f(tape);
  tape.backward(loss);

  int checked = 0;
  double worst = 0.0;
  for (Tensor& t : inputs) {
    std::vector<float> analytic(t.grad().begin(), t.grad().end());
    for (int i = 0; i < t.numel(); ++i) {
      const double fd = fd_coord(f, t, i, eps);
      const double rel =
          std::fabs(static_cast<double>(analytic[static_cast<std::size_t>(i)]) - fd) /
          std::max(1.0, std::fabs(fd));
      if (rel > worst) worst = rel;
      ++checked;
    }
  }
  CAPTURE(worst);
  CHECK(checked > 0);
  CHECK(worst <= tol);
}

// Weighted-sum readout so the cotangent is non-trivial (a plain sum has zero
// gradient through softmax rows, for example).
Tensor weighted_sum(Tape& tape, const Tensor& out, const Tensor& w) {
  return tape.sum_all(tape.mul(out, w));
}

Tensor fixed_weights(const Shape& shape, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(static_cast<std::size_t>(shape.numel()));
  for (float& x : v) x = static_cast<float>(rng.uniform(-1.0, 1.0));
  return Tensor::values(shape, std::move(v), false);
}

bool bits_equal(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) return false;
  return std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("matmul identity and hand example") {
  Tape tape;
  Tensor eye = Tensor::values(Shape::mat(2, 2), {1, 0, 0, 1});
  Tensor m = Tensor::values(Shape::mat(2, 2), {1, 2, 3, 4});
  Tensor out = tape.matmul(eye, m);
  CHECK(out.data()[0] == 1.0f);
  CHECK(out.data()[1] == 2.0f);
  CHECK(out.data()[2] == 3.0f);
  CHECK(out.data()[3] == 4.0f);

  Tensor a = Tensor::values(Shape::mat(1, 2), {1, 2});
  Tensor b = Tensor::values(Shape::mat(2, 1), {3, 4});
  Tensor c = tape.matmul(a, b);
  CHECK(c.shape() == Shape::mat(1, 1));
  CHECK(c.value() == 11.0f);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tape tape;
  Tensor a = Tensor::zeros(Shape::mat(2, 3));
  Tensor b = Tensor::zeros(Shape::mat(4, 5));
  try {
    tape.matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[4x5]") != std::string::npos);
  }
}

TEST_CASE("matmul gradients match finite differences") {
  Rng rng(41);
  Tensor a = random_tensor(Shape::mat(4, 3), rng, true, -0.5f, 0.5f);
  Tensor b = random_tensor(Shape::mat(3, 5), rng, true, -0.5f, 0.5f);
  Tensor w = fixed_weights(Shape::mat(4, 5), 7);
  require_grads_match(
      [&](Tape& t) { return weighted_sum(t, t.matmul(a, b), w); }, {a, b});
}

TEST_CASE("matmul_nt gradients match finite differences") {
  Rng rng(42);
  Tensor a = random_tensor(Shape::mat(4, 3), rng, true, -0.5f, 0.5f);
  Tensor b = random_tensor(Shape::mat(5, 3), rng, true, -0.5f, 0.5f);
  Tensor w = fixed_weights(Shape::mat(4, 5), 8);
  require_grads_match(
      [&](Tape& t) { return weighted_sum(t, t.matmul_nt(a, b), w); }, {a, b});
}

TEST_CASE("softmax rows: symmetry, stability, row sums, equivariance") {
  Tape tape;
  Tensor x = Tensor::values(Shape::mat(1, 3), {0, 0, 0});
  Tensor y = tape.softmax_rows(x);
  for (float v : y.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-6));

  Tensor big = Tensor::values(Shape::mat(1, 2), {1000.0f, 0.0f});
  Tensor yb = tape.softmax_rows(big);
  CHECK(yb.data()[0] == 1.0f);
  CHECK(yb.data()[1] == 0.0f);
  CHECK(std::isfinite(yb.data()[0]));

  Rng rng(5);
  Tensor r = random_tensor(Shape::mat(6, 8), rng, false, -3.0f, 3.0f);
  Tensor yr = tape.softmax_rows(r);
  for (int i = 0; i < 6; ++i) {
    double s = 0;
    for (int j = 0; j < 8; ++j) s += yr.data()[static_cast<std::size_t>(i) * 8 + j];
    CHECK(std::fabs(s - 1.0) <= 1e-5);
  }

  // permutation equivariance: softmax(x P) == softmax(x) P for column perm P
  const int perm[8] = {3, 7, 0, 5, 1, 6, 2, 4};
  std::vector<float> permuted(6 * 8);
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 8; ++j)
      permuted[static_cast<std::size_t>(i) * 8 + j] =
          r.data()[static_cast<std::size_t>(i) * 8 + perm[j]];
  Tensor yp = tape.softmax_rows(Tensor::values(Shape::mat(6, 8), permuted));
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 8; ++j)
      CHECK(yp.data()[static_cast<std::size_t>(i) * 8 + j] ==
            doctest::Approx(yr.data()[static_cast<std::size_t>(i) * 8 + perm[j]])
                .epsilon(1e-6));
}

TEST_CASE("softmax gradients match finite differences") {
  Rng rng(43);
  Tensor x = random_tensor(Shape::mat(3, 4), rng, true, -2.0f, 2.0f);
  Tensor w = fixed_weights(Shape::mat(3, 4), 9);
  require_grads_match(
      [&](Tape& t) { return weighted_sum(t, t.softmax_rows(x), w); }, {x});
}

TEST_CASE("sigmoid values and gradient at zero") {
  Tape tape;
  Tensor x = Tensor::values(Shape::mat(1, 3), {0.0f, -100.0f, 100.0f}, true);
  Tensor y = tape.sigmoid(x);
  CHECK(y.data()[0] == 0.5f);
  CHECK(y.data()[1] <= 1e-40f);  // saturates below the f32 normal range, never NaN
  CHECK(y.data()[1] >= 0.0f);
  CHECK(std::isfinite(y.data()[1]));
  CHECK(y.data()[2] == 1.0f);

  Tensor x0 = Tensor::values(Shape::mat(1, 1), {0.0f}, true);
  Tape t2;
  Tensor loss = t2.sum_all(t2.sigmoid(x0));
  t2.backward(loss);
  CHECK(x0.grad()[0] == 0.25f);
}

TEST_CASE("sigmoid gradients match finite differences") {
  Rng rng(44);
  Tensor x = random_tensor(Shape::mat(4, 5), rng, true, -2.0f, 2.0f);
  Tensor w = fixed_weights(Shape::mat(4, 5), 10);
  require_grads_match([&](Tape& t) { return weighted_sum(t, t.sigmoid(x), w); }, {x});
}

TEST_CASE("layer_norm standardizes and is shift invariant") {
  Tape tape;
  Tensor gain = Tensor::values(Shape::vec(2), {1, 1});
  Tensor bias = Tensor::values(Shape::vec(2), {0, 0});

  Tensor two = Tensor::values(Shape::mat(1, 2), {1, 3});
  Tensor y = tape.layer_norm(two, gain, bias);
  CHECK(y.data()[0] == doctest::Approx(-1.0).epsilon(1e-3));
  CHECK(y.data()[1] == doctest::Approx(1.0).epsilon(1e-3));

  Tensor constant = Tensor::values(Shape::mat(1, 2), {5, 5});
  Tensor yc = tape.layer_norm(constant, gain, bias);
  CHECK(std::fabs(yc.data()[0]) <= 1e-5);
  CHECK(std::fabs(yc.data()[1]) <= 1e-5);

  Rng rng(6);
  Tensor g8 = Tensor::full(Shape::vec(8), 1.0f);
  Tensor b8 = Tensor::zeros(Shape::vec(8));
  Tensor x = random_tensor(Shape::mat(4, 8), rng, false);
  Tensor base = tape.layer_norm(x, g8, b8);
  std::vector<float> shifted(x.data().begin(), x.data().end());
  for (float& v : shifted) v += 0.7f;
  Tensor ys = tape.layer_norm(Tensor::values(Shape::mat(4, 8), shifted), g8, b8);
  for (int i = 0; i < x.numel(); ++i)
    CHECK(std::fabs(ys.data()[i] - base.data()[i]) <= 1e-5);
}

TEST_CASE("layer_norm gradients match finite differences") {
  Rng rng(45);
  Tensor x = random_tensor(Shape::mat(5, 8), rng, true);
  Tensor gain = random_tensor(Shape::vec(8), rng, true, 0.5f, 1.5f);
  Tensor bias = random_tensor(Shape::vec(8), rng, true, -0.2f, 0.2f);
  Tensor w = fixed_weights(Shape::mat(5, 8), 11);
  require_grads_match(
      [&](Tape& t) { return weighted_sum(t, t.layer_norm(x, gain, bias), w); },
      {x, gain, bias});
}

TEST_CASE("conv1d identity, box sum, and errors") {
  Tape tape;
  // k=1 identity kernel maps input through unchanged
  Tensor x = Tensor::values(Shape::mat(3, 2), {1, 2, 3, 4, 5, 6});
  Tensor ident = Tensor::values(Shape::cube(1, 2, 2), {1, 0, 0, 1});
  Tensor zb = Tensor::zeros(Shape::vec(2));
  Tensor y = tape.conv1d_temporal(x, ident, zb, 1, 0);
  CHECK(bits_equal(y.data(), x.data()));

  // ones(4x1), k=3, padding=1, all-ones kernel -> [2,3,3,2]
  Tensor ones = Tensor::full(Shape::mat(4, 1), 1.0f);
  Tensor box = Tensor::full(Shape::cube(3, 1, 1), 1.0f);
  Tensor zb1 = Tensor::zeros(Shape::vec(1));
  Tensor yb = tape.conv1d_temporal(ones, box, zb1, 1, 1);
  CHECK(yb.shape() == Shape::mat(4, 1));
  CHECK(yb.data()[0] == 2.0f);
  CHECK(yb.data()[1] == 3.0f);
  CHECK(yb.data()[2] == 3.0f);
  CHECK(yb.data()[3] == 2.0f);

  // even kernel width rejected, too-short sequence rejected
  Tensor even = Tensor::zeros(Shape::cube(2, 1, 1));
  CHECK_THROWS_AS(tape.conv1d_temporal(ones, even, zb1, 1, 0), ContractError);
  Tensor shorty = Tensor::full(Shape::mat(1, 1), 1.0f);
  Tensor k3 = Tensor::zeros(Shape::cube(3, 1, 1));
  CHECK_THROWS_WITH_AS(tape.conv1d_temporal(shorty, k3, zb1, 1, 0),
                       doctest::Contains("sequence too short"), ShapeError);
}

TEST_CASE("conv1d gradients match finite differences") {
  Rng rng(46);
  Tensor x = random_tensor(Shape::mat(6, 3), rng, true, -0.7f, 0.7f);
  Tensor kernel = random_tensor(Shape::cube(3, 3, 5), rng, true, -0.4f, 0.4f);
  Tensor bias = random_tensor(Shape::vec(5), rng, true, -0.2f, 0.2f);
  Tensor w = fixed_weights(Shape::mat(6, 5), 12);
  require_grads_match(
      [&](Tape& t) {
        return weighted_sum(t, t.conv1d_temporal(x, kernel, bias, 1, 1), w);
      },
      {x, kernel, bias});
}

TEST_CASE("concat_features identity, values, grad split, errors") {
  Tape tape;
  Tensor empty = Tensor::zeros(Shape::mat(2, 0));
  Tensor b = Tensor::values(Shape::mat(2, 2), {1, 2, 3, 4});
  Tensor out = tape.concat_features(empty, b);
  CHECK(bits_equal(out.data(), b.data()));

  Tensor ones = Tensor::full(Shape::mat(2, 1), 1.0f);
  Tensor zeros = Tensor::zeros(Shape::mat(2, 1));
  Tensor oz = tape.concat_features(ones, zeros);
  CHECK(oz.data()[0] == 1.0f);
  CHECK(oz.data()[1] == 0.0f);
  CHECK(oz.data()[2] == 1.0f);
  CHECK(oz.data()[3] == 0.0f);

  Tensor a3 = Tensor::zeros(Shape::mat(3, 1));
  CHECK_THROWS_AS(tape.concat_features(a3, b), ShapeError);

  // gradient splits exactly across the two inputs
  Tensor left = Tensor::values(Shape::mat(2, 2), {1, 2, 3, 4}, true);
  Tensor right = Tensor::values(Shape::mat(2, 1), {5, 6}, true);
  Tensor w = fixed_weights(Shape::mat(2, 3), 13);
  Tape t2;
  Tensor loss = weighted_sum(t2, t2.concat_features(left, right), w);
  t2.backward(loss);
  CHECK(left.grad()[0] == w.data()[0]);
  CHECK(left.grad()[1] == w.data()[1]);
  CHECK(right.grad()[0] == w.data()[2]);
  CHECK(left.grad()[2] == w.data()[3]);
  CHECK(left.grad()[3] == w.data()[4]);
  CHECK(right.grad()[1] == w.data()[5]);
}

TEST_CASE("elementwise and reduction op gradients match finite differences") {
  Rng rng(47);
  Tensor x = random_tensor(Shape::mat(5, 6), rng, true);
  Tensor y = random_tensor(Shape::mat(5, 6), rng, true);
  Tensor bias = random_tensor(Shape::vec(6), rng, true);
  Tensor w = fixed_weights(Shape::mat(5, 6), 14);
  Tensor w1 = fixed_weights(Shape::mat(1, 6), 15);

  require_grads_match([&](Tape& t) { return weighted_sum(t, t.add(x, y), w); }, {x, y});
  require_grads_match([&](Tape& t) { return weighted_sum(t, t.mul(x, y), w); }, {x, y});
  require_grads_match([&](Tape& t) { return weighted_sum(t, t.scale(x, -1.7f), w); }, {x});
  require_grads_match(
      [&](Tape& t) { return weighted_sum(t, t.add_row_bias(x, bias), w); }, {x, bias});
  require_grads_match([&](Tape& t) { return weighted_sum(t, t.mean_rows(x), w1); }, {x});
  require_grads_match([&](Tape& t) { return weighted_sum(t, t.row_at(x, 3), w1); }, {x});
  require_grads_match([&](Tape& t) { return t.sum_all(x); }, {x});
  require_grads_match(
      [&](Tape& t) { return weighted_sum(t, t.sub_scalar(x, 0.37f), w); }, {x});

  Tensor ws = fixed_weights(Shape::mat(5, 2), 16);
  require_grads_match(
      [&](Tape& t) { return weighted_sum(t, t.slice_cols(x, 2, 4), ws); }, {x});

  Tensor wr = fixed_weights(Shape::mat(8, 6), 17);
  require_grads_match(
      [&](Tape& t) { return weighted_sum(t, t.resample_rows(x, 8), wr); }, {x});
  Tensor wr3 = fixed_weights(Shape::mat(3, 6), 18);
  require_grads_match(
      [&](Tape& t) { return weighted_sum(t, t.resample_rows(x, 3), wr3); }, {x});
}

TEST_CASE("relu and abs gradients away from the kink") {
  Rng rng(48);
  Tensor x = random_tensor(Shape::mat(5, 6), rng, true);
  avoid_kinks(x);
  Tensor w = fixed_weights(Shape::mat(5, 6), 19);
  require_grads_match([&](Tape& t) { return weighted_sum(t, t.relu(x), w); }, {x});
  require_grads_match([&](Tape& t) { return weighted_sum(t, t.abs(x), w); }, {x});
}

TEST_CASE("backward basics: sum, quadratic, accumulation, contract") {
  Tensor x = Tensor::values(Shape::mat(2, 3), {1, -2, 3, -4, 5, -6}, true);

  {
    Tape tape;
    Tensor loss = tape.sum_all(x);
    tape.backward(loss);
    for (float g : x.grad()) CHECK(g == 1.0f);
  }

  x.zero_grad();
  {
    Tape tape;
    Tensor loss = tape.scale(tape.sum_all(tape.mul(x, x)), 0.5f);
    tape.backward(loss);
    for (int i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == x.data()[i]);
  }

  // backward twice without zeroing doubles every gradient exactly
  x.zero_grad();
  {
    Tape tape;
    Tensor loss = tape.sum_all(tape.sigmoid(tape.mul(x, x)));
    tape.backward(loss);
    std::vector<float> once(x.grad().begin(), x.grad().end());
    tape.backward(loss);
    for (int i = 0; i < x.numel(); ++i)
      CHECK(x.grad()[i] == 2.0f * once[static_cast<std::size_t>(i)]);
  }

  {
    Tape tape;
    Tensor y = tape.mul(x, x);
    CHECK_THROWS_AS(tape.backward(y), ContractError);
  }
}

TEST_CASE("ops are deterministic bit for bit") {
  Rng rng(49);
  Tensor x = random_tensor(Shape::mat(7, 9), rng, false, -2.0f, 2.0f);
  Tensor g = Tensor::full(Shape::vec(9), 1.0f);
  Tensor b = Tensor::zeros(Shape::vec(9));
  Tape t1, t2;
  Tensor a1 = t1.layer_norm(t1.softmax_rows(t1.sigmoid(x)), g, b);
  Tensor a2 = t2.layer_norm(t2.softmax_rows(t2.sigmoid(x)), g, b);
  CHECK(bits_equal(a1.data(), a2.data()));
}

TEST_CASE("grad_check harness: linear exact, sigmoid chain, negative control") {
  Rng rng(50);
  Tensor wlin = random_tensor(Shape::mat(4, 3), rng, true, -0.5f, 0.5f);
  Tensor xin = random_tensor(Shape::mat(3, 2), rng, false, -0.5f, 0.5f);
  std::vector<NamedParam> params{{"wlin", wlin}};

  GradCheckOptions opts;
  auto linear = [&](Tape& t) { return t.sum_all(t.matmul(wlin, xin)); };
  GradCheckReport r1 = grad_check(linear, params, opts);
  CHECK(r1.passed);
  CHECK(r1.coords_checked == wlin.numel());
  CHECK(r1.worst_rel <= 1e-4);

  auto chain = [&](Tape& t) { return t.sum_all(t.sigmoid(t.matmul(wlin, xin))); };
  GradCheckReport r2 = grad_check(chain, params, opts);
  CHECK(r2.passed);
  CHECK(r2.worst_rel <= 1e-3);

  GradCheckOptions buggy = opts;
  buggy.inject_bug = true;
  GradCheckReport r3 = grad_check(chain, params, buggy);
  CHECK_FALSE(r3.passed);
  CHECK(!r3.offenders.empty());

  GradCheckOptions bad_eps = opts;
  bad_eps.eps = 1e-5f;
  CHECK_THROWS_AS(grad_check(chain, params, bad_eps), ContractError);
}

TEST_CASE("grad_check re-probes a coordinate that straddles a relu kink") {
  // x sits 5e-4 from the kink, inside the default 1e-3 probe window: the
  // first central difference averages the two slopes (0.75 against the true
  // 1.0), the eps/4 re-probe stays on one side and clears the tolerance.
  Tensor x = Tensor::values(Shape::mat(1, 1), {5e-4f});
  x.set_requires_grad(true);
  std::vector<NamedParam> params{{"x", x}};
  auto f = [&](Tape& t) { return t.relu(x); };

  GradCheckReport r = grad_check(f, params, {});
  CHECK(r.passed);
  CHECK(r.coords_retried == 1);
  CHECK(r.worst_rel <= 1e-3);

  // The retry must not rescue a genuinely wrong gradient.
  Tensor w = Tensor::values(Shape::mat(1, 1), {0.3f});
  w.set_requires_grad(true);
  std::vector<NamedParam> wp{{"w", w}};
  GradCheckOptions buggy;
  buggy.inject_bug = true;
  auto g = [&](Tape& t) { return t.sigmoid(w); };
  GradCheckReport rb = grad_check(g, wp, buggy);
  CHECK_FALSE(rb.passed);
  CHECK(rb.coords_retried == 1);
}
