#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "tcan/metrics.hpp"
#include "tcan/rng.hpp"
#include "tcan/tensor.hpp"

using namespace tcan;

namespace {

// Brute-force re-implementations, written from the metric definitions and
// kept deliberately naive so they can serve as oracles.

double oracle_mae(const std::vector<float>& p, const std::vector<float>& y) {
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::fabs(double(p[i]) - double(y[i]));
  return s / double(p.size());
}

double oracle_pearson(const std::vector<float>& p, const std::vector<float>& y) {
  const double n = double(p.size());
  double mp = 0, my = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    mp += p[i];
    my += y[i];
  }
  mp /= n;
  my /= n;
  double cov = 0, vp = 0, vy = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    cov += (p[i] - mp) * (y[i] - my);
    vp += (p[i] - mp) * (p[i] - mp);
    vy += (y[i] - my) * (y[i] - my);
  }
  if (vp == 0 || vy == 0) return 0;
  return cov / std::sqrt(vp * vy);
}

int oracle_bin7(float x) {
  double c = std::min(3.0, std::max(-3.0, double(x)));
  return int(c >= 0 ? std::floor(c + 0.5) : std::ceil(c - 0.5));
}

double oracle_acc7(const std::vector<float>& p, const std::vector<float>& y) {
  int hit = 0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (oracle_bin7(p[i]) == oracle_bin7(y[i])) ++hit;
  return double(hit) / double(p.size());
}

double oracle_acc2(const std::vector<float>& p, const std::vector<float>& y) {
  int hit = 0, n = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (y[i] == 0.0f) continue;
    ++n;
    if ((p[i] > 0.0f) == (y[i] > 0.0f)) ++hit;
  }
  return n == 0 ? 0.0 : double(hit) / double(n);
}

double oracle_f1(const std::vector<float>& p, const std::vector<float>& y) {
  int tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (y[i] == 0.0f) continue;
    const bool pp = p[i] > 0.0f, yp = y[i] > 0.0f;
    if (pp && yp) ++tp;
    if (pp && !yp) ++fp;
    if (!pp && yp) ++fn;
  }
  if (2 * tp + fp + fn == 0) return 0;
  return 2.0 * tp / double(2 * tp + fp + fn);
}

}  // namespace

TEST_CASE("mae basics") {
  std::vector<float> a{1, 2, 3}, b{1, 2, 3};
  CHECK(metric_mae(a, b) == 0.0);
  std::vector<float> p{1, -1}, y{0, 0};
  CHECK(metric_mae(p, y) == 1.0);
  CHECK_THROWS_AS(metric_mae({}, {}), ContractError);
  std::vector<float> shorter{1};
  CHECK_THROWS_AS(metric_mae(p, shorter), ContractError);
}

TEST_CASE("pearson basics and constant warning case") {
  std::vector<float> y{1, 2, 3, 4};
  std::vector<float> neg{-1, -2, -3, -4};
  CHECK(metric_pearson(y, y) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(metric_pearson(neg, y) == doctest::Approx(-1.0).epsilon(1e-12));
  std::vector<float> flat{2, 2, 2, 2};
  CHECK(metric_pearson(flat, y) == 0.0);
}

TEST_CASE("acc7 clamp and rounding rules") {
  std::vector<float> p{2.6f}, y{3.0f};
  CHECK(metric_acc7(p, y) == 1.0);
  std::vector<float> p2{-3.7f}, y2{-3.0f};
  CHECK(metric_acc7(p2, y2) == 1.0);
  std::vector<float> p3{0.5f}, y3{1.0f};  // half rounds away from zero
  CHECK(metric_acc7(p3, y3) == 1.0);
  std::vector<float> p4{-0.5f}, y4{-1.0f};
  CHECK(metric_acc7(p4, y4) == 1.0);
  std::vector<float> ints{-3, -2, -1, 0, 1, 2, 3};
  CHECK(metric_acc7(ints, ints) == 1.0);
}

TEST_CASE("worked zero-excluded acc2 example is exactly 2/3") {
  std::vector<float> p{1.2f, -0.5f, 0.0f, 2.1f};
  std::vector<float> y{0.8f, -1.0f, 0.0f, -0.3f};
  CHECK(metric_acc2(p, y) == 2.0 / 3.0);
  MetricsReport r = evaluate_metrics(p, y);
  CHECK(r.acc2 == 2.0 / 3.0);
  CHECK(r.n_total == 4);
  CHECK(r.n_nonzero == 3);
}

TEST_CASE("f1 basics") {
  std::vector<float> perfect{1, -1, 2, -2};
  CHECK(metric_f1(perfect, perfect) == 1.0);
  CHECK(metric_acc2(perfect, perfect) == 1.0);

  // all predictions positive, half the labels positive: P=0.5, R=1, F1=2/3
  std::vector<float> p{1, 1, 1, 1};
  std::vector<float> y{1, 1, -1, -1};
  CHECK(metric_f1(p, y) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("sign metrics invariant to positive prediction rescaling") {
  Rng rng(3);
  std::vector<float> p(64), y(64);
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = float(rng.uniform(-3, 3));
    y[i] = float(rng.uniform(-3, 3));
  }
  std::vector<float> scaled(p);
  for (float& v : scaled) v *= 37.5f;
  CHECK(metric_acc2(p, y) == metric_acc2(scaled, y));
  CHECK(metric_f1(p, y) == metric_f1(scaled, y));
}

TEST_CASE("all five metrics match brute-force oracles on 1000 random arrays") {
  Rng rng(99);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = rng.uniform_int(2, 40);
    std::vector<float> p(n), y(n);
    bool any_nonzero = false;
    for (int i = 0; i < n; ++i) {
      p[i] = float(rng.uniform(-4, 4));
      // mix in exact zeros and integer labels so the exclusion and binning
      // paths get exercised
      const double u = rng.uniform();
      if (u < 0.15)
        y[i] = 0.0f;
      else if (u < 0.4)
        y[i] = float(rng.uniform_int(-3, 3));
      else
        y[i] = float(rng.uniform(-3, 3));
      if (y[i] != 0.0f) any_nonzero = true;
    }
    if (!any_nonzero) y[0] = 1.0f;

    CHECK(std::fabs(metric_mae(p, y) - oracle_mae(p, y)) <= 1e-6);
    CHECK(std::fabs(metric_pearson(p, y) - oracle_pearson(p, y)) <= 1e-6);
    CHECK(std::fabs(metric_acc7(p, y) - oracle_acc7(p, y)) <= 1e-6);
    CHECK(std::fabs(metric_acc2(p, y) - oracle_acc2(p, y)) <= 1e-6);
    CHECK(std::fabs(metric_f1(p, y) - oracle_f1(p, y)) <= 1e-6);

    MetricsReport r = evaluate_metrics(p, y);
    CHECK(r.mae >= 0.0);
    CHECK(r.corr >= -1.0);
    CHECK(r.corr <= 1.0);
  }
}

TEST_CASE("json report carries all fields") {
  std::vector<float> p{1.0f, -2.0f}, y{1.5f, -1.0f};
  const std::string js = metrics_to_json(evaluate_metrics(p, y));
  for (const char* key : {"mae", "corr", "acc7", "acc2", "f1", "n_total", "n_nonzero"})
    CHECK(js.find(key) != std::string::npos);
}
