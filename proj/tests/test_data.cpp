#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "tcan/data.hpp"
#include "tcan/rng.hpp"

using namespace tcan;
namespace fs = std::filesystem;

namespace {

fs::path test_dir() {
  static fs::path base = [] {
    fs::path p = fs::temp_directory_path() / "tcan_data_tests";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return base;
}

bool samples_bit_equal(const std::vector<Sample>& a, const std::vector<Sample>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].id != b[i].id) return false;
    if (std::memcmp(&a[i].label, &b[i].label, sizeof(float)) != 0) return false;
    for (const SeqData* s : {&a[i].text, &a[i].visual, &a[i].acoustic}) {
      const SeqData* t = s == &a[i].text     ? &b[i].text
                         : s == &a[i].visual ? &b[i].visual
                                             : &b[i].acoustic;
      if (s->len != t->len || s->width != t->width) return false;
      if (std::memcmp(s->values.data(), t->values.data(), s->values.size() * sizeof(float)) !=
          0)
        return false;
    }
  }
  return true;
}

const SeqData& seq_of(const Sample& s, int modality) {
  return modality == 0 ? s.text : modality == 1 ? s.visual : s.acoustic;
}

// Least-squares probe: mean-pool the sequence, append a bias feature, solve
// ridge-regularized normal equations by Gaussian elimination, score sign
// agreement. Independent of the model code on purpose.
double probe_accuracy(const std::vector<Sample>& train, const std::vector<Sample>& eval,
                      int modality) {
  const int d = seq_of(train[0], modality).width;
  const int n = d + 1;
  std::vector<double> xtx(static_cast<std::size_t>(n) * n, 0.0);
  std::vector<double> xty(static_cast<std::size_t>(n), 0.0);

  auto pooled = [&](const Sample& s) {
    const SeqData& q = seq_of(s, modality);
    std::vector<double> x(static_cast<std::size_t>(n), 0.0);
    for (int t = 0; t < q.len; ++t)
      for (int j = 0; j < q.width; ++j) x[static_cast<std::size_t>(j)] += q.at(t, j);
    for (int j = 0; j < d; ++j) x[static_cast<std::size_t>(j)] /= q.len;
    x[static_cast<std::size_t>(d)] = 1.0;
    return x;
  };

  for (const Sample& s : train) {
    const std::vector<double> x = pooled(s);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) xtx[static_cast<std::size_t>(i) * n + j] += x[i] * x[j];
      xty[static_cast<std::size_t>(i)] += x[i] * s.label;
    }
  }
  for (int i = 0; i < n; ++i) xtx[static_cast<std::size_t>(i) * n + i] += 1e-3;

  // gaussian elimination with partial pivoting
  std::vector<double> w(xty);
  for (int col = 0; col < n; ++col) {
    int pivot = col;
    for (int r = col + 1; r < n; ++r)
      if (std::fabs(xtx[static_cast<std::size_t>(r) * n + col]) >
          std::fabs(xtx[static_cast<std::size_t>(pivot) * n + col]))
        pivot = r;
    for (int j = 0; j < n; ++j)
      std::swap(xtx[static_cast<std::size_t>(col) * n + j],
                xtx[static_cast<std::size_t>(pivot) * n + j]);
    std::swap(w[static_cast<std::size_t>(col)], w[static_cast<std::size_t>(pivot)]);
    const double diag = xtx[static_cast<std::size_t>(col) * n + col];
    for (int r = 0; r < n; ++r) {
      if (r == col) continue;
      const double factor = xtx[static_cast<std::size_t>(r) * n + col] / diag;
      for (int j = col; j < n; ++j)
        xtx[static_cast<std::size_t>(r) * n + j] -=
            factor * xtx[static_cast<std::size_t>(col) * n + j];
      w[static_cast<std::size_t>(r)] -= factor * w[static_cast<std::size_t>(col)];
    }
  }
  for (int i = 0; i < n; ++i) w[static_cast<std::size_t>(i)] /= xtx[static_cast<std::size_t>(i) * n + i];

  int hit = 0, total = 0;
  for (const Sample& s : eval) {
    if (s.label == 0.0f) continue;
    const std::vector<double> x = pooled(s);
    double score = 0;
    for (int i = 0; i < n; ++i) score += w[static_cast<std::size_t>(i)] * x[i];
    ++total;
    if ((score > 0) == (s.label > 0)) ++hit;
  }
  return total == 0 ? 0.0 : double(hit) / total;
}

void write_lines(const fs::path& p, const std::vector<std::string>& lines) {
  std::ofstream out(p, std::ios::binary);
  for (const std::string& l : lines) out << l << "\n";
}

std::string tiny_manifest(const std::string& train_file, int n_train = 1) {
  return std::string("{\"d_t\":2,\"d_v\":2,\"d_a\":2,") + "\"counts\":{\"train\":" +
         std::to_string(n_train) + ",\"val\":0,\"test\":0}," + "\"splits\":{\"train\":\"" +
         train_file + "\",\"val\":\"empty.ndjson\",\"test\":\"empty.ndjson\"}}";
}

void expect_load_error(const fs::path& dir, const std::string& needle) {
  try {
    load_dataset(dir.string());
    FAIL_CHECK("expected IngestError containing '" << needle << "'");
  } catch (const IngestError& e) {
    CHECK(std::string(e.what()).find(needle) != std::string::npos);
  }
}

}  // namespace

TEST_CASE("generator is deterministic and samples satisfy invariants") {
  SyntheticConfig cfg;
  cfg.n_train = 40;
  cfg.n_val = 10;
  cfg.n_test = 10;
  cfg.seed = 123;
  cfg.burst_v = 0.2f;
  LoadedDataset a = generate_synthetic(cfg);
  LoadedDataset b = generate_synthetic(cfg);
  CHECK(samples_bit_equal(a.train, b.train));
  CHECK(samples_bit_equal(a.val, b.val));
  CHECK(samples_bit_equal(a.test, b.test));

  cfg.seed = 124;
  LoadedDataset c = generate_synthetic(cfg);
  CHECK_FALSE(samples_bit_equal(a.train, c.train));

  for (const Sample& s : a.train) {
    CHECK(s.label >= -3.0f);
    CHECK(s.label <= 3.0f);
    CHECK(s.text.len >= cfg.len_t_min);
    CHECK(s.text.len <= cfg.len_t_max);
    CHECK(s.text.width == cfg.d_t);
    CHECK(s.visual.width == cfg.d_v);
    CHECK(s.acoustic.width == cfg.d_a);
    for (float v : s.text.values) CHECK(std::isfinite(v));
    for (float v : s.visual.values) CHECK(std::isfinite(v));
    for (float v : s.acoustic.values) CHECK(std::isfinite(v));
  }
}

TEST_CASE("generator rejects invalid configs") {
  SyntheticConfig cfg;
  cfg.snr_t = 0.0f;
  CHECK_THROWS_AS(generate_synthetic(cfg), IngestError);
  cfg = SyntheticConfig{};
  cfg.p_flip_v = 0.5f;
  CHECK_THROWS_AS(generate_synthetic(cfg), IngestError);
  cfg = SyntheticConfig{};
  cfg.len_t_min = 10;
  cfg.len_t_max = 9;
  CHECK_THROWS_AS(generate_synthetic(cfg), IngestError);
}

TEST_CASE("ndjson and binary round trips are bit exact") {
  SyntheticConfig cfg;
  cfg.n_train = 12;
  cfg.n_val = 5;
  cfg.n_test = 0;  // empty split must load fine
  cfg.seed = 77;
  LoadedDataset ds = generate_synthetic(cfg);

  const fs::path nd = test_dir() / "roundtrip_ndjson";
  write_dataset(ds, nd.string(), false);
  LoadedDataset back = load_dataset(nd.string());
  CHECK(samples_bit_equal(ds.train, back.train));
  CHECK(samples_bit_equal(ds.val, back.val));
  CHECK(back.test.empty());
  CHECK(back.manifest.d_t == cfg.d_t);

  const fs::path bin = test_dir() / "roundtrip_binary";
  write_dataset(ds, bin.string(), true);
  LoadedDataset back2 = load_dataset(bin.string());
  CHECK(samples_bit_equal(ds.train, back2.train));
  CHECK(samples_bit_equal(ds.val, back2.val));

  // loading via the manifest file directly matches loading via the directory
  LoadedDataset back3 = load_dataset((bin / "dataset.json").string());
  CHECK(samples_bit_equal(back2.train, back3.train));
}

TEST_CASE("rewriting the same dataset produces identical files") {
  SyntheticConfig cfg;
  cfg.n_train = 8;
  cfg.n_val = 4;
  cfg.n_test = 4;
  cfg.seed = 9;
  LoadedDataset ds = generate_synthetic(cfg);
  const fs::path d1 = test_dir() / "rewrite_a";
  const fs::path d2 = test_dir() / "rewrite_b";
  write_dataset(ds, d1.string(), false);
  write_dataset(ds, d2.string(), false);
  for (const char* name : {"train.ndjson", "val.ndjson", "test.ndjson", "dataset.json"}) {
    std::ifstream f1(d1 / name, std::ios::binary), f2(d2 / name, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(s1 == s2);
    CHECK(!s1.empty());
  }
}

TEST_CASE("loader errors are distinct and name the offender") {
  const fs::path dir = test_dir() / "bad_records";
  fs::create_directories(dir);
  write_lines(dir / "empty.ndjson", {});

  // corrupt json names file and line
  write_lines(dir / "dataset.json", {tiny_manifest("corrupt.ndjson", 2)});
  write_lines(dir / "corrupt.ndjson",
              {R"({"id":"s0","label":1.0,"text":[[0,0]],"visual":[[0,0]],"acoustic":[[0,0]]})",
               "{not json"});
  expect_load_error(dir, "corrupt.ndjson:2");

  // width mismatch names the sample
  write_lines(dir / "dataset.json", {tiny_manifest("badwidth.ndjson")});
  write_lines(dir / "badwidth.ndjson",
              {R"({"id":"s7","label":1.0,"text":[[0,0,0]],"visual":[[0,0]],"acoustic":[[0,0]]})"});
  expect_load_error(dir, "sample s7");

  // ragged rows name the sample
  write_lines(dir / "dataset.json", {tiny_manifest("ragged.ndjson")});
  write_lines(dir / "ragged.ndjson",
              {R"({"id":"s8","label":1.0,"text":[[0,0],[0]],"visual":[[0,0]],"acoustic":[[0,0]]})"});
  expect_load_error(dir, "sample s8");

  // label out of range names the sample
  write_lines(dir / "dataset.json", {tiny_manifest("badlabel.ndjson")});
  write_lines(dir / "badlabel.ndjson",
              {R"({"id":"s9","label":4.5,"text":[[0,0]],"visual":[[0,0]],"acoustic":[[0,0]]})"});
  expect_load_error(dir, "sample s9");

  // empty sequence names the sample
  write_lines(dir / "dataset.json", {tiny_manifest("emptyseq.ndjson")});
  write_lines(dir / "emptyseq.ndjson",
              {R"({"id":"s10","label":1.0,"text":[],"visual":[[0,0]],"acoustic":[[0,0]]})"});
  expect_load_error(dir, "s10");

  // split size disagreement with the manifest
  write_lines(dir / "dataset.json", {tiny_manifest("short.ndjson")});
  write_lines(dir / "short.ndjson", {});
  expect_load_error(dir, "train");

  // missing manifest
  CHECK_THROWS_AS(load_dataset((test_dir() / "no_such_dir").string()), IngestError);
}

TEST_CASE("epoch batch partition") {
  std::vector<std::vector<int>> batches = epoch_batches(33, 16, 5, 0);
  REQUIRE(batches.size() == 3);
  CHECK(batches[0].size() == 16);
  CHECK(batches[1].size() == 16);
  CHECK(batches[2].size() == 1);

  std::vector<bool> seen(33, false);
  for (const auto& b : batches)
    for (int i : b) {
      CHECK(i >= 0);
      CHECK(i < 33);
      CHECK_FALSE(seen[static_cast<std::size_t>(i)]);
      seen[static_cast<std::size_t>(i)] = true;
    }
  for (bool s : seen) CHECK(s);

  CHECK(epoch_batches(33, 16, 5, 0) == batches);          // same seed, same epoch
  CHECK(epoch_batches(33, 16, 5, 1) != batches);          // next epoch reshuffles
  CHECK(epoch_batches(33, 16, 6, 0) != batches);          // different seed
  CHECK(epoch_batches(5, 16, 0, 0).size() == 1);          // single short batch
  CHECK_THROWS_AS(epoch_batches(0, 16, 0, 0), IngestError);
  CHECK_THROWS_AS(epoch_batches(5, 0, 0, 0), IngestError);
}

TEST_CASE("text-dominant profile orders probe accuracies text > visual ~ acoustic") {
  double acc_t = 0, acc_v = 0, acc_a = 0;
  const int seeds = 3;
  for (int s = 0; s < seeds; ++s) {
    SyntheticConfig cfg;
    cfg.n_train = 400;
    cfg.n_val = 200;
    cfg.n_test = 0;
    cfg.seed = 1000 + static_cast<std::uint64_t>(s);
    LoadedDataset ds = generate_synthetic(cfg);
    acc_t += probe_accuracy(ds.train, ds.val, 0);
    acc_v += probe_accuracy(ds.train, ds.val, 1);
    acc_a += probe_accuracy(ds.train, ds.val, 2);
  }
  acc_t /= seeds;
  acc_v /= seeds;
  acc_a /= seeds;
  CAPTURE(acc_t);
  CAPTURE(acc_v);
  CAPTURE(acc_a);
  CHECK(acc_t > acc_v + 0.03);
  CHECK(acc_t > acc_a + 0.03);
  CHECK(std::fabs(acc_v - acc_a) < 0.15);
}

TEST_CASE("probe accuracy rises with snr and saturates near 1") {
  const float snrs[4] = {0.25f, 0.5f, 1.0f, 2.0f};
  double mean_acc[4] = {0, 0, 0, 0};
  const int seeds = 5;
  for (int s = 0; s < seeds; ++s) {
    for (int i = 0; i < 4; ++i) {
      SyntheticConfig cfg;
      cfg.n_train = 300;
      cfg.n_val = 150;
      cfg.n_test = 0;
      cfg.seed = 2000 + static_cast<std::uint64_t>(s);
      cfg.snr_v = snrs[i];
      cfg.p_flip_v = 0.0f;
      LoadedDataset ds = generate_synthetic(cfg);
      mean_acc[i] += probe_accuracy(ds.train, ds.val, 1) / seeds;
    }
  }
  CAPTURE(mean_acc[0]);
  CAPTURE(mean_acc[1]);
  CAPTURE(mean_acc[2]);
  CAPTURE(mean_acc[3]);
  CHECK(mean_acc[0] < mean_acc[1]);
  CHECK(mean_acc[1] < mean_acc[2]);
  CHECK(mean_acc[2] < mean_acc[3]);

  // huge snr with no flips: probe recovers the sign almost surely
  SyntheticConfig cfg;
  cfg.n_train = 300;
  cfg.n_val = 200;
  cfg.n_test = 0;
  cfg.seed = 4;
  cfg.snr_t = 100.0f;
  LoadedDataset ds = generate_synthetic(cfg);
  CHECK(probe_accuracy(ds.train, ds.val, 0) >= 0.98);
}
