#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace tcan {

struct IngestError : std::runtime_error {
  explicit IngestError(const std::string& msg) : std::runtime_error(msg) {}
};

// One temporal feature sequence, row-major [len x width].
struct SeqData {
  int len = 0;
  int width = 0;
  std::vector<float> values;

  float at(int t, int j) const { return values[static_cast<std::size_t>(t) * width + j]; }
};

struct Sample {
  std::string id;
  SeqData text, visual, acoustic;
  float label = 0.0f;  // sentiment score in [-3, 3]
};

struct SplitFiles {
  std::string train, val, test;
};

struct DatasetManifest {
  int d_t = 0, d_v = 0, d_a = 0;
  SplitFiles splits;
  int n_train = 0, n_val = 0, n_test = 0;
};

struct LoadedDataset {
  DatasetManifest manifest;
  std::vector<Sample> train, val, test;
};

struct SyntheticConfig {
  int n_train = 1000, n_val = 200, n_test = 200;
  std::uint64_t seed = 0;

  // Per-modality signal-to-noise: embedded signal magnitude per unit label
  // against unit Gaussian noise.
  float snr_t = 4.0f, snr_v = 1.0f, snr_a = 1.0f;

  // Probability that a sample's modality carries its signal sign-flipped.
  float p_flip_t = 0.0f, p_flip_v = 0.1f, p_flip_a = 0.1f;

  // Per-timestep chance of a noise burst (10x noise) on visual/acoustic.
  float burst_v = 0.0f, burst_a = 0.0f;

  int d_t = 10, d_v = 6, d_a = 8;
  int len_t_min = 8, len_t_max = 20;
  int len_v_min = 20, len_v_max = 40;
  int len_a_min = 30, len_a_max = 60;
};

/// Draws labels uniformly from [-3, 3] and embeds snr * label along a fixed
/// per-modality direction into Gaussian noise. Deterministic under seed.
LoadedDataset generate_synthetic(const SyntheticConfig& cfg);

/// Reads a manifest (path to dataset.json or its directory) plus all three
/// splits. NDJSON and the binary format are told apart by the leading magic.
LoadedDataset load_dataset(const std::string& path);

/// Writes dataset.json and one file per split into dir.
void write_dataset(const LoadedDataset& ds, const std::string& dir, bool binary = false);

/// Deterministic shuffled batch partition for one epoch. The shuffle seed is
/// derived from (seed, epoch); a short final batch is kept.
std::vector<std::vector<int>> epoch_batches(int n, int batch_size, std::uint64_t seed, int epoch);

}  // namespace tcan
