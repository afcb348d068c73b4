#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "tcan/data.hpp"
#include "tcan/metrics.hpp"
#include "tcan/model.hpp"
#include "tcan/train.hpp"

namespace tcan {

// Grid axes. An empty axis inherits the base config's value; at least one
// axis must offer two or more values, and seeds must be non-empty.
struct AblationSpec {
  std::vector<std::string> subsets;
  std::vector<Modality> centers;
  std::vector<bool> gates;
  std::vector<bool> joint;
  std::vector<int> n_values;
  std::vector<std::uint64_t> seeds;
  ModelConfig base_model;
  TrainConfig base_train;
  std::string dataset_path;

  void validate() const;
};

AblationSpec ablation_spec_from_json_file(const std::string& path);

struct AblationCell {
  std::string subset;
  Modality center = Modality::text;
  bool gates = true;
  bool joint = true;
  int N = 1;
};

struct CellResult {
  AblationCell cell;
  std::vector<std::uint64_t> seeds;
  std::vector<MetricsReport> per_seed;  // entry meaningful iff errors[i] is empty
  std::vector<std::string> errors;
  int n_ok = 0;
};

/// Cartesian product of the axes (subset, center, gates, joint, N), each cell
/// trained once per seed. Cells are independent; a failed run is recorded in
/// its cell and the rest of the grid still completes.
std::vector<CellResult> run_ablation(const AblationSpec& spec, const LoadedDataset& data,
                                     int jobs = 1, std::ostream* log = nullptr);

/// Grid CSV: one row per cell with mean and sample-sd per metric over the
/// seeds that succeeded, preceded by '#' comment lines echoing the config.
void write_ablation_csv(const std::string& path, const AblationSpec& spec,
                        const std::vector<CellResult>& results);

/// Single (cell, seed) run; shares the exact train-then-eval path used by
/// the standalone train command.
MetricsReport run_ablation_cell(const AblationSpec& spec, const AblationCell& cell,
                                std::uint64_t seed, const LoadedDataset& data);

}  // namespace tcan
