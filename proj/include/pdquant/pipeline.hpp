#pragma once

#include <map>
#include <string>
#include <vector>

#include "pdquant/dataset.hpp"
#include "pdquant/reconstruction.hpp"
#include "pdquant/scale_search.hpp"
#include "pdquant/train.hpp"

namespace pdq {

/// Everything needed to reproduce a quantization run. Serializable to the
/// JSON config format accepted by the CLI; a run is a pure function of
/// (RunConfig, seed).
struct RunConfig {
  std::string model_path;
  std::string dataset_path;
  std::string out_dir;
  uint64_t seed = 0;
  int calib_size = 1024;
  std::string mode = "reconstruct";  // "reconstruct" or "scale-only"
  ReconConfig recon;
  QuantOptions options;
  int scale_grid_points = 64;  // scale-only mode grid resolution

  std::string to_json() const;
  static RunConfig from_json(const std::string& text);
  static RunConfig from_json_file(const std::string& path);
};

/// Per-run evaluation summary.
struct EvalReport {
  double fp_calib_acc = 0.0;
  double fp_val_acc = 0.0;
  double quant_calib_acc = 0.0;
  double quant_val_acc = 0.0;
  double wall_seconds = 0.0;
  bool divergence_flagged = false;
  double mean_saturation = 0.0;
  double overfit_gap() const { return quant_calib_acc - quant_val_acc; }
  std::string to_json() const;
};

struct RunResult {
  EvalReport report;
  ModelGraph quantized;
  std::vector<int> calib_indices;
};

/// Calibration sampling -> (optional DC) -> block-wise reconstruction ->
/// finalize -> evaluation. With out_dir set, writes quantized.pdqm,
/// run_config.json, report.json and progress.jsonl there; on failure an
/// INCOMPLETE marker records the error.
RunResult run_pipeline(const RunConfig& cfg);

/// In-memory variant working on already-loaded artifacts.
RunResult run_pipeline_in_memory(const ModelGraph& fp, const ToyDataset& data, RunConfig cfg);

/// One ablation row: a named switch combination of the pipeline.
struct AblationRow {
  std::string name;
  bool use_pd, use_reg, use_dc, use_drop;
};

/// The standard option grid: feature reconstruction with drop (baseline),
/// PD-only, PD+Reg, baseline+DC, and the full method.
std::vector<AblationRow> standard_ablation_rows();

struct AblationCell {
  std::string row;
  uint64_t seed;
  double calib_acc, val_acc;
};

struct AblationReport {
  std::vector<AblationCell> cells;
  std::map<std::string, double> mean_val_acc;
  std::map<std::string, double> mean_calib_acc;
  std::map<std::string, double> mean_gap;
  std::string to_json() const;
};

/// Runs every row over `seeds`; each seed draws its own calibration sample.
/// Rows reuse the seed so row-to-row differences are option effects, not
/// sampling noise. Cells run in parallel.
AblationReport run_ablation(const ModelGraph& fp, const ToyDataset& data, const RunConfig& base,
                            const std::vector<AblationRow>& rows, const std::vector<uint64_t>& seeds,
                            int max_threads = 0);
void write_ablation_csv(const std::string& path, const AblationReport& report);

/// Metric-vs-factor sweep CSVs per layer (Fig-2 style artifact), with the
/// task-loss oracle column from the labeled calibration subset.
struct SweepCliConfig {
  std::vector<int> layers;  // empty: every quantizable layer
  int grid_points = 64;
  int act_bits = 2;
  int weight_bits = 2;
  bool weights_mode = false;  // sweep weight scales instead of activations
  WeightSweepScope scope = WeightSweepScope::SingleLayer;
  bool with_task_oracle = true;
};
std::vector<std::string> sweep_cli(const ModelGraph& m, const ToyDataset& data,
                                   const std::vector<int>& calib_idx, const SweepCliConfig& cfg,
                                   const std::string& out_dir);

/// Histogram dump (before/after distribution correction) of one unit's
/// input activations: CSV bin_left,bin_right,count_before,count_after.
void dc_preview(const ModelGraph& m, int unit, const Tensor& calib_x, const QuantOptions& opts,
                int bins, int chunk, const std::string& csv_path);

}  // namespace pdq
