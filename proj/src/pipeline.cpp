#include "pdquant/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <mutex>

#include <json.hpp>

#include "pdquant/dist_correction.hpp"
#include "pdquant/parallel.hpp"

namespace pdq {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

json run_config_to_json(const RunConfig& c) {
  json j;
  j["model"] = c.model_path;
  j["dataset"] = c.dataset_path;
  j["out_dir"] = c.out_dir;
  j["seed"] = c.seed;
  j["calib_size"] = c.calib_size;
  j["mode"] = c.mode;
  j["scale_grid_points"] = c.scale_grid_points;
  j["weight_bits"] = c.recon.bits.weight_bits;
  j["act_bits"] = c.recon.bits.act_bits;
  j["first_last_8bit"] = c.recon.bits.first_last_8bit;
  j["extra_first_out_8bit"] = c.recon.bits.extra_first_output_8bit;
  j["lambda_r"] = c.recon.lambda_r;
  j["drop_prob"] = c.recon.drop_prob;
  j["lr_scale"] = c.recon.lr_scale;
  j["lr_round"] = c.recon.lr_round;
  j["iterations"] = c.recon.iterations;
  j["batch_size"] = c.recon.batch_size;
  j["round_weight"] = c.recon.round_weight;
  j["beta_start"] = c.recon.beta.beta_start;
  j["beta_end"] = c.recon.beta.beta_end;
  j["warmup"] = c.recon.beta.warmup;
  j["temperature"] = c.recon.pd_temperature;
  j["metric"] = metric_name(c.recon.pd_metric);
  j["use_pd"] = c.options.use_pd;
  j["use_reg"] = c.options.use_reg;
  j["use_dc"] = c.options.use_dc;
  j["use_drop"] = c.options.use_drop;
  j["dc_lambda_c"] = c.options.dc_lambda_c;
  j["dc_lr"] = c.options.dc_lr;
  j["dc_steps"] = c.options.dc_steps;
  j["cache_budget_mb"] = c.options.cache_budget_mb;
  return j;
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("model", c.model_path);
  get("dataset", c.dataset_path);
  get("out_dir", c.out_dir);
  get("seed", c.seed);
  get("calib_size", c.calib_size);
  get("mode", c.mode);
  get("scale_grid_points", c.scale_grid_points);
  get("weight_bits", c.recon.bits.weight_bits);
  get("act_bits", c.recon.bits.act_bits);
  get("first_last_8bit", c.recon.bits.first_last_8bit);
  get("extra_first_out_8bit", c.recon.bits.extra_first_output_8bit);
  get("lambda_r", c.recon.lambda_r);
  get("drop_prob", c.recon.drop_prob);
  get("lr_scale", c.recon.lr_scale);
  get("lr_round", c.recon.lr_round);
  get("iterations", c.recon.iterations);
  get("batch_size", c.recon.batch_size);
  get("round_weight", c.recon.round_weight);
  get("beta_start", c.recon.beta.beta_start);
  get("beta_end", c.recon.beta.beta_end);
  get("warmup", c.recon.beta.warmup);
  get("temperature", c.recon.pd_temperature);
  if (j.contains("metric")) c.recon.pd_metric = parse_metric(j.at("metric").get<std::string>());
  get("use_pd", c.options.use_pd);
  get("use_reg", c.options.use_reg);
  get("use_dc", c.options.use_dc);
  get("use_drop", c.options.use_drop);
  get("dc_lambda_c", c.options.dc_lambda_c);
  get("dc_lr", c.options.dc_lr);
  get("dc_steps", c.options.dc_steps);
  get("cache_budget_mb", c.options.cache_budget_mb);
  return c;
}

/// Nearest-rounding per-channel weight quantizers for every weighted layer
/// (scale-only mode: no rounding optimization).
void attach_nearest_weights(ModelGraph& m, const std::map<int, LayerBits>& bits) {
  for (int id : m.quantizable_layers()) {
    const Layer& l = m.layer_at(id);
    WeightQuant wq;
    wq.qp = compute_range_scale(l.weight, bits.at(id).weight_bits, 0, /*eps_fallback=*/true);
    Tensor mask(l.weight.shape());
    int64_t stride = l.weight.size() / l.weight.dim(0);
    for (int64_t i = 0; i < l.weight.size(); ++i) {
      float s = wq.qp.scales[static_cast<size_t>(i / stride)];
      float v = l.weight.at(i) / s;
      mask.data()[i] = (v - std::floor(v)) >= 0.5f ? 1.0f : 0.0f;
    }
    wq.round_mask = std::move(mask);
    m.quant->layers[id].weight = std::move(wq);
  }
}

}  // namespace

std::string RunConfig::to_json() const { return run_config_to_json(*this).dump(2); }

RunConfig RunConfig::from_json(const std::string& text) {
  return run_config_from_json(json::parse(text));
}

RunConfig RunConfig::from_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error(path + ": cannot open config");
  json j = json::parse(f, nullptr, true, true);  // allow comments
  return run_config_from_json(j);
}

std::string EvalReport::to_json() const {
  json j;
  j["fp_calib_acc"] = fp_calib_acc;
  j["fp_val_acc"] = fp_val_acc;
  j["quant_calib_acc"] = quant_calib_acc;
  j["quant_val_acc"] = quant_val_acc;
  j["overfit_gap"] = overfit_gap();
  j["wall_seconds"] = wall_seconds;
  j["divergence_flagged"] = divergence_flagged;
  j["mean_saturation"] = mean_saturation;
  return j.dump(2);
}

RunResult run_pipeline_in_memory(const ModelGraph& fp, const ToyDataset& data, RunConfig cfg) {
  require(cfg.mode == "reconstruct" || cfg.mode == "scale-only",
          "run_pipeline: mode must be 'reconstruct' or 'scale-only'");
  auto t0 = std::chrono::steady_clock::now();

  Rng master(cfg.seed);
  Rng calib_rng = master.fork(101);
  std::vector<int> calib_idx = sample_calibration(data, cfg.calib_size, calib_rng);
  Tensor calib_x = take_rows(data.train_x, calib_idx);
  std::vector<int> calib_y(calib_idx.size());
  for (size_t i = 0; i < calib_idx.size(); ++i) calib_y[i] = data.train_y[static_cast<size_t>(calib_idx[i])];

  LogSink progress;
  std::ofstream plog;
  if (!cfg.out_dir.empty()) {
    fs::create_directories(cfg.out_dir);
    plog.open(cfg.out_dir + "/progress.jsonl", std::ios::trunc);
    progress = [&plog](const std::string& line) { plog << line << "\n"; };
  }

  RunResult res;
  if (cfg.mode == "reconstruct") {
    QuantizeResult qr =
        quantize_model(fp, calib_x, cfg.recon, cfg.options, master.fork(202).next_u64(), progress);
    res.quantized = std::move(qr.model);
    res.report.divergence_flagged = qr.divergence_flagged;
    double sat = 0.0;
    for (const BlockState& u : qr.units) sat += u.saturation;
    res.report.mean_saturation = qr.units.empty() ? 1.0 : sat / static_cast<double>(qr.units.size());
  } else {
    // Scale-only: nearest-rounded weights plus grid-searched activation
    // scales, layer by layer from shallow to deep.
    res.quantized = fp;
    res.quantized.quant = ModelQuant{};
    std::map<int, LayerBits> bits = plan_bits(fp, cfg.recon.bits);
    attach_nearest_weights(res.quantized, bits);
    ScaleGrid grid = ScaleGrid::uniform(cfg.scale_grid_points);
    for (int id : res.quantized.quantizable_layers()) {
      QuantParams qp = search_activation_scale(res.quantized, id, calib_x, grid,
                                               cfg.recon.pd_metric, bits.at(id).act_bits);
      ActQuant aq;
      aq.qp = std::move(qp);
      res.quantized.quant->layers[id].act = std::move(aq);
    }
    res.report.mean_saturation = 1.0;
  }

  res.calib_indices = calib_idx;
  res.report.fp_calib_acc = evaluate_accuracy(fp, calib_x, calib_y, false);
  res.report.fp_val_acc = evaluate_accuracy(fp, data.val_x, data.val_y, false);
  res.report.quant_calib_acc = evaluate_accuracy(res.quantized, calib_x, calib_y, true);
  res.report.quant_val_acc = evaluate_accuracy(res.quantized, data.val_x, data.val_y, true);
  res.report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  if (!cfg.out_dir.empty()) {
    save_model(res.quantized, cfg.out_dir + "/quantized.pdqm");
    std::ofstream(cfg.out_dir + "/run_config.json") << cfg.to_json() << "\n";
    std::ofstream(cfg.out_dir + "/report.json") << res.report.to_json() << "\n";
  }
  return res;
}

RunResult run_pipeline(const RunConfig& cfg) {
  require(!cfg.model_path.empty() && !cfg.dataset_path.empty(),
          "run_pipeline: model and dataset paths are required");
  try {
    ModelGraph fp = load_model(cfg.model_path);
    ToyDataset data = load_dataset(cfg.dataset_path);
    return run_pipeline_in_memory(fp, data, cfg);
  } catch (const std::exception& e) {
    if (!cfg.out_dir.empty()) {
      fs::create_directories(cfg.out_dir);
      std::ofstream(cfg.out_dir + "/INCOMPLETE") << e.what() << "\n";
    }
    throw;
  }
}

std::vector<AblationRow> standard_ablation_rows() {
  return {
      {"reg_drop", false, true, false, true},      // feature-reconstruction baseline
      {"pd_only", true, false, false, false},      // prediction difference alone
      {"pd_reg", true, true, false, true},         // PD + regularization (+drop)
      {"reg_drop_dc", false, true, true, true},    // baseline + distribution correction
      {"pd_reg_dc", true, true, true, true},       // full method
  };
}

AblationReport run_ablation(const ModelGraph& fp, const ToyDataset& data, const RunConfig& base,
                            const std::vector<AblationRow>& rows, const std::vector<uint64_t>& seeds,
                            int max_threads) {
  require(!rows.empty() && !seeds.empty(), "run_ablation: rows and seeds must be non-empty");
  AblationReport report;
  report.cells.resize(rows.size() * seeds.size());
  parallel_for_indexed(
      static_cast<int64_t>(report.cells.size()),
      [&](int64_t i) {
        size_t r = static_cast<size_t>(i) / seeds.size();
        size_t s = static_cast<size_t>(i) % seeds.size();
        RunConfig cfg = base;
        cfg.out_dir.clear();  // cells stay in memory; the caller persists the table
        cfg.seed = seeds[s];
        cfg.options.use_pd = rows[r].use_pd;
        cfg.options.use_reg = rows[r].use_reg;
        cfg.options.use_dc = rows[r].use_dc;
        cfg.options.use_drop = rows[r].use_drop;
        RunResult rr = run_pipeline_in_memory(fp, data, cfg);
        report.cells[static_cast<size_t>(i)] =
            AblationCell{rows[r].name, seeds[s], rr.report.quant_calib_acc, rr.report.quant_val_acc};
      },
      max_threads);

  for (const AblationRow& row : rows) {
    double sv = 0.0, sc = 0.0;
    int n = 0;
    for (const AblationCell& c : report.cells) {
      if (c.row != row.name) continue;
      sv += c.val_acc;
      sc += c.calib_acc;
      ++n;
    }
    report.mean_val_acc[row.name] = sv / n;
    report.mean_calib_acc[row.name] = sc / n;
    report.mean_gap[row.name] = (sc - sv) / n;
  }
  return report;
}

std::string AblationReport::to_json() const {
  json j;
  j["mean_val_acc"] = mean_val_acc;
  j["mean_calib_acc"] = mean_calib_acc;
  j["mean_gap"] = mean_gap;
  json cells_j = json::array();
  for (const AblationCell& c : cells) {
    cells_j.push_back({{"row", c.row}, {"seed", c.seed}, {"calib_acc", c.calib_acc},
                       {"val_acc", c.val_acc}});
  }
  j["cells"] = std::move(cells_j);
  return j.dump(2);
}

void write_ablation_csv(const std::string& path, const AblationReport& report) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error(path + ": cannot open for writing");
  f << "row,seed,calib_acc,val_acc,gap\n";
  char line[192];
  for (const AblationCell& c : report.cells) {
    std::snprintf(line, sizeof(line), "%s,%llu,%.17g,%.17g,%.17g\n", c.row.c_str(),
                  static_cast<unsigned long long>(c.seed), c.calib_acc, c.val_acc,
                  c.calib_acc - c.val_acc);
    f << line;
  }
}

std::vector<std::string> sweep_cli(const ModelGraph& m, const ToyDataset& data,
                                   const std::vector<int>& calib_idx, const SweepCliConfig& cfg,
                                   const std::string& out_dir) {
  fs::create_directories(out_dir);
  Tensor calib_x = take_rows(data.train_x, calib_idx);
  std::vector<int> calib_y(calib_idx.size());
  for (size_t i = 0; i < calib_idx.size(); ++i) calib_y[i] = data.train_y[static_cast<size_t>(calib_idx[i])];

  std::vector<int> layers = cfg.layers.empty() ? m.quantizable_layers() : cfg.layers;
  ScaleGrid grid = ScaleGrid::uniform(cfg.grid_points);
  const int* labels = cfg.with_task_oracle ? calib_y.data() : nullptr;
  int64_t nlabels = cfg.with_task_oracle ? static_cast<int64_t>(calib_y.size()) : 0;

  std::vector<std::string> written;
  for (int id : layers) {
    std::vector<SweepRecord> records;
    std::string path;
    if (cfg.weights_mode) {
      records = sweep_weight_metrics(m, id, calib_x, grid, cfg.scope, cfg.weight_bits, labels,
                                     nlabels);
      path = out_dir + "/sweep_weight_layer" + std::to_string(id) + ".csv";
    } else {
      std::vector<MetricKind> metrics{MetricKind::LocalMse, MetricKind::LocalCosine,
                                      MetricKind::PdMse, MetricKind::PdCosine, MetricKind::PdKl};
      records = sweep_metrics(m, id, calib_x, grid, metrics, cfg.act_bits, labels, nlabels);
      path = out_dir + "/sweep_act_layer" + std::to_string(id) + ".csv";
    }
    write_sweep_csv(path, records);
    written.push_back(path);
  }
  return written;
}

void dc_preview(const ModelGraph& m, int unit, const Tensor& calib_x, const QuantOptions& opts,
                int bins, int chunk, const std::string& csv_path) {
  require(unit >= 0 && unit < m.num_units(), "dc_preview: unit out of range");
  require(bins >= 2, "dc_preview: need at least 2 bins");

  // FP chain input of the unit.
  Tensor input_fp = calib_x;
  for (int u = 0; u < unit; ++u) input_fp = forward_unit(m, u, input_fp);

  Tensor corrected(input_fp.shape());
  int64_t n = input_fp.dim(0);
  int64_t row = input_fp.size() / n;
  for (int64_t at = 0; at < n; at += chunk) {
    int64_t take = std::min<int64_t>(chunk, n - at);
    std::vector<int> idx(static_cast<size_t>(take));
    for (int64_t i = 0; i < take; ++i) idx[static_cast<size_t>(i)] = static_cast<int>(at + i);
    Tensor part = take_rows(input_fp, idx);
    CorrectionState st = make_correction_state(part, opts.dc_lambda_c, opts.dc_lr, opts.dc_steps);
    Tensor out = correct_distribution(m, unit, std::move(st)).corrected;
    std::copy(out.values().begin(), out.values().end(), corrected.data() + at * row);
  }

  float lo = input_fp.at(0), hi = input_fp.at(0);
  for (float v : input_fp.values()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  for (float v : corrected.values()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (!(hi > lo)) hi = lo + 1.0f;
  double width = (static_cast<double>(hi) - lo) / bins;
  std::vector<int64_t> before(static_cast<size_t>(bins), 0), after(static_cast<size_t>(bins), 0);
  auto bucket = [&](float v) {
    int b = static_cast<int>((static_cast<double>(v) - lo) / width);
    return std::clamp(b, 0, bins - 1);
  };
  for (float v : input_fp.values()) ++before[static_cast<size_t>(bucket(v))];
  for (float v : corrected.values()) ++after[static_cast<size_t>(bucket(v))];

  std::ofstream f(csv_path, std::ios::trunc);
  if (!f) throw std::runtime_error(csv_path + ": cannot open for writing");
  f << "bin_left,bin_right,count_before,count_after\n";
  char line[160];
  for (int b = 0; b < bins; ++b) {
    std::snprintf(line, sizeof(line), "%.9g,%.9g,%lld,%lld\n", lo + b * width, lo + (b + 1) * width,
                  static_cast<long long>(before[static_cast<size_t>(b)]),
                  static_cast<long long>(after[static_cast<size_t>(b)]));
    f << line;
  }
}

}  // namespace pdq
