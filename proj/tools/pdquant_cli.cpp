#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "pdquant/pipeline.hpp"

namespace fs = std::filesystem;
using namespace pdq;

namespace {

bool model_has_residual(const ModelGraph& m) {
  for (const Block& b : m.blocks) {
    if (b.residual) return true;
  }
  return false;
}

struct QuantizeFlags {
  std::string config_path;
  RunConfig cfg;
  // presence trackers for override-over-config semantics
  CLI::App* cmd = nullptr;

  void add_common(CLI::App* app) {
    cmd = app;
    app->add_option("--model", cfg.model_path, "FP model file (.pdqm)");
    app->add_option("--data", cfg.dataset_path, "dataset file (.pdqs)");
    app->add_option("--out-dir", cfg.out_dir, "run output directory");
    app->add_option("--config", config_path, "JSON run config; flags override its fields");
    app->add_option("--calib", cfg.calib_size, "calibration sample count");
    app->add_option("--w-bits", cfg.recon.bits.weight_bits, "weight bit-width");
    app->add_option("--a-bits", cfg.recon.bits.act_bits, "activation bit-width");
    app->add_flag("--no-first-last-8bit{false}", cfg.recon.bits.first_last_8bit,
                  "disable the 8-bit first/last layer policy");
    app->add_flag("--extra-first-out-8bit", cfg.recon.bits.extra_first_output_8bit,
                  "also keep the first layer's output activation at 8-bit");
    app->add_option("--iterations", cfg.recon.iterations, "optimization iterations per block");
    app->add_option("--batch-size", cfg.recon.batch_size, "optimization batch size");
    app->add_option("--lambda-r", cfg.recon.lambda_r, "regularization weight");
    app->add_option("--drop-prob", cfg.recon.drop_prob, "random drop probability");
    app->add_option("--lr-scale", cfg.recon.lr_scale, "activation scale learning rate");
    app->add_option("--lr-round", cfg.recon.lr_round, "rounding variable learning rate");
    app->add_option("--round-weight", cfg.recon.round_weight, "rounding regularizer weight");
    app->add_option("--temperature", cfg.recon.pd_temperature, "softmax temperature for PD loss");
    app->add_option("--metric",
                    [this](const std::vector<std::string>& v) {
                      cfg.recon.pd_metric = parse_metric(v.back());
                      return true;
                    },
                    "PD loss metric: pd_kl, pd_mse, pd_cosine");
    app->add_flag("--no-pd{false}", cfg.options.use_pd, "disable the prediction-difference term");
    app->add_flag("--no-reg{false}", cfg.options.use_reg, "disable the regularization term");
    app->add_flag("--no-dc{false}", cfg.options.use_dc, "disable distribution correction");
    app->add_flag("--no-drop{false}", cfg.options.use_drop, "disable random drop");
    app->add_option("--dc-lambda", cfg.options.dc_lambda_c, "DC statistic weight");
    app->add_option("--dc-lr", cfg.options.dc_lr, "DC learning rate");
    app->add_option("--dc-steps", cfg.options.dc_steps, "DC steps per chunk");
    app->add_option("--cache-budget-mb", cfg.options.cache_budget_mb,
                    "cache budget before spilling to disk");
    app->add_option("--scratch-dir", cfg.options.scratch_dir, "spill directory for caches");
    app->add_option("--mode", cfg.mode, "quantization mode: reconstruct | scale-only");
    app->add_option("--grid", cfg.scale_grid_points, "scale-only search grid resolution");
  }

  /// Resolve: config file first, then any flag the user actually passed.
  RunConfig resolve() {
    if (config_path.empty()) return cfg;
    RunConfig base = RunConfig::from_json_file(config_path);
    RunConfig out = base;
    auto took = [&](const std::string& name) { return cmd->count(name) > 0; };
    if (took("--model")) out.model_path = cfg.model_path;
    if (took("--data")) out.dataset_path = cfg.dataset_path;
    if (took("--out-dir")) out.out_dir = cfg.out_dir;
    if (took("--calib")) out.calib_size = cfg.calib_size;
    if (took("--w-bits")) out.recon.bits.weight_bits = cfg.recon.bits.weight_bits;
    if (took("--a-bits")) out.recon.bits.act_bits = cfg.recon.bits.act_bits;
    if (took("--no-first-last-8bit")) out.recon.bits.first_last_8bit = cfg.recon.bits.first_last_8bit;
    if (took("--extra-first-out-8bit"))
      out.recon.bits.extra_first_output_8bit = cfg.recon.bits.extra_first_output_8bit;
    if (took("--iterations")) out.recon.iterations = cfg.recon.iterations;
    if (took("--batch-size")) out.recon.batch_size = cfg.recon.batch_size;
    if (took("--lambda-r")) out.recon.lambda_r = cfg.recon.lambda_r;
    if (took("--drop-prob")) out.recon.drop_prob = cfg.recon.drop_prob;
    if (took("--lr-scale")) out.recon.lr_scale = cfg.recon.lr_scale;
    if (took("--lr-round")) out.recon.lr_round = cfg.recon.lr_round;
    if (took("--round-weight")) out.recon.round_weight = cfg.recon.round_weight;
    if (took("--temperature")) out.recon.pd_temperature = cfg.recon.pd_temperature;
    if (took("--metric")) out.recon.pd_metric = cfg.recon.pd_metric;
    if (took("--no-pd")) out.options.use_pd = cfg.options.use_pd;
    if (took("--no-reg")) out.options.use_reg = cfg.options.use_reg;
    if (took("--no-dc")) out.options.use_dc = cfg.options.use_dc;
    if (took("--no-drop")) out.options.use_drop = cfg.options.use_drop;
    if (took("--dc-lambda")) out.options.dc_lambda_c = cfg.options.dc_lambda_c;
    if (took("--dc-lr")) out.options.dc_lr = cfg.options.dc_lr;
    if (took("--dc-steps")) out.options.dc_steps = cfg.options.dc_steps;
    if (took("--cache-budget-mb")) out.options.cache_budget_mb = cfg.options.cache_budget_mb;
    if (took("--scratch-dir")) out.options.scratch_dir = cfg.options.scratch_dir;
    if (took("--mode")) out.mode = cfg.mode;
    if (took("--grid")) out.scale_grid_points = cfg.scale_grid_points;
    return out;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pdquant: post-training quantization by prediction-difference optimization"};
  app.require_subcommand(1);

  // ---- gen-data ----
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  DatasetSpec spec;
  std::string task = "clusters";
  std::string gen_out;
  gen->add_option("--task", task, "clusters | clusters-heavytail | shapes");
  gen->add_option("--out", gen_out, "output dataset file (.pdqs)")->required();
  gen->add_option("--classes", spec.classes);
  gen->add_option("--dim", spec.dim);
  gen->add_option("--image-size", spec.image_size);
  gen->add_option("--train-per-class", spec.train_per_class);
  gen->add_option("--val-per-class", spec.val_per_class);
  gen->add_option("--seed", spec.seed);
  gen->add_option("--center-std", spec.center_std);
  gen->add_option("--noise", spec.noise);
  gen->add_option("--signal-dims", spec.signal_dims);
  gen->add_option("--tail-scale", spec.tail_scale);
  gen->add_option("--noise-scale", spec.noise_scale);

  // ---- train-fp ----
  auto* train = app.add_subcommand("train-fp", "train the FP teacher on a dataset");
  std::string train_data, train_out, curve_out;
  TrainConfig tcfg;
  uint64_t train_seed = 0;
  train->add_option("--data", train_data, "dataset file")->required();
  train->add_option("--out", train_out, "output model file (.pdqm)")->required();
  train->add_option("--epochs", tcfg.epochs);
  train->add_option("--batch-size", tcfg.batch_size);
  train->add_option("--lr", tcfg.lr);
  train->add_option("--weight-decay", tcfg.weight_decay);
  train->add_option("--floor", tcfg.accuracy_floor, "required val accuracy in [0,1]");
  train->add_option("--seed", train_seed);
  train->add_option("--curve", curve_out, "optional CSV of per-epoch loss and val accuracy");

  // ---- quantize ----
  auto* quant = app.add_subcommand("quantize", "quantize an FP model");
  QuantizeFlags qf;
  qf.add_common(quant);
  quant->add_option("--seed", qf.cfg.seed, "run seed (drives calibration sampling and optimization)")
      ->required();

  // ---- eval ----
  auto* ev = app.add_subcommand("eval", "evaluate a model on a dataset split");
  std::string ev_model, ev_data, ev_split = "val";
  bool ev_fp = false;
  ev->add_option("--model", ev_model)->required();
  ev->add_option("--data", ev_data)->required();
  ev->add_option("--split", ev_split, "val | train");
  ev->add_flag("--fp", ev_fp, "ignore stored quantizers");

  // ---- sweep ----
  auto* sw = app.add_subcommand("sweep", "metric-vs-scale sweep CSVs");
  std::string sw_model, sw_data, sw_out;
  SweepCliConfig swcfg;
  int sw_calib = 1024;
  uint64_t sw_seed = 0;
  bool sw_no_oracle = false;
  sw->add_option("--model", sw_model)->required();
  sw->add_option("--data", sw_data)->required();
  sw->add_option("--out-dir", sw_out)->required();
  sw->add_option("--layer", swcfg.layers, "flat layer ids (default: all quantizable)");
  sw->add_option("--grid", swcfg.grid_points);
  sw->add_option("--a-bits", swcfg.act_bits);
  sw->add_option("--w-bits", swcfg.weight_bits);
  sw->add_flag("--weights", swcfg.weights_mode, "sweep weight scales instead of activations");
  bool sw_all_layers = false;
  sw->add_flag("--all-layers", sw_all_layers, "weight sweep: scale every layer jointly");
  sw->add_option("--calib", sw_calib);
  sw->add_option("--seed", sw_seed);
  sw->add_flag("--no-task-oracle", sw_no_oracle, "omit the labeled task-loss column");

  // ---- ablate ----
  auto* ab = app.add_subcommand("ablate", "run the option-grid ablation");
  QuantizeFlags af;
  af.add_common(ab);
  int ab_runs = 10;
  ab->add_option("--seed", af.cfg.seed, "base seed; runs use seed..seed+runs-1")->required();
  ab->add_option("--runs", ab_runs, "seeds per ablation row");
  int ab_threads = 0;
  ab->add_option("--threads", ab_threads, "parallel runs (0 = hardware)");

  // ---- dc-preview ----
  auto* dcp = app.add_subcommand("dc-preview", "histogram of activations before/after DC");
  std::string dc_model, dc_data, dc_out;
  int dc_unit = 1, dc_bins = 64, dc_calib = 1024, dc_chunk = 32;
  uint64_t dc_seed = 0;
  QuantOptions dc_opts;
  dcp->add_option("--model", dc_model)->required();
  dcp->add_option("--data", dc_data)->required();
  dcp->add_option("--out", dc_out, "output CSV")->required();
  dcp->add_option("--unit", dc_unit, "unit index (0 = stem, 1.. = blocks)");
  dcp->add_option("--bins", dc_bins);
  dcp->add_option("--calib", dc_calib);
  dcp->add_option("--chunk", dc_chunk, "samples per correction state");
  dcp->add_option("--seed", dc_seed);
  dcp->add_option("--dc-lambda", dc_opts.dc_lambda_c);
  dcp->add_option("--dc-lr", dc_opts.dc_lr);
  dcp->add_option("--dc-steps", dc_opts.dc_steps);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      spec.kind = parse_task(task);
      ToyDataset data = generate_dataset(spec);
      save_dataset(data, gen_out);
      std::cout << "wrote " << gen_out << " (" << data.train_size() << " train, " << data.val_size()
                << " val)\n";
    } else if (*train) {
      ToyDataset data = load_dataset(train_data);
      TrainResult tr = train_toy_fp(data, tcfg, train_seed);
      save_model(tr.model, train_out);
      if (!curve_out.empty()) {
        std::ofstream f(curve_out, std::ios::trunc);
        f << "epoch,train_loss,val_acc\n";
        for (size_t e = 0; e < tr.val_acc_curve.size(); ++e) {
          f << e << ',' << tr.train_loss_curve[e] << ',' << tr.val_acc_curve[e] << "\n";
        }
      }
      std::cout << "wrote " << train_out << " (val acc " << tr.val_acc_curve.back() * 100.0
                << "%)\n";
    } else if (*quant) {
      RunConfig cfg = qf.resolve();
      if (quant->count("--lambda-r") == 0 && qf.config_path.empty()) {
        cfg.recon.lambda_r = model_has_residual(load_model(cfg.model_path)) ? 0.2f : 0.1f;
      }
      RunResult rr = run_pipeline(cfg);
      std::cout << rr.report.to_json() << "\n";
    } else if (*ev) {
      ModelGraph m = load_model(ev_model);
      ToyDataset data = load_dataset(ev_data);
      const Tensor& x = ev_split == "train" ? data.train_x : data.val_x;
      const std::vector<int>& y = ev_split == "train" ? data.train_y : data.val_y;
      bool quantized = !ev_fp && m.quant.has_value();
      double acc = evaluate_accuracy(m, x, y, quantized);
      std::printf("{\"split\":\"%s\",\"quantized\":%s,\"top1_acc\":%.17g}\n", ev_split.c_str(),
                  quantized ? "true" : "false", acc);
    } else if (*sw) {
      ModelGraph m = load_model(sw_model);
      ToyDataset data = load_dataset(sw_data);
      swcfg.scope = sw_all_layers ? WeightSweepScope::AllLayers : WeightSweepScope::SingleLayer;
      swcfg.with_task_oracle = !sw_no_oracle;
      Rng rng(sw_seed);
      std::vector<int> calib_idx = sample_calibration(data, sw_calib, rng);
      for (const std::string& path : sweep_cli(m, data, calib_idx, swcfg, sw_out)) {
        std::cout << "wrote " << path << "\n";
      }
    } else if (*ab) {
      RunConfig cfg = af.resolve();
      if (ab->count("--lambda-r") == 0 && af.config_path.empty()) {
        cfg.recon.lambda_r = model_has_residual(load_model(cfg.model_path)) ? 0.2f : 0.1f;
      }
      ModelGraph m = load_model(cfg.model_path);
      ToyDataset data = load_dataset(cfg.dataset_path);
      std::vector<uint64_t> seeds;
      for (int i = 0; i < ab_runs; ++i) seeds.push_back(cfg.seed + static_cast<uint64_t>(i));
      AblationReport rep = run_ablation(m, data, cfg, standard_ablation_rows(), seeds, ab_threads);
      fs::create_directories(cfg.out_dir);
      write_ablation_csv(cfg.out_dir + "/ablation.csv", rep);
      std::ofstream(cfg.out_dir + "/ablation.json") << rep.to_json() << "\n";
      std::cout << rep.to_json() << "\n";
    } else if (*dcp) {
      ModelGraph m = load_model(dc_model);
      ToyDataset data = load_dataset(dc_data);
      Rng rng(dc_seed);
      std::vector<int> idx = sample_calibration(data, dc_calib, rng);
      dc_preview(m, dc_unit, take_rows(data.train_x, idx), dc_opts, dc_bins, dc_chunk, dc_out);
      std::cout << "wrote " << dc_out << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
