// SPDX-License-Identifier: Apache-2.0
//
// cdmoe: desk-scale MoE condensation pipeline.
//
//   cdmoe pretrain       --config run.cfg --out run/
//   cdmoe calibrate      --config run.cfg --out run/
//   cdmoe select-experts --config run.cfg --out run/
//   cdmoe select-layers  --config run.cfg --out run/
//   cdmoe condense       --config run.cfg --out run/
//   cdmoe eval           --config run.cfg --out run/ --checkpoint condensed
//   cdmoe sft            --config run.cfg --out run/
//   cdmoe sweep          --config run.cfg --out run/
//   cdmoe report         --config run.cfg --out run/

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "cdmoe/pipeline.hpp"

namespace {

// distinct exit codes per failure family, with one machine-parsable line
enum ExitCode {
  kOk = 0,
  kUnknown = 1,
  kConfig = 2,
  kIo = 3,
  kCorruption = 4,
  kNeverActivated = 5,
  kUsage = 6,
  kNumeric = 7,
};

int fail(const char* code_name, int code, const std::string& message) {
  std::cerr << "error code=" << code_name << " message=\"" << message
            << "\"\n";
  return code;
}

struct CommonArgs {
  std::string config_path;
  std::string out_dir = "run";
  std::optional<std::uint64_t> seed_override;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "run configuration file")
      ->required();
  cmd->add_option("--out", args.out_dir, "run output directory");
  cmd->add_option("--seed", args.seed_override, "override the config seed");
}

cdmoe::RunConfig load_config(const CommonArgs& args) {
  cdmoe::RunConfig cfg = cdmoe::load_run_config(args.config_path);
  if (args.seed_override.has_value()) cfg.seed = *args.seed_override;
  return cfg;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"CD-MoE condensation toolkit"};
  app.require_subcommand(1);

  CommonArgs pretrain_args, calibrate_args, sel_exp_args, sel_lay_args,
      condense_args, sft_args, eval_args, sweep_args, report_args;
  std::optional<int> pretrain_steps, sft_steps, keep_override, k_override;
  bool force_never_activated = false;
  bool measure_throughput = false;
  std::string eval_checkpoint = "model";
  std::string eval_label;

  auto* pretrain = app.add_subcommand(
      "pretrain", "generate corpora, train the toy MoE, save a checkpoint");
  add_common(pretrain, pretrain_args);
  pretrain->add_option("--steps", pretrain_steps, "override pretrain steps");

  auto* calibrate = app.add_subcommand(
      "calibrate", "sample the calibration set from the corpus");
  add_common(calibrate, calibrate_args);

  auto* sel_exp = app.add_subcommand(
      "select-experts", "pick the keep-set of routing experts per layer");
  add_common(sel_exp, sel_exp_args);
  sel_exp->add_option("--experts-per-layer", keep_override,
                      "override keep count per condensed layer");

  auto* sel_lay =
      app.add_subcommand("select-layers", "pick which layers to condense");
  add_common(sel_lay, sel_lay_args);
  sel_lay->add_option("--k-layers", k_override,
                      "override the number of layers to condense");

  auto* condense = app.add_subcommand(
      "condense", "materialize the condensed checkpoint from the plans");
  add_common(condense, condense_args);
  condense->add_flag("--force-never-activated", force_never_activated,
                     "keep never-activated experts with fixed gate 1/N");

  auto* sft =
      app.add_subcommand("sft", "fine-tune only the condensed layers");
  add_common(sft, sft_args);
  sft->add_option("--steps", sft_steps, "override sft steps");

  auto* eval = app.add_subcommand("eval", "perplexity + cost report");
  add_common(eval, eval_args);
  eval->add_option("--checkpoint", eval_checkpoint,
                   "which checkpoint: model | condensed | sft | <base path>");
  eval->add_option("--label", eval_label,
                   "artifact label (default: derived from --checkpoint)");
  eval->add_flag("--measure-throughput", measure_throughput,
                 "time a fixed 2048-token single-threaded workload");

  auto* sweep = app.add_subcommand(
      "sweep", "per-layer divergence sweep CSV (layer_index,js,kl,ppl_delta)");
  add_common(sweep, sweep_args);

  auto* report = app.add_subcommand(
      "report", "aggregate run artifacts into report.json / report.txt");
  add_common(report, report_args);

  CLI11_PARSE(app, argc, argv);

  try {
    if (pretrain->parsed()) {
      cdmoe::RunPaths paths(pretrain_args.out_dir);
      cdmoe::run_pretrain(load_config(pretrain_args), paths, pretrain_steps);
    } else if (calibrate->parsed()) {
      cdmoe::RunPaths paths(calibrate_args.out_dir);
      cdmoe::run_calibrate(load_config(calibrate_args), paths);
    } else if (sel_exp->parsed()) {
      cdmoe::RunPaths paths(sel_exp_args.out_dir);
      cdmoe::run_select_experts(load_config(sel_exp_args), paths,
                                keep_override);
    } else if (sel_lay->parsed()) {
      cdmoe::RunPaths paths(sel_lay_args.out_dir);
      cdmoe::run_select_layers(load_config(sel_lay_args), paths, k_override);
    } else if (condense->parsed()) {
      cdmoe::RunPaths paths(condense_args.out_dir);
      cdmoe::run_condense(load_config(condense_args), paths,
                          force_never_activated, &std::cerr);
    } else if (sft->parsed()) {
      cdmoe::RunPaths paths(sft_args.out_dir);
      cdmoe::run_sft(load_config(sft_args), paths, sft_steps);
    } else if (eval->parsed()) {
      cdmoe::RunPaths paths(eval_args.out_dir);
      std::string base = eval_checkpoint;
      std::string label = eval_label;
      if (eval_checkpoint == "model") {
        base = paths.pretrained();
        if (label.empty()) label = "pretrained";
      } else if (eval_checkpoint == "condensed") {
        base = paths.condensed();
        if (label.empty()) label = "condensed";
      } else if (eval_checkpoint == "sft") {
        base = paths.sft();
        if (label.empty()) label = "sft";
      } else if (label.empty()) {
        label = "eval";
      }
      cdmoe::run_eval(load_config(eval_args), paths, base, label,
                      measure_throughput);
    } else if (sweep->parsed()) {
      cdmoe::RunPaths paths(sweep_args.out_dir);
      cdmoe::run_sweep(load_config(sweep_args), paths);
    } else if (report->parsed()) {
      cdmoe::RunPaths paths(report_args.out_dir);
      cdmoe::run_report(load_config(report_args), paths);
    }
  } catch (const cdmoe::ConfigError& e) {
    return fail("config", kConfig, e.what());
  } catch (const cdmoe::IoError& e) {
    return fail("io", kIo, e.what());
  } catch (const cdmoe::CorruptionError& e) {
    return fail("corruption", kCorruption, e.what());
  } catch (const cdmoe::VersionError& e) {
    return fail("version", kCorruption, e.what());
  } catch (const cdmoe::NeverActivatedError& e) {
    return fail("never_activated", kNeverActivated, e.what());
  } catch (const cdmoe::NumericError& e) {
    return fail("numeric", kNumeric, e.what());
  } catch (const cdmoe::DegenerateSpectrumError& e) {
    return fail("degenerate_spectrum", kNumeric, e.what());
  } catch (const cdmoe::ShapeError& e) {
    return fail("usage", kUsage, e.what());
  } catch (const cdmoe::ArgumentError& e) {
    return fail("usage", kUsage, e.what());
  } catch (const cdmoe::StateError& e) {
    return fail("usage", kUsage, e.what());
  } catch (const std::exception& e) {
    return fail("unknown", kUnknown, e.what());
  }
  return kOk;
}
