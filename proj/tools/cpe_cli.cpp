// SPDX-License-Identifier: Apache-2.0
//
// Config-driven entry points for the CPE harness:
//   cpe prepare --config cfg.json          materialize split manifests
//   cpe train   --config cfg.json          run training for each seed
//   cpe eval    --run runs/exp/seed_0      re-evaluate a finished run
//   cpe report  --runs <dir...> --out dir  tables and figures from metrics logs

#include "cpe/config.hpp"
#include "cpe/report.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

cpe::SplitSpec split_for_seed(const cpe::ExperimentConfig& cfg, std::uint64_t seed) {
  cpe::SplitSpec spec = cfg.split;
  spec.num_classes = cfg.num_classes();
  spec.seed = seed;
  return spec;
}

fs::path seed_dir(const cpe::ExperimentConfig& cfg, std::uint64_t seed) {
  return fs::path(cfg.output_dir) / ("seed_" + std::to_string(seed));
}

int cmd_prepare(const std::string& config_path) {
  const auto cfg = cpe::load_experiment_config(config_path);
  cfg.validate();
  const auto corpus = cpe::build_corpus(cfg);
  fs::create_directories(cfg.output_dir);
  for (const auto seed : cfg.seeds) {
    const auto split = cpe::build_split(corpus.labels, split_for_seed(cfg, seed));
    const auto path = fs::path(cfg.output_dir) / ("manifest_seed_" + std::to_string(seed) + ".json");
    cpe::write_manifest(split, path);
    std::cout << "wrote " << path.string() << " (labeled=" << split.labeled.size()
              << ", unlabeled=" << split.unlabeled_ids.size() << ")\n";
  }
  return 0;
}

void run_one_seed(const cpe::ExperimentConfig& cfg, std::uint64_t seed,
                  const cpe::Corpus& corpus, const cpe::Corpus& test, bool resume) {
  const auto dir = seed_dir(cfg, seed);
  fs::create_directories(dir);

  auto split = cpe::build_split(corpus.labels, split_for_seed(cfg, seed));
  cpe::write_manifest(split, dir / "manifest.json");

  cpe::ExperimentConfig snapshot = cfg;
  snapshot.seeds = {seed};
  snapshot.split.seed = seed;
  snapshot.train.seed = seed;
  cpe::save_experiment_config(snapshot, dir / "config.json");

  cpe::CpeModel model(cpe::model_config_for(cfg), seed);
  auto data = cpe::make_train_data(corpus.features, split);

  cpe::EvalData eval{test.features, test.labels};
  cpe::TrainConfig train_cfg = cfg.train;
  train_cfg.seed = seed;

  cpe::FitOptions opts;
  opts.run_dir = dir;
  opts.test = &eval;
  opts.diagnostics = &split.diagnostics;
  const auto ckpt = dir / "checkpoint.bin";
  if (resume && fs::exists(ckpt)) opts.resume_from = ckpt;

  const auto result = cpe::fit(model, data, train_cfg, opts);

  json summary{{"seed", seed}, {"steps", train_cfg.total_steps}};
  if (result.final_test_accuracy) summary["test_top1"] = *result.final_test_accuracy;
  if (result.final_pseudo_f1) {
    json f1 = json::array();
    for (const auto& e : result.final_pseudo_f1->experts)
      f1.push_back(json{{"head", e.head}, {"medium", e.medium}, {"tail", e.tail},
                        {"overall", e.overall}});
    summary["pseudo_f1"] = f1;
  }
  std::ofstream out(dir / "summary.json");
  out << summary.dump(2) << '\n';

  std::cout << "seed " << seed << ": done";
  if (result.final_test_accuracy) std::cout << ", test top-1 " << *result.final_test_accuracy;
  std::cout << '\n';
}

int cmd_train(const std::string& config_path, bool no_cbn, bool single_expert,
              int seeds_override, bool dry_run, bool resume) {
  auto cfg = cpe::load_experiment_config(config_path);
  if (no_cbn) cfg.train.cbn_enabled = false;
  if (single_expert) cfg.num_experts = 1;
  if (seeds_override > 0) {
    cfg.seeds.clear();
    for (int s = 0; s < seeds_override; ++s) cfg.seeds.push_back(static_cast<std::uint64_t>(s));
  }
  cfg.validate();

  if (dry_run) {
    // Validate the split arithmetic without touching the corpus.
    for (const auto seed : cfg.seeds) {
      const auto spec = split_for_seed(cfg, seed);
      const auto n = cpe::longtail_counts(spec.n1, spec.gamma_l, spec.num_classes);
      const auto m = cpe::unlabeled_counts_for(spec);
      std::cout << "seed " << seed << ": N1=" << n.front() << " N_C=" << n.back()
                << " M1=" << m.front() << " M_C=" << m.back() << '\n';
    }
    std::cout << "config ok\n";
    return 0;
  }

  const auto corpus = cpe::build_corpus(cfg);
  const auto test = cpe::build_test_corpus(cfg);
  std::vector<double> accuracies;
  for (const auto seed : cfg.seeds) {
    run_one_seed(cfg, seed, corpus, test, resume);
    std::ifstream in(seed_dir(cfg, seed) / "summary.json");
    json summary;
    in >> summary;
    if (summary.contains("test_top1")) accuracies.push_back(summary["test_top1"].get<double>());
  }

  if (!accuracies.empty()) {
    double mean = 0.0;
    for (double a : accuracies) mean += a;
    mean /= accuracies.size();
    double ss = 0.0;
    for (double a : accuracies) ss += (a - mean) * (a - mean);
    const double stddev = std::sqrt(ss / accuracies.size());
    json agg{{"runs", accuracies.size()}, {"test_top1_mean", mean}, {"test_top1_std", stddev}};
    std::ofstream out(fs::path(cfg.output_dir) / "aggregate.json");
    out << agg.dump(2) << '\n';
    std::cout << "aggregate test top-1: " << mean << " +/- " << stddev << " over "
              << accuracies.size() << " seeds\n";
  }
  return 0;
}

int cmd_eval(const std::string& run_dir) {
  const fs::path dir(run_dir);
  const auto cfg = cpe::load_experiment_config(dir / "config.json");
  const auto ckpt = cpe::load_checkpoint(dir / "checkpoint.bin");

  const auto test = cpe::build_test_corpus(cfg);
  const auto preds = ckpt.model.predict(test.features);
  const double acc = cpe::top1_accuracy(preds, test.labels);
  json out{{"checkpoint_step", ckpt.step}, {"test_top1", acc}};
  std::ofstream f(dir / "eval.json");
  f << out.dump(2) << '\n';
  std::cout << out.dump() << '\n';
  return 0;
}

int cmd_report(const std::vector<std::string>& run_dirs, const std::string& out_dir) {
  std::vector<fs::path> dirs(run_dirs.begin(), run_dirs.end());
  cpe::write_report(dirs, out_dir);
  std::cout << "report written to " << out_dir << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ComPlementary Experts (CPE) harness for long-tailed semi-supervised learning"};
  app.require_subcommand(1);

  std::string config_path;
  std::string run_dir;
  std::vector<std::string> run_dirs;
  std::string out_dir = "report";
  bool no_cbn = false, single_expert = false, dry_run = false, resume = false;
  int seeds_override = 0;

  auto* prepare = app.add_subcommand("prepare", "materialize split manifests");
  prepare->add_option("--config", config_path, "experiment config (JSON)")->required();

  auto* train = app.add_subcommand("train", "train one run per seed");
  train->add_option("--config", config_path, "experiment config (JSON)")->required();
  train->add_flag("--no-cbn", no_cbn, "disable classwise batch normalization");
  train->add_flag("--single-expert", single_expert, "single head ablation (FixMatch control)");
  train->add_option("--seeds", seeds_override, "override: run seeds 0..K-1");
  train->add_flag("--dry-run", dry_run, "validate the config without training");
  train->add_flag("--resume", resume, "resume each seed from its checkpoint");

  auto* eval = app.add_subcommand("eval", "evaluate a finished run directory");
  eval->add_option("--run", run_dir, "run directory (seed_<s>)")->required();

  auto* report = app.add_subcommand("report", "tables + figures from metrics logs");
  report->add_option("--runs", run_dirs, "run directories")->required()->expected(-1);
  report->add_option("--out", out_dir, "output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (prepare->parsed()) return cmd_prepare(config_path);
    if (train->parsed())
      return cmd_train(config_path, no_cbn, single_expert, seeds_override, dry_run, resume);
    if (eval->parsed()) return cmd_eval(run_dir);
    if (report->parsed()) return cmd_report(run_dirs, out_dir);
  } catch (const std::exception& e) {
    json err{{"error", {{"type", "runtime"}, {"message", e.what()}}}};
    std::cerr << err.dump() << '\n';
    return 1;
  }
  return 1;
}
