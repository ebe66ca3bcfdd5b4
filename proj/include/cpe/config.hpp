// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "cpe/data.hpp"
#include "cpe/datasets.hpp"
#include "cpe/model.hpp"
#include "cpe/trainer.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace cpe {

/// One experiment cell: dataset + split + model + training schedule + the
/// seed list. A run is reproducible from this snapshot plus the corpus.
struct ExperimentConfig {
  std::string output_dir = "runs/experiment";
  std::vector<std::uint64_t> seeds = {0, 1, 2};

  struct Dataset {
    std::string type = "gaussian_mixture";  // or "cifar10_bin"
    GaussianMixtureSpec gaussian;
    std::int64_t test_per_class = 150;
    std::string cifar_dir;
  } dataset;

  SplitSpec split;  // num_classes is filled from the dataset
  MlpEncoderConfig encoder{0, {64, 32}, 16};  // input_dim filled from the dataset
  int num_experts = 3;
  TrainConfig train;

  void validate() const;
  int num_classes() const;
  int input_dim() const;
};

ExperimentConfig experiment_config_from_json_text(const std::string& text);
std::string experiment_config_to_json_text(const ExperimentConfig& cfg);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
void save_experiment_config(const ExperimentConfig& cfg, const std::filesystem::path& path);

/// Materializes the training corpus named by the config (generates the
/// mixture, or loads CIFAR batches from disk).
Corpus build_corpus(const ExperimentConfig& cfg);

/// The class-balanced evaluation set for the config's dataset.
Corpus build_test_corpus(const ExperimentConfig& cfg);

/// Model configuration for one run of this experiment.
CpeModelConfig model_config_for(const ExperimentConfig& cfg);

}  // namespace cpe
