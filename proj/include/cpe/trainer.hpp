// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "cpe/augment.hpp"
#include "cpe/data.hpp"
#include "cpe/losses.hpp"
#include "cpe/metrics.hpp"
#include "cpe/model.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace cpe {

struct TrainConfig {
  int labeled_batch = 64;
  int unlabeled_batch = 128;
  double lambda = 2.0;
  double rho = 0.95;
  double learning_rate = 3e-2;  // constant; no warmup or decay
  double momentum = 0.9;
  double weight_decay = 5e-4;
  TauTriple taus;
  std::int64_t total_steps = 0;
  bool cbn_enabled = true;
  std::int64_t eval_interval = 0;  // 0 -> final evaluation only
  std::uint64_t seed = 0;
  AugmentConfig augment;

  void validate() const;
};

struct StepReport {
  std::int64_t step = 0;
  LossBundle losses;
  double learning_rate = 0.0;
};

std::string to_json_line(const StepReport& report);

/// SGD with momentum and decoupled-by-flag weight decay: BN scale/offset
/// parameters are never decayed. Velocities are keyed by parameter position,
/// so the same optimizer can follow a model across checkpoint reloads.
class Sgd {
 public:
  Sgd(double lr, double momentum, double weight_decay)
      : lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {}

  void step(const std::vector<ParamView>& params);

  double learning_rate() const { return lr_; }
  const std::vector<std::vector<double>>& velocities() const { return velocity_; }

  void serialize(std::ostream& out) const;
  void deserialize(std::istream& in);

 private:
  double lr_;
  double momentum_;
  double weight_decay_;
  std::vector<std::vector<double>> velocity_;
};

/// The trainer's view of a materialized split: features and labels for the
/// labeled set, features only for the unlabeled set.
struct TrainData {
  Mat labeled_x;
  std::vector<int> labeled_y;
  std::vector<std::int64_t> labeled_counts;  // per class, for the prior
  Mat unlabeled_x;
  std::vector<std::int64_t> unlabeled_ids;
};

TrainData make_train_data(const Mat& corpus_features, const SplitResult& split);

/// One optimizer step: pseudo-labels from the weak views, supervised loss on
/// the labeled batch (HMT branch only), unsupervised loss on the strong views
/// with CBN routing when enabled, then SGD on the summed gradients.
StepReport train_step(CpeModel& model, Sgd& opt, const Prior& prior,
                      const Mat& labeled_weak_x, std::span<const int> labels,
                      const Mat& unlabeled_weak_x, const Mat& unlabeled_strong_x,
                      const TrainConfig& cfg, std::int64_t step);

struct EvalData {
  Mat x;
  std::vector<int> y;
};

struct FitOptions {
  std::filesystem::path run_dir;  // empty -> no files written
  const EvalData* test = nullptr;
  /// Ground-truth labels of the unlabeled set, used only by the evaluation
  /// hooks (pseudo-label F1). The gradient path never sees them.
  const DiagnosticLabels* diagnostics = nullptr;
  std::optional<std::filesystem::path> resume_from;
};

struct FitResult {
  std::vector<StepReport> reports;
  std::optional<double> final_test_accuracy;
  std::optional<GroupF1Report> final_pseudo_f1;
};

/// Runs total_steps training steps with deterministically reshuffled labeled
/// epochs and an independently cycling unlabeled iterator. Batch contents and
/// augmentations are pure functions of (seed, step), which is what makes a
/// resumed run bit-identical to an uninterrupted one.
FitResult fit(CpeModel& model, const TrainData& data, const TrainConfig& cfg,
              const FitOptions& opts = {});

void save_checkpoint(const std::filesystem::path& path, const CpeModel& model,
                     const Sgd& opt, std::int64_t step);

struct TrainerCheckpoint {
  CpeModel model;
  Sgd opt{0.0, 0.0, 0.0};
  std::int64_t step = 0;
};

TrainerCheckpoint load_checkpoint(const std::filesystem::path& path);

/// Deterministic infinite stream of row indices: the concatenation of
/// per-epoch Fisher-Yates permutations derived from (seed, tag, epoch).
class EpochStream {
 public:
  EpochStream(std::size_t n, std::uint64_t seed, std::string tag);
  std::size_t at(std::uint64_t pos);

 private:
  std::size_t n_;
  std::uint64_t seed_;
  std::string tag_;
  std::uint64_t cached_epoch_;
  std::vector<std::size_t> perm_;
  void load_epoch(std::uint64_t epoch);
};

}  // namespace cpe
