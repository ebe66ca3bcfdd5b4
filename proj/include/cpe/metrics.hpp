// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "cpe/data.hpp"
#include "cpe/model.hpp"
#include "cpe/types.hpp"

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace cpe {

/// Macro-averaged pseudo-label F1 per class group, one row per expert.
/// Computed over every unlabeled sample regardless of mask status; classes
/// with neither predictions nor ground truth are left out of the mean.
struct GroupF1Report {
  struct PerExpert {
    double head = 0.0;
    double medium = 0.0;
    double tail = 0.0;
    double overall = 0.0;
  };
  std::vector<PerExpert> experts;
};

/// Per-class F1 from (prediction, truth) pairs; groups averaged unweighted.
GroupF1Report groupwise_f1(const std::vector<std::vector<int>>& pseudo_per_expert,
                           std::span<const int> true_labels, const ClassGroups& groups);

/// Record-based convenience overload; every record must carry its true label.
GroupF1Report groupwise_f1(const std::vector<std::vector<PseudoLabelRecord>>& records,
                           const ClassGroups& groups);

double top1_accuracy(std::span<const int> predictions, std::span<const int> labels);

using ConfusionMatrix = Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>;

/// Rows are true classes, columns predictions; entries sum to the sample count.
ConfusionMatrix confusion_matrix(std::span<const int> predictions,
                                 std::span<const int> labels, int num_classes);

/// Numerically stable one-pass mean/variance accumulator (per channel).
class OnlineMoments {
 public:
  explicit OnlineMoments(Index channels)
      : n_(0), mean_(Vec::Zero(channels)), m2_(Vec::Zero(channels)) {}

  void add(const Vec& row);
  std::int64_t count() const { return n_; }
  const Vec& mean() const { return mean_; }
  /// Population (biased) standard deviation, matching BN running statistics.
  Vec std_population() const;

 private:
  std::int64_t n_;
  Vec mean_;
  Vec m2_;
};

/// Per-channel encoder-feature statistics, split by class group and by
/// labeled/unlabeled origin.
struct FeatureStats {
  struct Cell {
    Vec mean;
    Vec stddev;
    std::int64_t count = 0;
  };
  // key: (group name, "labeled"|"unlabeled")
  std::map<std::pair<std::string, std::string>, Cell> cells;
};

FeatureStats feature_stats(const CpeModel& model, const Mat& labeled_x,
                           std::span<const int> labeled_y, const Mat& unlabeled_x,
                           const DiagnosticLabels& unlabeled_truth,
                           const ClassGroups& groups);

/// Pseudo-label records for a whole unlabeled set (diagnostics path: raw
/// samples, frozen statistics). True labels filled when `diag` is given.
std::vector<std::vector<PseudoLabelRecord>> collect_pseudo_records(
    const CpeModel& model, const Mat& unlabeled_x, std::span<const std::int64_t> ids,
    double rho, const DiagnosticLabels* diag);

/// Line-delimited metrics log, one JSON record per (step, metric, expert,
/// group) key. The report CLI reads only these files.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::filesystem::path& path, bool append = false);
  ~MetricsWriter();

  void append(std::int64_t step, const std::string& metric, int expert,
              const std::string& group, double value);
  void append_channel(std::int64_t step, const std::string& metric, int channel,
                      const std::string& group, const std::string& origin, double value);
  void append_confusion(std::int64_t step, int expert, int row, int col,
                        std::int64_t count);

 private:
  std::FILE* file_ = nullptr;
};

}  // namespace cpe
