// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "cpe/types.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace cpe {

enum class DistributionCase { Consistent, Uniform, Inverse };

const char* to_string(DistributionCase c);
DistributionCase distribution_case_from_string(const std::string& s);

/// Declarative description of a long-tailed labeled/unlabeled split.
///
/// Classes are indexed 0..C-1 in descending labeled-frequency order.
/// `n1` is the labeled count of class 0; `m1` is the unlabeled count of
/// class 0 (which is the most frequent unlabeled class in the consistent
/// and uniform cases, and the least frequent in the inverse case).
struct SplitSpec {
  int num_classes = 0;
  std::int64_t n1 = 0;
  std::int64_t m1 = 0;
  double gamma_l = 1.0;
  DistributionCase distribution_case = DistributionCase::Consistent;
  std::uint64_t seed = 0;

  /// The unlabeled imbalance ratio is fully determined by the case.
  double gamma_u() const;

  void validate() const;
};

/// Counts the unlabeled set would have per class under this spec.
std::vector<std::int64_t> unlabeled_counts_for(const SplitSpec& spec);

/// Ground-truth labels of the unlabeled samples. Kept behind a counting
/// accessor so tests can assert the training path never touches them.
class DiagnosticLabels {
 public:
  DiagnosticLabels() = default;
  explicit DiagnosticLabels(std::vector<int> labels) : labels_(std::move(labels)) {}

  int label_of(std::size_t i) const {
    ++access_count_;
    return labels_.at(i);
  }
  std::size_t size() const { return labels_.size(); }
  std::uint64_t access_count() const { return access_count_; }

  const std::vector<int>& raw_for_serialization() const { return labels_; }

 private:
  std::vector<int> labels_;
  mutable std::uint64_t access_count_ = 0;
};

/// A materialized split: which corpus rows are labeled (with their labels),
/// which are unlabeled, and the realized per-class counts.
struct SplitResult {
  SplitSpec spec;
  std::vector<std::pair<std::int64_t, int>> labeled;  // (sample id, class label)
  std::vector<std::int64_t> unlabeled_ids;
  DiagnosticLabels diagnostics;                        // aligned with unlabeled_ids
  std::vector<std::int64_t> labeled_counts;            // N_k
  std::vector<std::int64_t> unlabeled_counts;          // M_k
};

/// Exponential long-tail profile: counts[k] = round(n1 * gamma^(-k/(C-1))),
/// clamped to >= 1. counts[0] == n1 and counts[C-1] == round(n1/gamma).
std::vector<std::int64_t> longtail_counts(std::int64_t n1, double gamma, int num_classes);

/// max(counts) / min(counts).
double imbalance_ratio(const std::vector<std::int64_t>& counts);

/// Draws the labeled set first, then the unlabeled set from the remainder of
/// a single pool, per class, deterministically in (labels, spec). Throws with
/// the class index and shortfall when the corpus is too small.
SplitResult build_split(const std::vector<int>& corpus_labels, const SplitSpec& spec);

// Versioned on-disk manifest (JSON). Field names are stable; see README.
void write_manifest(const SplitResult& split, const std::filesystem::path& path);
SplitResult read_manifest(const std::filesystem::path& path);
std::string manifest_to_string(const SplitResult& split);
SplitResult manifest_from_string(const std::string& text);

}  // namespace cpe
