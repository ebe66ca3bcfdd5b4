// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "cpe/losses.hpp"
#include "cpe/types.hpp"

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace cpe {

/// Flat view of one parameter tensor and its gradient accumulator.
struct ParamView {
  std::string name;
  bool bn_affine = false;  // BN scale/offset; excluded from weight decay
  double* value = nullptr;
  double* grad = nullptr;
  std::ptrdiff_t size = 0;
};

class Linear {
 public:
  Linear() = default;
  Linear(int in_dim, int out_dim, std::mt19937_64& rng);

  Mat forward(const Mat& x) const { return (x * weight_.transpose()).rowwise() + bias_.transpose(); }

  /// Accumulates parameter gradients; returns d(loss)/d(input).
  Mat backward(const Mat& input, const Mat& d_out);

  int in_dim() const { return static_cast<int>(weight_.cols()); }
  int out_dim() const { return static_cast<int>(weight_.rows()); }

  Mat& weight() { return weight_; }
  Vec& bias() { return bias_; }
  const Mat& weight() const { return weight_; }
  const Vec& bias() const { return bias_; }

  void zero_grads();
  void collect_params(const std::string& prefix, std::vector<ParamView>& out);

 private:
  Mat weight_;  // [out x in]
  Vec bias_;
  Mat d_weight_;
  Vec d_bias_;
};

/// Batch normalization over feature channels with support for normalizing a
/// subset of the batch (the rows a CBN branch is routed). Normalization uses
/// the population (biased) variance, and running statistics blend with
/// momentum from their (0, 1) initialization.
class BatchNorm {
 public:
  BatchNorm() = default;
  BatchNorm(int channels, double momentum, double eps);

  struct Ctx {
    std::vector<Index> active;
    Vec mean;
    Vec invstd;
    Mat xhat;  // full batch, normalized with the active subset's statistics
  };

  /// Train-mode forward: statistics over `active` rows; every row of the
  /// output is normalized with those statistics. Updates running statistics
  /// from the subset when `update_stats` is set.
  Mat forward_train(const Mat& x, const std::vector<Index>& active, bool update_stats,
                    Ctx* ctx);

  /// Eval-mode forward under running statistics. Throws if no training batch
  /// has ever updated this branch.
  Mat forward_eval(const Mat& x) const;

  /// Pseudo-label convention: running statistics once available, otherwise
  /// the batch's own statistics; never updates anything.
  Mat forward_frozen(const Mat& x) const;

  /// Accumulates scale/offset gradients; d_out must be zero on rows outside
  /// the context's active set (they did not contribute to the statistics).
  Mat backward(const Ctx& ctx, const Mat& d_out);

  int channels() const { return static_cast<int>(gamma_.size()); }
  std::int64_t batches_seen() const { return batches_seen_; }
  const Vec& running_mean() const { return running_mean_; }
  const Vec& running_var() const { return running_var_; }
  Vec& mutable_running_mean() { return running_mean_; }
  Vec& mutable_running_var() { return running_var_; }
  void set_batches_seen(std::int64_t n) { batches_seen_ = n; }
  Vec& gamma() { return gamma_; }
  Vec& beta() { return beta_; }

  void zero_grads();
  void collect_params(const std::string& prefix, std::vector<ParamView>& out);

 private:
  Vec gamma_, beta_;
  Vec d_gamma_, d_beta_;
  Vec running_mean_, running_var_;
  std::int64_t batches_seen_ = 0;
  double momentum_ = 0.1;
  double eps_ = 1e-5;
};

struct MlpEncoderConfig {
  int input_dim = 0;
  std::vector<int> hidden;
  int feature_dim = 0;
};

/// Fully-connected encoder: Linear/ReLU stack with a linear feature output.
class MlpEncoder {
 public:
  MlpEncoder() = default;
  MlpEncoder(const MlpEncoderConfig& cfg, std::mt19937_64& rng);

  struct Ctx {
    std::vector<Mat> inputs;   // input to each layer
    std::vector<Mat> preacts;  // pre-activation output of each layer
  };

  Mat forward(const Mat& x, Ctx* ctx = nullptr) const;
  Mat backward(const Ctx& ctx, const Mat& d_features);

  const MlpEncoderConfig& config() const { return cfg_; }
  std::vector<Linear>& layers() { return layers_; }

  void zero_grads();
  void collect_params(std::vector<ParamView>& out);

 private:
  MlpEncoderConfig cfg_;
  std::vector<Linear> layers_;
};

enum class ForwardMode { Train, Eval };

struct CpeModelConfig {
  int num_classes = 0;
  int num_experts = 3;  // 1 for the FixMatch-control / CBN-only ablations
  MlpEncoderConfig encoder;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;
};

/// Active row sets per CBN branch. HMT processes every row; MT and T process
/// the rows whose pseudo-label (from any expert) falls in their class groups.
struct BranchMasks {
  std::array<std::vector<Index>, kNumBranches> active;
  static BranchMasks all(Index batch);
};

/// logits[branch][expert], each [B x C]. Branches that were not run hold
/// empty matrices (their `ran` flag is false).
struct BranchExpertLogits {
  std::array<std::vector<Mat>, kNumBranches> logits;
  std::array<bool, kNumBranches> ran = {false, false, false};
};

struct ForwardCache {
  MlpEncoder::Ctx encoder;
  Mat features;
  std::array<BatchNorm::Ctx, kNumBranches> bn;
  std::array<Mat, kNumBranches> normalized;
  std::array<bool, kNumBranches> ran = {false, false, false};
};

/// Per-expert pseudo-label outputs for one unlabeled batch.
struct PseudoOutputs {
  std::vector<std::vector<int>> labels;  // [expert][sample]
  std::vector<Vec> confidences;          // [expert](sample)
};

/// One pseudo-label decision, for the diagnostics log.
struct PseudoLabelRecord {
  std::int64_t sample_id = -1;
  int expert = 0;  // 0-based
  int pseudo_label = 0;
  double confidence = 0.0;
  bool passed_mask = false;
  int true_label = -1;  // diagnostics only; -1 when withheld
};

/// Shared encoder, three classwise BN branches, and the expert heads.
/// Inference is pinned to the second expert over the HMT branch.
class CpeModel {
 public:
  CpeModel() = default;
  CpeModel(const CpeModelConfig& cfg, std::uint64_t seed);

  /// Encoder runs once per row; each branch normalizes the same features and
  /// every expert maps every branch output. In train mode, statistics come
  /// from each branch's active rows; in eval mode, from running statistics.
  BranchExpertLogits forward_branches(const Mat& x, ForwardMode mode,
                                      const BranchMasks* masks = nullptr,
                                      ForwardCache* cache = nullptr,
                                      bool update_stats = true);

  /// Gradient of the branch/expert logits table back to the input. Expert
  /// and BN parameter gradients accumulate; returns d(loss)/d(features)
  /// through the encoder to the input rows.
  Mat backward_branches(const ForwardCache& cache,
                        const std::array<std::vector<Mat>, kNumBranches>& d_logits);

  /// Argmax pseudo-labels and max-softmax confidences per expert from the
  /// HMT branch. Mutates nothing: running statistics when available,
  /// batch statistics on a never-trained model.
  PseudoOutputs pseudo_forward(const Mat& weak_x) const;

  /// Eval-mode class predictions: argmax of the evaluation expert over the
  /// HMT branch.
  std::vector<int> predict(const Mat& x) const;

  /// Eval-mode logits of one expert over the HMT branch.
  Mat eval_logits(const Mat& x, int expert) const;

  /// Raw encoder outputs (pre-BN), for feature diagnostics.
  Mat encoder_features(const Mat& x) const;

  int num_classes() const { return cfg_.num_classes; }
  int num_experts() const { return cfg_.num_experts; }
  int feature_dim() const { return cfg_.encoder.feature_dim; }
  int eval_expert() const { return cfg_.num_experts == 1 ? 0 : 1; }
  const ClassGroups& groups() const { return groups_; }
  const CpeModelConfig& config() const { return cfg_; }

  MlpEncoder& encoder() { return encoder_; }
  BatchNorm& bn(Branch b) { return bn_[static_cast<std::size_t>(b)]; }
  const BatchNorm& bn(Branch b) const { return bn_[static_cast<std::size_t>(b)]; }
  Linear& expert(int i) { return experts_.at(static_cast<std::size_t>(i)); }
  const Linear& expert(int i) const { return experts_.at(static_cast<std::size_t>(i)); }

  std::vector<ParamView> params();
  void zero_grads();

  /// Rows pushed through the encoder since construction; tests use this to
  /// pin down feature sharing across branches and experts.
  std::uint64_t encoder_rows_forwarded() const { return encoder_rows_forwarded_; }

  void serialize(std::ostream& out) const;
  static CpeModel deserialize(std::istream& in);

 private:
  CpeModelConfig cfg_;
  ClassGroups groups_;
  MlpEncoder encoder_;
  std::array<BatchNorm, kNumBranches> bn_;
  std::vector<Linear> experts_;
  mutable std::uint64_t encoder_rows_forwarded_ = 0;
};

/// Branch routing from pseudo-labels: a row activates MT (resp. T) when any
/// expert pseudo-labels it into medium-or-tail (resp. tail). Each branch sees
/// a row at most once per step.
BranchMasks cbn_branch_masks(const PseudoOutputs& pseudo, const ClassGroups& groups,
                             Index batch);

}  // namespace cpe
