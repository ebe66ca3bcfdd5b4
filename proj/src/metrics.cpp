// SPDX-License-Identifier: Apache-2.0
#include "cpe/metrics.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>

namespace cpe {

using nlohmann::json;

namespace {

struct ClassTally {
  std::int64_t tp = 0, fp = 0, fn = 0;

  bool seen() const { return tp + fp + fn > 0; }
  double f1() const {
    const double denom_p = static_cast<double>(tp + fp);
    const double denom_r = static_cast<double>(tp + fn);
    const double precision = denom_p > 0 ? tp / denom_p : 0.0;
    const double recall = denom_r > 0 ? tp / denom_r : 0.0;
    return (precision + recall) > 0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
  }
};

double mean_f1(const std::vector<ClassTally>& tally, const std::vector<int>& classes) {
  double sum = 0.0;
  int counted = 0;
  for (int c : classes) {
    if (!tally[static_cast<std::size_t>(c)].seen()) continue;  // neither predicted nor present
    sum += tally[static_cast<std::size_t>(c)].f1();
    ++counted;
  }
  return counted > 0 ? sum / counted : 0.0;
}

std::vector<int> all_classes(int C) {
  std::vector<int> v(static_cast<std::size_t>(C));
  for (int c = 0; c < C; ++c) v[static_cast<std::size_t>(c)] = c;
  return v;
}

}  // namespace

GroupF1Report groupwise_f1(const std::vector<std::vector<int>>& pseudo_per_expert,
                           std::span<const int> true_labels, const ClassGroups& groups) {
  if (pseudo_per_expert.empty() || true_labels.empty())
    throw std::invalid_argument("groupwise_f1: empty record set");
  GroupF1Report report;
  for (const auto& pseudo : pseudo_per_expert) {
    if (pseudo.size() != true_labels.size())
      throw std::invalid_argument("groupwise_f1: prediction/truth length mismatch");
    std::vector<ClassTally> tally(static_cast<std::size_t>(groups.num_classes));
    for (std::size_t i = 0; i < pseudo.size(); ++i) {
      const int yh = pseudo[i];
      const int y = true_labels[i];
      if (yh < 0 || yh >= groups.num_classes || y < 0 || y >= groups.num_classes)
        throw std::invalid_argument("groupwise_f1: class index out of range");
      if (yh == y) {
        ++tally[static_cast<std::size_t>(y)].tp;
      } else {
        ++tally[static_cast<std::size_t>(yh)].fp;
        ++tally[static_cast<std::size_t>(y)].fn;
      }
    }
    GroupF1Report::PerExpert row;
    row.head = mean_f1(tally, groups.head());
    row.medium = mean_f1(tally, groups.medium());
    row.tail = mean_f1(tally, groups.tail());
    row.overall = mean_f1(tally, all_classes(groups.num_classes));
    report.experts.push_back(row);
  }
  return report;
}

GroupF1Report groupwise_f1(const std::vector<std::vector<PseudoLabelRecord>>& records,
                           const ClassGroups& groups) {
  if (records.empty() || records[0].empty())
    throw std::invalid_argument("groupwise_f1: empty record set");
  std::vector<std::vector<int>> pseudo(records.size());
  std::vector<int> truth;
  for (std::size_t i = 0; i < records.size(); ++i) {
    for (const auto& r : records[i]) {
      if (r.true_label < 0)
        throw std::invalid_argument("groupwise_f1: record without diagnostics label");
      pseudo[i].push_back(r.pseudo_label);
      if (i == 0) truth.push_back(r.true_label);
    }
  }
  return groupwise_f1(pseudo, truth, groups);
}

double top1_accuracy(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size())
    throw std::invalid_argument("top1_accuracy: length mismatch");
  if (predictions.empty()) throw std::invalid_argument("top1_accuracy: empty inputs");
  std::int64_t correct = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i)
    if (predictions[i] == labels[i]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(predictions.size());
}

ConfusionMatrix confusion_matrix(std::span<const int> predictions,
                                 std::span<const int> labels, int num_classes) {
  if (predictions.size() != labels.size())
    throw std::invalid_argument("confusion_matrix: length mismatch");
  ConfusionMatrix m = ConfusionMatrix::Zero(num_classes, num_classes);
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const int y = labels[i];
    const int p = predictions[i];
    if (y < 0 || y >= num_classes || p < 0 || p >= num_classes)
      throw std::invalid_argument("confusion_matrix: class index out of range");
    ++m(y, p);
  }
  return m;
}

void OnlineMoments::add(const Vec& row) {
  if (row.size() != mean_.size())
    throw std::invalid_argument("OnlineMoments: channel count mismatch");
  ++n_;
  const Vec delta = row - mean_;
  mean_ += delta / static_cast<double>(n_);
  m2_ += (delta.array() * (row - mean_).array()).matrix();
}

Vec OnlineMoments::std_population() const {
  if (n_ == 0) return Vec::Zero(mean_.size());
  return (m2_ / static_cast<double>(n_)).array().max(0.0).sqrt().matrix();
}

FeatureStats feature_stats(const CpeModel& model, const Mat& labeled_x,
                           std::span<const int> labeled_y, const Mat& unlabeled_x,
                           const DiagnosticLabels& unlabeled_truth,
                           const ClassGroups& groups) {
  const Index channels = model.feature_dim();
  std::map<std::pair<std::string, std::string>, OnlineMoments> acc;
  auto cell = [&](ClassGroups::Group g, const char* origin) -> OnlineMoments& {
    const auto key = std::make_pair(std::string(group_name(g)), std::string(origin));
    return acc.try_emplace(key, channels).first->second;
  };

  const Mat labeled_features = model.encoder_features(labeled_x);
  for (Index r = 0; r < labeled_features.rows(); ++r)
    cell(groups.group_of(labeled_y[static_cast<std::size_t>(r)]), "labeled")
        .add(labeled_features.row(r).transpose());

  const Mat unlabeled_features = model.encoder_features(unlabeled_x);
  for (Index r = 0; r < unlabeled_features.rows(); ++r)
    cell(groups.group_of(unlabeled_truth.label_of(static_cast<std::size_t>(r))), "unlabeled")
        .add(unlabeled_features.row(r).transpose());

  FeatureStats stats;
  for (const auto& [key, moments] : acc)
    stats.cells[key] = FeatureStats::Cell{moments.mean(), moments.std_population(),
                                          moments.count()};
  return stats;
}

std::vector<std::vector<PseudoLabelRecord>> collect_pseudo_records(
    const CpeModel& model, const Mat& unlabeled_x, std::span<const std::int64_t> ids,
    double rho, const DiagnosticLabels* diag) {
  if (static_cast<std::size_t>(unlabeled_x.rows()) != ids.size())
    throw std::invalid_argument("collect_pseudo_records: id/sample count mismatch");
  const PseudoOutputs pseudo = model.pseudo_forward(unlabeled_x);
  std::vector<std::vector<PseudoLabelRecord>> records(pseudo.labels.size());
  for (std::size_t e = 0; e < pseudo.labels.size(); ++e) {
    records[e].reserve(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      PseudoLabelRecord r;
      r.sample_id = ids[i];
      r.expert = static_cast<int>(e);
      r.pseudo_label = pseudo.labels[e][i];
      r.confidence = pseudo.confidences[e](static_cast<Index>(i));
      r.passed_mask = r.confidence > rho;
      r.true_label = diag ? diag->label_of(i) : -1;
      records[e].push_back(r);
    }
  }
  return records;
}

MetricsWriter::MetricsWriter(const std::filesystem::path& path, bool append) {
  file_ = std::fopen(path.string().c_str(), append ? "a" : "w");
  if (!file_) throw std::runtime_error("cannot open metrics log: " + path.string());
}

MetricsWriter::~MetricsWriter() {
  if (file_) std::fclose(file_);
}

void MetricsWriter::append(std::int64_t step, const std::string& metric, int expert,
                           const std::string& group, double value) {
  json j{{"step", step}, {"metric", metric}, {"value", value}};
  j["expert"] = expert >= 0 ? json("E" + std::to_string(expert + 1)) : json(nullptr);
  j["group"] = group.empty() ? json(nullptr) : json(group);
  const std::string line = j.dump();
  std::fwrite(line.data(), 1, line.size(), file_);
  std::fputc('\n', file_);
  std::fflush(file_);
}

void MetricsWriter::append_channel(std::int64_t step, const std::string& metric,
                                   int channel, const std::string& group,
                                   const std::string& origin, double value) {
  json j{{"step", step},   {"metric", metric}, {"value", value},
         {"expert", nullptr}, {"group", group},   {"channel", channel},
         {"origin", origin}};
  const std::string line = j.dump();
  std::fwrite(line.data(), 1, line.size(), file_);
  std::fputc('\n', file_);
  std::fflush(file_);
}

void MetricsWriter::append_confusion(std::int64_t step, int expert, int row, int col,
                                     std::int64_t count) {
  json j{{"step", step}, {"metric", "confusion"},
         {"expert", "E" + std::to_string(expert + 1)},
         {"group", nullptr}, {"row", row}, {"col", col},
         {"value", static_cast<double>(count)}};
  const std::string line = j.dump();
  std::fwrite(line.data(), 1, line.size(), file_);
  std::fputc('\n', file_);
  std::fflush(file_);
}

}  // namespace cpe
