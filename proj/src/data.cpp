// SPDX-License-Identifier: Apache-2.0
#include "cpe/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace cpe {

using nlohmann::json;

const char* to_string(DistributionCase c) {
  switch (c) {
    case DistributionCase::Consistent: return "consistent";
    case DistributionCase::Uniform: return "uniform";
    default: return "inverse";
  }
}

DistributionCase distribution_case_from_string(const std::string& s) {
  if (s == "consistent") return DistributionCase::Consistent;
  if (s == "uniform") return DistributionCase::Uniform;
  if (s == "inverse") return DistributionCase::Inverse;
  throw std::invalid_argument("unknown distribution case '" + s +
                              "' (expected consistent|uniform|inverse)");
}

double SplitSpec::gamma_u() const {
  switch (distribution_case) {
    case DistributionCase::Consistent: return gamma_l;
    case DistributionCase::Uniform: return 1.0;
    default: return 1.0 / gamma_l;
  }
}

void SplitSpec::validate() const {
  if (num_classes < 2)
    throw std::invalid_argument("SplitSpec: num_classes must be >= 2, got " +
                                std::to_string(num_classes));
  if (gamma_l < 1.0)
    throw std::invalid_argument("SplitSpec: gamma_l must be >= 1, got " +
                                std::to_string(gamma_l));
  if (n1 < 1 || m1 < 1)
    throw std::invalid_argument("SplitSpec: n1 and m1 must be positive");
}

std::vector<std::int64_t> longtail_counts(std::int64_t n1, double gamma, int num_classes) {
  if (num_classes < 2)
    throw std::invalid_argument("longtail_counts: need at least 2 classes, got " +
                                std::to_string(num_classes));
  if (gamma < 1.0)
    throw std::invalid_argument("longtail_counts: gamma must be >= 1, got " +
                                std::to_string(gamma));
  if (n1 < 1)
    throw std::invalid_argument("longtail_counts: n1 must be positive");

  std::vector<std::int64_t> counts(num_classes);
  for (int k = 0; k < num_classes; ++k) {
    const double decay = std::pow(gamma, -static_cast<double>(k) / (num_classes - 1));
    counts[k] = std::max<std::int64_t>(1, std::llround(static_cast<double>(n1) * decay));
  }
  counts[0] = n1;
  return counts;
}

double imbalance_ratio(const std::vector<std::int64_t>& counts) {
  if (counts.empty()) throw std::invalid_argument("imbalance_ratio: empty counts");
  for (auto c : counts)
    if (c <= 0)
      throw std::invalid_argument("imbalance_ratio: all counts must be positive");
  const auto [mn, mx] = std::minmax_element(counts.begin(), counts.end());
  return static_cast<double>(*mx) / static_cast<double>(*mn);
}

std::vector<std::int64_t> unlabeled_counts_for(const SplitSpec& spec) {
  spec.validate();
  switch (spec.distribution_case) {
    case DistributionCase::Consistent:
      return longtail_counts(spec.m1, spec.gamma_l, spec.num_classes);
    case DistributionCase::Uniform:
      return std::vector<std::int64_t>(spec.num_classes, spec.m1);
    default: {
      // m1 parameterizes class 0 (the least frequent unlabeled class here),
      // so the profile is the consistent vector with top count m1*gamma_l,
      // reversed across the class index.
      const auto top = static_cast<std::int64_t>(
          std::llround(static_cast<double>(spec.m1) * spec.gamma_l));
      auto counts = longtail_counts(top, spec.gamma_l, spec.num_classes);
      std::reverse(counts.begin(), counts.end());
      return counts;
    }
  }
}

SplitResult build_split(const std::vector<int>& corpus_labels, const SplitSpec& spec) {
  spec.validate();
  const int C = spec.num_classes;

  std::vector<std::vector<std::int64_t>> by_class(C);
  for (std::size_t i = 0; i < corpus_labels.size(); ++i) {
    const int y = corpus_labels[i];
    if (y < 0 || y >= C)
      throw std::invalid_argument("build_split: corpus label " + std::to_string(y) +
                                  " outside [0, " + std::to_string(C) + ")");
    by_class[y].push_back(static_cast<std::int64_t>(i));
  }

  SplitResult result;
  result.spec = spec;
  result.labeled_counts = longtail_counts(spec.n1, spec.gamma_l, C);
  result.unlabeled_counts = unlabeled_counts_for(spec);

  std::vector<int> diag;
  for (int k = 0; k < C; ++k) {
    const std::int64_t need_l = result.labeled_counts[k];
    const std::int64_t need_u = result.unlabeled_counts[k];
    const auto have = static_cast<std::int64_t>(by_class[k].size());
    if (have < need_l + need_u) {
      std::ostringstream msg;
      msg << "build_split: class " << k << " needs " << need_l + need_u
          << " samples (" << need_l << " labeled + " << need_u
          << " unlabeled) but the corpus has " << have << " (shortfall "
          << need_l + need_u - have << ")";
      throw std::runtime_error(msg.str());
    }
    auto rng = derive_rng(spec.seed, "split", static_cast<std::uint64_t>(k));
    deterministic_shuffle(by_class[k], rng);
    for (std::int64_t i = 0; i < need_l; ++i)
      result.labeled.emplace_back(by_class[k][i], k);
    for (std::int64_t i = 0; i < need_u; ++i) {
      result.unlabeled_ids.push_back(by_class[k][need_l + i]);
      diag.push_back(k);
    }
  }
  result.diagnostics = DiagnosticLabels(std::move(diag));
  return result;
}

namespace {

json spec_to_json(const SplitSpec& s) {
  return json{{"num_classes", s.num_classes},
              {"n1", s.n1},
              {"m1", s.m1},
              {"gamma_l", s.gamma_l},
              {"distribution_case", to_string(s.distribution_case)},
              {"seed", s.seed}};
}

SplitSpec spec_from_json(const json& j) {
  SplitSpec s;
  s.num_classes = j.at("num_classes").get<int>();
  s.n1 = j.at("n1").get<std::int64_t>();
  s.m1 = j.at("m1").get<std::int64_t>();
  s.gamma_l = j.at("gamma_l").get<double>();
  s.distribution_case = distribution_case_from_string(j.at("distribution_case").get<std::string>());
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

constexpr int kManifestVersion = 1;

}  // namespace

std::string manifest_to_string(const SplitResult& split) {
  json labeled = json::array();
  for (const auto& [id, y] : split.labeled) labeled.push_back(json::array({id, y}));
  json j{{"version", kManifestVersion},
         {"spec", spec_to_json(split.spec)},
         {"labeled", std::move(labeled)},
         {"unlabeled", split.unlabeled_ids},
         {"labeled_counts", split.labeled_counts},
         {"unlabeled_counts", split.unlabeled_counts},
         {"diagnostics", json{{"unlabeled_true_labels",
                               split.diagnostics.raw_for_serialization()}}}};
  return j.dump(2) + "\n";
}

SplitResult manifest_from_string(const std::string& text) {
  const json j = json::parse(text);
  const int version = j.at("version").get<int>();
  if (version != kManifestVersion)
    throw std::runtime_error("manifest version " + std::to_string(version) +
                             " not supported (expected " +
                             std::to_string(kManifestVersion) + ")");
  SplitResult r;
  r.spec = spec_from_json(j.at("spec"));
  for (const auto& pair : j.at("labeled"))
    r.labeled.emplace_back(pair.at(0).get<std::int64_t>(), pair.at(1).get<int>());
  r.unlabeled_ids = j.at("unlabeled").get<std::vector<std::int64_t>>();
  r.labeled_counts = j.at("labeled_counts").get<std::vector<std::int64_t>>();
  r.unlabeled_counts = j.at("unlabeled_counts").get<std::vector<std::int64_t>>();
  r.diagnostics = DiagnosticLabels(
      j.at("diagnostics").at("unlabeled_true_labels").get<std::vector<int>>());
  if (r.diagnostics.size() != r.unlabeled_ids.size())
    throw std::runtime_error("manifest: diagnostics labels misaligned with unlabeled ids");
  return r;
}

void write_manifest(const SplitResult& split, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open manifest for writing: " + path.string());
  out << manifest_to_string(split);
}

SplitResult read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest: " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return manifest_from_string(buf.str());
}

}  // namespace cpe
