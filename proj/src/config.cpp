// SPDX-License-Identifier: Apache-2.0
#include "cpe/config.hpp"

#include <json.hpp>

#include <fstream>
#include <sstream>

namespace cpe {

using nlohmann::json;

void ExperimentConfig::validate() const {
  if (seeds.empty()) throw std::invalid_argument("config: seed list is empty");
  if (output_dir.empty()) throw std::invalid_argument("config: output_dir is empty");
  if (dataset.type != "gaussian_mixture" && dataset.type != "cifar10_bin")
    throw std::invalid_argument("config: unknown dataset type '" + dataset.type + "'");
  if (num_experts != 1 && num_experts != 3)
    throw std::invalid_argument("config: num_experts must be 1 or 3");
  SplitSpec s = split;
  s.num_classes = num_classes();
  s.validate();
  train.validate();
  if (encoder.feature_dim < 1 || encoder.hidden.empty())
    throw std::invalid_argument("config: encoder needs hidden layers and a feature dim");
}

int ExperimentConfig::num_classes() const {
  return dataset.type == "cifar10_bin" ? 10 : dataset.gaussian.num_classes;
}

int ExperimentConfig::input_dim() const {
  return dataset.type == "cifar10_bin" ? 3072 : dataset.gaussian.dim;
}

namespace {

json augment_to_json(const AugmentConfig& a) {
  const char* kind = a.kind == AugmentConfig::Kind::Identity    ? "identity"
                     : a.kind == AugmentConfig::Kind::Image32   ? "image32"
                                                                : "vector_noise";
  return json{{"kind", kind},
              {"weak_sigma", a.weak_sigma},
              {"strong_sigma", a.strong_sigma},
              {"strong_dropout", a.strong_dropout},
              {"shift_max", a.shift_max},
              {"cutout_fraction", a.cutout_fraction}};
}

AugmentConfig augment_from_json(const json& j) {
  AugmentConfig a;
  const auto kind = j.value("kind", std::string("vector_noise"));
  if (kind == "identity")
    a.kind = AugmentConfig::Kind::Identity;
  else if (kind == "image32")
    a.kind = AugmentConfig::Kind::Image32;
  else if (kind == "vector_noise")
    a.kind = AugmentConfig::Kind::VectorNoise;
  else
    throw std::invalid_argument("config: unknown augment kind '" + kind + "'");
  a.weak_sigma = j.value("weak_sigma", a.weak_sigma);
  a.strong_sigma = j.value("strong_sigma", a.strong_sigma);
  a.strong_dropout = j.value("strong_dropout", a.strong_dropout);
  a.shift_max = j.value("shift_max", a.shift_max);
  a.cutout_fraction = j.value("cutout_fraction", a.cutout_fraction);
  return a;
}

}  // namespace

std::string experiment_config_to_json_text(const ExperimentConfig& cfg) {
  json j;
  j["version"] = 1;
  j["output_dir"] = cfg.output_dir;
  j["seeds"] = cfg.seeds;
  j["dataset"] = json{{"type", cfg.dataset.type},
                      {"test_per_class", cfg.dataset.test_per_class}};
  if (cfg.dataset.type == "gaussian_mixture") {
    const auto& g = cfg.dataset.gaussian;
    j["dataset"]["gaussian"] = json{{"num_classes", g.num_classes}, {"dim", g.dim},
                                    {"radius", g.radius},           {"sigma", g.sigma},
                                    {"per_class", g.per_class},     {"seed", g.seed},
                                    {"spacing_decay", g.spacing_decay},
                                    {"sibling_spread", g.sibling_spread}};
  } else {
    j["dataset"]["cifar_dir"] = cfg.dataset.cifar_dir;
  }
  j["split"] = json{{"n1", cfg.split.n1},
                    {"m1", cfg.split.m1},
                    {"gamma_l", cfg.split.gamma_l},
                    {"distribution_case", to_string(cfg.split.distribution_case)},
                    {"seed", cfg.split.seed}};
  j["encoder"] = json{{"hidden", cfg.encoder.hidden}, {"feature_dim", cfg.encoder.feature_dim}};
  j["num_experts"] = cfg.num_experts;
  const auto& t = cfg.train;
  j["train"] = json{{"labeled_batch", t.labeled_batch},
                    {"unlabeled_batch", t.unlabeled_batch},
                    {"lambda", t.lambda},
                    {"rho", t.rho},
                    {"learning_rate", t.learning_rate},
                    {"momentum", t.momentum},
                    {"weight_decay", t.weight_decay},
                    {"taus", json::array({t.taus.tau1, t.taus.tau2, t.taus.tau3})},
                    {"total_steps", t.total_steps},
                    {"cbn_enabled", t.cbn_enabled},
                    {"eval_interval", t.eval_interval},
                    {"seed", t.seed},
                    {"augment", augment_to_json(t.augment)}};
  return j.dump(2) + "\n";
}

ExperimentConfig experiment_config_from_json_text(const std::string& text) {
  const json j = json::parse(text);
  ExperimentConfig cfg;
  if (j.value("version", 1) != 1)
    throw std::invalid_argument("config: unsupported version");
  cfg.output_dir = j.value("output_dir", cfg.output_dir);
  if (j.contains("seeds")) cfg.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();

  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    cfg.dataset.type = d.value("type", cfg.dataset.type);
    cfg.dataset.test_per_class = d.value("test_per_class", cfg.dataset.test_per_class);
    if (d.contains("gaussian")) {
      const auto& g = d.at("gaussian");
      cfg.dataset.gaussian.num_classes = g.value("num_classes", cfg.dataset.gaussian.num_classes);
      cfg.dataset.gaussian.dim = g.value("dim", cfg.dataset.gaussian.dim);
      cfg.dataset.gaussian.radius = g.value("radius", cfg.dataset.gaussian.radius);
      cfg.dataset.gaussian.sigma = g.value("sigma", cfg.dataset.gaussian.sigma);
      cfg.dataset.gaussian.per_class = g.value("per_class", cfg.dataset.gaussian.per_class);
      cfg.dataset.gaussian.seed = g.value("seed", cfg.dataset.gaussian.seed);
      cfg.dataset.gaussian.spacing_decay =
          g.value("spacing_decay", cfg.dataset.gaussian.spacing_decay);
      cfg.dataset.gaussian.sibling_spread =
          g.value("sibling_spread", cfg.dataset.gaussian.sibling_spread);
    }
    cfg.dataset.cifar_dir = d.value("cifar_dir", cfg.dataset.cifar_dir);
  }

  if (j.contains("split")) {
    const auto& s = j.at("split");
    cfg.split.n1 = s.at("n1").get<std::int64_t>();
    cfg.split.m1 = s.at("m1").get<std::int64_t>();
    cfg.split.gamma_l = s.at("gamma_l").get<double>();
    cfg.split.distribution_case =
        distribution_case_from_string(s.at("distribution_case").get<std::string>());
    cfg.split.seed = s.value("seed", std::uint64_t{0});
  }

  if (j.contains("encoder")) {
    const auto& e = j.at("encoder");
    cfg.encoder.hidden = e.value("hidden", cfg.encoder.hidden);
    cfg.encoder.feature_dim = e.value("feature_dim", cfg.encoder.feature_dim);
  }
  cfg.num_experts = j.value("num_experts", cfg.num_experts);

  if (j.contains("train")) {
    const auto& t = j.at("train");
    auto& tc = cfg.train;
    tc.labeled_batch = t.value("labeled_batch", tc.labeled_batch);
    tc.unlabeled_batch = t.value("unlabeled_batch", tc.unlabeled_batch);
    tc.lambda = t.value("lambda", tc.lambda);
    tc.rho = t.value("rho", tc.rho);
    tc.learning_rate = t.value("learning_rate", tc.learning_rate);
    tc.momentum = t.value("momentum", tc.momentum);
    tc.weight_decay = t.value("weight_decay", tc.weight_decay);
    if (t.contains("taus")) {
      const auto taus = t.at("taus").get<std::vector<double>>();
      if (taus.size() != 3)
        throw std::invalid_argument("config: taus must have exactly 3 entries");
      tc.taus = TauTriple{taus[0], taus[1], taus[2]};
    }
    tc.total_steps = t.value("total_steps", tc.total_steps);
    tc.cbn_enabled = t.value("cbn_enabled", tc.cbn_enabled);
    tc.eval_interval = t.value("eval_interval", tc.eval_interval);
    tc.seed = t.value("seed", tc.seed);
    if (t.contains("augment")) tc.augment = augment_from_json(t.at("augment"));
  }

  cfg.split.num_classes = cfg.num_classes();
  cfg.encoder.input_dim = cfg.input_dim();
  return cfg;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return experiment_config_from_json_text(buf.str());
}

void save_experiment_config(const ExperimentConfig& cfg, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open config for writing: " + path.string());
  out << experiment_config_to_json_text(cfg);
}

Corpus build_corpus(const ExperimentConfig& cfg) {
  if (cfg.dataset.type == "gaussian_mixture") return make_gaussian_mixture(cfg.dataset.gaussian);
  if (cfg.dataset.cifar_dir.empty())
    throw std::runtime_error("config: cifar10_bin dataset needs cifar_dir");
  return load_cifar10_train_dir(cfg.dataset.cifar_dir);
}

Corpus build_test_corpus(const ExperimentConfig& cfg) {
  if (cfg.dataset.type == "gaussian_mixture")
    return make_gaussian_mixture_test(cfg.dataset.gaussian, cfg.dataset.test_per_class);
  return load_cifar10_test_dir(cfg.dataset.cifar_dir);
}

CpeModelConfig model_config_for(const ExperimentConfig& cfg) {
  CpeModelConfig mc;
  mc.num_classes = cfg.num_classes();
  mc.num_experts = cfg.num_experts;
  mc.encoder = cfg.encoder;
  mc.encoder.input_dim = cfg.input_dim();
  return mc;
}

}  // namespace cpe
