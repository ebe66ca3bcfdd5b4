// SPDX-License-Identifier: Apache-2.0
#include "cpe/trainer.hpp"

#include <json.hpp>

#include <cmath>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>

namespace cpe {

using nlohmann::json;

void TrainConfig::validate() const {
  if (labeled_batch < 1 || unlabeled_batch < 1)
    throw std::invalid_argument("TrainConfig: batch sizes must be positive");
  if (!(rho > 0.0) || !(rho <= 1.0))
    throw std::invalid_argument("TrainConfig: rho must lie in (0, 1]");
  if (lambda < 0.0) throw std::invalid_argument("TrainConfig: lambda must be >= 0");
  if (total_steps < 0) throw std::invalid_argument("TrainConfig: total_steps must be >= 0");
  if (learning_rate <= 0.0)
    throw std::invalid_argument("TrainConfig: learning_rate must be positive");
}

std::string to_json_line(const StepReport& report) {
  json j{{"step", report.step},
         {"lr", report.learning_rate},
         {"total", report.losses.total},
         {"supervised", report.losses.supervised_per_expert},
         {"unsupervised", report.losses.unsupervised_per_expert},
         {"mask_rate", report.losses.mask_rate_per_expert}};
  return j.dump();
}

void Sgd::step(const std::vector<ParamView>& params) {
  if (velocity_.empty()) {
    velocity_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i)
      velocity_[i].assign(static_cast<std::size_t>(params[i].size), 0.0);
  }
  if (velocity_.size() != params.size())
    throw std::logic_error("Sgd: parameter list changed size");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    auto& v = velocity_[i];
    if (v.size() != static_cast<std::size_t>(p.size))
      throw std::logic_error("Sgd: parameter '" + p.name + "' changed size");
    const double wd = p.bn_affine ? 0.0 : weight_decay_;
    for (std::ptrdiff_t j = 0; j < p.size; ++j) {
      const double g = p.grad[j] + wd * p.value[j];
      v[static_cast<std::size_t>(j)] = momentum_ * v[static_cast<std::size_t>(j)] + g;
      p.value[j] -= lr_ * v[static_cast<std::size_t>(j)];
    }
  }
}

void Sgd::serialize(std::ostream& out) const {
  json header{{"lr", lr_}, {"momentum", momentum_}, {"weight_decay", weight_decay_},
              {"count", velocity_.size()}};
  const std::string htext = header.dump();
  const std::uint64_t hlen = htext.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(htext.data(), static_cast<std::streamsize>(hlen));
  for (const auto& v : velocity_) {
    const std::uint64_t n = v.size();
    out.write(reinterpret_cast<const char*>(&n), sizeof(n));
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(n * sizeof(double)));
  }
}

void Sgd::deserialize(std::istream& in) {
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string htext(hlen, '\0');
  in.read(htext.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw std::runtime_error("Sgd checkpoint: truncated stream");
  const json header = json::parse(htext);
  lr_ = header.at("lr").get<double>();
  momentum_ = header.at("momentum").get<double>();
  weight_decay_ = header.at("weight_decay").get<double>();
  velocity_.resize(header.at("count").get<std::size_t>());
  for (auto& v : velocity_) {
    std::uint64_t n = 0;
    in.read(reinterpret_cast<char*>(&n), sizeof(n));
    v.resize(n);
    in.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) throw std::runtime_error("Sgd checkpoint: truncated stream");
  }
}

TrainData make_train_data(const Mat& corpus_features, const SplitResult& split) {
  TrainData data;
  data.labeled_x.resize(static_cast<Index>(split.labeled.size()), corpus_features.cols());
  for (std::size_t i = 0; i < split.labeled.size(); ++i) {
    data.labeled_x.row(static_cast<Index>(i)) = corpus_features.row(split.labeled[i].first);
    data.labeled_y.push_back(split.labeled[i].second);
  }
  data.labeled_counts = split.labeled_counts;
  data.unlabeled_x.resize(static_cast<Index>(split.unlabeled_ids.size()),
                          corpus_features.cols());
  for (std::size_t i = 0; i < split.unlabeled_ids.size(); ++i)
    data.unlabeled_x.row(static_cast<Index>(i)) =
        corpus_features.row(split.unlabeled_ids[i]);
  data.unlabeled_ids = split.unlabeled_ids;
  return data;
}

namespace {

void throw_non_finite(const LossBundle& bundle, std::int64_t step) {
  auto check = [&](const std::vector<double>& v, const char* what) {
    for (std::size_t i = 0; i < v.size(); ++i)
      if (!std::isfinite(v[i]))
        throw std::runtime_error("train_step: " + std::string(what) + " of expert " +
                                 std::to_string(i + 1) + " is non-finite at step " +
                                 std::to_string(step));
  };
  check(bundle.supervised_per_expert, "supervised loss");
  check(bundle.unsupervised_per_expert, "unsupervised loss");
  if (!std::isfinite(bundle.total))
    throw std::runtime_error("train_step: total loss is non-finite at step " +
                             std::to_string(step));
}

std::vector<double> taus_for(const TrainConfig& cfg, int num_experts) {
  const auto arr = cfg.taus.as_array();
  return std::vector<double>(arr.begin(), arr.begin() + num_experts);
}

}  // namespace

StepReport train_step(CpeModel& model, Sgd& opt, const Prior& prior,
                      const Mat& labeled_weak_x, std::span<const int> labels,
                      const Mat& unlabeled_weak_x, const Mat& unlabeled_strong_x,
                      const TrainConfig& cfg, std::int64_t step) {
  if (labeled_weak_x.rows() != static_cast<Index>(labels.size()))
    throw std::invalid_argument("train_step: labeled batch size mismatch");
  if (unlabeled_weak_x.rows() != unlabeled_strong_x.rows())
    throw std::invalid_argument("train_step: weak/strong view count mismatch");

  model.zero_grads();

  // Pseudo-labels from the weak views, before any statistics update.
  const PseudoOutputs pseudo = model.pseudo_forward(unlabeled_weak_x);

  // Supervised pass; labeled batches touch only the HMT branch.
  BranchMasks sup_masks;
  for (Index r = 0; r < labeled_weak_x.rows(); ++r) sup_masks.active[0].push_back(r);
  ForwardCache sup_cache;
  auto sup_logits =
      model.forward_branches(labeled_weak_x, ForwardMode::Train, &sup_masks, &sup_cache);
  std::vector<Mat> sup_grads;
  const auto sup = supervised_loss_multi(sup_logits.logits[0], labels, prior,
                                         taus_for(cfg, model.num_experts()), &sup_grads);
  std::array<std::vector<Mat>, kNumBranches> sup_d;
  sup_d[0] = std::move(sup_grads);
  model.backward_branches(sup_cache, sup_d);

  // Unsupervised pass on the strong views.
  const Index batch_u = unlabeled_strong_x.rows();
  BranchMasks unsup_masks;
  if (cfg.cbn_enabled) {
    unsup_masks = cbn_branch_masks(pseudo, model.groups(), batch_u);
  } else {
    for (Index r = 0; r < batch_u; ++r) unsup_masks.active[0].push_back(r);
  }
  ForwardCache unsup_cache;
  auto unsup_logits = model.forward_branches(unlabeled_strong_x, ForwardMode::Train,
                                             &unsup_masks, &unsup_cache);
  UnsupervisedLoss unsup;
  std::array<std::vector<Mat>, kNumBranches> unsup_d;
  if (cfg.cbn_enabled) {
    unsup = cbn_unsupervised_loss(unsup_logits.logits, pseudo.labels, pseudo.confidences,
                                  model.groups(), cfg.rho, cfg.lambda, &unsup_d);
  } else {
    std::vector<Mat> g;
    unsup = unsupervised_loss_multi(unsup_logits.logits[0], pseudo.labels,
                                    pseudo.confidences, cfg.rho, cfg.lambda, &g);
    unsup_d[0] = std::move(g);
  }
  model.backward_branches(unsup_cache, unsup_d);

  StepReport report;
  report.step = step;
  report.losses = total_cpe_loss(sup, unsup);
  report.learning_rate = cfg.learning_rate;
  throw_non_finite(report.losses, step);

  opt.step(model.params());
  return report;
}

EpochStream::EpochStream(std::size_t n, std::uint64_t seed, std::string tag)
    : n_(n), seed_(seed), tag_(std::move(tag)), cached_epoch_(UINT64_MAX) {
  if (n == 0) throw std::invalid_argument("EpochStream: empty index set");
}

void EpochStream::load_epoch(std::uint64_t epoch) {
  perm_.resize(n_);
  for (std::size_t i = 0; i < n_; ++i) perm_[i] = i;
  auto rng = derive_rng(seed_, tag_, epoch);
  deterministic_shuffle(perm_, rng);
  cached_epoch_ = epoch;
}

std::size_t EpochStream::at(std::uint64_t pos) {
  const std::uint64_t epoch = pos / n_;
  if (epoch != cached_epoch_) load_epoch(epoch);
  return perm_[pos % n_];
}

namespace {

Mat gather_rows(const Mat& source, EpochStream& stream, std::uint64_t start, int count,
                std::vector<std::size_t>* rows = nullptr) {
  Mat out(count, source.cols());
  for (int i = 0; i < count; ++i) {
    const std::size_t r = stream.at(start + static_cast<std::uint64_t>(i));
    out.row(i) = source.row(static_cast<Index>(r));
    if (rows) rows->push_back(r);
  }
  return out;
}

constexpr char kCkptMagic[8] = {'C', 'P', 'E', 'C', 'K', 'P', 'T', '1'};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const CpeModel& model,
                     const Sgd& opt, std::int64_t step) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
  out.write(kCkptMagic, sizeof(kCkptMagic));
  out.write(reinterpret_cast<const char*>(&step), sizeof(step));
  model.serialize(out);
  opt.serialize(out);
  if (!out) throw std::runtime_error("checkpoint write failed: " + path.string());
}

TrainerCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
  char magic[sizeof(kCkptMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCkptMagic, sizeof(kCkptMagic)) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path.string());
  TrainerCheckpoint ckpt;
  in.read(reinterpret_cast<char*>(&ckpt.step), sizeof(ckpt.step));
  ckpt.model = CpeModel::deserialize(in);
  ckpt.opt.deserialize(in);
  return ckpt;
}

namespace {

/// Evaluation block shared by interval and final evals. Reads diagnostics
/// labels (when provided) strictly through the metrics path.
struct Evaluator {
  const TrainData& data;
  const FitOptions& opts;
  const TrainConfig& cfg;
  std::unique_ptr<MetricsWriter> metrics;

  void run(CpeModel& model, std::int64_t step, FitResult& result, bool final_eval) {
    if (opts.test && !opts.test->y.empty()) {
      const auto preds = model.predict(opts.test->x);
      const double acc = top1_accuracy(preds, opts.test->y);
      if (metrics) metrics->append(step, "test_top1", model.eval_expert(), "overall", acc);
      if (final_eval) result.final_test_accuracy = acc;
      if (final_eval && metrics) {
        const auto confusion = confusion_matrix(preds, opts.test->y, model.num_classes());
        for (Index r = 0; r < confusion.rows(); ++r)
          for (Index c = 0; c < confusion.cols(); ++c)
            metrics->append_confusion(step, model.eval_expert(), static_cast<int>(r),
                                      static_cast<int>(c), confusion(r, c));
      }
    }
    if (final_eval && metrics && opts.diagnostics) {
      const auto stats = feature_stats(model, data.labeled_x, data.labeled_y,
                                       data.unlabeled_x, *opts.diagnostics, model.groups());
      for (const auto& [key, cell] : stats.cells)
        for (Index ch = 0; ch < cell.mean.size(); ++ch) {
          metrics->append_channel(step, "feature_mean", static_cast<int>(ch), key.first,
                                  key.second, cell.mean(ch));
          metrics->append_channel(step, "feature_std", static_cast<int>(ch), key.first,
                                  key.second, cell.stddev(ch));
        }
    }
    if (opts.diagnostics) {
      const auto records = collect_pseudo_records(model, data.unlabeled_x,
                                                  data.unlabeled_ids, cfg.rho,
                                                  opts.diagnostics);
      const auto f1 = groupwise_f1(records, model.groups());
      for (std::size_t e = 0; e < f1.experts.size(); ++e) {
        if (metrics) {
          metrics->append(step, "pseudo_f1", static_cast<int>(e), "head", f1.experts[e].head);
          metrics->append(step, "pseudo_f1", static_cast<int>(e), "medium", f1.experts[e].medium);
          metrics->append(step, "pseudo_f1", static_cast<int>(e), "tail", f1.experts[e].tail);
          metrics->append(step, "pseudo_f1", static_cast<int>(e), "overall", f1.experts[e].overall);
          double mask_rate = 0.0;
          for (const auto& r : records[e]) mask_rate += r.passed_mask ? 1.0 : 0.0;
          metrics->append(step, "pseudo_mask_rate", static_cast<int>(e), "overall",
                          mask_rate / static_cast<double>(records[e].size()));
        }
      }
      if (final_eval) result.final_pseudo_f1 = f1;
    }
  }
};

}  // namespace

FitResult fit(CpeModel& model, const TrainData& data, const TrainConfig& cfg,
              const FitOptions& opts) {
  cfg.validate();
  if (data.labeled_y.empty()) throw std::invalid_argument("fit: empty labeled set");
  if (data.unlabeled_x.rows() == 0) throw std::invalid_argument("fit: empty unlabeled set");

  const Prior prior = Prior::from_counts(data.labeled_counts);

  Sgd opt(cfg.learning_rate, cfg.momentum, cfg.weight_decay);
  std::int64_t start_step = 0;
  if (opts.resume_from) {
    auto ckpt = load_checkpoint(*opts.resume_from);
    model = std::move(ckpt.model);
    opt = std::move(ckpt.opt);
    start_step = ckpt.step;
  }

  const bool write_files = !opts.run_dir.empty();
  std::ofstream step_log;
  Evaluator evaluator{data, opts, cfg, nullptr};
  if (write_files) {
    std::filesystem::create_directories(opts.run_dir);
    const auto mode = start_step > 0 ? std::ios::app : std::ios::out;
    step_log.open(opts.run_dir / "steps.jsonl", mode);
    if (!step_log) throw std::runtime_error("fit: cannot open step log");
    evaluator.metrics = std::make_unique<MetricsWriter>(opts.run_dir / "metrics.jsonl",
                                                        /*append=*/start_step > 0);
  }

  EpochStream labeled_order(data.labeled_y.size(), cfg.seed, "order-labeled");
  EpochStream unlabeled_order(static_cast<std::size_t>(data.unlabeled_x.rows()), cfg.seed,
                              "order-unlabeled");

  FitResult result;
  for (std::int64_t step = start_step; step < cfg.total_steps; ++step) {
    const auto s = static_cast<std::uint64_t>(step);
    std::vector<std::size_t> labeled_rows;
    const Mat raw_l =
        gather_rows(data.labeled_x, labeled_order,
                    s * static_cast<std::uint64_t>(cfg.labeled_batch), cfg.labeled_batch,
                    &labeled_rows);
    std::vector<int> batch_y(labeled_rows.size());
    for (std::size_t i = 0; i < labeled_rows.size(); ++i)
      batch_y[i] = data.labeled_y[labeled_rows[i]];

    const Mat raw_u = gather_rows(data.unlabeled_x, unlabeled_order,
                                  s * static_cast<std::uint64_t>(cfg.unlabeled_batch),
                                  cfg.unlabeled_batch);

    auto rng_lw = derive_rng(cfg.seed, "aug-labeled-weak", s);
    auto rng_uw = derive_rng(cfg.seed, "aug-unlabeled-weak", s);
    auto rng_us = derive_rng(cfg.seed, "aug-unlabeled-strong", s);
    const Mat xl = weak_augment(raw_l, cfg.augment, rng_lw);
    const Mat xu_weak = weak_augment(raw_u, cfg.augment, rng_uw);
    const Mat xu_strong = strong_augment(raw_u, cfg.augment, rng_us);

    StepReport report = train_step(model, opt, prior, xl, batch_y, xu_weak, xu_strong,
                                   cfg, step);
    if (write_files) step_log << to_json_line(report) << '\n';
    result.reports.push_back(std::move(report));

    const bool at_interval =
        cfg.eval_interval > 0 && (step + 1) % cfg.eval_interval == 0;
    if (at_interval && step + 1 < cfg.total_steps) {
      evaluator.run(model, step + 1, result, /*final_eval=*/false);
      if (write_files) save_checkpoint(opts.run_dir / "checkpoint.bin", model, opt, step + 1);
    }
  }

  if (cfg.total_steps > 0 && start_step < cfg.total_steps) {
    evaluator.run(model, cfg.total_steps, result, /*final_eval=*/true);
    if (write_files)
      save_checkpoint(opts.run_dir / "checkpoint.bin", model, opt, cfg.total_steps);
  }
  return result;
}

}  // namespace cpe
