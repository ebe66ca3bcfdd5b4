// SPDX-License-Identifier: Apache-2.0
#include "cpe/model.hpp"

#include <json.hpp>

#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>

namespace cpe {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

Linear::Linear(int in_dim, int out_dim, std::mt19937_64& rng) {
  if (in_dim < 1 || out_dim < 1)
    throw std::invalid_argument("Linear: dimensions must be positive");
  const double limit = std::sqrt(6.0 / in_dim);  // Kaiming-uniform
  weight_ = Mat::NullaryExpr(out_dim, in_dim, [&]() { return (2.0 * uniform_real(rng) - 1.0) * limit; });
  bias_ = Vec::Zero(out_dim);
  zero_grads();
}

Mat Linear::backward(const Mat& input, const Mat& d_out) {
  d_weight_ += d_out.transpose() * input;
  d_bias_ += d_out.colwise().sum().transpose();
  return d_out * weight_;
}

void Linear::zero_grads() {
  d_weight_ = Mat::Zero(weight_.rows(), weight_.cols());
  d_bias_ = Vec::Zero(bias_.size());
}

void Linear::collect_params(const std::string& prefix, std::vector<ParamView>& out) {
  out.push_back({prefix + ".weight", false, weight_.data(), d_weight_.data(),
                 static_cast<std::ptrdiff_t>(weight_.size())});
  out.push_back({prefix + ".bias", false, bias_.data(), d_bias_.data(),
                 static_cast<std::ptrdiff_t>(bias_.size())});
}

// ---------------------------------------------------------------------------
// BatchNorm
// ---------------------------------------------------------------------------

BatchNorm::BatchNorm(int channels, double momentum, double eps)
    : gamma_(Vec::Ones(channels)),
      beta_(Vec::Zero(channels)),
      running_mean_(Vec::Zero(channels)),
      running_var_(Vec::Ones(channels)),
      momentum_(momentum),
      eps_(eps) {
  zero_grads();
}

Mat BatchNorm::forward_train(const Mat& x, const std::vector<Index>& active,
                             bool update_stats, Ctx* ctx) {
  if (x.cols() != gamma_.size())
    throw std::invalid_argument("BatchNorm: channel count mismatch");
  if (active.empty()) throw std::invalid_argument("BatchNorm: empty active set");

  const auto n = static_cast<double>(active.size());
  Vec mean = Vec::Zero(x.cols());
  for (Index r : active) mean += x.row(r).transpose();
  mean /= n;
  Vec var = Vec::Zero(x.cols());
  for (Index r : active) var += (x.row(r).transpose() - mean).array().square().matrix();
  var /= n;  // population variance

  const Vec invstd = (var.array() + eps_).rsqrt().matrix();
  Mat xhat = (x.rowwise() - mean.transpose()).array().rowwise() *
             invstd.transpose().array();
  Mat y = (xhat.array().rowwise() * gamma_.transpose().array()).rowwise() +
          beta_.transpose().array();

  if (update_stats) {
    running_mean_ = (1.0 - momentum_) * running_mean_ + momentum_ * mean;
    running_var_ = (1.0 - momentum_) * running_var_ + momentum_ * var;
    ++batches_seen_;
  }
  if (ctx) {
    ctx->active = active;
    ctx->mean = std::move(mean);
    ctx->invstd = invstd;
    ctx->xhat = std::move(xhat);
  }
  return y;
}

Mat BatchNorm::forward_eval(const Mat& x) const {
  if (batches_seen_ == 0)
    throw std::runtime_error(
        "BatchNorm: eval forward with uninitialized running statistics "
        "(no training batch has updated this branch)");
  return forward_frozen(x);
}

Mat BatchNorm::forward_frozen(const Mat& x) const {
  if (x.cols() != gamma_.size())
    throw std::invalid_argument("BatchNorm: channel count mismatch");
  Vec mean = running_mean_;
  Vec var = running_var_;
  if (batches_seen_ == 0) {
    mean = x.colwise().mean().transpose();
    var = ((x.rowwise() - mean.transpose()).array().square().colwise().sum() /
           static_cast<double>(x.rows()))
              .transpose()
              .matrix();
  }
  const Vec invstd = (var.array() + eps_).rsqrt().matrix();
  Mat xhat = (x.rowwise() - mean.transpose()).array().rowwise() *
             invstd.transpose().array();
  return (xhat.array().rowwise() * gamma_.transpose().array()).rowwise() +
         beta_.transpose().array();
}

Mat BatchNorm::backward(const Ctx& ctx, const Mat& d_out) {
  const auto n = static_cast<double>(ctx.active.size());
  Mat dx = Mat::Zero(d_out.rows(), d_out.cols());

  Vec sum_dy = Vec::Zero(d_out.cols());
  Vec sum_dy_xhat = Vec::Zero(d_out.cols());
  for (Index r : ctx.active) {
    sum_dy += d_out.row(r).transpose();
    sum_dy_xhat += (d_out.row(r).array() * ctx.xhat.row(r).array()).matrix().transpose();
  }
  d_gamma_ += sum_dy_xhat;
  d_beta_ += sum_dy;

  const Vec mean_dy = sum_dy / n;
  const Vec mean_dy_xhat = sum_dy_xhat / n;
  for (Index r : ctx.active) {
    dx.row(r) = (gamma_.array() * ctx.invstd.array() *
                 (d_out.row(r).transpose().array() - mean_dy.array() -
                  ctx.xhat.row(r).transpose().array() * mean_dy_xhat.array()))
                    .transpose();
  }
  return dx;
}

void BatchNorm::zero_grads() {
  d_gamma_ = Vec::Zero(gamma_.size());
  d_beta_ = Vec::Zero(beta_.size());
}

void BatchNorm::collect_params(const std::string& prefix, std::vector<ParamView>& out) {
  out.push_back({prefix + ".gamma", true, gamma_.data(), d_gamma_.data(),
                 static_cast<std::ptrdiff_t>(gamma_.size())});
  out.push_back({prefix + ".beta", true, beta_.data(), d_beta_.data(),
                 static_cast<std::ptrdiff_t>(beta_.size())});
}

// ---------------------------------------------------------------------------
// MlpEncoder
// ---------------------------------------------------------------------------

MlpEncoder::MlpEncoder(const MlpEncoderConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
  if (cfg.input_dim < 1 || cfg.feature_dim < 1)
    throw std::invalid_argument("MlpEncoder: input_dim and feature_dim must be positive");
  int in = cfg.input_dim;
  for (int h : cfg.hidden) {
    layers_.emplace_back(in, h, rng);
    in = h;
  }
  layers_.emplace_back(in, cfg.feature_dim, rng);
}

Mat MlpEncoder::forward(const Mat& x, Ctx* ctx) const {
  if (ctx) {
    ctx->inputs.clear();
    ctx->preacts.clear();
  }
  Mat a = x;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    if (ctx) ctx->inputs.push_back(a);
    Mat z = layers_[l].forward(a);
    if (ctx) ctx->preacts.push_back(z);
    a = (l + 1 < layers_.size()) ? z.cwiseMax(0.0) : std::move(z);
  }
  return a;
}

Mat MlpEncoder::backward(const Ctx& ctx, const Mat& d_features) {
  Mat g = d_features;
  for (std::size_t l = layers_.size(); l-- > 0;) {
    if (l + 1 < layers_.size())
      g = (g.array() * (ctx.preacts[l].array() > 0.0).cast<double>()).matrix();
    g = layers_[l].backward(ctx.inputs[l], g);
  }
  return g;
}

void MlpEncoder::zero_grads() {
  for (auto& l : layers_) l.zero_grads();
}

void MlpEncoder::collect_params(std::vector<ParamView>& out) {
  for (std::size_t l = 0; l < layers_.size(); ++l)
    layers_[l].collect_params("encoder.layer" + std::to_string(l), out);
}

// ---------------------------------------------------------------------------
// CpeModel
// ---------------------------------------------------------------------------

CpeModel::CpeModel(const CpeModelConfig& cfg, std::uint64_t seed)
    : cfg_(cfg), groups_(partition_classes(cfg.num_classes)) {
  if (cfg.num_experts != 1 && cfg.num_experts != 3)
    throw std::invalid_argument("CpeModel: num_experts must be 1 or 3");
  auto rng = derive_rng(seed, "model-init");
  encoder_ = MlpEncoder(cfg.encoder, rng);
  for (int b = 0; b < kNumBranches; ++b)
    bn_[static_cast<std::size_t>(b)] =
        BatchNorm(cfg.encoder.feature_dim, cfg.bn_momentum, cfg.bn_eps);
  for (int i = 0; i < cfg.num_experts; ++i)
    experts_.emplace_back(cfg.encoder.feature_dim, cfg.num_classes, rng);
}

BranchMasks BranchMasks::all(Index batch) {
  BranchMasks m;
  for (auto& v : m.active) {
    v.resize(static_cast<std::size_t>(batch));
    for (Index i = 0; i < batch; ++i) v[static_cast<std::size_t>(i)] = i;
  }
  return m;
}

BranchExpertLogits CpeModel::forward_branches(const Mat& x, ForwardMode mode,
                                              const BranchMasks* masks,
                                              ForwardCache* cache, bool update_stats) {
  BranchMasks default_masks;
  if (mode == ForwardMode::Train && masks == nullptr) {
    default_masks = BranchMasks::all(x.rows());
    masks = &default_masks;
  }

  ForwardCache local;
  ForwardCache& c = cache ? *cache : local;
  c.features = encoder_.forward(x, cache ? &c.encoder : nullptr);
  encoder_rows_forwarded_ += static_cast<std::uint64_t>(x.rows());

  BranchExpertLogits out;
  for (int b = 0; b < kNumBranches; ++b) {
    auto& bnorm = bn_[static_cast<std::size_t>(b)];
    Mat normalized;
    if (mode == ForwardMode::Eval) {
      normalized = bnorm.forward_eval(c.features);
    } else {
      const auto& active = masks->active[static_cast<std::size_t>(b)];
      if (active.empty()) continue;  // branch not routed this step
      normalized = bnorm.forward_train(c.features, active, update_stats,
                                       cache ? &c.bn[static_cast<std::size_t>(b)] : nullptr);
    }
    out.ran[static_cast<std::size_t>(b)] = true;
    c.ran[static_cast<std::size_t>(b)] = true;
    for (const auto& head : experts_)
      out.logits[static_cast<std::size_t>(b)].push_back(head.forward(normalized));
    if (cache) c.normalized[static_cast<std::size_t>(b)] = std::move(normalized);
  }
  return out;
}

Mat CpeModel::backward_branches(const ForwardCache& cache,
                                const std::array<std::vector<Mat>, kNumBranches>& d_logits) {
  Mat d_features = Mat::Zero(cache.features.rows(), cache.features.cols());
  for (int b = 0; b < kNumBranches; ++b) {
    const auto& per_expert = d_logits[static_cast<std::size_t>(b)];
    if (per_expert.empty()) continue;
    if (!cache.ran[static_cast<std::size_t>(b)])
      throw std::logic_error("backward_branches: gradient for a branch that never ran");
    Mat d_norm;
    for (std::size_t i = 0; i < per_expert.size(); ++i) {
      if (per_expert[i].size() == 0) continue;
      Mat di = experts_[i].backward(cache.normalized[static_cast<std::size_t>(b)],
                                    per_expert[i]);
      if (d_norm.size() == 0)
        d_norm = std::move(di);
      else
        d_norm += di;
    }
    if (d_norm.size() == 0) continue;
    d_features += bn_[static_cast<std::size_t>(b)].backward(
        cache.bn[static_cast<std::size_t>(b)], d_norm);
  }
  return encoder_.backward(cache.encoder, d_features);
}

PseudoOutputs CpeModel::pseudo_forward(const Mat& weak_x) const {
  const Mat features = encoder_.forward(weak_x, nullptr);
  encoder_rows_forwarded_ += static_cast<std::uint64_t>(weak_x.rows());
  const Mat normalized = bn_[0].forward_frozen(features);

  PseudoOutputs out;
  out.labels.resize(experts_.size());
  out.confidences.resize(experts_.size());
  for (std::size_t i = 0; i < experts_.size(); ++i) {
    const Mat logits = experts_[i].forward(normalized);
    auto& labels = out.labels[i];
    auto& conf = out.confidences[i];
    labels.resize(static_cast<std::size_t>(logits.rows()));
    conf.resize(logits.rows());
    for (Index r = 0; r < logits.rows(); ++r) {
      Index arg = 0;
      logits.row(r).maxCoeff(&arg);
      labels[static_cast<std::size_t>(r)] = static_cast<int>(arg);
      conf(r) = softmax(logits.row(r).transpose()).maxCoeff();
    }
  }
  return out;
}

Mat CpeModel::encoder_features(const Mat& x) const {
  encoder_rows_forwarded_ += static_cast<std::uint64_t>(x.rows());
  return encoder_.forward(x, nullptr);
}

Mat CpeModel::eval_logits(const Mat& x, int expert) const {
  const Mat features = encoder_.forward(x, nullptr);
  encoder_rows_forwarded_ += static_cast<std::uint64_t>(x.rows());
  return experts_.at(static_cast<std::size_t>(expert)).forward(bn_[0].forward_eval(features));
}

std::vector<int> CpeModel::predict(const Mat& x) const {
  const Mat logits = eval_logits(x, eval_expert());
  std::vector<int> out(static_cast<std::size_t>(logits.rows()));
  for (Index r = 0; r < logits.rows(); ++r) {
    Index arg = 0;
    logits.row(r).maxCoeff(&arg);
    out[static_cast<std::size_t>(r)] = static_cast<int>(arg);
  }
  return out;
}

std::vector<ParamView> CpeModel::params() {
  std::vector<ParamView> out;
  encoder_.collect_params(out);
  static const char* kBranch[] = {"bn_hmt", "bn_mt", "bn_t"};
  for (int b = 0; b < kNumBranches; ++b)
    bn_[static_cast<std::size_t>(b)].collect_params(kBranch[b], out);
  for (std::size_t i = 0; i < experts_.size(); ++i)
    experts_[i].collect_params("expert" + std::to_string(i + 1), out);
  return out;
}

void CpeModel::zero_grads() {
  encoder_.zero_grads();
  for (auto& b : bn_) b.zero_grads();
  for (auto& e : experts_) e.zero_grads();
}

BranchMasks cbn_branch_masks(const PseudoOutputs& pseudo, const ClassGroups& groups,
                             Index batch) {
  BranchMasks m;
  for (Index r = 0; r < batch; ++r) m.active[0].push_back(r);
  for (Index r = 0; r < batch; ++r) {
    bool mt = false, t = false;
    for (const auto& labels : pseudo.labels) {
      const int y = labels.at(static_cast<std::size_t>(r));
      mt = mt || groups.in_medium_or_tail(y);
      t = t || groups.in_tail(y);
    }
    if (mt) m.active[1].push_back(r);
    if (t) m.active[2].push_back(r);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Serialization: a small JSON header followed by named raw-double blobs.
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'C', 'P', 'E', 'M', 'O', 'D', 'L', '1'};

void write_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in) throw std::runtime_error("model checkpoint: truncated stream");
  return v;
}

void write_blob(std::ostream& out, const std::string& name, const double* data,
                std::uint64_t n) {
  write_u64(out, name.size());
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_u64(out, n);
  out.write(reinterpret_cast<const char*>(data),
            static_cast<std::streamsize>(n * sizeof(double)));
}

std::string read_name(std::istream& in) {
  const auto len = read_u64(in);
  std::string name(len, '\0');
  in.read(name.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error("model checkpoint: truncated stream");
  return name;
}

void read_blob_into(std::istream& in, const std::string& expected, double* data,
                    std::uint64_t n) {
  const std::string name = read_name(in);
  if (name != expected)
    throw std::runtime_error("model checkpoint: expected blob '" + expected +
                             "', found '" + name + "'");
  const auto stored = read_u64(in);
  if (stored != n)
    throw std::runtime_error("model checkpoint: blob '" + name + "' has " +
                             std::to_string(stored) + " values, expected " +
                             std::to_string(n));
  in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) throw std::runtime_error("model checkpoint: truncated stream");
}

}  // namespace

void CpeModel::serialize(std::ostream& out) const {
  json header{{"version", 1},
              {"num_classes", cfg_.num_classes},
              {"num_experts", cfg_.num_experts},
              {"encoder",
               {{"input_dim", cfg_.encoder.input_dim},
                {"hidden", cfg_.encoder.hidden},
                {"feature_dim", cfg_.encoder.feature_dim}}},
              {"bn_momentum", cfg_.bn_momentum},
              {"bn_eps", cfg_.bn_eps},
              {"groups",
               {{"head_end", groups_.head_end}, {"tail_begin", groups_.tail_begin}}},
              {"bn_batches_seen",
               {bn_[0].batches_seen(), bn_[1].batches_seen(), bn_[2].batches_seen()}}};
  const std::string htext = header.dump();

  out.write(kMagic, sizeof(kMagic));
  write_u64(out, htext.size());
  out.write(htext.data(), static_cast<std::streamsize>(htext.size()));

  auto self = const_cast<CpeModel*>(this);
  auto views = self->params();
  write_u64(out, views.size());
  for (const auto& v : views)
    write_blob(out, v.name, v.value, static_cast<std::uint64_t>(v.size));

  static const char* kBranch[] = {"bn_hmt", "bn_mt", "bn_t"};
  write_u64(out, 2 * kNumBranches);
  for (int b = 0; b < kNumBranches; ++b) {
    const auto& bnorm = bn_[static_cast<std::size_t>(b)];
    write_blob(out, std::string(kBranch[b]) + ".running_mean",
               bnorm.running_mean().data(),
               static_cast<std::uint64_t>(bnorm.running_mean().size()));
    write_blob(out, std::string(kBranch[b]) + ".running_var",
               bnorm.running_var().data(),
               static_cast<std::uint64_t>(bnorm.running_var().size()));
  }
}

CpeModel CpeModel::deserialize(std::istream& in) {
  char magic[sizeof(kMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("model checkpoint: bad magic");
  const auto hlen = read_u64(in);
  std::string htext(hlen, '\0');
  in.read(htext.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw std::runtime_error("model checkpoint: truncated header");
  const json header = json::parse(htext);
  if (header.at("version").get<int>() != 1)
    throw std::runtime_error("model checkpoint: unsupported version");

  CpeModelConfig cfg;
  cfg.num_classes = header.at("num_classes").get<int>();
  cfg.num_experts = header.at("num_experts").get<int>();
  cfg.encoder.input_dim = header.at("encoder").at("input_dim").get<int>();
  cfg.encoder.hidden = header.at("encoder").at("hidden").get<std::vector<int>>();
  cfg.encoder.feature_dim = header.at("encoder").at("feature_dim").get<int>();
  cfg.bn_momentum = header.at("bn_momentum").get<double>();
  cfg.bn_eps = header.at("bn_eps").get<double>();

  CpeModel model(cfg, /*seed=*/0);
  auto views = model.params();
  const auto count = read_u64(in);
  if (count != views.size())
    throw std::runtime_error("model checkpoint: parameter count mismatch");
  for (auto& v : views) read_blob_into(in, v.name, v.value, static_cast<std::uint64_t>(v.size));

  const auto stats = read_u64(in);
  if (stats != 2 * kNumBranches)
    throw std::runtime_error("model checkpoint: BN state count mismatch");
  static const char* kBranch[] = {"bn_hmt", "bn_mt", "bn_t"};
  const auto seen = header.at("bn_batches_seen").get<std::vector<std::int64_t>>();
  for (int b = 0; b < kNumBranches; ++b) {
    auto& bnorm = model.bn_[static_cast<std::size_t>(b)];
    read_blob_into(in, std::string(kBranch[b]) + ".running_mean",
                   bnorm.mutable_running_mean().data(),
                   static_cast<std::uint64_t>(bnorm.running_mean().size()));
    read_blob_into(in, std::string(kBranch[b]) + ".running_var",
                   bnorm.mutable_running_var().data(),
                   static_cast<std::uint64_t>(bnorm.running_var().size()));
    bnorm.set_batches_seen(seen.at(static_cast<std::size_t>(b)));
  }
  return model;
}

}  // namespace cpe
