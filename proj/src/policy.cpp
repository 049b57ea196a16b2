#include "quadrace/policy.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>

#include "quadrace/errors.hpp"

namespace quadrace {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;  // log(2 pi)
constexpr const char* kCheckpointFormat = "quadrace-policy-v1";

std::vector<DenseLayout> make_trunk(const std::vector<int>& hidden, Eigen::Index head,
                                    Eigen::Index& offset) {
  std::vector<DenseLayout> layers;
  Eigen::Index in = kObsDim;
  for (int h : hidden) {
    layers.push_back({in, h, offset});
    offset = layers.back().end();
    in = h;
  }
  layers.push_back({in, head, offset});
  offset = layers.back().end();
  return layers;
}

Eigen::MatrixXd dense(const PolicyParams& p, const DenseLayout& l, const Eigen::MatrixXd& x) {
  Eigen::MatrixXd z = p.weight(l) * x;
  z.colwise() += p.bias(l);
  return z;
}

// Runs the hidden layers, storing post-activations; returns the head output.
Eigen::MatrixXd run_trunk(const PolicyParams& p, const std::vector<DenseLayout>& layers,
                          const Eigen::MatrixXd& obs, std::vector<Eigen::MatrixXd>* hidden) {
  Eigen::MatrixXd h = obs;
  for (std::size_t i = 0; i + 1 < layers.size(); ++i) {
    h = dense(p, layers[i], h).cwiseMax(0.0);
    if (hidden) hidden->push_back(h);
  }
  return dense(p, layers.back(), h);
}

void backprop_trunk(const PolicyParams& p, const std::vector<DenseLayout>& layers,
                    const Eigen::MatrixXd& obs, const std::vector<Eigen::MatrixXd>& hidden,
                    const Eigen::MatrixXd& d_out, PolicyParams& grad) {
  Eigen::MatrixXd dz = d_out;
  for (std::size_t k = layers.size(); k-- > 0;) {
    const DenseLayout& l = layers[k];
    const Eigen::MatrixXd& input = k == 0 ? obs : hidden[k - 1];
    grad.weight(l).noalias() += dz * input.transpose();
    grad.bias(l) += dz.rowwise().sum();
    if (k == 0) break;
    Eigen::MatrixXd dh = p.weight(l).transpose() * dz;
    dz = dh.cwiseProduct((hidden[k - 1].array() > 0.0).cast<double>().matrix());
  }
}

void orthogonal_fill(Eigen::Map<RowMajorMatrix> w, double gain, Rng& rng) {
  const Eigen::Index rows = w.rows(), cols = w.cols();
  const Eigen::Index big = std::max(rows, cols), small = std::min(rows, cols);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd g(big, small);
  for (Eigen::Index j = 0; j < small; ++j)
    for (Eigen::Index i = 0; i < big; ++i) g(i, j) = normal(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(big, small);
  const Eigen::MatrixXd r = qr.matrixQR().topLeftCorner(small, small);
  for (Eigen::Index j = 0; j < small; ++j) {
    if (r(j, j) < 0.0) q.col(j) *= -1.0;
  }
  if (rows >= cols) {
    w = gain * q;
  } else {
    w = gain * q.transpose();
  }
}

void write_le_f32(std::ostream& out, float x) {
  const auto bits = std::bit_cast<std::uint32_t>(x);
  const char bytes[4] = {static_cast<char>(bits & 0xff), static_cast<char>((bits >> 8) & 0xff),
                         static_cast<char>((bits >> 16) & 0xff),
                         static_cast<char>((bits >> 24) & 0xff)};
  out.write(bytes, 4);
}

float read_le_f32(const unsigned char* b) {
  const std::uint32_t bits = std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) |
                             (std::uint32_t(b[2]) << 16) | (std::uint32_t(b[3]) << 24);
  return std::bit_cast<float>(bits);
}

nlohmann::json layout_json(const PolicyParams& p) {
  nlohmann::json layout = nlohmann::json::array();
  auto add_trunk = [&](const std::string& name, const std::vector<DenseLayout>& layers) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string prefix = name + "." + std::to_string(i);
      layout.push_back({{"name", prefix + ".weight"}, {"shape", {layers[i].out, layers[i].in}}});
      layout.push_back({{"name", prefix + ".bias"}, {"shape", {layers[i].out}}});
    }
  };
  add_trunk("actor", p.actor());
  layout.push_back({{"name", "log_std"}, {"shape", {kActDim}}});
  add_trunk("critic", p.critic());
  return layout;
}

}  // namespace

PolicyParams::PolicyParams(std::vector<int> hidden) : hidden_(std::move(hidden)) {
  if (hidden_.empty()) throw std::invalid_argument("policy needs at least one hidden layer");
  for (int h : hidden_) {
    if (h <= 0) throw std::invalid_argument("hidden widths must be positive");
  }
  Eigen::Index offset = 0;
  actor_ = make_trunk(hidden_, kActDim, offset);
  log_std_offset_ = offset;
  offset += kActDim;
  critic_ = make_trunk(hidden_, 1, offset);
  values_ = Eigen::VectorXd::Zero(offset);
}

PolicyParams PolicyParams::zeros_like() const { return PolicyParams(hidden_); }

void PolicyParams::clamp_log_std() {
  log_std() = log_std().cwiseMax(kLogStdMin).cwiseMin(kLogStdMax);
}

PolicyParams init_policy(Rng& rng, std::vector<int> hidden) {
  PolicyParams p(std::move(hidden));
  const double hidden_gain = std::numbers::sqrt2;
  for (std::size_t i = 0; i < p.actor().size(); ++i) {
    const bool head = i + 1 == p.actor().size();
    orthogonal_fill(p.weight(p.actor()[i]), head ? 0.01 : hidden_gain, rng);
  }
  for (std::size_t i = 0; i < p.critic().size(); ++i) {
    const bool head = i + 1 == p.critic().size();
    orthogonal_fill(p.weight(p.critic()[i]), head ? 1.0 : hidden_gain, rng);
  }
  return p;
}

ForwardCache forward_batch(const PolicyParams& params, const Eigen::MatrixXd& obs) {
  ForwardCache cache;
  cache.mean = run_trunk(params, params.actor(), obs, &cache.actor_hidden);
  cache.value = run_trunk(params, params.critic(), obs, &cache.critic_hidden);
  return cache;
}

Eigen::MatrixXd action_mean_batch(const PolicyParams& params, const Eigen::MatrixXd& obs) {
  return run_trunk(params, params.actor(), obs, nullptr);
}

Eigen::RowVectorXd value_batch(const PolicyParams& params, const Eigen::MatrixXd& obs) {
  return run_trunk(params, params.critic(), obs, nullptr);
}

PolicyOutput forward(const PolicyParams& params, const Observation& obs) {
  const Eigen::MatrixXd x = obs;
  PolicyOutput out;
  out.mean = run_trunk(params, params.actor(), x, nullptr).col(0);
  out.value = run_trunk(params, params.critic(), x, nullptr)(0, 0);
  return out;
}

double gaussian_log_prob(const Vec4& mean, const Vec4& log_std, const Vec4& x) {
  const Vec4 z = (x - mean).cwiseQuotient(log_std.array().exp().matrix());
  return -0.5 * z.squaredNorm() - log_std.sum() - 0.5 * kActDim * kLog2Pi;
}

double gaussian_entropy(const Vec4& log_std) {
  return log_std.sum() + 0.5 * kActDim * (1.0 + kLog2Pi);
}

ActionSample sample_from_mean(const Vec4& mean, const Vec4& log_std, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  ActionSample s;
  for (int i = 0; i < kActDim; ++i) s.raw[i] = mean[i] + std::exp(log_std[i]) * normal(rng);
  s.command = MotorCommand(s.raw);
  s.log_prob = gaussian_log_prob(mean, log_std, s.raw);
  return s;
}

ActionSample sample_action(const PolicyParams& params, const Observation& obs, Rng& rng) {
  return sample_from_mean(forward(params, obs).mean, params.log_std(), rng);
}

LogProbEntropy log_prob_and_entropy(const PolicyParams& params, const Observation& obs,
                                    const Vec4& raw_action) {
  const Vec4 mean = forward(params, obs).mean;
  return {gaussian_log_prob(mean, params.log_std(), raw_action),
          gaussian_entropy(params.log_std())};
}

LossValue ppo_loss(const PolicyParams& params, const Minibatch& mb, const LossSpec& spec,
                   PolicyParams* grad) {
  const Eigen::Index n = mb.obs.cols();
  const double inv_n = 1.0 / static_cast<double>(n);
  const ForwardCache cache = forward_batch(params, mb.obs);
  const Vec4 log_std = params.log_std();
  const Eigen::Array4d inv_var = (-2.0 * log_std.array()).exp();

  // z = (a - mean) / sigma, per dimension and sample
  const Eigen::MatrixXd diff = mb.actions - cache.mean;
  const Eigen::ArrayXXd z2 = diff.array().square().colwise() * inv_var;
  const Eigen::ArrayXd log_prob =
      (-0.5 * z2.colwise().sum()).transpose() - log_std.sum() - 0.5 * kActDim * kLog2Pi;
  const Eigen::ArrayXd log_ratio = log_prob - mb.old_log_prob.array();
  const Eigen::ArrayXd ratio = log_ratio.exp();
  const Eigen::ArrayXd adv = mb.advantages.array();
  const double lo = 1.0 - spec.clip_range, hi = 1.0 + spec.clip_range;
  const Eigen::ArrayXd surr1 = ratio * adv;
  const Eigen::ArrayXd surr2 = ratio.cwiseMax(lo).cwiseMin(hi) * adv;
  const Eigen::ArrayXd v_err = cache.value.transpose().array() - mb.returns.array();

  LossValue out;
  out.policy = -surr1.cwiseMin(surr2).mean();
  out.value = v_err.square().mean();
  out.entropy = gaussian_entropy(log_std);
  out.total = out.policy + spec.value_coef * out.value - spec.entropy_coef * out.entropy;
  out.clip_fraction = ((ratio - 1.0).abs() > spec.clip_range).cast<double>().mean();
  out.approx_kl = ((ratio - 1.0) - log_ratio).mean();
  if (!grad) return out;

  // dL/dlog_prob per sample: only the unclipped branch carries gradient.
  const Eigen::ArrayXd d_logp =
      (surr1 <= surr2).select(-adv * ratio * inv_n, Eigen::ArrayXd::Zero(n));
  // dlogp/dmean = diff / sigma^2, dlogp/dlog_std = z^2 - 1
  const Eigen::MatrixXd d_mean =
      ((diff.array().colwise() * inv_var).rowwise() * d_logp.transpose()).matrix();
  const Eigen::Array4d d_log_std = (z2.rowwise() * d_logp.transpose()).rowwise().sum() -
                                   d_logp.sum() - spec.entropy_coef;
  grad->log_std() += d_log_std.matrix();
  backprop_trunk(params, params.actor(), mb.obs, cache.actor_hidden, d_mean, *grad);

  const Eigen::MatrixXd d_value = (2.0 * spec.value_coef * inv_n * v_err).matrix().transpose();
  backprop_trunk(params, params.critic(), mb.obs, cache.critic_hidden, d_value, *grad);
  return out;
}

void save_checkpoint(const PolicyParams& params, const std::filesystem::path& stem,
                     const CheckpointMeta& meta) {
  std::filesystem::path json_path = stem, bin_path = stem;
  json_path += ".json";
  bin_path += ".bin";
  nlohmann::json manifest;
  manifest["format"] = kCheckpointFormat;
  manifest["obs_dim"] = kObsDim;
  manifest["act_dim"] = kActDim;
  manifest["hidden"] = params.hidden();
  manifest["param_count"] = params.size();
  manifest["dtype"] = "float32-le";
  manifest["blob"] = bin_path.filename().string();
  manifest["layout"] = layout_json(params);
  manifest["training_steps"] = meta.training_steps;
  manifest["hyperparameters"] = meta.hyperparameters;

  std::ofstream bin(bin_path, std::ios::binary);
  if (!bin) throw IoError("cannot write " + bin_path.string());
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    write_le_f32(bin, static_cast<float>(params.values()[i]));
  }
  if (!bin) throw IoError("failed writing " + bin_path.string());
  std::ofstream js(json_path);
  if (!js) throw IoError("cannot write " + json_path.string());
  js << manifest.dump(2) << '\n';
}

PolicyParams load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta) {
  std::filesystem::path json_path = path;
  if (json_path.extension() == ".bin" || json_path.extension() == ".json") {
    json_path.replace_extension(".json");
  } else {
    json_path += ".json";
  }
  std::ifstream js(json_path);
  if (!js) throw IoError("cannot open " + json_path.string());
  nlohmann::json manifest;
  std::vector<int> hidden;
  std::string blob_name;
  Eigen::Index count = 0;
  try {
    js >> manifest;
    if (manifest.at("format").get<std::string>() != kCheckpointFormat) {
      throw CorruptCheckpoint("unknown checkpoint format");
    }
    if (manifest.at("obs_dim").get<int>() != kObsDim ||
        manifest.at("act_dim").get<int>() != kActDim) {
      throw CorruptCheckpoint("observation/action dimensions do not match");
    }
    hidden = manifest.at("hidden").get<std::vector<int>>();
    count = manifest.at("param_count").get<Eigen::Index>();
    blob_name = manifest.at("blob").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw CorruptCheckpoint(json_path.string() + ": " + e.what());
  }

  PolicyParams params = [&] {
    try {
      return PolicyParams(hidden);
    } catch (const std::invalid_argument& e) {
      throw CorruptCheckpoint(e.what());
    }
  }();
  if (params.size() != count || manifest.value("layout", nlohmann::json()) != layout_json(params)) {
    throw CorruptCheckpoint("parameter layout does not match the declared shapes");
  }

  const std::filesystem::path bin_path = json_path.parent_path() / blob_name;
  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw IoError("cannot open " + bin_path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(bin)),
                                   std::istreambuf_iterator<char>());
  if (static_cast<Eigen::Index>(bytes.size()) != 4 * count) {
    throw CorruptCheckpoint("blob size does not match param_count");
  }
  for (Eigen::Index i = 0; i < count; ++i) {
    params.values()[i] = read_le_f32(bytes.data() + 4 * i);
  }
  if (!params.values().allFinite()) throw CorruptCheckpoint("non-finite parameters");
  if (meta) {
    meta->training_steps = manifest.value("training_steps", std::int64_t{0});
    meta->hyperparameters = manifest.value("hyperparameters", nlohmann::json::object());
  }
  return params;
}

}  // namespace quadrace
