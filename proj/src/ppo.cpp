#include "quadrace/ppo.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>

#include "quadrace/errors.hpp"

namespace quadrace {

void PpoConfig::validate() const {
  if (n_envs <= 0 || rollout_length <= 0 || minibatch_size <= 0 || epochs_per_update <= 0) {
    throw std::invalid_argument("PPO sizes must be positive");
  }
  if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("gamma must lie in (0, 1]");
  if (!(clip_range > 0.0)) throw std::invalid_argument("clip_range must be positive");
  if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) {
    throw std::invalid_argument("gae_lambda must lie in [0, 1]");
  }
  if (steps_per_update() % minibatch_size != 0) {
    throw std::invalid_argument("rollout_length * n_envs must be divisible by minibatch_size");
  }
  if (total_steps <= 0) throw std::invalid_argument("total_steps must be positive");
}

nlohmann::json PpoConfig::to_json() const {
  return {{"n_envs", n_envs},
          {"gamma", gamma},
          {"total_steps", total_steps},
          {"rollout_length", rollout_length},
          {"minibatch_size", minibatch_size},
          {"epochs_per_update", epochs_per_update},
          {"clip_range", clip_range},
          {"gae_lambda", gae_lambda},
          {"learning_rate", learning_rate},
          {"value_coef", value_coef},
          {"entropy_coef", entropy_coef},
          {"max_grad_norm", max_grad_norm},
          {"init_log_std", init_log_std},
          {"init_action_bias", init_action_bias},
          {"seed", seed},
          {"hidden", hidden}};
}

RolloutBatch collect_rollouts(const PolicyParams& policy, VecEnv& envs, int rollout_length,
                              double gamma, Rng& rng, std::vector<EpisodeStats>* finished) {
  const int n = static_cast<int>(envs.size());
  const Eigen::Index total = static_cast<Eigen::Index>(rollout_length) * n;
  RolloutBatch b;
  b.rollout_length = rollout_length;
  b.n_envs = n;
  b.obs.resize(kObsDim, total);
  b.actions.resize(kActDim, total);
  b.rewards.resize(total);
  b.values.resize(total);
  b.log_probs.resize(total);
  b.dones.resize(total);
  b.bootstrap = Eigen::VectorXd::Zero(total);

  const Vec4 log_std = policy.log_std();
  Eigen::MatrixXd obs(kObsDim, n);
  std::vector<MotorCommand> commands(n);
  for (int t = 0; t < rollout_length; ++t) {
    for (int e = 0; e < n; ++e) obs.col(e) = envs.observations()[e];
    const Eigen::MatrixXd mean = action_mean_batch(policy, obs);
    const Eigen::RowVectorXd value = value_batch(policy, obs);
    for (int e = 0; e < n; ++e) {
      const auto k = static_cast<Eigen::Index>(b.index(t, e));
      const ActionSample s = sample_from_mean(mean.col(e), log_std, rng);
      commands[e] = s.command;
      b.obs.col(k) = obs.col(e);
      b.actions.col(k) = s.raw;
      b.log_probs[k] = s.log_prob;
      b.values[k] = value[e];
    }

    const std::vector<StepResult> results = envs.step(commands);
    std::vector<int> truncated;
    for (int e = 0; e < n; ++e) {
      const auto k = static_cast<Eigen::Index>(b.index(t, e));
      const StepResult& r = results[e];
      b.rewards[k] = r.reward;
      b.dones[k] = r.done ? 1.0 : 0.0;
      if (r.done && r.done_reason == DoneReason::Timeout) truncated.push_back(e);
      if (r.done && finished) finished->push_back({r.episode_return, r.episode_length, r.gates_passed});
    }
    if (!truncated.empty()) {
      Eigen::MatrixXd term(kObsDim, static_cast<Eigen::Index>(truncated.size()));
      for (std::size_t i = 0; i < truncated.size(); ++i) {
        term.col(static_cast<Eigen::Index>(i)) = results[truncated[i]].terminal_observation;
      }
      const Eigen::RowVectorXd v_term = value_batch(policy, term);
      for (std::size_t i = 0; i < truncated.size(); ++i) {
        b.bootstrap[static_cast<Eigen::Index>(b.index(t, truncated[i]))] =
            gamma * v_term[static_cast<Eigen::Index>(i)];
      }
    }
  }
  for (int e = 0; e < n; ++e) obs.col(e) = envs.observations()[e];
  b.last_values = value_batch(policy, obs).transpose();
  return b;
}

GaeResult compute_gae(const RolloutBatch& batch, double gamma, double lambda) {
  const int n = batch.n_envs;
  GaeResult out;
  out.advantages.resize(static_cast<Eigen::Index>(batch.size()));
  for (int e = 0; e < n; ++e) {
    double running = 0.0;
    for (int t = batch.rollout_length - 1; t >= 0; --t) {
      const auto k = static_cast<Eigen::Index>(batch.index(t, e));
      const double next_value = t + 1 == batch.rollout_length
                                    ? batch.last_values[e]
                                    : batch.values[static_cast<Eigen::Index>(batch.index(t + 1, e))];
      const double nonterminal = 1.0 - batch.dones[k];
      const double delta = batch.rewards[k] + batch.bootstrap[k] +
                           gamma * next_value * nonterminal - batch.values[k];
      running = delta + gamma * lambda * nonterminal * running;
      out.advantages[k] = running;
    }
  }
  out.returns = out.advantages + batch.values;
  return out;
}

void normalize_advantages(Eigen::VectorXd& adv) {
  const double mean = adv.mean();
  adv.array() -= mean;
  const double std = std::sqrt(adv.squaredNorm() / static_cast<double>(adv.size()));
  adv /= (std + 1e-8);
}

Adam::Adam(Eigen::Index size, double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps),
      m_(Eigen::VectorXd::Zero(size)), v_(Eigen::VectorXd::Zero(size)) {}

void Adam::step(Eigen::VectorXd& params, const Eigen::VectorXd& grad) {
  ++t_;
  m_ = beta1_ * m_ + (1.0 - beta1_) * grad;
  v_ = beta2_ * v_ + (1.0 - beta2_) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  params.array() -= lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
}

UpdateStats ppo_update(PolicyParams& policy, Adam& optimizer, const RolloutBatch& batch,
                       const GaeResult& gae, const PpoConfig& config, Rng& rng) {
  const Eigen::Index total = static_cast<Eigen::Index>(batch.size());
  const Eigen::Index mb_size = std::min<Eigen::Index>(config.minibatch_size, total);
  Eigen::VectorXd adv = gae.advantages;
  normalize_advantages(adv);

  const PolicyParams backup = policy;
  const Adam optimizer_backup = optimizer;
  const LossSpec spec{config.clip_range, config.value_coef, config.entropy_coef};

  std::vector<Eigen::Index> order(static_cast<std::size_t>(total));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  Minibatch mb;
  mb.obs.resize(kObsDim, mb_size);
  mb.actions.resize(kActDim, mb_size);
  mb.old_log_prob.resize(mb_size);
  mb.advantages.resize(mb_size);
  mb.returns.resize(mb_size);

  UpdateStats stats;
  PolicyParams grad = policy.zeros_like();
  for (int epoch = 0; epoch < config.epochs_per_update; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (Eigen::Index start = 0; start + mb_size <= total; start += mb_size) {
      for (Eigen::Index j = 0; j < mb_size; ++j) {
        const Eigen::Index k = order[static_cast<std::size_t>(start + j)];
        mb.obs.col(j) = batch.obs.col(k);
        mb.actions.col(j) = batch.actions.col(k);
        mb.old_log_prob[j] = batch.log_probs[k];
        mb.advantages[j] = adv[k];
        mb.returns[j] = gae.returns[k];
      }
      grad.values().setZero();
      const LossValue loss = ppo_loss(policy, mb, spec, &grad);
      if (!std::isfinite(loss.total) || !grad.values().allFinite()) {
        policy = backup;
        optimizer = optimizer_backup;
        throw NonFiniteLoss("PPO loss or gradient became non-finite");
      }
      if (stats.gradient_steps == 0) {
        stats.first_loss_pi = loss.policy;
        // Recompute the ratios at the behavior parameters for diagnostics.
        const ForwardCache cache = forward_batch(policy, mb.obs);
        double dev = 0.0;
        for (Eigen::Index j = 0; j < mb_size; ++j) {
          const double lp = gaussian_log_prob(cache.mean.col(j), policy.log_std(), mb.actions.col(j));
          dev = std::max(dev, std::abs(std::exp(lp - mb.old_log_prob[j]) - 1.0));
        }
        stats.first_max_ratio_dev = dev;
      }
      const double norm = grad.values().norm();
      if (config.max_grad_norm > 0.0 && norm > config.max_grad_norm) {
        grad.values() *= config.max_grad_norm / (norm + 1e-6);
      }
      optimizer.step(policy.values(), grad.values());
      policy.clamp_log_std();

      stats.loss_pi += loss.policy;
      stats.loss_v += loss.value;
      stats.entropy += loss.entropy;
      stats.clip_frac += loss.clip_fraction;
      stats.approx_kl += loss.approx_kl;
      ++stats.gradient_steps;
    }
  }
  if (stats.gradient_steps > 0) {
    const double k = stats.gradient_steps;
    stats.loss_pi /= k;
    stats.loss_v /= k;
    stats.entropy /= k;
    stats.clip_frac /= k;
    stats.approx_kl /= k;
  }
  if (!policy.values().allFinite()) {
    policy = backup;
    optimizer = optimizer_backup;
    throw NonFiniteLoss("parameters became non-finite");
  }
  return stats;
}

const char* const kCurveHeader =
    "update,steps,mean_ep_reward,mean_ep_len,clip_frac,approx_kl,loss_pi,loss_v";

void write_curve_csv(const std::vector<CurveRow>& curve, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out.precision(10);
  out << kCurveHeader << '\n';
  for (const CurveRow& r : curve) {
    out << r.update << ',' << r.steps << ',' << r.mean_ep_reward << ',' << r.mean_ep_len << ','
        << r.clip_frac << ',' << r.approx_kl << ',' << r.loss_pi << ',' << r.loss_v << '\n';
  }
}

TrainResult train(const TrainSpec& spec, const PpoConfig& config,
                  const std::filesystem::path& out_dir, std::ostream* log) {
  config.validate();
  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);

  VecEnv envs(spec.track, spec.scheme, static_cast<std::size_t>(config.n_envs),
              derive_seed(config.seed, 1), config.threads);
  Rng init_rng(derive_seed(config.seed, 2));
  Rng rng(derive_seed(config.seed, 3));
  TrainResult result{init_policy(init_rng, config.hidden), {}};
  PolicyParams& policy = result.policy;
  policy.log_std().setConstant(config.init_log_std);
  policy.bias(policy.actor().back()).setConstant(config.init_action_bias);
  Adam optimizer(policy.size(), config.learning_rate);

  const std::int64_t per_update = config.steps_per_update();
  const std::int64_t updates = (config.total_steps + per_update - 1) / per_update;
  std::deque<EpisodeStats> window;
  constexpr std::size_t kWindow = 100;

  auto meta = [&](std::int64_t steps) {
    CheckpointMeta m;
    m.training_steps = steps;
    m.hyperparameters = config.to_json();
    m.hyperparameters["dr"] = spec.scheme.describe();
    return m;
  };

  std::int64_t steps = 0;
  for (std::int64_t u = 1; u <= updates; ++u) {
    std::vector<EpisodeStats> finished;
    const RolloutBatch batch =
        collect_rollouts(policy, envs, config.rollout_length, config.gamma, rng, &finished);
    steps += per_update;
    for (const EpisodeStats& s : finished) {
      window.push_back(s);
      if (window.size() > kWindow) window.pop_front();
    }
    const GaeResult gae = compute_gae(batch, config.gamma, config.gae_lambda);
    UpdateStats stats;
    try {
      stats = ppo_update(policy, optimizer, batch, gae, config, rng);
    } catch (const NonFiniteLoss&) {
      if (!out_dir.empty()) save_checkpoint(policy, out_dir / "checkpoint_last_good", meta(steps));
      if (!out_dir.empty()) write_curve_csv(result.curve, out_dir / "curve.csv");
      throw;
    }

    CurveRow row;
    row.update = static_cast<int>(u);
    row.steps = steps;
    row.mean_ep_reward = std::numeric_limits<double>::quiet_NaN();
    row.mean_ep_len = std::numeric_limits<double>::quiet_NaN();
    if (!window.empty()) {
      double r = 0.0, l = 0.0;
      for (const EpisodeStats& s : window) {
        r += s.reward;
        l += s.length;
      }
      row.mean_ep_reward = r / static_cast<double>(window.size());
      row.mean_ep_len = l / static_cast<double>(window.size());
    }
    row.clip_frac = stats.clip_frac;
    row.approx_kl = stats.approx_kl;
    row.loss_pi = stats.loss_pi;
    row.loss_v = stats.loss_v;
    result.curve.push_back(row);

    if (log) {
      *log << "update " << u << "/" << updates << " steps " << steps << " ep_rew "
           << row.mean_ep_reward << " ep_len " << row.mean_ep_len << " kl " << row.approx_kl
           << " clip " << row.clip_frac << " loss_v " << row.loss_v << " std "
           << policy.log_std().array().exp().mean() << std::endl;
    }
    if (!out_dir.empty()) {
      write_curve_csv(result.curve, out_dir / "curve.csv");
      if (config.checkpoint_every > 0 && u % config.checkpoint_every == 0) {
        save_checkpoint(policy, out_dir / ("checkpoint_" + std::to_string(u)), meta(steps));
      }
    }
  }
  if (!out_dir.empty()) save_checkpoint(policy, out_dir / "checkpoint_final", meta(steps));
  return result;
}

}  // namespace quadrace
