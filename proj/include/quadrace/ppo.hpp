#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <vector>

#include "quadrace/env.hpp"
#include "quadrace/policy.hpp"

namespace quadrace {

struct PpoConfig {
  int n_envs = 100;
  double gamma = 0.999;
  std::int64_t total_steps = 100'000'000;
  int rollout_length = 512;
  int minibatch_size = 6400;
  int epochs_per_update = 10;
  double clip_range = 0.2;
  double gae_lambda = 0.95;
  double learning_rate = 3e-4;
  double value_coef = 0.5;
  double entropy_coef = 0.0;
  double max_grad_norm = 0.5;
  std::uint64_t seed = 0;
  std::vector<int> hidden{64, 64, 64};
  // Initial log standard deviation and action-mean bias of the policy head.
  double init_log_std = 0.0;
  double init_action_bias = 0.0;
  int threads = 1;
  // Write a checkpoint every this many updates (0: only the final one).
  int checkpoint_every = 0;

  void validate() const;
  std::int64_t steps_per_update() const {
    return static_cast<std::int64_t>(rollout_length) * n_envs;
  }
  nlohmann::json to_json() const;
};

// Rollout storage; transition (t, e) lives at column/index t * n_envs + e.
struct RolloutBatch {
  int rollout_length = 0;
  int n_envs = 0;
  Eigen::MatrixXd obs;        // 20 x T*N
  Eigen::MatrixXd actions;    // 4 x T*N, unclipped
  Eigen::VectorXd rewards;    // environment rewards
  Eigen::VectorXd values;     // V(s_t)
  Eigen::VectorXd log_probs;
  Eigen::VectorXd dones;      // 1 when the episode ended at this transition
  // gamma * V(terminal observation) for time-limit truncations, else 0.
  Eigen::VectorXd bootstrap;
  Eigen::VectorXd last_values;  // V of the observation after the last step, N

  std::size_t size() const { return static_cast<std::size_t>(rewards.size()); }
  std::size_t index(int t, int e) const { return static_cast<std::size_t>(t) * n_envs + e; }
};

struct EpisodeStats {
  double reward = 0.0;
  int length = 0;
  int gates = 0;
};

RolloutBatch collect_rollouts(const PolicyParams& policy, VecEnv& envs, int rollout_length,
                              double gamma, Rng& rng, std::vector<EpisodeStats>* finished = nullptr);

struct GaeResult {
  Eigen::VectorXd advantages;
  Eigen::VectorXd returns;
};

// Raw (unnormalized) GAE. Truncation bootstraps enter via batch.bootstrap.
GaeResult compute_gae(const RolloutBatch& batch, double gamma, double lambda);

// Shifts and scales to zero mean and unit (population) standard deviation.
void normalize_advantages(Eigen::VectorXd& adv);

class Adam {
 public:
  explicit Adam(Eigen::Index size, double lr = 3e-4, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8);
  void step(Eigen::VectorXd& params, const Eigen::VectorXd& grad);
  void set_learning_rate(double lr) { lr_ = lr; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  Eigen::VectorXd m_, v_;
};

struct UpdateStats {
  double loss_pi = 0.0;
  double loss_v = 0.0;
  double entropy = 0.0;
  double clip_frac = 0.0;
  double approx_kl = 0.0;
  int gradient_steps = 0;
  // Policy loss of the first minibatch before any parameter change.
  double first_loss_pi = 0.0;
  double first_max_ratio_dev = 0.0;
};

// Epochs of shuffled minibatch updates. Throws NonFiniteLoss, leaving
// `policy` untouched.
UpdateStats ppo_update(PolicyParams& policy, Adam& optimizer, const RolloutBatch& batch,
                       const GaeResult& gae, const PpoConfig& config, Rng& rng);

struct CurveRow {
  int update = 0;
  std::int64_t steps = 0;
  double mean_ep_reward = 0.0;
  double mean_ep_len = 0.0;
  double clip_frac = 0.0;
  double approx_kl = 0.0;
  double loss_pi = 0.0;
  double loss_v = 0.0;
};

struct TrainSpec {
  Track track;
  RandomizationScheme scheme;
};

struct TrainResult {
  PolicyParams policy;
  std::vector<CurveRow> curve;
};

// Full training loop. When out_dir is non-empty, writes curve.csv and
// checkpoint_<update>/checkpoint_final there. On NonFiniteLoss the last good
// parameters are saved as checkpoint_last_good before rethrowing.
TrainResult train(const TrainSpec& spec, const PpoConfig& config,
                  const std::filesystem::path& out_dir = {}, std::ostream* log = nullptr);

extern const char* const kCurveHeader;
void write_curve_csv(const std::vector<CurveRow>& curve, const std::filesystem::path& path);

}  // namespace quadrace
