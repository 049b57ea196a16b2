#include <doctest.h>

#include <fstream>
#include <sstream>

#include "oracles.hpp"
#include "quadrace/errors.hpp"
#include "quadrace/ppo.hpp"

using namespace quadrace;

namespace {

RolloutBatch random_batch(int t_len, int n_envs, Rng& rng, double done_prob) {
  RolloutBatch b;
  b.rollout_length = t_len;
  b.n_envs = n_envs;
  const int total = t_len * n_envs;
  b.obs = Eigen::MatrixXd::Zero(kObsDim, total);
  b.actions = Eigen::MatrixXd::Zero(kActDim, total);
  b.rewards.resize(total);
  b.values.resize(total);
  b.log_probs = Eigen::VectorXd::Zero(total);
  b.dones = Eigen::VectorXd::Zero(total);
  b.bootstrap = Eigen::VectorXd::Zero(total);
  b.last_values.resize(n_envs);
  for (int k = 0; k < total; ++k) {
    b.rewards[k] = uniform(rng, -1, 1);
    b.values[k] = uniform(rng, -2, 2);
    b.dones[k] = uniform(rng, 0, 1) < done_prob ? 1.0 : 0.0;
  }
  for (int e = 0; e < n_envs; ++e) b.last_values[e] = uniform(rng, -2, 2);
  return b;
}

PolicyParams dropping_policy() {
  // Zero weights: action mean 0 (all motors off), negligible noise.
  PolicyParams p;
  p.log_std().setConstant(kLogStdMin);
  return p;
}

}  // namespace

TEST_SUITE("ppo") {
  TEST_CASE("rollout batch shape") {
    VecEnv envs(default_figure8(), RandomizationScheme::fixed(params_5inch()), 2, 1);
    Rng rng(1);
    Rng init(2);
    const RolloutBatch b = collect_rollouts(init_policy(init), envs, 8, 0.999, rng);
    CHECK(b.size() == 16);
    CHECK(b.obs.cols() == 16);
    CHECK(b.actions.cols() == 16);
    CHECK(b.last_values.size() == 2);
    CHECK(b.obs.allFinite());
    CHECK(b.log_probs.allFinite());
  }

  TEST_CASE("terminal transitions carry no bootstrap") {
    VecEnv envs(default_figure8(), RandomizationScheme::fixed(params_5inch()), 3, 7);
    Rng rng(3);
    std::vector<EpisodeStats> finished;
    const RolloutBatch b = collect_rollouts(dropping_policy(), envs, 400, 0.999, rng, &finished);
    int dones = 0;
    for (std::size_t k = 0; k < b.size(); ++k) {
      if (b.dones[static_cast<Eigen::Index>(k)] == 1.0) {
        ++dones;
        REQUIRE(b.bootstrap[static_cast<Eigen::Index>(k)] == 0.0);
      }
    }
    CHECK(dones >= 3);
    CHECK(finished.size() == static_cast<std::size_t>(dones));
    for (const EpisodeStats& s : finished) CHECK(s.length < kMaxEpisodeSteps);
  }

  TEST_CASE("batch rewards replay from the same seeds") {
    const Track track = default_figure8();
    const auto scheme = RandomizationScheme::fixed(params_5inch());
    VecEnv envs(track, scheme, 3, 11);
    Rng rng(4), init(5);
    PolicyParams p = init_policy(init);
    p.log_std().setConstant(-1.0);
    const RolloutBatch b = collect_rollouts(p, envs, 50, 0.999, rng);

    VecEnv replay(track, scheme, 3, 11);
    for (int t = 0; t < 50; ++t) {
      std::vector<MotorCommand> actions;
      for (int e = 0; e < 3; ++e) {
        REQUIRE((b.obs.col(static_cast<Eigen::Index>(b.index(t, e))) - replay.observations()[e]).norm() == 0.0);
        actions.emplace_back(Vec4(b.actions.col(static_cast<Eigen::Index>(b.index(t, e)))));
      }
      const std::vector<StepResult> res = replay.step(actions);
      for (int e = 0; e < 3; ++e) {
        REQUIRE(res[e].reward == b.rewards[static_cast<Eigen::Index>(b.index(t, e))]);
        REQUIRE((res[e].done ? 1.0 : 0.0) == b.dones[static_cast<Eigen::Index>(b.index(t, e))]);
      }
    }
  }

  TEST_CASE("GAE: single terminal transition") {
    Rng rng(6);
    RolloutBatch b = random_batch(1, 1, rng, 0.0);
    b.rewards[0] = 1.0;
    b.values[0] = 0.0;
    b.dones[0] = 1.0;
    const GaeResult g = compute_gae(b, 0.99, 0.95);
    CHECK(g.advantages[0] == 1.0);
    CHECK(g.returns[0] == 1.0);
  }

  TEST_CASE("GAE: lambda = 1 equals the discounted-sum oracle") {
    Rng rng(7);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      const double gamma = uniform(rng, 0.9, 1.0);
      const RolloutBatch b = random_batch(10, 3, rng, 0.0);
      const GaeResult g = compute_gae(b, gamma, 1.0);
      for (int e = 0; e < 3; ++e) {
        std::vector<double> r, v;
        for (int t = 0; t < 10; ++t) {
          r.push_back(b.rewards[static_cast<Eigen::Index>(b.index(t, e))]);
          v.push_back(b.values[static_cast<Eigen::Index>(b.index(t, e))]);
        }
        const auto ref = oracle::discounted_advantage(r, v, b.last_values[e], gamma);
        for (int t = 0; t < 10; ++t) {
          worst = std::max(worst, std::abs(ref[t] - g.advantages[static_cast<Eigen::Index>(b.index(t, e))]));
        }
      }
    }
    CHECK(worst <= 1e-10);
  }

  TEST_CASE("GAE: lambda = 0 equals the one-step TD residual") {
    Rng rng(8);
    const double gamma = 0.97;
    const RolloutBatch b = random_batch(10, 4, rng, 0.3);
    const GaeResult g = compute_gae(b, gamma, 0.0);
    for (int e = 0; e < 4; ++e) {
      for (int t = 0; t < 10; ++t) {
        const auto k = static_cast<Eigen::Index>(b.index(t, e));
        const double next = t == 9 ? b.last_values[e] : b.values[static_cast<Eigen::Index>(b.index(t + 1, e))];
        const double delta = b.rewards[k] + gamma * next * (1.0 - b.dones[k]) - b.values[k];
        REQUIRE(g.advantages[k] == delta);
        REQUIRE(g.returns[k] == g.advantages[k] + b.values[k]);
      }
    }
  }

  TEST_CASE("GAE: dones cut the recursion and truncations add their bootstrap") {
    Rng rng(9);
    RolloutBatch b = random_batch(3, 1, rng, 0.0);
    b.dones[1] = 1.0;
    b.bootstrap[1] = 0.5;
    const double gamma = 0.9, lambda = 0.8;
    const GaeResult g = compute_gae(b, gamma, lambda);
    const double d2 = b.rewards[2] + gamma * b.last_values[0] - b.values[2];
    const double d1 = b.rewards[1] + 0.5 - b.values[1];
    const double d0 = b.rewards[0] + gamma * b.values[1] - b.values[0];
    CHECK(g.advantages[2] == doctest::Approx(d2).epsilon(1e-14));
    CHECK(g.advantages[1] == doctest::Approx(d1).epsilon(1e-14));
    CHECK(g.advantages[0] == doctest::Approx(d0 + gamma * lambda * d1).epsilon(1e-14));
  }

  TEST_CASE("advantage normalization") {
    Rng rng(10);
    Eigen::VectorXd a(5000);
    for (Eigen::Index i = 0; i < a.size(); ++i) a[i] = uniform(rng, -50, 300);
    normalize_advantages(a);
    const double mean = a.mean();
    const double sd = std::sqrt((a.array() - mean).square().mean());
    CHECK(std::abs(mean) <= 1e-7);
    CHECK(std::abs(sd - 1.0) <= 1e-6);
  }

  TEST_CASE("first minibatch sits at the behavior policy") {
    VecEnv envs(default_figure8(), RandomizationScheme::fixed(params_5inch()), 4, 3);
    Rng rng(11), init(12);
    PolicyParams p = init_policy(init);
    const RolloutBatch b = collect_rollouts(p, envs, 16, 0.999, rng);
    const GaeResult g = compute_gae(b, 0.999, 0.95);
    PpoConfig cfg;
    cfg.n_envs = 4;
    cfg.rollout_length = 16;
    cfg.minibatch_size = 64;
    cfg.epochs_per_update = 1;
    Adam opt(p.size());
    const UpdateStats s = ppo_update(p, opt, b, g, cfg, rng);
    CHECK(s.first_max_ratio_dev <= 1e-6);
    Eigen::VectorXd adv = g.advantages;
    normalize_advantages(adv);
    CHECK(s.first_loss_pi == doctest::Approx(-adv.mean()).epsilon(1e-9));
    CHECK(s.gradient_steps == 1);
  }

  TEST_CASE("infinite clip range gives the unclipped surrogate") {
    Rng rng(13);
    const PolicyParams behavior = init_policy(rng);
    PolicyParams p = behavior;
    p.log_std().setConstant(-0.5);
    Minibatch mb;
    const int n = 64;
    mb.obs.resize(kObsDim, n);
    mb.actions.resize(kActDim, n);
    mb.old_log_prob.resize(n);
    mb.advantages.resize(n);
    mb.returns = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd ratios(n);
    for (int j = 0; j < n; ++j) {
      Observation o;
      for (int i = 0; i < kObsDim; ++i) o[i] = uniform(rng, -1, 1);
      mb.obs.col(j) = o;
      const ActionSample s = sample_action(behavior, o, rng);
      mb.actions.col(j) = s.raw;
      mb.old_log_prob[j] = s.log_prob;
      mb.advantages[j] = uniform(rng, -1, 1);
      ratios[j] = std::exp(log_prob_and_entropy(p, o, s.raw).log_prob - s.log_prob);
    }
    const double unclipped = -(ratios.array() * mb.advantages.array()).mean();
    const LossValue inf = ppo_loss(p, mb, {std::numeric_limits<double>::infinity(), 0.0, 0.0});
    CHECK(inf.policy == doctest::Approx(unclipped).epsilon(1e-12));
    CHECK(inf.clip_fraction == 0.0);
    const LossValue tight = ppo_loss(p, mb, {0.01, 0.0, 0.0});
    CHECK(tight.clip_fraction > 0.0);
    CHECK(tight.policy >= inf.policy - 1e-12);
  }

  TEST_CASE("one-parameter toy: the mean moves toward advantageous actions") {
    PolicyParams p({1});
    RolloutBatch b;
    b.rollout_length = 4;
    b.n_envs = 1;
    b.obs = Eigen::MatrixXd::Zero(kObsDim, 4);
    b.actions.resize(kActDim, 4);
    b.log_probs.resize(4);
    b.rewards = Eigen::VectorXd::Zero(4);
    b.values = Eigen::VectorXd::Zero(4);
    b.dones = Eigen::VectorXd::Zero(4);
    b.bootstrap = Eigen::VectorXd::Zero(4);
    b.last_values = Eigen::VectorXd::Zero(1);
    GaeResult g;
    g.advantages.resize(4);
    g.returns = Eigen::VectorXd::Zero(4);
    const double offsets[4] = {0.3, 0.3, -0.3, -0.3};
    const double adv[4] = {1.0, 1.0, -1.0, -1.0};
    for (int j = 0; j < 4; ++j) {
      b.actions.col(j) = Vec4::Constant(offsets[j]);
      b.log_probs[j] = gaussian_log_prob(Vec4::Zero(), p.log_std(), Vec4::Constant(offsets[j]));
      g.advantages[j] = adv[j];
    }
    PpoConfig cfg;
    cfg.n_envs = 1;
    cfg.rollout_length = 4;
    cfg.minibatch_size = 4;
    cfg.epochs_per_update = 1;
    cfg.value_coef = 0.0;
    Adam opt(p.size(), 1e-2);
    Rng rng(14);
    ppo_update(p, opt, b, g, cfg, rng);
    const Eigen::VectorXd head_bias = p.bias(p.actor().back());
    for (int i = 0; i < 4; ++i) CHECK(head_bias[i] > 0.0);
  }

  TEST_CASE("non-finite loss leaves the parameters unchanged") {
    VecEnv envs(default_figure8(), RandomizationScheme::fixed(params_5inch()), 2, 3);
    Rng rng(15), init(16);
    PolicyParams p = init_policy(init);
    const RolloutBatch b = collect_rollouts(p, envs, 8, 0.999, rng);
    GaeResult g = compute_gae(b, 0.999, 0.95);
    g.returns[3] = std::numeric_limits<double>::quiet_NaN();
    PpoConfig cfg;
    cfg.n_envs = 2;
    cfg.rollout_length = 8;
    cfg.minibatch_size = 8;
    const PolicyParams before = p;
    Adam opt(p.size());
    CHECK_THROWS_AS(ppo_update(p, opt, b, g, cfg, rng), NonFiniteLoss);
    CHECK(p == before);
  }

  TEST_CASE("training loop: update count, files and determinism") {
    PpoConfig cfg;
    cfg.n_envs = 4;
    cfg.rollout_length = 32;
    cfg.minibatch_size = 64;
    cfg.epochs_per_update = 2;
    cfg.total_steps = 2 * 32 * 4;
    cfg.seed = 21;
    const TrainSpec spec{default_figure8(), RandomizationScheme::fixed(params_5inch())};
    const auto dir_a = oracle::temp_dir("train_a");
    const auto dir_b = oracle::temp_dir("train_b");
    const TrainResult a = train(spec, cfg, dir_a);
    const TrainResult b = train(spec, cfg, dir_b);
    CHECK(a.curve.size() == 2);
    CHECK(a.curve.back().steps == cfg.total_steps);
    CHECK(a.policy == b.policy);

    const auto slurp = [](const std::filesystem::path& p) {
      std::ifstream in(p, std::ios::binary);
      std::stringstream ss;
      ss << in.rdbuf();
      return ss.str();
    };
    const std::string curve = slurp(dir_a / "curve.csv");
    CHECK(curve == slurp(dir_b / "curve.csv"));
    CHECK(curve.rfind(std::string(kCurveHeader) + "\n", 0) == 0);
    CHECK(slurp(dir_a / "checkpoint_final.bin") == slurp(dir_b / "checkpoint_final.bin"));
    CheckpointMeta meta;
    load_checkpoint(dir_a / "checkpoint_final", &meta);
    CHECK(meta.training_steps == cfg.total_steps);

    cfg.seed = 22;
    CHECK_FALSE(train(spec, cfg).policy == a.policy);
  }

  TEST_CASE("config validation") {
    PpoConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.gamma = 0.0;
    CHECK_THROWS(cfg.validate());
    cfg = {};
    cfg.clip_range = 0.0;
    CHECK_THROWS(cfg.validate());
    cfg = {};
    cfg.minibatch_size = 7000;
    CHECK_THROWS(cfg.validate());
  }
}
