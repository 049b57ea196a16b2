#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "quadrace/env.hpp"
#include "quadrace/policy.hpp"

namespace quadrace {

struct EnvSpec {
  std::string name;
  Track track;
  RandomizationScheme scheme;
};

// Must be safe to call concurrently.
using Controller = std::function<MotorCommand(const Observation&)>;

// Deterministic controller: the clipped action mean.
Controller mean_controller(const PolicyParams& policy);

struct EvalOptions {
  int n_rollouts = 1000;
  std::uint64_t seed = 0;
  int threads = 1;
  // Count GateMiss terminations as crashes.
  bool crash_includes_miss = false;
  // Keep the full trajectory of the first k rollouts.
  int record_trajectories = 0;
};

struct RolloutRecord {
  int rollout = 0;
  double ep_reward = 0.0;
  int ep_len = 0;
  int gates = 0;
  bool crashed = false;
  double v_mean = 0.0;
  double v_max = 0.0;
  DoneReason reason = DoneReason::Running;
  // Non-empty when the rollout aborted with an exception.
  std::string error;
};

struct EvalAggregate {
  double ep_rew = 0.0;
  double ep_len = 0.0;
  double gates = 0.0;
  double crash_pct = 0.0;
  double v_mean = 0.0;
  double v_max = 0.0;
  double blowup_pct = 0.0;
};

struct EvalReport {
  std::string net;
  std::string env;
  std::vector<RolloutRecord> records;
  std::vector<std::vector<TrajectoryRow>> trajectories;

  EvalAggregate aggregate() const;
  // More than half of the rollouts ended in NumericBlowup or an exception.
  bool blowup_epidemic() const;
};

bool is_crash(DoneReason reason, bool crash_includes_miss);

// Rollout i draws its parameters and initial state from derive_seed(seed, i),
// so every policy sees identical initial conditions.
EvalReport evaluate(const Controller& controller, const EnvSpec& env, const EvalOptions& options,
                    const std::string& net = "policy");
EvalReport evaluate(const PolicyParams& policy, const EnvSpec& env, const EvalOptions& options,
                    const std::string& net = "policy");

struct NamedPolicy {
  std::string name;
  PolicyParams params;
};
// Reports ordered policy-major: report[p * envs.size() + e].
std::vector<EvalReport> cross_eval(const std::vector<NamedPolicy>& policies,
                                   const std::vector<EnvSpec>& envs, const EvalOptions& options);

extern const char* const kRolloutHeader;
extern const char* const kAggregateHeader;
void write_rollouts_csv(const std::vector<EvalReport>& reports, const std::filesystem::path& path);
void write_aggregate_csv(const std::vector<EvalReport>& reports, const std::filesystem::path& path);
// Reads a per-rollout CSV back into reports grouped by (net, env).
std::vector<EvalReport> read_rollouts_csv(const std::filesystem::path& path);

// Top-down (x north up, y east right) view of gates and trajectories.
void write_trajectory_svg(const Track& track, const std::vector<std::vector<TrajectoryRow>>& runs,
                          const std::filesystem::path& path);
// One box (quartiles, 1.5 IQR whiskers) of episode reward per net.
void write_reward_boxplot_svg(const std::vector<EvalReport>& reports,
                              const std::filesystem::path& path);

}  // namespace quadrace
