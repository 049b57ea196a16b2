#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "quadrace/domain_random.hpp"
#include "quadrace/dynamics.hpp"
#include "quadrace/track.hpp"

namespace quadrace {

inline constexpr int kObsDim = 20;
inline constexpr int kActDim = 4;
inline constexpr int kMaxEpisodeSteps = 1200;
inline constexpr double kRatePenalty = 0.001;
inline constexpr double kCollisionReward = -10.0;
// Fixed rotor-speed scale applied to the observation.
inline constexpr double kRotorObsScale = 5000.0;

using Observation = Eigen::Matrix<double, kObsDim, 1>;

enum class DoneReason { Running, Collision, GateMiss, Timeout, NumericBlowup };
std::string to_string(DoneReason r);

struct EpisodeState {
  QuadState quad;
  ModelParams params;
  std::size_t target_gate = 0;
  int gates_passed = 0;
  int step = 0;
  bool done = false;
  DoneReason done_reason = DoneReason::Running;
  int pitch_clamp_streak = 0;
};

struct StepResult {
  Observation observation;
  double reward = 0.0;
  bool done = false;
  int gates_passed = 0;
  double speed = 0.0;
  DoneReason done_reason = DoneReason::Running;
  // Set by the vectorized stepper when it auto-resets a finished episode:
  // observation then holds the first observation of the new episode.
  bool auto_reset = false;
  Observation terminal_observation = Observation::Zero();
  double episode_return = 0.0;
  int episode_length = 0;
};

// Start 1 m in front of a uniformly chosen gate, remaining state sampled
// uniformly. Deterministic per seed.
EpisodeState reset(const Track& track, const ModelParams& params, std::uint64_t seed);

// Gate-frame observation of the current target gate.
Observation observe(const EpisodeState& ep, const Track& track);

// Per-step reward, measured against the target gate of the previous state.
double reward(const EpisodeState& prev, const EpisodeState& curr, bool collided,
              const Track& track);

// Advances one 0.01 s step. Throws AlreadyDone if the episode has ended.
StepResult step(EpisodeState& ep, const MotorCommand& u, const Track& track);

// Executes fn(i) for i in [0, n) over up to `threads` workers. Work is split
// into fixed contiguous chunks; fn must only touch slot i.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

// N independent environments with per-slot random streams derived from a
// master seed. Finished episodes are reset automatically.
class VecEnv {
 public:
  VecEnv(Track track, RandomizationScheme scheme, std::size_t n, std::uint64_t seed,
         int threads = 1);

  std::size_t size() const { return episodes_.size(); }
  const std::vector<Observation>& observations() const { return observations_; }
  const EpisodeState& episode(std::size_t i) const { return episodes_[i]; }
  const Track& track() const { return track_; }

  std::vector<StepResult> step(std::span<const MotorCommand> actions);

 private:
  void reset_slot(std::size_t i);

  Track track_;
  RandomizationScheme scheme_;
  int threads_;
  std::vector<Rng> rngs_;
  std::vector<EpisodeState> episodes_;
  std::vector<Observation> observations_;
  std::vector<double> returns_;
};

// Per-step trajectory rows in the CSV layout
// t,px,py,pz,vx,vy,vz,phi,theta,psi,p_rate,q_rate,r_rate,w1..w4,u1..u4,reward,target_gate,gates_passed
struct TrajectoryRow {
  double t = 0.0;
  QuadState state;
  Vec4 u = Vec4::Zero();
  double reward = 0.0;
  std::size_t target_gate = 0;
  int gates_passed = 0;
};

extern const char* const kTrajectoryHeader;
void write_trajectory_row(std::ostream& out, const TrajectoryRow& row);
void write_trajectory_csv(const std::vector<TrajectoryRow>& rows, const std::filesystem::path& path);
std::vector<TrajectoryRow> read_trajectory_csv(const std::filesystem::path& path);

}  // namespace quadrace
