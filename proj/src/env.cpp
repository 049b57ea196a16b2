#include "quadrace/env.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <thread>

#include "quadrace/errors.hpp"

namespace quadrace {

std::string to_string(DoneReason r) {
  switch (r) {
    case DoneReason::Running:
      return "running";
    case DoneReason::Collision:
      return "collision";
    case DoneReason::GateMiss:
      return "gate_miss";
    case DoneReason::Timeout:
      return "timeout";
    case DoneReason::NumericBlowup:
      return "numeric_blowup";
  }
  return "?";
}

EpisodeState reset(const Track& track, const ModelParams& params, std::uint64_t seed) {
  constexpr double pi = std::numbers::pi;
  Rng rng(seed);
  EpisodeState ep;
  ep.params = params;
  ep.target_gate =
      std::uniform_int_distribution<std::size_t>(0, track.gates.size() - 1)(rng);
  const Gate& gate = track.gates[ep.target_gate];
  ep.quad.p = gate.center - gate.normal();
  for (int i = 0; i < 3; ++i) ep.quad.v[i] = uniform(rng, -0.5, 0.5);
  ep.quad.euler.x() = uniform(rng, -pi / 9.0, pi / 9.0);
  ep.quad.euler.y() = uniform(rng, -pi / 9.0, pi / 9.0);
  ep.quad.euler.z() = wrap_angle(uniform(rng, -pi, pi));
  for (int i = 0; i < 3; ++i) ep.quad.rates[i] = uniform(rng, -0.1, 0.1);
  for (int i = 0; i < 4; ++i) ep.quad.omega[i] = uniform(rng, params.omega_min, params.omega_max);
  return ep;
}

Observation observe(const EpisodeState& ep, const Track& track) {
  const Gate& gate = track.gates[ep.target_gate];
  const Gate& next = track.gates[track.next_index(ep.target_gate)];
  const Mat3 to_gate = gate.rotation().transpose();
  Observation obs;
  obs.segment<3>(0) = to_gate * (ep.quad.p - gate.center);
  obs.segment<3>(3) = to_gate * ep.quad.v;
  obs[6] = ep.quad.euler.x();
  obs[7] = ep.quad.euler.y();
  obs[8] = wrap_angle(ep.quad.euler.z() - gate.yaw);
  obs.segment<3>(9) = ep.quad.rates;
  obs.segment<4>(12) = ep.quad.omega / kRotorObsScale;
  obs.segment<3>(16) = to_gate * (next.center - gate.center);
  obs[19] = wrap_angle(next.yaw - gate.yaw);
  return obs;
}

double reward(const EpisodeState& prev, const EpisodeState& curr, bool collided,
              const Track& track) {
  if (collided) return kCollisionReward;
  const Vec3& target = track.gates[prev.target_gate].center;
  return (prev.quad.p - target).norm() - (curr.quad.p - target).norm() -
         kRatePenalty * curr.quad.rates.norm();
}

StepResult step(EpisodeState& ep, const MotorCommand& u, const Track& track) {
  if (ep.done) throw AlreadyDone("step() called on a finished episode");
  const EpisodeState prev = ep;

  bool blowup = false;
  try {
    quadrace::StepInfo info;
    ep.quad = integrate_step(ep.quad, u, ep.params, kDefaultDt, &info);
    ep.pitch_clamp_streak = info.pitch_clamped ? ep.pitch_clamp_streak + 1 : 0;
    blowup = ep.pitch_clamp_streak >= 2;
  } catch (const NonFiniteState&) {
    blowup = true;
  }
  ++ep.step;

  StepResult res;
  if (blowup) {
    ep.done = true;
    ep.done_reason = DoneReason::NumericBlowup;
    res.reward = kCollisionReward;
  } else if (out_of_bounds(ep.quad.p, track)) {
    ep.done = true;
    ep.done_reason = DoneReason::Collision;
    res.reward = kCollisionReward;
  } else {
    res.reward = reward(prev, ep, false, track);
    const CrossingEvent ev = check_crossing(prev.quad.p, ep.quad.p, track.gates[ep.target_gate]);
    if (ev.kind == CrossingKind::Passed) {
      ++ep.gates_passed;
      ep.target_gate = track.next_index(ep.target_gate);
    } else if (ev.kind == CrossingKind::Missed) {
      ep.done = true;
      ep.done_reason = DoneReason::GateMiss;
    }
    if (!ep.done && ep.step >= kMaxEpisodeSteps) {
      ep.done = true;
      ep.done_reason = DoneReason::Timeout;
    }
  }

  res.observation = observe(ep, track);
  res.done = ep.done;
  res.gates_passed = ep.gates_passed;
  res.speed = ep.quad.v.norm();
  res.done_reason = ep.done_reason;
  return res;
}

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(std::max(threads, 1), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(workers);
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      const std::size_t lo = n * w / workers;
      const std::size_t hi = n * (w + 1) / workers;
      try {
        for (std::size_t i = lo; i < hi; ++i) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  pool.clear();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

VecEnv::VecEnv(Track track, RandomizationScheme scheme, std::size_t n, std::uint64_t seed,
               int threads)
    : track_(std::move(track)), scheme_(std::move(scheme)), threads_(threads) {
  track_.validate();
  rngs_.reserve(n);
  for (std::size_t i = 0; i < n; ++i) rngs_.emplace_back(derive_seed(seed, i));
  episodes_.resize(n);
  observations_.resize(n);
  returns_.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) reset_slot(i);
}

void VecEnv::reset_slot(std::size_t i) {
  Rng& rng = rngs_[i];
  const ModelParams params = scheme_.sample(rng);
  episodes_[i] = reset(track_, params, rng());
  observations_[i] = observe(episodes_[i], track_);
  returns_[i] = 0.0;
}

std::vector<StepResult> VecEnv::step(std::span<const MotorCommand> actions) {
  if (actions.size() != size()) {
    throw std::invalid_argument("VecEnv::step expects one action per environment");
  }
  std::vector<StepResult> results(size());
  parallel_for(size(), threads_, [&](std::size_t i) {
    StepResult res = quadrace::step(episodes_[i], actions[i], track_);
    returns_[i] += res.reward;
    if (res.done) {
      res.auto_reset = true;
      res.terminal_observation = res.observation;
      res.episode_return = returns_[i];
      res.episode_length = episodes_[i].step;
      reset_slot(i);
      res.observation = observations_[i];
    } else {
      observations_[i] = res.observation;
    }
    results[i] = res;
  });
  return results;
}

const char* const kTrajectoryHeader =
    "t,px,py,pz,vx,vy,vz,phi,theta,psi,p_rate,q_rate,r_rate,w1,w2,w3,w4,u1,u2,u3,u4,reward,"
    "target_gate,gates_passed";

void write_trajectory_row(std::ostream& out, const TrajectoryRow& r) {
  const QuadState& s = r.state;
  out << r.t;
  auto put = [&](const auto& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) out << ',' << v[i];
  };
  put(s.p);
  put(s.v);
  put(s.euler);
  put(s.rates);
  put(s.omega);
  put(r.u);
  out << ',' << r.reward << ',' << r.target_gate << ',' << r.gates_passed << '\n';
}

void write_trajectory_csv(const std::vector<TrajectoryRow>& rows,
                          const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out.precision(17);
  out << kTrajectoryHeader << '\n';
  for (const auto& r : rows) write_trajectory_row(out, r);
}

std::vector<TrajectoryRow> read_trajectory_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<TrajectoryRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(std::stod(cell));
    if (f.size() < 24) throw IoError(path.string() + ": short trajectory row");
    TrajectoryRow r;
    r.t = f[0];
    r.state.p = Vec3(f[1], f[2], f[3]);
    r.state.v = Vec3(f[4], f[5], f[6]);
    r.state.euler = Vec3(f[7], f[8], f[9]);
    r.state.rates = Vec3(f[10], f[11], f[12]);
    r.state.omega = Vec4(f[13], f[14], f[15], f[16]);
    r.u = Vec4(f[17], f[18], f[19], f[20]);
    r.reward = f[21];
    r.target_gate = static_cast<std::size_t>(f[22]);
    r.gates_passed = static_cast<int>(f[23]);
    rows.push_back(r);
  }
  return rows;
}

}  // namespace quadrace
