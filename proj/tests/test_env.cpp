#include <doctest.h>

#include <fstream>

#include "oracles.hpp"
#include "quadrace/env.hpp"
#include "quadrace/errors.hpp"

using namespace quadrace;

namespace {

EpisodeState hovering_at(const Track& track, std::size_t gate, const Vec3& offset) {
  EpisodeState ep;
  ep.params = params_5inch();
  ep.target_gate = gate;
  ep.quad.p = track.gates[gate].center + offset;
  ep.quad.euler.z() = track.gates[gate].yaw;
  ep.quad.omega = solve_hover(ep.params).omega;
  return ep;
}

}  // namespace

TEST_SUITE("env") {
  TEST_CASE("reset is deterministic and starts 1 m in front of a gate") {
    const Track t = default_figure8();
    const ModelParams p = params_5inch();
    const EpisodeState a = reset(t, p, 42), b = reset(t, p, 42);
    CHECK(a.quad.p == b.quad.p);
    CHECK(a.quad.v == b.quad.v);
    CHECK(a.quad.omega == b.quad.omega);
    CHECK(a.target_gate == b.target_gate);
    const Gate& g = t.gates[a.target_gate];
    CHECK((a.quad.p - g.center).dot(g.normal()) == doctest::Approx(-1.0).epsilon(1e-14));
    CHECK((a.quad.p - g.center).norm() == doctest::Approx(1.0).epsilon(1e-14));
  }

  TEST_CASE("reset distribution respects the quoted ranges") {
    const Track t = default_figure8();
    const ModelParams p = params_3inch();
    const double pi = std::numbers::pi;
    Vec3 vmin = Vec3::Constant(1e9), vmax = Vec3::Constant(-1e9);
    std::vector<int> gate_hits(t.gates.size(), 0);
    for (std::uint64_t s = 0; s < 10000; ++s) {
      const EpisodeState ep = reset(t, p, s);
      vmin = vmin.cwiseMin(ep.quad.v);
      vmax = vmax.cwiseMax(ep.quad.v);
      ++gate_hits[ep.target_gate];
      REQUIRE(std::abs(ep.quad.euler.x()) <= pi / 9);
      REQUIRE(std::abs(ep.quad.euler.y()) <= pi / 9);
      REQUIRE(std::abs(ep.quad.euler.z()) <= pi);
      REQUIRE(ep.quad.rates.cwiseAbs().maxCoeff() <= 0.1);
      REQUIRE((ep.quad.omega.array() >= p.omega_min).all());
      REQUIRE((ep.quad.omega.array() <= p.omega_max).all());
      REQUIRE(ep.step == 0);
      REQUIRE(!ep.done);
    }
    CHECK(vmin.maxCoeff() < -0.49);
    CHECK(vmax.minCoeff() > 0.49);
    CHECK(vmax.maxCoeff() <= 0.5);
    CHECK(vmin.minCoeff() >= -0.5);
    for (int h : gate_hits) CHECK(h > 1200);
  }

  TEST_CASE("observation at the gate center") {
    const Track t = default_figure8();
    EpisodeState ep = hovering_at(t, 2, Vec3::Zero());
    ep.quad.omega = Vec4(1000, 2000, 3000, 4000);
    const Observation o = observe(ep, t);
    CHECK(o.head<9>().cwiseAbs().maxCoeff() < 1e-15);
    CHECK(o.segment<4>(12) == Vec4(0.2, 0.4, 0.6, 0.8));
    const Gate& g = t.gates[2];
    const Gate& n = t.gates[3];
    const Vec3 rel = oracle::rot_z(-g.yaw) * (n.center - g.center);
    CHECK((o.segment<3>(16) - rel).norm() < 1e-12);
    CHECK(o[19] == doctest::Approx(oracle::wrap(n.yaw - g.yaw)));
  }

  TEST_CASE("next-gate yaw difference is wrapped") {
    Track t;
    t.gates = {{Vec3(0, 0, -1.5), 3.0}, {Vec3(2, 0, -1.5), -3.0}};
    EpisodeState ep = hovering_at(t, 0, Vec3(-1, 0, 0));
    const Observation o = observe(ep, t);
    CHECK(o[19] == doctest::Approx(2 * std::numbers::pi - 6.0).epsilon(1e-12));
    CHECK(o[19] == doctest::Approx(0.283).epsilon(1e-3));
  }

  TEST_CASE("observation is invariant to rotating and translating the scene") {
    Rng rng(17);
    for (int trial = 0; trial < 300; ++trial) {
      Track t;
      for (int g = 0; g < 3; ++g) {
        t.gates.push_back({Vec3(uniform(rng, -4, 4), uniform(rng, -4, 4), uniform(rng, -3, -1)),
                           uniform(rng, -3.1, 3.1)});
      }
      EpisodeState ep;
      ep.params = params_3inch();
      ep.target_gate = trial % 3;
      ep.quad.p = Vec3(uniform(rng, -4, 4), uniform(rng, -4, 4), uniform(rng, -3, -1));
      ep.quad.v = Vec3(uniform(rng, -3, 3), uniform(rng, -3, 3), uniform(rng, -3, 3));
      ep.quad.euler = Vec3(uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -3, 3));
      ep.quad.rates = Vec3(uniform(rng, -2, 2), uniform(rng, -2, 2), uniform(rng, -2, 2));
      ep.quad.omega = Vec4::Constant(2000.0);
      const oracle::SceneTransform tf{uniform(rng, -3, 3),
                                      Vec3(uniform(rng, -9, 9), uniform(rng, -9, 9), uniform(rng, -2, 2))};
      EpisodeState moved = ep;
      moved.quad = tf.state(ep.quad);
      const Observation a = observe(ep, t);
      const Observation b = observe(moved, tf.track(t));
      REQUIRE((a - b).cwiseAbs().maxCoeff() <= 1e-9);
    }
  }

  TEST_CASE("reward arithmetic") {
    Track t;
    t.gates = {{Vec3(0, 0, -1.5), 0.0}};
    EpisodeState prev = hovering_at(t, 0, Vec3(-5.0, 0, 0));
    EpisodeState curr = prev;
    curr.quad.p = t.gates[0].center + Vec3(-4.8, 0, 0);
    curr.quad.rates = Vec3(0, 2.0, 0);
    CHECK(reward(prev, curr, false, t) == doctest::Approx(0.198).epsilon(1e-12));
    CHECK(reward(prev, curr, true, t) == -10.0);
    CHECK(reward(prev, prev, false, t) == 0.0);
    // The previous step's target is used even if the new state switched gates.
    Track two = t;
    two.gates.push_back({Vec3(3, 0, -1.5), 0.0});
    curr.target_gate = 1;
    CHECK(reward(prev, curr, false, two) == doctest::Approx(0.198).epsilon(1e-12));
  }

  TEST_CASE("flying through the target gate counts a pass") {
    const Track t = default_figure8();
    EpisodeState ep = hovering_at(t, 0, Vec3::Zero());
    ep.quad.p = t.gates[0].center - 0.02 * t.gates[0].normal();
    ep.quad.v = 5.0 * t.gates[0].normal();
    const StepResult r = step(ep, solve_hover(ep.params).command, t);
    CHECK(r.gates_passed == 1);
    CHECK(ep.target_gate == 1);
    CHECK_FALSE(r.done);
    CHECK(r.speed == doctest::Approx(ep.quad.v.norm()));
  }

  TEST_CASE("missing the gate ends the episode without the collision penalty") {
    const Track t = default_figure8();
    EpisodeState ep = hovering_at(t, 0, Vec3::Zero());
    const Vec3 lateral = t.gates[0].rotation().col(1);
    ep.quad.p = t.gates[0].center - 0.02 * t.gates[0].normal() + 1.2 * lateral;
    ep.quad.v = 5.0 * t.gates[0].normal();
    const EpisodeState before = ep;
    const StepResult r = step(ep, solve_hover(ep.params).command, t);
    CHECK(r.done);
    CHECK(r.done_reason == DoneReason::GateMiss);
    CHECK(r.reward == doctest::Approx(reward(before, ep, false, t)).epsilon(1e-15));
    CHECK(r.reward > -1.0);
  }

  TEST_CASE("leaving the box is a collision") {
    const Track t = default_figure8();
    EpisodeState ep = hovering_at(t, 0, Vec3::Zero());
    ep.quad.p = Vec3(0, 0, -0.01);
    ep.quad.v = Vec3(0, 0, 3.0);
    const StepResult r = step(ep, MotorCommand::uniform(0.0), t);
    CHECK(r.done);
    CHECK(r.done_reason == DoneReason::Collision);
    CHECK(r.reward == -10.0);
    CHECK_THROWS_AS(step(ep, MotorCommand::uniform(0.0), t), AlreadyDone);
  }

  TEST_CASE("episode times out after 1200 steps with the ordinary reward") {
    const Track t = default_figure8();
    EpisodeState ep = hovering_at(t, 0, -1.0 * t.gates[0].normal());
    const MotorCommand hover = solve_hover(ep.params).command;
    StepResult r;
    int steps = 0;
    while (!ep.done) {
      const EpisodeState before = ep;
      r = step(ep, hover, t);
      ++steps;
      if (ep.done) CHECK(r.reward == doctest::Approx(reward(before, ep, false, t)).epsilon(1e-15));
    }
    CHECK(steps == 1200);
    CHECK(r.done_reason == DoneReason::Timeout);
    CHECK(std::abs(r.reward) < 1e-6);
  }

  TEST_CASE("numeric blowup is terminal with the collision penalty") {
    const Track t = default_figure8();
    EpisodeState ep = hovering_at(t, 0, -1.0 * t.gates[0].normal());
    ep.quad.rates.x() = std::numeric_limits<double>::infinity();
    const StepResult r = step(ep, MotorCommand::uniform(0.3), t);
    CHECK(r.done_reason == DoneReason::NumericBlowup);
    CHECK(r.reward == -10.0);

    EpisodeState tumble = hovering_at(t, 0, -1.0 * t.gates[0].normal());
    tumble.quad.euler.y() = kPitchLimit - 1e-5;
    tumble.quad.rates.y() = 200.0;
    StepResult last;
    for (int i = 0; i < 3 && !tumble.done; ++i) last = step(tumble, MotorCommand(0, 1, 0, 1), t);
    CHECK(tumble.done);
  }

  TEST_CASE("telescoping progress") {
    const Track t = default_figure8();
    Rng rng(9);
    int segments = 0;
    for (std::uint64_t seed = 0; segments < 200; ++seed) {
      EpisodeState ep = reset(t, params_5inch(), seed);
      const MotorCommand hover = solve_hover(ep.params).command;
      const std::size_t target = ep.target_gate;
      const Vec3 start = ep.quad.p;
      double sum = 0.0, penalty = 0.0;
      for (int k = 0; k < 40 && !ep.done; ++k) {
        Vec4 u = hover.values();
        for (int i = 0; i < 4; ++i) u[i] += uniform(rng, -0.02, 0.02);
        const StepResult r = step(ep, MotorCommand(u), t);
        if (ep.done || ep.target_gate != target) break;
        sum += r.reward;
        penalty += kRatePenalty * ep.quad.rates.norm();
        const Vec3& c = t.gates[target].center;
        REQUIRE(std::abs(sum + penalty - ((start - c).norm() - (ep.quad.p - c).norm())) <= 1e-10);
      }
      ++segments;
    }
  }

  TEST_CASE("vectorized stepping") {
    const Track t = default_figure8();
    const auto scheme = RandomizationScheme::fixed(params_5inch());
    VecEnv serial(t, scheme, 100, 123, 1), parallel(t, scheme, 100, 123, 4);
    REQUIRE(serial.size() == 100);
    std::vector<MotorCommand> hover(100, solve_hover(params_5inch()).command);
    const auto first = serial.step(hover);
    for (const auto& r : first) CHECK_FALSE(r.done);
    parallel.step(hover);

    Rng rng(4);
    int resets = 0;
    for (int k = 0; k < 300; ++k) {
      std::vector<MotorCommand> u(100);
      for (auto& c : u) c = MotorCommand(uniform(rng, 0, 1), uniform(rng, 0, 1), uniform(rng, 0, 1), uniform(rng, 0, 1));
      const auto a = serial.step(u);
      const auto b = parallel.step(u);
      for (std::size_t i = 0; i < 100; ++i) {
        REQUIRE(a[i].observation == b[i].observation);
        REQUIRE(a[i].reward == b[i].reward);
        REQUIRE(a[i].done == b[i].done);
        if (a[i].done) {
          ++resets;
          REQUIRE(a[i].auto_reset);
          REQUIRE(a[i].terminal_observation == b[i].terminal_observation);
          REQUIRE(a[i].observation == serial.observations()[i]);
          REQUIRE(serial.episode(i).step == 0);
          REQUIRE(a[i].episode_length >= 1);
        }
      }
    }
    CHECK(resets > 0);
  }

  TEST_CASE("trajectory CSV round trip") {
    const auto dir = oracle::temp_dir("traj");
    std::vector<TrajectoryRow> rows(3);
    for (int i = 0; i < 3; ++i) {
      rows[i].t = 0.01 * i;
      rows[i].state.p = Vec3(i, 2.0 * i, -1.5);
      rows[i].state.omega = Vec4::Constant(1000.0 + i);
      rows[i].u = Vec4::Constant(0.25);
      rows[i].reward = 0.1 * i;
      rows[i].target_gate = static_cast<std::size_t>(i);
      rows[i].gates_passed = i;
    }
    write_trajectory_csv(rows, dir / "t.csv");
    std::ifstream in(dir / "t.csv");
    std::string header;
    std::getline(in, header);
    CHECK(header == kTrajectoryHeader);
    const auto back = read_trajectory_csv(dir / "t.csv");
    REQUIRE(back.size() == 3);
    CHECK(back[2].state.p == rows[2].state.p);
    CHECK(back[2].gates_passed == 2);
    CHECK(back[1].reward == rows[1].reward);
  }
}
