#include <doctest.h>

#include "oracles.hpp"
#include "quadrace/errors.hpp"
#include "quadrace/sysid.hpp"

using namespace quadrace;

namespace {

double rel(double est, double truth) { return std::abs(est - truth) / std::abs(truth); }

FlightLog hover_log(const ModelParams& params, int n) {
  const HoverSolution h = solve_hover(params);
  FlightLog log;
  for (int i = 0; i < n; ++i) {
    FlightLogRow row;
    row.t = i * 0.001;
    row.state.p = Vec3(0, 0, -1);
    row.state.omega = h.omega;
    row.u = h.command.values();
    row.specific_force = specific_force(row.state, params);
    row.rates_dot = Vec3::Zero();
    row.omega_dot = Vec4::Zero();
    log.rows.push_back(row);
  }
  return log;
}

}  // namespace

TEST_SUITE("sysid") {
  TEST_CASE("least squares") {
    Eigen::MatrixXd x(4, 2);
    x << 1, 0, 1, 1, 1, 2, 1, 3;
    const Eigen::VectorXd y = x * Eigen::Vector2d(2.0, -0.5);
    const LinearFit fit = least_squares(x, y);
    CHECK(fit.coef[0] == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(fit.coef[1] == doctest::Approx(-0.5).epsilon(1e-12));
    CHECK(fit.rms_residual < 1e-12);

    Eigen::MatrixXd zero_col = x;
    zero_col.col(1).setZero();
    CHECK_THROWS_AS(least_squares(zero_col, y), RankDeficient);
    Eigen::MatrixXd collinear = x;
    collinear.col(1) = 3.0 * x.col(0);
    CHECK_THROWS_AS(least_squares(collinear, y), RankDeficient);
  }

  TEST_CASE("force round trip, 5-inch chirp") {
    const ModelParams truth = params_5inch();
    const FlightLog log = simulate_chirp_flight(truth);
    REQUIRE_NOTHROW(log.validate());
    const ForceFit f = fit_force_params(log, truth.omega_max);
    CHECK(rel(f.k_omega, truth.k_omega_hat) <= 0.005);
    CHECK(rel(f.k_x, truth.k_x_hat) <= 0.005);
    CHECK(rel(f.k_y, truth.k_y_hat) <= 0.005);
    CHECK(f.rms.maxCoeff() < 1e-9);
  }

  TEST_CASE("hover-only log cannot identify drag") {
    CHECK_THROWS_AS(fit_force_params(hover_log(params_5inch(), 500)), RankDeficient);
  }

  TEST_CASE("force recovery with 1% noise") {
    const ModelParams truth = params_5inch();
    const FlightLog clean = simulate_chirp_flight(truth, ChirpConfig{.duration = 10.0});
    Vec3 axis_rms = Vec3::Zero();
    for (const FlightLogRow& r : clean.rows) axis_rms += r.specific_force.cwiseAbs2();
    axis_rms = (axis_rms / static_cast<double>(clean.rows.size())).cwiseSqrt();
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(seed);
      std::normal_distribution<double> n(0.0, 1.0);
      FlightLog noisy = clean;
      for (FlightLogRow& r : noisy.rows) {
        for (int i = 0; i < 3; ++i) r.specific_force[i] += 0.01 * axis_rms[i] * n(rng);
      }
      const ForceFit f = fit_force_params(noisy, truth.omega_max);
      worst = std::max({worst, rel(f.k_omega, truth.k_omega_hat), rel(f.k_x, truth.k_x_hat),
                        rel(f.k_y, truth.k_y_hat)});
    }
    CHECK(worst <= 0.05);
  }

  TEST_CASE("moment round trip, 3-inch chirp") {
    const ModelParams truth = params_3inch();
    const FlightLog log = simulate_chirp_flight(truth, ChirpConfig{.seed = 3});
    const MomentFit m = fit_moment_params(log, truth.omega_max);
    for (int i = 0; i < 4; ++i) {
      CHECK(rel(m.k_p[i], truth.k_p_hat[i]) <= 0.005);
      CHECK(rel(m.k_q[i], truth.k_q_hat[i]) <= 0.005);
      CHECK(rel(m.k_r[i], truth.k_r_hat[i]) <= 0.005);
      CHECK(rel(m.k_rd[i], truth.k_rd_hat[i]) <= 0.005);
    }
    // Positive magnitudes reproduce the (-,-,+,+) roll pattern of the data.
    CHECK(m.k_p.minCoeff() > 0.0);
    CHECK(m.rms.maxCoeff() < 1e-9 * 1e3);
  }

  TEST_CASE("constant rotor speeds cannot identify the moment model") {
    CHECK_THROWS_AS(fit_moment_params(hover_log(params_3inch(), 500)), RankDeficient);
  }

  TEST_CASE("motor round trip on a bench staircase") {
    const ModelParams truth = params_5inch();
    const FlightLog bench = simulate_motor_bench(truth);
    const MotorFit m = fit_motor_params(bench);
    CHECK(rel(m.omega_min, truth.omega_min) <= 0.01);
    CHECK(rel(m.omega_max, truth.omega_max) <= 0.01);
    CHECK(rel(m.k_l, truth.k_l) <= 0.01);
    CHECK(rel(m.tau, truth.tau) <= 0.01);
    CHECK(m.steady_points >= 10);

    const MotorFit half = fit_motor_params(subsample(bench, 2));
    CHECK(rel(half.tau, truth.tau) <= 0.01);
    CHECK(std::abs(half.tau - m.tau) / m.tau <= 0.01);
  }

  TEST_CASE("constant command is insufficient excitation") {
    BenchConfig cfg;
    cfg.levels = {0.5, 0.5, 0.5, 0.5};
    CHECK_THROWS_AS(fit_motor_params(simulate_motor_bench(params_5inch(), cfg)), InsufficientExcitation);
    cfg.levels = {0.3, 0.6, 0.4, 0.7};
    CHECK_THROWS_AS(fit_motor_params(simulate_motor_bench(params_5inch(), cfg)), InsufficientExcitation);
  }

  TEST_CASE("residuals vanish at the true parameters") {
    const ModelParams truth = params_5inch();
    const FlightLog log = simulate_chirp_flight(truth, ChirpConfig{.duration = 3.0});
    double worst_f = 0.0, worst_m = 0.0;
    for (const FlightLogRow& r : log.rows) {
      worst_f = std::max(worst_f, (specific_force(r.state, truth) - r.specific_force).cwiseAbs().maxCoeff());
      worst_m = std::max(worst_m, (moment(r.state, *r.omega_dot, truth) - *r.rates_dot).cwiseAbs().maxCoeff());
    }
    CHECK(worst_f <= 1e-9);
    CHECK(worst_m <= 1e-9);
  }

  TEST_CASE("estimator is scale consistent") {
    const ModelParams truth = params_5inch();
    const FlightLog log = simulate_chirp_flight(truth, ChirpConfig{.duration = 5.0});
    const double w = truth.omega_max;
    const ForceFit raw = fit_force_params(log, 1.0);
    const ForceFit scaled = fit_force_params(log, w);
    CHECK(scaled.k_omega == doctest::Approx(raw.k_omega * w * w).epsilon(1e-9));
    CHECK(scaled.k_x == doctest::Approx(raw.k_x * w).epsilon(1e-9));
    CHECK(scaled.k_y == doctest::Approx(raw.k_y * w).epsilon(1e-9));
    const MomentFit mraw = fit_moment_params(log, 1.0);
    const MomentFit mscaled = fit_moment_params(log, w);
    for (int i = 0; i < 4; ++i) {
      CHECK(mscaled.k_p[i] == doctest::Approx(mraw.k_p[i] * w * w).epsilon(1e-9));
      CHECK(mscaled.k_r[i] == doctest::Approx(mraw.k_r[i] * w).epsilon(1e-9));
      CHECK(mscaled.k_rd[i] == doctest::Approx(mraw.k_rd[i] * w).epsilon(1e-9));
    }
  }

  TEST_CASE("assembled parameters") {
    const ModelParams truth = params_5inch();
    const FlightLog log = simulate_chirp_flight(truth, ChirpConfig{.duration = 10.0});
    const ModelParams p = assemble_params(fit_force_params(log), fit_moment_params(log),
                                          fit_motor_params(simulate_motor_bench(truth)));
    REQUIRE_NOTHROW(p.validate());
    CHECK(rel(p.k_omega_hat, truth.k_omega_hat) <= 0.02);
    CHECK(rel(p.k_p_hat[2], truth.k_p_hat[2]) <= 0.02);
  }

  TEST_CASE("finite-difference derivatives") {
    ModelParams truth = params_5inch();
    ChirpConfig cfg{.duration = 10.0};
    cfg.log_derivatives = false;
    const FlightLog log = simulate_chirp_flight(truth, cfg);
    CHECK_FALSE(log.rows[5].rates_dot.has_value());
    const MomentFit m = fit_moment_params(log, truth.omega_max);
    // Sample-and-hold commands make the rotor acceleration discontinuous, so
    // the central difference carries an O(dt) bias at every command change.
    for (int i = 0; i < 4; ++i) {
      CHECK(rel(m.k_p[i], truth.k_p_hat[i]) <= 0.02);
      CHECK(rel(m.k_r[i], truth.k_r_hat[i]) <= 0.05);
      CHECK(rel(m.k_rd[i], truth.k_rd_hat[i]) <= 0.05);
    }
  }

  TEST_CASE("flight log CSV round trip") {
    const FlightLog log = simulate_chirp_flight(params_5inch(), ChirpConfig{.duration = 0.2});
    const auto dir = oracle::temp_dir("flightlog");
    write_flight_log_csv(log, dir / "log.csv");
    const FlightLog back = read_flight_log_csv(dir / "log.csv");
    REQUIRE(back.rows.size() == log.rows.size());
    for (std::size_t i = 0; i < log.rows.size(); ++i) {
      REQUIRE(back.rows[i].t == log.rows[i].t);
      REQUIRE(back.rows[i].state.omega == log.rows[i].state.omega);
      REQUIRE(back.rows[i].specific_force == log.rows[i].specific_force);
      REQUIRE(*back.rows[i].omega_dot == *log.rows[i].omega_dot);
    }
    CHECK(back.sample_period() == doctest::Approx(1e-3));

    FlightLog bad = log;
    bad.rows[3].t = bad.rows[2].t;
    CHECK_THROWS(bad.validate());
  }
}
