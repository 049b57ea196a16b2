#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "quadrace/dynamics.hpp"

namespace quadrace {

// One logged sample. specific_force is the measured body-frame specific
// force; rates_dot and omega_dot are optional (finite-differenced when absent).
struct FlightLogRow {
  double t = 0.0;
  QuadState state;
  Vec4 u = Vec4::Zero();
  Vec3 specific_force = Vec3::Zero();
  std::optional<Vec3> rates_dot;
  std::optional<Vec4> omega_dot;
};

struct FlightLog {
  std::vector<FlightLogRow> rows;

  // Throws std::invalid_argument unless t is strictly increasing and every
  // entry is finite.
  void validate() const;
  double sample_period() const;
};

// CSV layout: trajectory columns t..u4, then fx,fy,fz and optionally
// p_dot,q_dot,r_dot,w1_dot..w4_dot. Columns are matched by header name.
void write_flight_log_csv(const FlightLog& log, const std::filesystem::path& path);
FlightLog read_flight_log_csv(const std::filesystem::path& path);

// Ordinary least squares y ~ X b. Columns are scaled to unit norm before the
// conditioning test; a zero column or a scaled Gram condition number above
// max_condition throws RankDeficient.
struct LinearFit {
  Eigen::VectorXd coef;
  double rms_residual = 0.0;
  double condition = 0.0;
};
LinearFit least_squares(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                        double max_condition = 1e10);

// Derivatives used by the moment fit: logged values when present, else 3-point
// central differences (end rows use one-sided differences).
std::vector<Vec3> rates_derivative(const FlightLog& log);
std::vector<Vec4> rotor_derivative(const FlightLog& log);

// Coefficients are returned for regressors built from omega / omega_scale:
// omega_scale = 1 gives physical coefficients, omega_scale = omega_max gives
// the normalized ones directly.
struct ForceFit {
  double k_omega = 0.0;
  double k_x = 0.0;
  double k_y = 0.0;
  Vec3 rms = Vec3::Zero();
};
ForceFit fit_force_params(const FlightLog& log, double omega_scale = 1.0);

struct MomentFit {
  Vec4 k_p = Vec4::Zero();
  Vec4 k_q = Vec4::Zero();
  Vec4 k_r = Vec4::Zero();
  Vec4 k_rd = Vec4::Zero();
  Vec3 rms = Vec3::Zero();
};
MomentFit fit_moment_params(const FlightLog& log, double omega_scale = 1.0);

// Pooled over all four rotors, which are assumed to share one motor model.
// Steady-state points are the last sample of every constant-command segment
// lasting at least min_hold seconds.
struct MotorFit {
  double omega_min = 0.0;
  double omega_max = 0.0;
  double k_l = 0.0;
  double tau = 0.0;
  double steady_rms = 0.0;
  int steady_points = 0;
};
MotorFit fit_motor_params(const FlightLog& log, double min_hold = 0.2);

// Normalizes the physical force/moment coefficients with the fitted omega_max.
ModelParams assemble_params(const ForceFit& force, const MomentFit& moment,
                            const MotorFit& motor);

// Closed-loop excitation flight: a hover-trim attitude/altitude stabilizer
// with slowly varying attitude setpoints plus independent per-motor chirps.
// Logs exact specific force and derivatives.
struct ChirpConfig {
  double duration = 20.0;
  double sample_rate = 1000.0;
  double amplitude = 0.05;
  double f_start = 0.3;
  double f_end = 6.0;
  double tilt = 0.25;
  std::uint64_t seed = 0;
  bool log_derivatives = true;
};
FlightLog simulate_chirp_flight(const ModelParams& params, const ChirpConfig& config = {});

// Motor bench test: airframe held fixed, all rotors driven by a staircase of
// commands, each held for hold seconds.
struct BenchConfig {
  std::vector<double> levels{0.0, 1.0, 0.5, 0.1, 0.8, 0.3, 0.95, 0.05,
                             0.6, 0.2, 0.0, 0.4, 0.7, 0.9, 0.15, 1.0};
  double hold = 0.5;
  double sample_rate = 1000.0;
};
FlightLog simulate_motor_bench(const ModelParams& params, const BenchConfig& config = {});

// Keeps every k-th row (derivative columns are kept as logged).
FlightLog subsample(const FlightLog& log, int k);

}  // namespace quadrace
