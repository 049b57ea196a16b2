#pragma once

#include <Eigen/Dense>
#include <array>
#include <filesystem>
#include <json.hpp>

namespace quadrace {

using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat3 = Eigen::Matrix3d;

inline constexpr double kGravity = 9.81;
// Fixed simulation step, 1200 steps span a 12 s episode.
inline constexpr double kDefaultDt = 0.01;
// |theta| limit used by the Euler-rate kinematics.
inline constexpr double kPitchLimit = 1.5707963267948966 - 1e-3;

// Quadcopter model parameters, stored in normalized form: thrust and
// roll/pitch effectiveness are multiplied by omega_max^2, drag and yaw
// effectiveness by omega_max. These are the quantities reported for the
// identified platforms and the ones the randomization schemes act on.
struct ModelParams {
  double k_omega_hat = 0.0;
  double k_x_hat = 0.0;
  double k_y_hat = 0.0;
  Vec4 k_p_hat = Vec4::Zero();
  Vec4 k_q_hat = Vec4::Zero();
  Vec4 k_r_hat = Vec4::Zero();   // rotors 1..4, multiplies omega_i
  Vec4 k_rd_hat = Vec4::Zero();  // k_r5..k_r8, multiplies omega_dot_i
  double omega_min = 0.0;
  double omega_max = 1.0;
  double k_l = 0.0;
  double tau = 0.04;

  // Throws InvalidParams on violated invariants.
  void validate() const;
  bool operator==(const ModelParams&) const = default;
};

// Same parameters with physical (unnormalized) coefficients.
struct PhysicalParams {
  double k_omega = 0.0;
  double k_x = 0.0;
  double k_y = 0.0;
  Vec4 k_p = Vec4::Zero();
  Vec4 k_q = Vec4::Zero();
  Vec4 k_r = Vec4::Zero();
  Vec4 k_rd = Vec4::Zero();
  double omega_min = 0.0;
  double omega_max = 1.0;
  double k_l = 0.0;
  double tau = 0.04;
};

PhysicalParams denormalize_params(const ModelParams& params);
ModelParams normalize_params(const PhysicalParams& raw);

// Rotor sign patterns of the moment model (roll, pitch, yaw).
inline const Vec4 kRollSigns{-1.0, -1.0, 1.0, 1.0};
inline const Vec4 kPitchSigns{-1.0, 1.0, -1.0, 1.0};
inline const Vec4 kYawSigns{-1.0, 1.0, 1.0, -1.0};

struct QuadState {
  Vec3 p = Vec3::Zero();      // world position, NED, m
  Vec3 v = Vec3::Zero();      // world velocity, m/s
  Vec3 euler = Vec3::Zero();  // roll, pitch, yaw (ZYX), rad
  Vec3 rates = Vec3::Zero();  // body rates, rad/s
  Vec4 omega = Vec4::Zero();  // rotor speeds, rad/s

  bool all_finite() const;
};

// Normalized motor commands. Construction clamps into [0, 1].
class MotorCommand {
 public:
  MotorCommand() = default;
  explicit MotorCommand(const Vec4& u);
  MotorCommand(double u1, double u2, double u3, double u4)
      : MotorCommand(Vec4(u1, u2, u3, u4)) {}
  static MotorCommand uniform(double u) { return MotorCommand(Vec4::Constant(u)); }

  const Vec4& values() const { return u_; }
  double operator[](int i) const { return u_[i]; }

 private:
  Vec4 u_ = Vec4::Zero();
};

struct StateDerivative {
  Vec3 p_dot;
  Vec3 v_dot;
  Vec3 euler_dot;
  Vec3 rates_dot;
  Vec4 omega_dot;
};

Vec4 steady_state_motor_speed(const MotorCommand& u, const ModelParams& params);
// Inverse of the steady-state curve; omega is clamped into the valid range.
MotorCommand command_for_speed(const Vec4& omega, const ModelParams& params);

// Body-to-world rotation for ZYX Euler angles.
Mat3 rotation_matrix(const Vec3& euler);
// Maps body rates to Euler-angle rates. Throws NearGimbalLock when
// |theta| > kPitchLimit.
Mat3 euler_rate_matrix(const Vec3& euler);
// Same matrix with theta clamped to +-kPitchLimit instead of throwing.
Mat3 euler_rate_matrix_clamped(const Vec3& euler);

// Body-frame specific force, m/s^2.
Vec3 specific_force(const QuadState& state, const ModelParams& params);
Vec3 specific_force(const QuadState& state, const PhysicalParams& params);
// Angular acceleration from rotor speeds and rotor accelerations.
Vec3 moment(const QuadState& state, const Vec4& omega_dot, const ModelParams& params);
Vec3 moment(const QuadState& state, const Vec4& omega_dot, const PhysicalParams& params);

StateDerivative state_derivative(const QuadState& state, const MotorCommand& u,
                                 const ModelParams& params);

struct StepInfo {
  bool pitch_clamped = false;
};

// One classic RK4 step. Rotor speeds are clamped and roll/yaw wrapped after
// the full step. Throws NonFiniteState.
QuadState integrate_step(const QuadState& state, const MotorCommand& u,
                         const ModelParams& params, double dt = kDefaultDt,
                         StepInfo* info = nullptr);

// Rotor speeds (and matching commands) for which the derivative vanishes at
// level attitude: total thrust equals g and all three moments are zero.
struct HoverSolution {
  Vec4 omega;
  MotorCommand command;
};
HoverSolution solve_hover(const ModelParams& params);

double wrap_angle(double a);

void to_json(nlohmann::json& j, const ModelParams& p);
void from_json(const nlohmann::json& j, ModelParams& p);
ModelParams load_params(const std::filesystem::path& path);
void save_params(const ModelParams& params, const std::filesystem::path& path);

// Identified parameter sets of the 3-inch and 5-inch racers.
ModelParams params_3inch();
ModelParams params_5inch();

}  // namespace quadrace
