#include "quadrace/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "quadrace/errors.hpp"

namespace quadrace {

namespace {

bool finite_nonneg(double x) { return std::isfinite(x) && x >= 0.0; }

bool finite_nonneg(const Vec4& x) {
  return x.allFinite() && (x.array() >= 0.0).all();
}

// Yaw-moment sign pattern applies to both the speed and acceleration terms.
Vec3 moment_impl(const Vec4& omega, const Vec4& omega_dot, const PhysicalParams& k) {
  const Vec4 w2 = omega.cwiseAbs2();
  return {kRollSigns.cwiseProduct(k.k_p).dot(w2),
          kPitchSigns.cwiseProduct(k.k_q).dot(w2),
          kYawSigns.cwiseProduct(k.k_r).dot(omega) +
              kYawSigns.cwiseProduct(k.k_rd).dot(omega_dot)};
}

Vec3 force_impl(const Vec3& v_body, const Vec4& omega, const PhysicalParams& k) {
  const double omega_sum = omega.sum();
  return {-k.k_x * v_body.x() * omega_sum, -k.k_y * v_body.y() * omega_sum,
          -k.k_omega * omega.squaredNorm()};
}

Vec4 steady_state_impl(const Vec4& u, double omega_min, double omega_max, double k_l) {
  const Vec4 inner = (k_l * u.array().square() + (1.0 - k_l) * u.array()).max(0.0);
  return ((omega_max - omega_min) * inner.array().sqrt() + omega_min).matrix();
}

// Derivative with the pitch clamped inside the kinematic matrix, shared by
// the RK4 stages.
StateDerivative derivative_impl(const QuadState& s, const Vec4& omega_c,
                                const PhysicalParams& k, const Mat3& q) {
  StateDerivative d;
  const Mat3 r = rotation_matrix(s.euler);
  d.omega_dot = (omega_c - s.omega) / k.tau;
  d.p_dot = s.v;
  d.v_dot = Vec3(0.0, 0.0, kGravity) + r * force_impl(r.transpose() * s.v, s.omega, k);
  d.euler_dot = q * s.rates;
  d.rates_dot = moment_impl(s.omega, d.omega_dot, k);
  return d;
}

QuadState advance(const QuadState& s, const StateDerivative& d, double h) {
  QuadState out;
  out.p = s.p + h * d.p_dot;
  out.v = s.v + h * d.v_dot;
  out.euler = s.euler + h * d.euler_dot;
  out.rates = s.rates + h * d.rates_dot;
  out.omega = s.omega + h * d.omega_dot;
  return out;
}

}  // namespace

void ModelParams::validate() const {
  if (!(std::isfinite(omega_min) && std::isfinite(omega_max) && omega_min >= 0.0 &&
        omega_max > omega_min)) {
    throw InvalidParams("omega_max must exceed omega_min >= 0");
  }
  if (!(k_l >= 0.0 && k_l < 1.0)) throw InvalidParams("k_l must lie in [0, 1)");
  if (!(std::isfinite(tau) && tau > 0.0)) throw InvalidParams("tau must be positive");
  if (!(finite_nonneg(k_omega_hat) && finite_nonneg(k_x_hat) && finite_nonneg(k_y_hat) &&
        finite_nonneg(k_p_hat) && finite_nonneg(k_q_hat) && finite_nonneg(k_r_hat) &&
        finite_nonneg(k_rd_hat))) {
    throw InvalidParams("model coefficients must be finite and non-negative");
  }
}

PhysicalParams denormalize_params(const ModelParams& p) {
  const double w = p.omega_max;
  const double w2 = w * w;
  PhysicalParams k;
  k.k_omega = p.k_omega_hat / w2;
  k.k_x = p.k_x_hat / w;
  k.k_y = p.k_y_hat / w;
  k.k_p = p.k_p_hat / w2;
  k.k_q = p.k_q_hat / w2;
  k.k_r = p.k_r_hat / w;
  k.k_rd = p.k_rd_hat / w;
  k.omega_min = p.omega_min;
  k.omega_max = p.omega_max;
  k.k_l = p.k_l;
  k.tau = p.tau;
  return k;
}

ModelParams normalize_params(const PhysicalParams& k) {
  const double w = k.omega_max;
  const double w2 = w * w;
  ModelParams p;
  p.k_omega_hat = k.k_omega * w2;
  p.k_x_hat = k.k_x * w;
  p.k_y_hat = k.k_y * w;
  p.k_p_hat = k.k_p * w2;
  p.k_q_hat = k.k_q * w2;
  p.k_r_hat = k.k_r * w;
  p.k_rd_hat = k.k_rd * w;
  p.omega_min = k.omega_min;
  p.omega_max = k.omega_max;
  p.k_l = k.k_l;
  p.tau = k.tau;
  return p;
}

bool QuadState::all_finite() const {
  return p.allFinite() && v.allFinite() && euler.allFinite() && rates.allFinite() &&
         omega.allFinite();
}

MotorCommand::MotorCommand(const Vec4& u) : u_(u.cwiseMax(0.0).cwiseMin(1.0)) {}

double wrap_angle(double a) {
  double r = std::remainder(a, 2.0 * std::numbers::pi);
  if (r <= -std::numbers::pi) r += 2.0 * std::numbers::pi;
  return r;
}

Vec4 steady_state_motor_speed(const MotorCommand& u, const ModelParams& params) {
  return steady_state_impl(u.values(), params.omega_min, params.omega_max, params.k_l);
}

MotorCommand command_for_speed(const Vec4& omega, const ModelParams& params) {
  Vec4 u;
  const double k_l = params.k_l;
  for (int i = 0; i < 4; ++i) {
    double s = (omega[i] - params.omega_min) / (params.omega_max - params.omega_min);
    s = std::clamp(s, 0.0, 1.0);
    // k_l u^2 + (1 - k_l) u = s^2
    if (k_l < 1e-12) {
      u[i] = s * s;
    } else {
      const double b = 1.0 - k_l;
      u[i] = (-b + std::sqrt(b * b + 4.0 * k_l * s * s)) / (2.0 * k_l);
    }
  }
  return MotorCommand(u);
}

Mat3 rotation_matrix(const Vec3& euler) {
  const double cr = std::cos(euler.x()), sr = std::sin(euler.x());
  const double cp = std::cos(euler.y()), sp = std::sin(euler.y());
  const double cy = std::cos(euler.z()), sy = std::sin(euler.z());
  Mat3 r;
  r << cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr,
       sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr,
       -sp,     cp * sr,                cp * cr;
  return r;
}

Mat3 euler_rate_matrix_clamped(const Vec3& euler) {
  const double theta = std::clamp(euler.y(), -kPitchLimit, kPitchLimit);
  const double cr = std::cos(euler.x()), sr = std::sin(euler.x());
  const double cp = std::cos(theta), tp = std::tan(theta);
  Mat3 q;
  q << 1.0, sr * tp, cr * tp,
       0.0, cr,      -sr,
       0.0, sr / cp, cr / cp;
  return q;
}

Mat3 euler_rate_matrix(const Vec3& euler) {
  if (!(std::abs(euler.y()) <= kPitchLimit)) {
    std::ostringstream msg;
    msg << "pitch " << euler.y() << " rad beyond the Euler-rate limit";
    throw NearGimbalLock(msg.str());
  }
  return euler_rate_matrix_clamped(euler);
}

Vec3 specific_force(const QuadState& state, const PhysicalParams& params) {
  const Vec3 v_body = rotation_matrix(state.euler).transpose() * state.v;
  return force_impl(v_body, state.omega, params);
}

Vec3 specific_force(const QuadState& state, const ModelParams& params) {
  return specific_force(state, denormalize_params(params));
}

Vec3 moment(const QuadState& state, const Vec4& omega_dot, const PhysicalParams& params) {
  return moment_impl(state.omega, omega_dot, params);
}

Vec3 moment(const QuadState& state, const Vec4& omega_dot, const ModelParams& params) {
  return moment(state, omega_dot, denormalize_params(params));
}

StateDerivative state_derivative(const QuadState& state, const MotorCommand& u,
                                 const ModelParams& params) {
  const Mat3 q = euler_rate_matrix(state.euler);
  return derivative_impl(state, steady_state_motor_speed(u, params),
                         denormalize_params(params), q);
}

QuadState integrate_step(const QuadState& state, const MotorCommand& u,
                         const ModelParams& params, double dt, StepInfo* info) {
  const PhysicalParams k = denormalize_params(params);
  const Vec4 omega_c = steady_state_motor_speed(u, params);
  auto f = [&](const QuadState& s) {
    return derivative_impl(s, omega_c, k, euler_rate_matrix_clamped(s.euler));
  };

  const StateDerivative k1 = f(state);
  const StateDerivative k2 = f(advance(state, k1, 0.5 * dt));
  const StateDerivative k3 = f(advance(state, k2, 0.5 * dt));
  const StateDerivative k4 = f(advance(state, k3, dt));

  StateDerivative avg;
  avg.p_dot = (k1.p_dot + 2.0 * k2.p_dot + 2.0 * k3.p_dot + k4.p_dot) / 6.0;
  avg.v_dot = (k1.v_dot + 2.0 * k2.v_dot + 2.0 * k3.v_dot + k4.v_dot) / 6.0;
  avg.euler_dot = (k1.euler_dot + 2.0 * k2.euler_dot + 2.0 * k3.euler_dot + k4.euler_dot) / 6.0;
  avg.rates_dot = (k1.rates_dot + 2.0 * k2.rates_dot + 2.0 * k3.rates_dot + k4.rates_dot) / 6.0;
  avg.omega_dot = (k1.omega_dot + 2.0 * k2.omega_dot + 2.0 * k3.omega_dot + k4.omega_dot) / 6.0;
  QuadState next = advance(state, avg, dt);

  if (!next.all_finite()) throw NonFiniteState("integration produced a non-finite state");

  next.omega = next.omega.cwiseMax(params.omega_min).cwiseMin(params.omega_max);
  next.euler.x() = wrap_angle(next.euler.x());
  next.euler.z() = wrap_angle(next.euler.z());
  const bool clamped = std::abs(next.euler.y()) > kPitchLimit;
  if (clamped) next.euler.y() = std::clamp(next.euler.y(), -kPitchLimit, kPitchLimit);
  if (info) info->pitch_clamped = clamped;
  return next;
}

HoverSolution solve_hover(const ModelParams& params) {
  const PhysicalParams k = denormalize_params(params);
  // Unknowns: rotor speeds. Residuals: thrust - g, roll, pitch, yaw.
  Vec4 w = Vec4::Constant(std::sqrt(kGravity / (4.0 * k.k_omega)));
  for (int iter = 0; iter < 50; ++iter) {
    const Vec4 w2 = w.cwiseAbs2();
    Vec4 r;
    r << k.k_omega * w2.sum() - kGravity, kRollSigns.cwiseProduct(k.k_p).dot(w2),
        kPitchSigns.cwiseProduct(k.k_q).dot(w2), kYawSigns.cwiseProduct(k.k_r).dot(w);
    if (r.cwiseAbs().maxCoeff() < 1e-13) break;
    Eigen::Matrix4d jac;
    jac.row(0) = (2.0 * k.k_omega * w).transpose();
    jac.row(1) = (2.0 * kRollSigns.cwiseProduct(k.k_p).cwiseProduct(w)).transpose();
    jac.row(2) = (2.0 * kPitchSigns.cwiseProduct(k.k_q).cwiseProduct(w)).transpose();
    jac.row(3) = kYawSigns.cwiseProduct(k.k_r).transpose();
    w -= jac.fullPivLu().solve(r);
  }
  if (!w.allFinite() || (w.array() < params.omega_min).any() ||
      (w.array() > params.omega_max).any()) {
    throw InvalidParams("no hover solution inside the rotor speed range");
  }
  return {w, command_for_speed(w, params)};
}

void to_json(nlohmann::json& j, const ModelParams& p) {
  j = nlohmann::json{{"k_omega_hat", p.k_omega_hat}, {"k_x_hat", p.k_x_hat},
                     {"k_y_hat", p.k_y_hat}};
  for (int i = 0; i < 4; ++i) {
    const std::string n = std::to_string(i + 1);
    j["k_p" + n + "_hat"] = p.k_p_hat[i];
    j["k_q" + n + "_hat"] = p.k_q_hat[i];
    j["k_r" + n + "_hat"] = p.k_r_hat[i];
    j["k_r" + std::to_string(i + 5) + "_hat"] = p.k_rd_hat[i];
  }
  j["omega_min"] = p.omega_min;
  j["omega_max"] = p.omega_max;
  j["k_l"] = p.k_l;
  j["tau"] = p.tau;
}

void from_json(const nlohmann::json& j, ModelParams& p) {
  try {
    p.k_omega_hat = j.at("k_omega_hat").get<double>();
    p.k_x_hat = j.at("k_x_hat").get<double>();
    p.k_y_hat = j.at("k_y_hat").get<double>();
    for (int i = 0; i < 4; ++i) {
      const std::string n = std::to_string(i + 1);
      p.k_p_hat[i] = j.at("k_p" + n + "_hat").get<double>();
      p.k_q_hat[i] = j.at("k_q" + n + "_hat").get<double>();
      p.k_r_hat[i] = j.at("k_r" + n + "_hat").get<double>();
      p.k_rd_hat[i] = j.at("k_r" + std::to_string(i + 5) + "_hat").get<double>();
    }
    p.omega_min = j.at("omega_min").get<double>();
    p.omega_max = j.at("omega_max").get<double>();
    p.k_l = j.at("k_l").get<double>();
    p.tau = j.at("tau").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw InvalidParams(std::string("malformed parameter file: ") + e.what());
  }
  p.validate();
}

ModelParams load_params(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidParams(path.string() + ": " + e.what());
  }
  return j.get<ModelParams>();
}

void save_params(const ModelParams& params, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << nlohmann::json(params).dump(2) << '\n';
}

ModelParams params_3inch() {
  ModelParams p;
  p.k_omega_hat = 14.3;
  p.k_x_hat = 0.16;
  p.k_y_hat = 0.18;
  p.k_p_hat = Vec4(615.0, 598.0, 650.0, 479.0);
  p.k_q_hat = Vec4(217.0, 238.0, 280.0, 196.0);
  p.k_r_hat = Vec4::Constant(47.1);
  p.k_rd_hat = Vec4::Constant(5.57);
  p.omega_min = 305.4;
  p.omega_max = 4887.57;
  p.k_l = 0.84;
  p.tau = 0.04;
  return p;
}

ModelParams params_5inch() {
  ModelParams p;
  p.k_omega_hat = 27.1;
  p.k_x_hat = 0.16;
  p.k_y_hat = 0.24;
  p.k_p_hat = Vec4(711.0, 718.0, 691.0, 724.0);
  p.k_q_hat = Vec4(573.0, 637.0, 548.0, 640.0);
  p.k_r_hat = Vec4::Constant(35.2);
  p.k_rd_hat = Vec4::Constant(6.49);
  p.omega_min = 238.49;
  p.omega_max = 3295.5;
  p.k_l = 0.95;
  p.tau = 0.04;
  return p;
}

}  // namespace quadrace
