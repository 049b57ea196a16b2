#include "quadrace/sysid.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "quadrace/env.hpp"
#include "quadrace/errors.hpp"

namespace quadrace {

namespace {

constexpr const char* kStateColumns[] = {
    "t",     "px",     "py",     "pz",     "vx", "vy", "vz", "phi", "theta", "psi",
    "p_rate", "q_rate", "r_rate", "w1",     "w2", "w3", "w4", "u1",  "u2",    "u3",
    "u4"};
constexpr const char* kRateDotColumns[] = {"p_dot", "q_dot", "r_dot"};
constexpr const char* kRotorDotColumns[] = {"w1_dot", "w2_dot", "w3_dot", "w4_dot"};

Vec3 body_velocity(const QuadState& s) { return rotation_matrix(s.euler).transpose() * s.v; }

template <typename V, typename Get>
std::vector<V> central_difference(const FlightLog& log, Get get) {
  const auto& r = log.rows;
  const std::size_t n = r.size();
  std::vector<V> out(n);
  if (n < 2) throw std::invalid_argument("finite differences need at least two rows");
  out[0] = (get(r[1]) - get(r[0])) / (r[1].t - r[0].t);
  out[n - 1] = (get(r[n - 1]) - get(r[n - 2])) / (r[n - 1].t - r[n - 2].t);
  for (std::size_t k = 1; k + 1 < n; ++k) {
    out[k] = (get(r[k + 1]) - get(r[k - 1])) / (r[k + 1].t - r[k - 1].t);
  }
  return out;
}

void check_rows(const FlightLog& log, Eigen::Index unknowns) {
  if (static_cast<Eigen::Index>(log.rows.size()) < 10 * unknowns) {
    throw InsufficientExcitation("flight log needs at least 10 rows per unknown");
  }
}

// Steady-state curve with the endpoints factored out:
// omega = omega_min + (omega_max - omega_min) * shape(u).
double motor_shape(double u, double k_l) {
  return std::sqrt(std::max(0.0, k_l * u * u + (1.0 - k_l) * u));
}

struct SteadyFit {
  double omega_min = 0.0;
  double span = 0.0;
  double sse = 0.0;
};

SteadyFit fit_endpoints(const std::vector<double>& u, const std::vector<double>& w, double k_l) {
  Eigen::MatrixXd x(static_cast<Eigen::Index>(u.size()), 2);
  Eigen::VectorXd y(static_cast<Eigen::Index>(u.size()));
  for (std::size_t j = 0; j < u.size(); ++j) {
    const auto r = static_cast<Eigen::Index>(j);
    x(r, 0) = motor_shape(u[j], k_l);
    x(r, 1) = 1.0;
    y[r] = w[j];
  }
  const Eigen::Vector2d b = x.colPivHouseholderQr().solve(y);
  return {b[1], b[0], (x * b - y).squaredNorm()};
}

}  // namespace

void FlightLog::validate() const {
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const FlightLogRow& r = rows[k];
    const bool finite = std::isfinite(r.t) && r.state.all_finite() && r.u.allFinite() &&
                        r.specific_force.allFinite() &&
                        (!r.rates_dot || r.rates_dot->allFinite()) &&
                        (!r.omega_dot || r.omega_dot->allFinite());
    if (!finite) throw std::invalid_argument("flight log row " + std::to_string(k) + " is not finite");
    if (k > 0 && !(r.t > rows[k - 1].t)) {
      throw std::invalid_argument("flight log time must be strictly increasing");
    }
  }
}

double FlightLog::sample_period() const {
  if (rows.size() < 2) return 0.0;
  return (rows.back().t - rows.front().t) / static_cast<double>(rows.size() - 1);
}

void write_flight_log_csv(const FlightLog& log, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  bool with_rates = !log.rows.empty();
  bool with_rotor = !log.rows.empty();
  for (const auto& r : log.rows) {
    with_rates = with_rates && r.rates_dot.has_value();
    with_rotor = with_rotor && r.omega_dot.has_value();
  }
  out.precision(17);
  out << kTrajectoryHeader << ",fx,fy,fz";
  if (with_rates) out << ",p_dot,q_dot,r_dot";
  if (with_rotor) out << ",w1_dot,w2_dot,w3_dot,w4_dot";
  out << '\n';
  for (const auto& r : log.rows) {
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
    out << ",0,0,0";
    put(r.specific_force);
    if (with_rates) put(*r.rates_dot);
    if (with_rotor) put(*r.omega_dot);
    out << '\n';
  }
}

FlightLog read_flight_log_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw IoError(path.string() + ": empty flight log");
  std::map<std::string, std::size_t> col;
  {
    std::stringstream ss(line);
    std::string name;
    for (std::size_t i = 0; std::getline(ss, name, ','); ++i) {
      if (!name.empty() && name.back() == '\r') name.pop_back();
      col[name] = i;
    }
  }
  auto index_of = [&](const char* name) {
    const auto it = col.find(name);
    if (it == col.end()) throw IoError(path.string() + ": missing column " + name);
    return it->second;
  };
  std::vector<std::size_t> state_idx;
  for (const char* c : kStateColumns) state_idx.push_back(index_of(c));
  const std::size_t fx = index_of("fx"), fy = index_of("fy"), fz = index_of("fz");
  const bool with_rates = col.contains("p_dot");
  const bool with_rotor = col.contains("w1_dot");
  std::vector<std::size_t> rate_idx, rotor_idx;
  if (with_rates) {
    for (const char* c : kRateDotColumns) rate_idx.push_back(index_of(c));
  }
  if (with_rotor) {
    for (const char* c : kRotorDotColumns) rotor_idx.push_back(index_of(c));
  }

  FlightLog log;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    std::vector<double> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(std::stod(cell));
    if (f.size() < col.size()) throw IoError(path.string() + ": short flight log row");
    auto at = [&](std::size_t i) { return f[state_idx[i]]; };
    FlightLogRow r;
    r.t = at(0);
    r.state.p = Vec3(at(1), at(2), at(3));
    r.state.v = Vec3(at(4), at(5), at(6));
    r.state.euler = Vec3(at(7), at(8), at(9));
    r.state.rates = Vec3(at(10), at(11), at(12));
    r.state.omega = Vec4(at(13), at(14), at(15), at(16));
    r.u = Vec4(at(17), at(18), at(19), at(20));
    r.specific_force = Vec3(f[fx], f[fy], f[fz]);
    if (with_rates) r.rates_dot = Vec3(f[rate_idx[0]], f[rate_idx[1]], f[rate_idx[2]]);
    if (with_rotor) {
      r.omega_dot = Vec4(f[rotor_idx[0]], f[rotor_idx[1]], f[rotor_idx[2]], f[rotor_idx[3]]);
    }
    log.rows.push_back(r);
  }
  log.validate();
  return log;
}

LinearFit least_squares(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                        double max_condition) {
  if (x.rows() != y.size()) throw std::invalid_argument("least_squares: size mismatch");
  if (x.rows() < x.cols()) throw RankDeficient("fewer rows than unknowns");
  const Eigen::VectorXd scale = x.colwise().norm().transpose();
  for (Eigen::Index c = 0; c < scale.size(); ++c) {
    if (!(scale[c] > 0.0)) {
      throw RankDeficient("regressor column " + std::to_string(c) + " is identically zero");
    }
  }
  const Eigen::MatrixXd xs = x * scale.cwiseInverse().asDiagonal();
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(xs.transpose() * xs);
  const double lo = eig.eigenvalues().minCoeff();
  const double hi = eig.eigenvalues().maxCoeff();
  const double condition = lo > 0.0 ? hi / lo : std::numeric_limits<double>::infinity();
  if (!(condition <= max_condition)) {
    std::ostringstream msg;
    msg << "regressor Gram condition " << condition << " exceeds " << max_condition;
    throw RankDeficient(msg.str());
  }
  LinearFit fit;
  fit.coef = xs.colPivHouseholderQr().solve(y).cwiseQuotient(scale);
  fit.rms_residual = std::sqrt((x * fit.coef - y).squaredNorm() / static_cast<double>(y.size()));
  fit.condition = condition;
  return fit;
}

std::vector<Vec3> rates_derivative(const FlightLog& log) {
  bool logged = !log.rows.empty();
  for (const auto& r : log.rows) logged = logged && r.rates_dot.has_value();
  if (logged) {
    std::vector<Vec3> out;
    out.reserve(log.rows.size());
    for (const auto& r : log.rows) out.push_back(*r.rates_dot);
    return out;
  }
  return central_difference<Vec3>(log, [](const FlightLogRow& r) { return r.state.rates; });
}

std::vector<Vec4> rotor_derivative(const FlightLog& log) {
  bool logged = !log.rows.empty();
  for (const auto& r : log.rows) logged = logged && r.omega_dot.has_value();
  if (logged) {
    std::vector<Vec4> out;
    out.reserve(log.rows.size());
    for (const auto& r : log.rows) out.push_back(*r.omega_dot);
    return out;
  }
  return central_difference<Vec4>(log, [](const FlightLogRow& r) { return r.state.omega; });
}

ForceFit fit_force_params(const FlightLog& log, double omega_scale) {
  log.validate();
  check_rows(log, 1);
  const auto n = static_cast<Eigen::Index>(log.rows.size());
  Eigen::MatrixXd cx(n, 1), cy(n, 1), cz(n, 1);
  Eigen::VectorXd fx(n), fy(n), fz(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const FlightLogRow& r = log.rows[static_cast<std::size_t>(k)];
    const Vec4 w = r.state.omega / omega_scale;
    const Vec3 vb = body_velocity(r.state);
    cx(k, 0) = -vb.x() * w.sum();
    cy(k, 0) = -vb.y() * w.sum();
    cz(k, 0) = -w.squaredNorm();
    fx[k] = r.specific_force.x();
    fy[k] = r.specific_force.y();
    fz[k] = r.specific_force.z();
  }
  const LinearFit z = least_squares(cz, fz);
  const LinearFit x = least_squares(cx, fx);
  const LinearFit y = least_squares(cy, fy);
  return {z.coef[0], x.coef[0], y.coef[0], Vec3(x.rms_residual, y.rms_residual, z.rms_residual)};
}

MomentFit fit_moment_params(const FlightLog& log, double omega_scale) {
  log.validate();
  check_rows(log, 8);
  const std::vector<Vec3> rates_dot = rates_derivative(log);
  const std::vector<Vec4> omega_dot = rotor_derivative(log);
  const auto n = static_cast<Eigen::Index>(log.rows.size());
  Eigen::MatrixXd xr(n, 4), xp(n, 4), xy(n, 8);
  Eigen::VectorXd yr(n), yp(n), yy(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const auto i = static_cast<std::size_t>(k);
    const Vec4 w = log.rows[i].state.omega / omega_scale;
    const Vec4 wd = omega_dot[i] / omega_scale;
    xr.row(k) = kRollSigns.cwiseProduct(w.cwiseAbs2()).transpose();
    xp.row(k) = kPitchSigns.cwiseProduct(w.cwiseAbs2()).transpose();
    xy.row(k).head<4>() = kYawSigns.cwiseProduct(w).transpose();
    xy.row(k).tail<4>() = kYawSigns.cwiseProduct(wd).transpose();
    yr[k] = rates_dot[i].x();
    yp[k] = rates_dot[i].y();
    yy[k] = rates_dot[i].z();
  }
  const LinearFit roll = least_squares(xr, yr);
  const LinearFit pitch = least_squares(xp, yp);
  const LinearFit yaw = least_squares(xy, yy);
  MomentFit out;
  out.k_p = roll.coef;
  out.k_q = pitch.coef;
  out.k_r = yaw.coef.head<4>();
  out.k_rd = yaw.coef.tail<4>();
  out.rms = Vec3(roll.rms_residual, pitch.rms_residual, yaw.rms_residual);
  return out;
}

MotorFit fit_motor_params(const FlightLog& log, double min_hold) {
  log.validate();
  const auto& rows = log.rows;
  if (rows.size() < 3) throw InsufficientExcitation("motor log is too short");
  double u_lo = 1.0, u_hi = 0.0;
  for (const auto& r : rows) {
    u_lo = std::min(u_lo, r.u.minCoeff());
    u_hi = std::max(u_hi, r.u.maxCoeff());
  }
  if (u_hi - u_lo < 0.5) throw InsufficientExcitation("command range is below 0.5");

  // Constant-command segments per rotor: [first, last] rows sharing u_i. The
  // state reached at the end of the hold is logged on row last + 1.
  struct Segment {
    int rotor;
    std::size_t first, last;
    double u;
  };
  std::vector<Segment> segments;
  for (int i = 0; i < 4; ++i) {
    std::size_t first = 0;
    for (std::size_t k = 1; k <= rows.size(); ++k) {
      if (k == rows.size() || rows[k].u[i] != rows[first].u[i]) {
        segments.push_back({i, first, k - 1, rows[first].u[i]});
        first = k;
      }
    }
  }

  std::vector<double> su, sw;
  for (const Segment& s : segments) {
    const std::size_t end = std::min(s.last + 1, rows.size() - 1);
    if (rows[end].t - rows[s.first].t >= min_hold) {
      su.push_back(s.u);
      sw.push_back(rows[end].state.omega[s.rotor]);
    }
  }
  if (su.size() < 3) throw InsufficientExcitation("fewer than three steady-state holds");
  {
    const auto [lo, hi] = std::minmax_element(su.begin(), su.end());
    if (*hi - *lo < 0.5) throw InsufficientExcitation("steady-state holds span less than 0.5");
  }

  // k_l: coarse grid, then golden-section refinement of the profiled SSE.
  constexpr double kMax = 1.0 - 1e-9;
  constexpr int kGrid = 200;
  auto sse = [&](double k_l) { return fit_endpoints(su, sw, k_l).sse; };
  int best = 0;
  double best_sse = sse(0.0);
  for (int g = 1; g <= kGrid; ++g) {
    const double e = sse(kMax * g / kGrid);
    if (e < best_sse) {
      best_sse = e;
      best = g;
    }
  }
  double a = kMax * std::max(best - 1, 0) / kGrid;
  double b = kMax * std::min(best + 1, kGrid) / kGrid;
  const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double c = b - phi * (b - a), d = a + phi * (b - a);
  double fc = sse(c), fd = sse(d);
  for (int it = 0; it < 200 && b - a > 1e-12; ++it) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - phi * (b - a);
      fc = sse(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + phi * (b - a);
      fd = sse(d);
    }
  }
  MotorFit out;
  out.k_l = 0.5 * (a + b);
  const SteadyFit ends = fit_endpoints(su, sw, out.k_l);
  out.omega_min = ends.omega_min;
  out.omega_max = ends.omega_min + ends.span;
  out.steady_rms = std::sqrt(ends.sse / static_cast<double>(su.size()));
  out.steady_points = static_cast<int>(su.size());

  // tau: discretized lag ODE, gap(t + h) = gap(t) exp(-h / tau), pooled least
  // squares on log gap ratios inside every constant-command segment.
  const double span = out.omega_max - out.omega_min;
  double num = 0.0, den = 0.0;
  for (const Segment& s : segments) {
    const double target = out.omega_min + span * motor_shape(s.u, out.k_l);
    const double g0 = rows[s.first].state.omega[s.rotor] - target;
    if (std::abs(g0) < 1e-3 * span) continue;
    for (std::size_t k = s.first; k < s.last; ++k) {
      const double g1 = rows[k].state.omega[s.rotor] - target;
      const double g2 = rows[k + 1].state.omega[s.rotor] - target;
      if (std::abs(g1) < 1e-2 * std::abs(g0) || std::abs(g2) < 1e-2 * std::abs(g0) ||
          g1 * g2 <= 0.0) {
        break;
      }
      const double h = rows[k + 1].t - rows[k].t;
      num += h * std::log(g2 / g1);
      den += h * h;
    }
  }
  if (!(den > 0.0) || !(num < 0.0)) throw InsufficientExcitation("no transients to fit tau");
  out.tau = -den / num;
  return out;
}

ModelParams assemble_params(const ForceFit& force, const MomentFit& moment,
                            const MotorFit& motor) {
  PhysicalParams raw;
  raw.k_omega = force.k_omega;
  raw.k_x = force.k_x;
  raw.k_y = force.k_y;
  raw.k_p = moment.k_p;
  raw.k_q = moment.k_q;
  raw.k_r = moment.k_r;
  raw.k_rd = moment.k_rd;
  raw.omega_min = motor.omega_min;
  raw.omega_max = motor.omega_max;
  raw.k_l = motor.k_l;
  raw.tau = motor.tau;
  return normalize_params(raw);
}

FlightLog simulate_chirp_flight(const ModelParams& params, const ChirpConfig& config) {
  params.validate();
  const PhysicalParams k = denormalize_params(params);
  const HoverSolution hover = solve_hover(params);
  const double dt = 1.0 / config.sample_rate;
  const auto steps = static_cast<std::size_t>(std::llround(config.duration * config.sample_rate));

  // Linearized allocation from squared rotor speeds to (vertical specific
  // force, roll, pitch, yaw accelerations) around hover.
  Eigen::Matrix4d alloc;
  alloc.row(0) = Vec4::Constant(k.k_omega).transpose();
  alloc.row(1) = kRollSigns.cwiseProduct(k.k_p).transpose();
  alloc.row(2) = kPitchSigns.cwiseProduct(k.k_q).transpose();
  alloc.row(3) = kYawSigns.cwiseProduct(k.k_r).cwiseQuotient(2.0 * hover.omega).transpose();
  const Eigen::Matrix4d alloc_inv = alloc.inverse();
  const Vec4 w2_hover = hover.omega.cwiseAbs2();

  constexpr double two_pi = 2.0 * std::numbers::pi;
  constexpr double kp_att = 64.0, kd_att = 11.0, kp_yaw = 4.0, kd_yaw = 4.0;
  constexpr double kp_z = 4.0, kd_z = 4.0;
  const Vec4 rate_scale(1.0, 1.31, 0.77, 1.13);
  Rng rng(config.seed);
  Vec4 phase0;
  for (int i = 0; i < 4; ++i) phase0[i] = uniform(rng, 0.0, two_pi);
  const double z_ref = -1.5;

  QuadState s;
  s.p = Vec3(0.0, 0.0, z_ref);
  s.omega = hover.omega;
  FlightLog log;
  log.rows.reserve(steps);
  for (std::size_t n = 0; n < steps; ++n) {
    const double t = static_cast<double>(n) * dt;
    const Vec3 ref(config.tilt * std::sin(two_pi * 0.13 * t),
                   config.tilt * std::sin(two_pi * 0.09 * t + 1.0),
                   0.5 * std::sin(two_pi * 0.05 * t));
    const Vec3& e = s.euler;
    Eigen::Vector4d demand;
    demand[0] = kGravity / (std::cos(e.x()) * std::cos(e.y())) + kp_z * (s.p.z() - z_ref) +
                kd_z * s.v.z() - kGravity;
    demand[1] = kp_att * (ref.x() - e.x()) - kd_att * s.rates.x();
    demand[2] = kp_att * (ref.y() - e.y()) - kd_att * s.rates.y();
    demand[3] = kp_yaw * wrap_angle(ref.z() - e.z()) - kd_yaw * s.rates.z();
    const Vec4 w2 = (w2_hover + alloc_inv * demand)
                        .cwiseMax(k.omega_min * k.omega_min)
                        .cwiseMin(k.omega_max * k.omega_max);
    Vec4 u = command_for_speed(w2.cwiseSqrt(), params).values();
    for (int i = 0; i < 4; ++i) {
      const double f0 = config.f_start * rate_scale[i];
      const double f1 = config.f_end * rate_scale[i];
      const bool up = i % 2 == 0;
      const double fa = up ? f0 : f1, fb = up ? f1 : f0;
      const double ph = two_pi * (fa * t + 0.5 * (fb - fa) * t * t / config.duration) + phase0[i];
      u[i] += config.amplitude * std::sin(ph);
    }
    const MotorCommand cmd(u);

    FlightLogRow row;
    row.t = t;
    row.state = s;
    row.u = cmd.values();
    row.specific_force = specific_force(s, params);
    if (config.log_derivatives) {
      const StateDerivative d = state_derivative(s, cmd, params);
      row.rates_dot = d.rates_dot;
      row.omega_dot = d.omega_dot;
    }
    log.rows.push_back(row);
    s = integrate_step(s, cmd, params, dt);
  }
  return log;
}

FlightLog simulate_motor_bench(const ModelParams& params, const BenchConfig& config) {
  params.validate();
  const double dt = 1.0 / config.sample_rate;
  const auto per_level = static_cast<std::size_t>(std::llround(config.hold * config.sample_rate));
  QuadState s;
  s.omega = Vec4::Constant(params.omega_min);
  FlightLog log;
  std::size_t n = 0;
  for (double level : config.levels) {
    const MotorCommand cmd = MotorCommand::uniform(level);
    for (std::size_t j = 0; j < per_level; ++j, ++n) {
      FlightLogRow row;
      row.t = static_cast<double>(n) * dt;
      row.state = s;
      row.u = cmd.values();
      row.specific_force = specific_force(s, params);
      log.rows.push_back(row);
      s = integrate_step(s, cmd, params, dt);
      const Vec4 omega = s.omega;
      s = QuadState{};
      s.omega = omega;
    }
  }
  FlightLogRow last;
  last.t = static_cast<double>(n) * dt;
  last.state = s;
  last.u = log.rows.back().u;
  last.specific_force = specific_force(s, params);
  log.rows.push_back(last);
  return log;
}

FlightLog subsample(const FlightLog& log, int k) {
  if (k < 1) throw std::invalid_argument("subsample factor must be >= 1");
  FlightLog out;
  for (std::size_t i = 0; i < log.rows.size(); i += static_cast<std::size_t>(k)) {
    out.rows.push_back(log.rows[i]);
  }
  return out;
}

}  // namespace quadrace
