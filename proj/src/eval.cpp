#include "quadrace/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "quadrace/errors.hpp"

namespace quadrace {

namespace {

DoneReason parse_reason(const std::string& s) {
  for (DoneReason r : {DoneReason::Running, DoneReason::Collision, DoneReason::GateMiss,
                       DoneReason::Timeout, DoneReason::NumericBlowup}) {
    if (to_string(r) == s) return r;
  }
  throw IoError("unknown done_reason '" + s + "'");
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!out.empty() && !out.back().empty() && out.back().back() == '\r') out.back().pop_back();
  return out;
}

double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

std::string escape_xml(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                    "#9467bd", "#8c564b", "#e377c2", "#17becf"};

}  // namespace

Controller mean_controller(const PolicyParams& policy) {
  return [&policy](const Observation& obs) { return MotorCommand(forward(policy, obs).mean); };
}

bool is_crash(DoneReason reason, bool crash_includes_miss) {
  return reason == DoneReason::Collision || reason == DoneReason::NumericBlowup ||
         (crash_includes_miss && reason == DoneReason::GateMiss);
}

EvalAggregate EvalReport::aggregate() const {
  EvalAggregate a;
  if (records.empty()) return a;
  int crashed = 0, blowups = 0;
  for (const RolloutRecord& r : records) {
    a.ep_rew += r.ep_reward;
    a.ep_len += r.ep_len;
    a.gates += r.gates;
    a.v_mean += r.v_mean;
    a.v_max += r.v_max;
    crashed += r.crashed ? 1 : 0;
    blowups += (r.reason == DoneReason::NumericBlowup || !r.error.empty()) ? 1 : 0;
  }
  const auto n = static_cast<double>(records.size());
  a.ep_rew /= n;
  a.ep_len /= n;
  a.gates /= n;
  a.v_mean /= n;
  a.v_max /= n;
  a.crash_pct = 100.0 * crashed / n;
  a.blowup_pct = 100.0 * blowups / n;
  return a;
}

bool EvalReport::blowup_epidemic() const { return aggregate().blowup_pct > 50.0; }

EvalReport evaluate(const Controller& controller, const EnvSpec& env, const EvalOptions& options,
                    const std::string& net) {
  env.track.validate();
  EvalReport report;
  report.net = net;
  report.env = env.name;
  const auto n = static_cast<std::size_t>(std::max(options.n_rollouts, 0));
  report.records.resize(n);
  const auto keep = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(options.record_trajectories, 0)));
  report.trajectories.resize(keep);

  parallel_for(n, options.threads, [&](std::size_t i) {
    RolloutRecord& rec = report.records[i];
    rec.rollout = static_cast<int>(i);
    std::vector<TrajectoryRow>* traj = i < keep ? &report.trajectories[i] : nullptr;
    try {
      Rng rng(derive_seed(options.seed, i));
      const ModelParams params = env.scheme.sample(rng);
      EpisodeState ep = reset(env.track, params, rng());
      Observation obs = observe(ep, env.track);
      double speed_sum = 0.0;
      while (!ep.done) {
        const MotorCommand u = controller(obs);
        const QuadState before = ep.quad;
        const std::size_t target = ep.target_gate;
        const int gates = ep.gates_passed;
        const StepResult res = step(ep, u, env.track);
        if (traj) {
          traj->push_back({(ep.step - 1) * kDefaultDt, before, u.values(), res.reward, target, gates});
        }
        obs = res.observation;
        rec.ep_reward += res.reward;
        speed_sum += res.speed;
        rec.v_max = std::max(rec.v_max, res.speed);
      }
      if (traj) traj->push_back({ep.step * kDefaultDt, ep.quad, Vec4::Zero(), 0.0, ep.target_gate, ep.gates_passed});
      rec.ep_len = ep.step;
      rec.gates = ep.gates_passed;
      rec.reason = ep.done_reason;
      rec.v_mean = ep.step > 0 ? speed_sum / ep.step : 0.0;
    } catch (const std::exception& e) {
      rec.error = e.what();
      rec.reason = DoneReason::NumericBlowup;
    }
    rec.crashed = is_crash(rec.reason, options.crash_includes_miss);
  });
  return report;
}

EvalReport evaluate(const PolicyParams& policy, const EnvSpec& env, const EvalOptions& options,
                    const std::string& net) {
  return evaluate(mean_controller(policy), env, options, net);
}

std::vector<EvalReport> cross_eval(const std::vector<NamedPolicy>& policies,
                                   const std::vector<EnvSpec>& envs, const EvalOptions& options) {
  std::vector<EvalReport> out;
  out.reserve(policies.size() * envs.size());
  for (const NamedPolicy& p : policies) {
    for (const EnvSpec& e : envs) out.push_back(evaluate(p.params, e, options, p.name));
  }
  return out;
}

const char* const kRolloutHeader =
    "net,env,rollout,ep_rew,ep_len,gates,crashed,v_mean,v_max,done_reason";
const char* const kAggregateHeader = "net,env,ep_rew,ep_len,gates,crash_pct,v_mean,v_max";

void write_rollouts_csv(const std::vector<EvalReport>& reports, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out.precision(17);
  out << kRolloutHeader << '\n';
  for (const EvalReport& rep : reports) {
    for (const RolloutRecord& r : rep.records) {
      out << rep.net << ',' << rep.env << ',' << r.rollout << ',' << r.ep_reward << ','
          << r.ep_len << ',' << r.gates << ',' << (r.crashed ? 1 : 0) << ',' << r.v_mean << ','
          << r.v_max << ',' << to_string(r.reason) << '\n';
    }
  }
  if (!out) throw IoError("failed writing " + path.string());
}

void write_aggregate_csv(const std::vector<EvalReport>& reports,
                         const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out.precision(10);
  out << kAggregateHeader << '\n';
  for (const EvalReport& rep : reports) {
    const EvalAggregate a = rep.aggregate();
    out << rep.net << ',' << rep.env << ',' << a.ep_rew << ',' << a.ep_len << ',' << a.gates
        << ',' << a.crash_pct << ',' << a.v_mean << ',' << a.v_max << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<EvalReport> read_rollouts_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (split_csv(line) != split_csv(kRolloutHeader)) {
    throw IoError(path.string() + ": unexpected per-rollout header");
  }
  std::vector<EvalReport> reports;
  std::map<std::pair<std::string, std::string>, std::size_t> index;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    const auto f = split_csv(line);
    if (f.size() != 10) throw IoError(path.string() + ": malformed row");
    const auto key = std::make_pair(f[0], f[1]);
    auto it = index.find(key);
    if (it == index.end()) {
      it = index.emplace(key, reports.size()).first;
      reports.push_back({f[0], f[1], {}, {}});
    }
    RolloutRecord r;
    r.rollout = std::stoi(f[2]);
    r.ep_reward = std::stod(f[3]);
    r.ep_len = std::stoi(f[4]);
    r.gates = std::stoi(f[5]);
    r.crashed = f[6] == "1";
    r.v_mean = std::stod(f[7]);
    r.v_max = std::stod(f[8]);
    r.reason = parse_reason(f[9]);
    reports[it->second].records.push_back(r);
  }
  return reports;
}

void write_trajectory_svg(const Track& track, const std::vector<std::vector<TrajectoryRow>>& runs,
                          const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  constexpr double kSize = 600.0, kMargin = 30.0;
  const double half_x = 0.5 * track.bounds.size.x();
  const double half_y = 0.5 * track.bounds.size.y();
  const double scale = (kSize - 2 * kMargin) / (2.0 * std::max(half_x, half_y));
  // World x (north) maps to screen up, world y (east) to screen right.
  auto sx = [&](double y) { return kSize / 2 + y * scale; };
  auto sy = [&](double x) { return kSize / 2 - x * scale; };

  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kSize << "\" height=\"" << kSize
      << "\" viewBox=\"0 0 " << kSize << ' ' << kSize << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<rect x=\"" << sx(-half_y) << "\" y=\"" << sy(half_x) << "\" width=\"" << 2 * half_y * scale
      << "\" height=\"" << 2 * half_x * scale << "\" fill=\"none\" stroke=\"#888\"/>\n";
  for (std::size_t g = 0; g < track.gates.size(); ++g) {
    const Gate& gate = track.gates[g];
    const Vec3 side = gate.rotation().col(1) * gate.half_size;
    const Vec3 a = gate.center - side, b = gate.center + side;
    out << "<line class=\"gate\" x1=\"" << sx(a.y()) << "\" y1=\"" << sy(a.x()) << "\" x2=\""
        << sx(b.y()) << "\" y2=\"" << sy(b.x()) << "\" stroke=\"black\" stroke-width=\"4\"/>\n";
    const Vec3 tip = gate.center + 0.4 * gate.normal();
    out << "<line x1=\"" << sx(gate.center.y()) << "\" y1=\"" << sy(gate.center.x()) << "\" x2=\""
        << sx(tip.y()) << "\" y2=\"" << sy(tip.x()) << "\" stroke=\"#888\"/>\n";
    out << "<text x=\"" << sx(gate.center.y()) + 6 << "\" y=\"" << sy(gate.center.x()) - 6
        << "\" font-size=\"12\">" << g << "</text>\n";
  }
  for (std::size_t r = 0; r < runs.size(); ++r) {
    if (runs[r].empty()) continue;
    out << "<polyline class=\"trajectory\" fill=\"none\" stroke=\"" << kPalette[r % 8]
        << "\" stroke-width=\"1.5\" points=\"";
    for (const TrajectoryRow& row : runs[r]) {
      out << sx(row.state.p.y()) << ',' << sy(row.state.p.x()) << ' ';
    }
    out << "\"/>\n";
  }
  out << "</svg>\n";
  if (!out) throw IoError("failed writing " + path.string());
}

void write_reward_boxplot_svg(const std::vector<EvalReport>& reports,
                              const std::filesystem::path& path) {
  // Group by net, keeping first-seen order.
  std::vector<std::string> nets;
  std::map<std::string, std::vector<double>> rewards;
  for (const EvalReport& rep : reports) {
    if (!rewards.contains(rep.net)) nets.push_back(rep.net);
    auto& v = rewards[rep.net];
    for (const RolloutRecord& r : rep.records) v.push_back(r.ep_reward);
  }
  double lo = 0.0, hi = 1.0;
  bool first = true;
  for (const auto& [name, v] : rewards) {
    for (double x : v) {
      lo = first ? x : std::min(lo, x);
      hi = first ? x : std::max(hi, x);
      first = false;
    }
  }
  if (hi - lo < 1e-9) {
    lo -= 1.0;
    hi += 1.0;
  }
  const double pad = 0.05 * (hi - lo);
  lo -= pad;
  hi += pad;

  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  constexpr double kHeight = 400.0, kTop = 20.0, kBottom = 50.0, kLeft = 60.0, kSlot = 120.0;
  const double width = kLeft + kSlot * static_cast<double>(std::max<std::size_t>(nets.size(), 1)) + 20.0;
  auto sy = [&](double v) { return kTop + (hi - v) / (hi - lo) * (kHeight - kTop - kBottom); };

  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << kHeight
      << "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\""
      << kHeight - kBottom << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = lo + (hi - lo) * t / 4.0;
    out << "<text x=\"" << kLeft - 5 << "\" y=\"" << sy(v) + 4
        << "\" font-size=\"11\" text-anchor=\"end\">" << std::round(v * 10.0) / 10.0 << "</text>\n";
  }
  out << "<text x=\"15\" y=\"" << kHeight / 2 << "\" font-size=\"12\" transform=\"rotate(-90 15 "
      << kHeight / 2 << ")\" text-anchor=\"middle\">episode reward</text>\n";
  for (std::size_t i = 0; i < nets.size(); ++i) {
    const std::vector<double>& v = rewards[nets[i]];
    const double cx = kLeft + kSlot * (static_cast<double>(i) + 0.5);
    const double half = 0.3 * kSlot;
    if (!v.empty()) {
      const double q1 = quantile(v, 0.25), q2 = quantile(v, 0.5), q3 = quantile(v, 0.75);
      const double iqr = q3 - q1;
      double wlo = q1, whi = q3;
      for (double x : v) {
        if (x >= q1 - 1.5 * iqr) wlo = std::min(wlo, x);
        if (x <= q3 + 1.5 * iqr) whi = std::max(whi, x);
      }
      const char* color = kPalette[i % 8];
      out << "<g class=\"box\">\n";
      out << "<line x1=\"" << cx << "\" y1=\"" << sy(whi) << "\" x2=\"" << cx << "\" y2=\""
          << sy(wlo) << "\" stroke=\"black\"/>\n";
      out << "<rect x=\"" << cx - half << "\" y=\"" << sy(q3) << "\" width=\"" << 2 * half
          << "\" height=\"" << std::max(sy(q1) - sy(q3), 0.5) << "\" fill=\"" << color
          << "\" fill-opacity=\"0.4\" stroke=\"" << color << "\"/>\n";
      out << "<line x1=\"" << cx - half << "\" y1=\"" << sy(q2) << "\" x2=\"" << cx + half
          << "\" y2=\"" << sy(q2) << "\" stroke=\"black\" stroke-width=\"2\"/>\n";
      for (double x : v) {
        if (x < wlo || x > whi) {
          out << "<circle cx=\"" << cx << "\" cy=\"" << sy(x) << "\" r=\"2\" fill=\"none\" stroke=\""
              << color << "\"/>\n";
        }
      }
      out << "</g>\n";
    }
    out << "<text x=\"" << cx << "\" y=\"" << kHeight - kBottom + 20
        << "\" font-size=\"12\" text-anchor=\"middle\">" << escape_xml(nets[i]) << "</text>\n";
  }
  out << "</svg>\n";
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace quadrace
