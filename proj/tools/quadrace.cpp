#include <CLI11.hpp>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <optional>

#include "quadrace/errors.hpp"
#include "quadrace/eval.hpp"
#include "quadrace/ppo.hpp"
#include "quadrace/sysid.hpp"

namespace fs = std::filesystem;
using namespace quadrace;

namespace {

Track track_or_default(const std::string& path) {
  return path.empty() ? default_figure8() : load_track(path);
}

std::optional<ModelParams> params_or_none(const std::string& path) {
  if (path.empty()) return std::nullopt;
  return load_params(path);
}

int exit_code_for(const std::vector<EvalReport>& reports) {
  for (const EvalReport& r : reports) {
    if (r.blowup_epidemic()) {
      std::cerr << "error: more than half of the rollouts of " << r.net << " on " << r.env
                << " ended in numeric blowup\n";
      return 3;
    }
  }
  return 0;
}

void print_aggregates(const std::vector<EvalReport>& reports) {
  std::cout << kAggregateHeader << '\n';
  for (const EvalReport& rep : reports) {
    const EvalAggregate a = rep.aggregate();
    std::cout << rep.net << ',' << rep.env << ',' << a.ep_rew << ',' << a.ep_len << ','
              << a.gates << ',' << a.crash_pct << ',' << a.v_mean << ',' << a.v_max << '\n';
  }
}

void write_report(const std::vector<EvalReport>& reports, const Track& track, const fs::path& out) {
  fs::create_directories(out);
  write_rollouts_csv(reports, out / "rollouts.csv");
  write_aggregate_csv(reports, out / "aggregate.csv");
  write_reward_boxplot_svg(reports, out / "reward_box.svg");
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const EvalReport& rep = reports[i];
    if (rep.trajectories.empty()) continue;
    const std::string stem = rep.net + "_" + rep.env;
    write_trajectory_svg(track, rep.trajectories, out / ("trajectories_" + stem + ".svg"));
    for (std::size_t k = 0; k < rep.trajectories.size(); ++k) {
      write_trajectory_csv(rep.trajectories[k],
                           out / ("trajectory_" + stem + "_" + std::to_string(k) + ".csv"));
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Quadcopter racing simulator, PPO trainer and evaluation harness"};
  app.require_subcommand(1);

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a policy with PPO");
  std::string dr = "fixed", params_path, track_path, out_dir = "run";
  PpoConfig config;
  config.total_steps = 2'000'000;
  train_cmd->add_option("--dr", dr, "Randomization scheme: general | fixed | pct:<p>");
  train_cmd->add_option("--params", params_path, "Base parameter JSON (fixed / pct schemes)");
  train_cmd->add_option("--track", track_path, "Track JSON (default: built-in figure-eight)");
  train_cmd->add_option("--steps", config.total_steps, "Total environment steps")->capture_default_str();
  train_cmd->add_option("--seed", config.seed, "Master seed")->capture_default_str();
  train_cmd->add_option("--out", out_dir, "Output directory")->capture_default_str();
  train_cmd->add_option("--n-envs", config.n_envs)->capture_default_str();
  train_cmd->add_option("--rollout", config.rollout_length, "Steps per env per update")->capture_default_str();
  train_cmd->add_option("--minibatch", config.minibatch_size)->capture_default_str();
  train_cmd->add_option("--epochs", config.epochs_per_update)->capture_default_str();
  train_cmd->add_option("--lr", config.learning_rate)->capture_default_str();
  train_cmd->add_option("--gamma", config.gamma)->capture_default_str();
  train_cmd->add_option("--gae-lambda", config.gae_lambda)->capture_default_str();
  train_cmd->add_option("--clip", config.clip_range)->capture_default_str();
  train_cmd->add_option("--ent-coef", config.entropy_coef)->capture_default_str();
  train_cmd->add_option("--vf-coef", config.value_coef)->capture_default_str();
  train_cmd->add_option("--max-grad-norm", config.max_grad_norm)->capture_default_str();
  train_cmd->add_option("--hidden", config.hidden, "Hidden layer widths")->capture_default_str();
  train_cmd->add_option("--init-log-std", config.init_log_std)->capture_default_str();
  train_cmd->add_option("--init-action-bias", config.init_action_bias)->capture_default_str();
  train_cmd->add_option("--threads", config.threads, "Environment stepping threads")->capture_default_str();
  train_cmd->add_option("--checkpoint-every", config.checkpoint_every, "Updates between checkpoints")
      ->capture_default_str();

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string checkpoint, env_params, eval_dr = "fixed", eval_track, eval_out = "eval", net_name;
  EvalOptions eval_opts;
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint .json/.bin or stem")->required();
  eval_cmd->add_option("--env-params", env_params, "Environment parameter JSON");
  eval_cmd->add_option("--dr", eval_dr, "Randomization scheme of the environment")->capture_default_str();
  eval_cmd->add_option("--track", eval_track, "Track JSON");
  eval_cmd->add_option("-n", eval_opts.n_rollouts, "Number of rollouts")->capture_default_str();
  eval_cmd->add_option("--seed", eval_opts.seed)->capture_default_str();
  eval_cmd->add_option("--threads", eval_opts.threads)->capture_default_str();
  eval_cmd->add_option("--trajectories", eval_opts.record_trajectories,
                       "Record the first k rollouts")->capture_default_str();
  eval_cmd->add_option("--name", net_name, "Policy name in reports (default: checkpoint stem)");
  eval_cmd->add_option("--out", eval_out)->capture_default_str();
  eval_cmd->add_flag("--crash-includes-miss", eval_opts.crash_includes_miss,
                     "Count gate misses as crashes");

  // cross-eval
  auto* cross_cmd = app.add_subcommand("cross-eval", "Evaluate every policy on every environment");
  std::string manifest_path;
  cross_cmd->add_option("--manifest", manifest_path, "Manifest JSON")->required();

  // plot
  auto* plot_cmd = app.add_subcommand("plot", "Render SVG plots from saved CSVs");
  std::string report_path, plot_track, plot_out = "plots";
  std::vector<std::string> trajectory_paths;
  plot_cmd->add_option("--report", report_path, "Per-rollout CSV");
  plot_cmd->add_option("--trajectory", trajectory_paths, "Trajectory CSV(s)");
  plot_cmd->add_option("--track", plot_track, "Track JSON");
  plot_cmd->add_option("--out", plot_out)->capture_default_str();

  // sysid
  auto* sysid_cmd = app.add_subcommand("sysid", "Identify model parameters from flight logs");
  std::string flight_log, motor_log, sysid_out = "identified.json";
  sysid_cmd->add_option("--log", flight_log, "Flight log CSV")->required();
  sysid_cmd->add_option("--motor-log", motor_log, "Motor bench CSV")->required();
  sysid_cmd->add_option("--out", sysid_out, "Output parameter JSON")->capture_default_str();

  // simulate-log
  auto* sim_cmd = app.add_subcommand("simulate-log", "Write a simulated identification log");
  std::string sim_params, sim_kind = "chirp", sim_out = "log.csv";
  ChirpConfig chirp;
  sim_cmd->add_option("--params", sim_params, "Parameter JSON")->required();
  sim_cmd->add_option("--kind", sim_kind, "chirp | bench")
      ->check(CLI::IsMember({"chirp", "bench"}))
      ->capture_default_str();
  sim_cmd->add_option("--duration", chirp.duration)->capture_default_str();
  sim_cmd->add_option("--rate", chirp.sample_rate, "Sample rate, Hz")->capture_default_str();
  sim_cmd->add_option("--seed", chirp.seed)->capture_default_str();
  sim_cmd->add_option("--out", sim_out)->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) {
      TrainSpec spec{track_or_default(track_path),
                     RandomizationScheme::parse(dr, params_or_none(params_path))};
      train(spec, config, out_dir, &std::cout);
      std::cout << "wrote " << (fs::path(out_dir) / "checkpoint_final.json").string() << '\n';
      return 0;
    }
    if (*eval_cmd) {
      const PolicyParams policy = load_checkpoint(checkpoint);
      const Track track = track_or_default(eval_track);
      const EnvSpec env{env_params.empty() ? eval_dr : fs::path(env_params).stem().string(), track,
                        RandomizationScheme::parse(eval_dr, params_or_none(env_params))};
      if (net_name.empty()) net_name = fs::path(checkpoint).stem().string();
      const std::vector<EvalReport> reports{evaluate(policy, env, eval_opts, net_name)};
      write_report(reports, track, eval_out);
      print_aggregates(reports);
      return exit_code_for(reports);
    }
    if (*cross_cmd) {
      std::ifstream in(manifest_path);
      if (!in) throw IoError("cannot open " + manifest_path);
      const nlohmann::json m = nlohmann::json::parse(in);
      const fs::path base = fs::path(manifest_path).parent_path();
      auto resolve = [&](const std::string& p) {
        const fs::path path(p);
        return path.is_absolute() ? path : base / path;
      };
      const Track track = m.contains("track") ? load_track(resolve(m["track"])) : default_figure8();
      std::vector<NamedPolicy> policies;
      for (const auto& p : m.at("policies")) {
        policies.push_back({p.at("name"), load_checkpoint(resolve(p.at("checkpoint")))});
      }
      std::vector<EnvSpec> envs;
      for (const auto& e : m.at("envs")) {
        std::optional<ModelParams> base_params;
        if (e.contains("params")) base_params = load_params(resolve(e["params"]));
        envs.push_back({e.at("name"), track,
                        RandomizationScheme::parse(e.value("dr", std::string("fixed")), base_params)});
      }
      EvalOptions opts;
      opts.n_rollouts = m.value("n", 1000);
      opts.seed = m.value("seed", std::uint64_t{0});
      opts.threads = m.value("threads", 1);
      opts.crash_includes_miss = m.value("crash_includes_miss", false);
      opts.record_trajectories = m.value("trajectories", 0);
      const std::vector<EvalReport> reports = cross_eval(policies, envs, opts);
      write_report(reports, track, resolve(m.value("out", std::string("cross_eval"))));
      print_aggregates(reports);
      return exit_code_for(reports);
    }
    if (*plot_cmd) {
      if (report_path.empty() && trajectory_paths.empty()) {
        throw std::invalid_argument("plot needs --report and/or --trajectory");
      }
      fs::create_directories(plot_out);
      if (!report_path.empty()) {
        const auto reports = read_rollouts_csv(report_path);
        write_reward_boxplot_svg(reports, fs::path(plot_out) / "reward_box.svg");
        write_aggregate_csv(reports, fs::path(plot_out) / "aggregate.csv");
      }
      if (!trajectory_paths.empty()) {
        std::vector<std::vector<TrajectoryRow>> runs;
        for (const auto& p : trajectory_paths) runs.push_back(read_trajectory_csv(p));
        write_trajectory_svg(track_or_default(plot_track), runs,
                             fs::path(plot_out) / "trajectories.svg");
      }
      return 0;
    }
    if (*sysid_cmd) {
      const FlightLog flight = read_flight_log_csv(flight_log);
      const FlightLog bench = read_flight_log_csv(motor_log);
      const MotorFit motor = fit_motor_params(bench);
      const ForceFit force = fit_force_params(flight);
      const MomentFit mom = fit_moment_params(flight);
      const ModelParams p = assemble_params(force, mom, motor);
      save_params(p, sysid_out);
      std::cout << "force rms (x, y, z): " << force.rms.transpose() << '\n'
                << "moment rms (roll, pitch, yaw): " << mom.rms.transpose() << '\n'
                << "steady-state rms: " << motor.steady_rms << " over " << motor.steady_points
                << " holds\n"
                << nlohmann::json(p).dump(2) << '\n';
      return 0;
    }
    if (*sim_cmd) {
      const ModelParams p = load_params(sim_params);
      BenchConfig bench;
      bench.sample_rate = chirp.sample_rate;
      const FlightLog log =
          sim_kind == "chirp" ? simulate_chirp_flight(p, chirp) : simulate_motor_bench(p, bench);
      write_flight_log_csv(log, sim_out);
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
