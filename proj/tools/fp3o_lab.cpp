// Command-line front end: train runs the configured update scheme on a
// desk-scale environment, eval replays a checkpoint, verify drives the
// identity and gradient suites, plot renders learning curves.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "fp3o/plot.hpp"
#include "fp3o/train.hpp"
#include "fp3o/verify.hpp"

namespace {

fp3o::RunConfig load_config(const std::string& path) {
  if (path.empty()) return fp3o::RunConfig{};
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path);
  nlohmann::json j;
  in >> j;
  return fp3o::RunConfig::from_json(j);
}

fp3o::EnvSpec env_by_name(const std::string& name, int n_agents) {
  const fp3o::EnvKind kind = fp3o::env_kind_from_string(name);
  switch (kind) {
    case fp3o::EnvKind::matrix: {
      fp3o::EnvSpec s = fp3o::EnvSpec::matrix_default();
      if (n_agents > 0 && n_agents != 2) {
        nlohmann::json j = s.to_json();
        j["n_agents"] = n_agents;
        j.erase("payoff");
        j.erase("actions");
        s = fp3o::EnvSpec::from_json(j);
      }
      return s;
    }
    case fp3o::EnvKind::spread:
      return fp3o::EnvSpec::spread_default(n_agents > 0 ? n_agents : 3);
    default:
      return fp3o::EnvSpec::linereach_default(n_agents > 0 ? n_agents : 2);
  }
}

int run_train(const std::string& config_path, const std::string& algo,
              const std::string& sharing, const std::string& env,
              int n_agents, std::int64_t steps, std::int64_t seed,
              const std::string& out_dir, bool dump_buffer) {
  fp3o::RunConfig cfg = load_config(config_path);
  if (!env.empty()) cfg.env = env_by_name(env, n_agents);
  if (!algo.empty()) cfg.upd.algo = fp3o::algo_from_string(algo);
  if (!sharing.empty()) cfg.upd.sharing = fp3o::sharing_from_string(sharing);
  if (steps >= 0) cfg.total_steps = steps;
  if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
  if (!out_dir.empty()) cfg.out_dir = out_dir;
  cfg.dump_buffer = cfg.dump_buffer || dump_buffer;

  const fp3o::TrainResult res = fp3o::train(cfg);
  std::printf("iterations      %d\n", res.iterations);
  std::printf("env steps       %lld\n", static_cast<long long>(res.env_steps));
  if (res.final_eval_mean)
    std::printf("final eval      %.6f +- %.6f\n", *res.final_eval_mean,
                res.final_eval_std.value_or(0.0));
  if (res.matching_degree_pct)
    std::printf("matching degree %.2f%%\n", *res.matching_degree_pct);
  std::printf("metrics         %s\n", res.metrics_path.string().c_str());
  std::printf("checkpoint      %s\n", res.checkpoint_path.string().c_str());
  if (res.aborted) {
    std::fprintf(stderr,
                 "training aborted on a non-finite loss; the pre-abort "
                 "checkpoint was saved\n");
    return 2;
  }
  return 0;
}

int run_eval(const std::string& checkpoint, int episodes, std::int64_t seed,
             bool stochastic) {
  const fp3o::Checkpoint ck = fp3o::load_checkpoint(checkpoint);
  const fp3o::EnvSpec env = fp3o::EnvSpec::from_json(ck.manifest.at("env"));
  const fp3o::EvalResult res =
      fp3o::evaluate(ck.ens, env, episodes,
                     seed >= 0 ? static_cast<std::uint64_t>(seed) : 0,
                     !stochastic);
  std::printf("episodes %d\nmean     %.6f\nstd      %.6f\n", episodes,
              res.mean, res.std_dev);
  return 0;
}

int run_verify(const std::string& suite, const std::string& mdp_path,
               const std::string& json_out) {
  std::vector<fp3o::CheckResult> checks;
  fp3o::TabularMdp extra;
  const fp3o::TabularMdp* extra_ptr = nullptr;
  if (!mdp_path.empty()) {
    std::ifstream in(mdp_path);
    if (!in) throw std::runtime_error("cannot open mdp file: " + mdp_path);
    nlohmann::json j;
    in >> j;
    extra = fp3o::TabularMdp::from_json(j);
    extra_ptr = &extra;
  }
  auto append = [&checks](std::vector<fp3o::CheckResult> more) {
    checks.insert(checks.end(), more.begin(), more.end());
  };
  if (suite == "oracle" || suite == "all")
    append(fp3o::verify_oracle_suite(200, extra_ptr));
  if (suite == "gradients" || suite == "all")
    append(fp3o::verify_gradients_suite());
  if (suite == "schemes" || suite == "all")
    append(fp3o::verify_schemes_suite());
  if (checks.empty()) {
    std::fprintf(stderr, "unknown suite: %s\n", suite.c_str());
    return 2;
  }
  for (const fp3o::CheckResult& c : checks)
    std::printf("[%s] %-40s value=%.3e tol=%.0e  %s\n",
                c.pass ? "PASS" : "FAIL", c.name.c_str(), c.value, c.tolerance,
                c.detail.c_str());
  const nlohmann::json verdict = fp3o::checks_to_json(checks);
  if (!json_out.empty()) {
    std::ofstream out(json_out);
    out << verdict.dump(2) << '\n';
  } else {
    std::cout << verdict.dump() << '\n';
  }
  return fp3o::all_pass(checks) ? 0 : 1;
}

int run_plot(const std::string& in_dir, const std::string& out_dir) {
  const fp3o::PlotResult res = fp3o::plot_runs(in_dir, out_dir);
  std::printf("series   %d\nwarnings %d\n", res.series, res.warnings);
  for (const auto& p : res.outputs)
    std::printf("wrote    %s\n", p.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-agent trust-region policy optimization laboratory"};
  app.require_subcommand(1);

  std::string config_path, algo, sharing, env, out_dir;
  int n_agents = 0;
  std::int64_t steps = -1, seed = -1;
  bool dump_buffer = false;
  CLI::App* train = app.add_subcommand("train", "run a training experiment");
  train->add_option("--config", config_path, "JSON config file");
  train->add_option("--algo", algo,
                    "fp3o|fp3o_instep_only|happo|mappo|ippo|coppo");
  train->add_option("--sharing", sharing, "full|partial|none");
  train->add_option("--env", env, "matrix|spread|linereach");
  train->add_option("--agents", n_agents, "agent count for the chosen env");
  train->add_option("--steps", steps, "total environment steps");
  train->add_option("--seed", seed, "run seed");
  train->add_option("--out", out_dir, "output directory");
  train->add_flag("--dump-buffer", dump_buffer,
                  "write the first iteration's buffer as CSV");

  std::string checkpoint;
  int episodes = 32;
  bool stochastic = false;
  std::int64_t eval_seed = 0;
  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--episodes", episodes, "evaluation episodes");
  eval->add_option("--seed", eval_seed, "evaluation seed");
  eval->add_flag("--stochastic", stochastic, "sample instead of greedy");

  std::string suite = "all", mdp_path, json_out;
  CLI::App* verify = app.add_subcommand("verify", "run the check suites");
  verify->add_option("--suite", suite, "oracle|gradients|schemes|all");
  verify->add_option("--mdp", mdp_path,
                     "JSON MDP description added to the oracle corpus");
  verify->add_option("--json", json_out, "write the JSON verdict to a file");

  std::string plot_in, plot_out = ".";
  CLI::App* plot = app.add_subcommand("plot", "render SVG learning curves");
  plot->add_option("--in", plot_in, "directory scanned for metrics JSONL")
      ->required();
  plot->add_option("--out", plot_out, "output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed())
      return run_train(config_path, algo, sharing, env, n_agents, steps, seed,
                       out_dir, dump_buffer);
    if (eval->parsed())
      return run_eval(checkpoint, episodes, eval_seed, stochastic);
    if (verify->parsed()) return run_verify(suite, mdp_path, json_out);
    if (plot->parsed()) return run_plot(plot_in, plot_out);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
