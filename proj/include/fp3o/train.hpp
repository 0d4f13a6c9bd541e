#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fp3o/envs.hpp"
#include "fp3o/metrics.hpp"
#include "fp3o/pipeline.hpp"
#include "fp3o/policy.hpp"
#include "fp3o/rollout.hpp"
#include "fp3o/updaters.hpp"

namespace fp3o {

// Config keys mirror the hyperparameter table names verbatim (including
// "gae_lamda") so files trace one-to-one to the documented defaults.
struct RunConfig {
  EnvSpec env = EnvSpec::matrix_default();
  UpdateConfig upd;
  NetConfig net;
  double gamma = 0.99;
  double gae_lamda = 0.95;
  int rollout_threads = 4;
  int buffer_length = 125;  // per-worker steps per iteration
  std::int64_t total_steps = 50000;
  int eval_interval = 5;
  int eval_episodes = 32;
  std::uint64_t seed = 0;
  std::string out_dir = "runs/out";
  bool dump_buffer = false;

  int steps_per_iteration() const { return rollout_threads * buffer_length; }
  int rollout_size() const { return steps_per_iteration() * env.n_agents; }

  void validate() const {
    env.validate();
    upd.validate();
    if (rollout_threads < 1 || buffer_length < 1 || eval_interval < 1 ||
        eval_episodes < 1 || total_steps < 0)
      throw std::invalid_argument("RunConfig: fields must be positive");
    if (upd.num_mini_batch > steps_per_iteration())
      throw std::invalid_argument("RunConfig: more mini-batches than samples");
  }

  nlohmann::json to_json() const {
    return {{"env", env.to_json()},
            {"algo", to_string(upd.algo)},
            {"sharing", to_string(upd.sharing)},
            {"split", to_string(upd.split)},
            {"ppo_clip", upd.ppo_clip},
            {"double_clip", upd.double_clip},
            {"ppo_clip2", upd.ppo_clip2},
            {"ppo_epochs", upd.ppo_epochs},
            {"num_mini_batch", upd.num_mini_batch},
            {"entropy_coef", upd.entropy_coef},
            {"actor_lr", upd.actor_lr},
            {"critic_lr", upd.critic_lr},
            {"gradient_clip_norm", upd.gradient_clip_norm},
            {"optimizer_epsilon", upd.optimizer_epsilon},
            {"huber_delta", upd.huber_delta},
            {"gamma", gamma},
            {"gae_lamda", gae_lamda},
            {"fc_layer_dim", net.fc_dim},
            {"num_fc", net.num_fc},
            {"gain", net.gain_head},
            {"std_x_coef", net.std_x_coef},
            {"std_y_coef", net.std_y_coef},
            {"rollout_threads", rollout_threads},
            {"buffer_length", buffer_length},
            {"total_steps", total_steps},
            {"eval_interval", eval_interval},
            {"eval_episodes", eval_episodes},
            {"seed", seed},
            {"out_dir", out_dir}};
  }

  static RunConfig from_json(const nlohmann::json& j) {
    RunConfig c;
    if (j.contains("env")) c.env = EnvSpec::from_json(j.at("env"));
    if (j.contains("algo"))
      c.upd.algo = algo_from_string(j.at("algo").get<std::string>());
    if (j.contains("sharing"))
      c.upd.sharing = sharing_from_string(j.at("sharing").get<std::string>());
    if (j.contains("split"))
      c.upd.split = split_kind_from_string(j.at("split").get<std::string>());
    c.upd.ppo_clip = j.value("ppo_clip", c.upd.ppo_clip);
    c.upd.double_clip = j.value("double_clip", c.upd.double_clip);
    c.upd.ppo_clip2 = j.value("ppo_clip2", c.upd.ppo_clip2);
    c.upd.ppo_epochs = j.value("ppo_epochs", c.upd.ppo_epochs);
    c.upd.num_mini_batch = j.value("num_mini_batch", c.upd.num_mini_batch);
    c.upd.entropy_coef = j.value("entropy_coef", c.upd.entropy_coef);
    c.upd.actor_lr = j.value("actor_lr", c.upd.actor_lr);
    c.upd.critic_lr = j.value("critic_lr", c.upd.critic_lr);
    c.upd.gradient_clip_norm =
        j.value("gradient_clip_norm", c.upd.gradient_clip_norm);
    c.upd.optimizer_epsilon =
        j.value("optimizer_epsilon", c.upd.optimizer_epsilon);
    c.upd.huber_delta = j.value("huber_delta", c.upd.huber_delta);
    c.gamma = j.value("gamma", c.gamma);
    c.gae_lamda = j.value("gae_lamda", c.gae_lamda);
    c.net.fc_dim = j.value("fc_layer_dim", c.net.fc_dim);
    c.net.num_fc = j.value("num_fc", c.net.num_fc);
    c.net.gain_head = j.value("gain", c.net.gain_head);
    c.net.std_x_coef = j.value("std_x_coef", c.net.std_x_coef);
    c.net.std_y_coef = j.value("std_y_coef", c.net.std_y_coef);
    c.rollout_threads = j.value("rollout_threads", c.rollout_threads);
    c.buffer_length = j.value("buffer_length", c.buffer_length);
    c.total_steps = j.value("total_steps", c.total_steps);
    c.eval_interval = j.value("eval_interval", c.eval_interval);
    c.eval_episodes = j.value("eval_episodes", c.eval_episodes);
    c.seed = j.value("seed", c.seed);
    c.out_dir = j.value("out_dir", c.out_dir);
    c.dump_buffer = j.value("dump_buffer", false);
    return c;
  }
};

struct EvalResult {
  double mean = 0.0;
  double std_dev = 0.0;
};

// Greedy-mode evaluation over full episodes (categorical argmax, gaussian
// mean action); pass greedy = false to sample instead.
inline EvalResult evaluate(const PolicyEnsemble& ens, const EnvSpec& spec,
                           int episodes, std::uint64_t seed,
                           bool greedy = true) {
  if (episodes < 1) throw std::invalid_argument("evaluate: episodes must be >= 1");
  Rng base(seed);
  double sum = 0.0, sumsq = 0.0;
  for (int ep = 0; ep < episodes; ++ep) {
    Rng rng = base.fork(static_cast<std::uint64_t>(ep));
    Env env(spec);
    StepResult sr = env.reset();
    double ret = 0.0;
    while (true) {
      JointAction joint(spec.n_agents);
      for (int agent = 0; agent < spec.n_agents; ++agent)
        joint[agent] = greedy ? greedy_action(ens, agent, sr.obs[agent])
                              : act(ens, agent, sr.obs[agent], rng).action;
      sr = env.step(joint);
      ret += sr.reward;
      if (sr.done) break;
    }
    sum += ret;
    sumsq += ret * ret;
  }
  EvalResult out;
  out.mean = sum / episodes;
  const double var = std::max(0.0, sumsq / episodes - out.mean * out.mean);
  out.std_dev = std::sqrt(var);
  return out;
}

// ---- checkpoints: magic, manifest length, manifest JSON, raw slot blobs ----

constexpr char kCheckpointMagic[8] = {'F', 'P', '3', 'O', 'C', 'K', 'P', 'T'};

struct Checkpoint {
  nlohmann::json manifest;
  PolicyEnsemble ens;
  CriticNet critic;
};

inline void save_checkpoint(const std::filesystem::path& path,
                            const PolicyEnsemble& ens, const CriticNet& critic,
                            const EnvSpec& env, const RunConfig& cfg) {
  nlohmann::json manifest{
      {"format", 1},
      {"seed", cfg.seed},
      {"algo", to_string(cfg.upd.algo)},
      {"sharing", to_string(cfg.upd.sharing)},
      {"env", env.to_json()},
      {"actor_spec", ens.spec.to_json()},
      {"actor_mode", to_string(ens.mode)},
      {"actor_raw_obs_dim", ens.raw_obs_dim},
      {"n_agents", ens.n_agents},
      {"actor", store_manifest(ens.store)},
      {"critic_spec", critic.spec.to_json()},
      {"critic_central", critic.central},
      {"critic_mode", to_string(critic.mode)},
      {"critic_raw_in_dim", critic.raw_in_dim},
      {"critic", store_manifest(critic.store)}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path.string());
  const std::string m = manifest.dump();
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  const std::uint64_t len = m.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(m.data(), static_cast<std::streamsize>(m.size()));
  write_store_blobs(out, ens.store);
  write_store_blobs(out, critic.store);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw std::runtime_error("load_checkpoint: bad magic");
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string m(len, '\0');
  in.read(m.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error("load_checkpoint: truncated manifest");

  Checkpoint ck;
  ck.manifest = nlohmann::json::parse(m);
  ck.ens.spec = MlpSpec::from_json(ck.manifest.at("actor_spec"));
  ck.ens.mode =
      sharing_from_string(ck.manifest.at("actor_mode").get<std::string>());
  ck.ens.n_agents = ck.manifest.at("n_agents").get<int>();
  ck.ens.raw_obs_dim = ck.manifest.at("actor_raw_obs_dim").get<int>();
  ck.ens.store = read_store(in, ck.manifest.at("actor"));
  ck.critic.spec = MlpSpec::from_json(ck.manifest.at("critic_spec"));
  ck.critic.central = ck.manifest.at("critic_central").get<bool>();
  ck.critic.mode =
      sharing_from_string(ck.manifest.at("critic_mode").get<std::string>());
  ck.critic.n_agents = ck.ens.n_agents;
  ck.critic.raw_in_dim = ck.manifest.at("critic_raw_in_dim").get<int>();
  ck.critic.store = read_store(in, ck.manifest.at("critic"));
  return ck;
}

struct TrainResult {
  int iterations = 0;
  std::int64_t env_steps = 0;
  bool aborted = false;
  std::optional<double> final_eval_mean;
  std::optional<double> final_eval_std;
  std::optional<double> matching_degree_pct;
  std::filesystem::path metrics_path;
  std::filesystem::path checkpoint_path;
  std::vector<MetricRecord> records;
};

// The outer policy-iteration loop: collect, estimate advantages, split,
// update with the configured scheme, evaluate periodically. All randomness
// derives from the config seed, so outputs are byte-reproducible. stop_when
// (if given) is checked on each record and ends the run early.
inline TrainResult train(
    const RunConfig& cfg,
    const std::function<bool(const MetricRecord&)>& stop_when = nullptr) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);

  const bool is_fp3o = cfg.upd.algo == Algo::fp3o ||
                       cfg.upd.algo == Algo::fp3o_instep_only;
  if (is_fp3o && cfg.env.n_agents < 2)
    throw std::invalid_argument(
        "train: full-pipeline updates need at least two agents");

  PolicyEnsemble ens =
      PolicyEnsemble::make(cfg.env, cfg.upd.sharing, cfg.net, cfg.seed);
  CriticNet critic =
      cfg.upd.algo == Algo::ippo
          ? CriticNet::make_local(cfg.env.obs_dim(), cfg.env.n_agents,
                                  cfg.upd.sharing, cfg.net, cfg.seed + 1)
          : CriticNet::make_central(cfg.env.state_dim(), cfg.net, cfg.seed + 1);
  const PipelineAssignment assignment =
      cfg.env.n_agents >= 2 ? nonoverlapping_selection(cfg.env.n_agents)
                            : PipelineAssignment{{0}, {0}};

  TrainResult result;
  result.metrics_path = fs::path(cfg.out_dir) / "metrics.jsonl";
  result.checkpoint_path = fs::path(cfg.out_dir) / "checkpoint.fp3o";
  std::ofstream metrics(result.metrics_path, std::ios::trunc);
  if (!metrics)
    throw std::runtime_error("train: cannot open metrics file");

  const Rng master(splitmix64(cfg.seed ^ 0xf93ab1ULL));
  auto make_record = [&](int iteration) {
    MetricRecord r;
    r.iteration = iteration;
    r.env_steps = result.env_steps;
    r.env = to_string(cfg.env.kind);
    r.algo = to_string(cfg.upd.algo);
    r.sharing = to_string(cfg.upd.sharing);
    r.seed = cfg.seed;
    return r;
  };

  if (cfg.total_steps == 0) {
    MetricRecord r = make_record(0);
    const EvalResult ev =
        evaluate(ens, cfg.env, cfg.eval_episodes, splitmix64(cfg.seed));
    r.eval_mean = ev.mean;
    r.eval_std = ev.std_dev;
    write_jsonl_line(metrics, r);
    result.records.push_back(r);
    result.final_eval_mean = ev.mean;
    result.final_eval_std = ev.std_dev;
  }

  int iteration = 0;
  while (result.env_steps < cfg.total_steps) {
    RolloutBuffer buf =
        collect(ens, critic, cfg.env, cfg.rollout_threads, cfg.buffer_length,
                master.fork(2 * iteration).seed());
    gae(buf, cfg.gamma, cfg.gae_lamda);
    normalize_then_split(
        buf, {cfg.upd.split, master.fork(2 * iteration + 1).seed()});
    if (cfg.dump_buffer && iteration == 0) {
      std::ofstream dump(fs::path(cfg.out_dir) / "buffer.csv");
      buffer_csv(buf, dump);
    }

    Rng update_rng = master.fork(0x10000 + iteration);
    const IterationReport rep =
        run_update(ens, critic, buf, assignment, cfg.upd, update_rng);
    result.env_steps += cfg.steps_per_iteration();

    MetricRecord r = make_record(iteration);
    r.fill_from(rep);
    const bool last =
        rep.aborted || result.env_steps >= cfg.total_steps;
    if ((iteration + 1) % cfg.eval_interval == 0 || last) {
      const EvalResult ev =
          evaluate(ens, cfg.env, cfg.eval_episodes, splitmix64(cfg.seed));
      r.eval_mean = ev.mean;
      r.eval_std = ev.std_dev;
      result.final_eval_mean = ev.mean;
      result.final_eval_std = ev.std_dev;
    }
    write_jsonl_line(metrics, r);
    metrics.flush();
    result.records.push_back(r);
    ++iteration;
    if (rep.aborted) {
      result.aborted = true;
      break;
    }
    if (stop_when && stop_when(r)) break;
  }
  result.iterations = iteration;

  save_checkpoint(result.checkpoint_path, ens, critic, cfg.env, cfg);
  {
    std::ofstream kl(fs::path(cfg.out_dir) / "kl_summary.csv");
    kl_report_csv(kl_report(result.records), kl);
  }
  if (!result.records.empty() && cfg.total_steps > 0)
    result.matching_degree_pct = matching_degree(result.records);
  {
    nlohmann::json summary{{"iterations", result.iterations},
                           {"env_steps", result.env_steps},
                           {"aborted", result.aborted},
                           {"config", cfg.to_json()}};
    summary["final_eval_mean"] = result.final_eval_mean
                                     ? nlohmann::json(*result.final_eval_mean)
                                     : nlohmann::json();
    summary["matching_degree"] = result.matching_degree_pct
                                     ? nlohmann::json(*result.matching_degree_pct)
                                     : nlohmann::json();
    std::ofstream sum(fs::path(cfg.out_dir) / "run_summary.json");
    sum << summary.dump(2) << '\n';
  }
  return result;
}

}  // namespace fp3o
