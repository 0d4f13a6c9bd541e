#pragma once

#include <atomic>
#include <cstdlib>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "fp3o/envs.hpp"
#include "fp3o/policy.hpp"
#include "fp3o/rng.hpp"
#include "fp3o/tensor.hpp"

namespace fp3o {

enum class SplitKind { average, random };

inline const char* to_string(SplitKind k) {
  return k == SplitKind::average ? "average" : "random";
}

inline SplitKind split_kind_from_string(const std::string& s) {
  if (s == "average") return SplitKind::average;
  if (s == "random") return SplitKind::random;
  throw std::invalid_argument("unknown split rule: " + s);
}

struct SplitRule {
  SplitKind kind = SplitKind::average;
  std::uint64_t seed = 0;
};

// On-policy trajectories, flat index t = worker * horizon + step. Value
// heads: one column for a centralized critic, one per agent for local
// critics. The split identity sum_i split_adv[t][i] == joint_adv[t] holds
// for every row once normalize_then_split ran.
struct RolloutBuffer {
  int n_agents = 0;
  int n_workers = 0;
  int horizon = 0;
  int n_value_heads = 1;

  Tensor states;                                  // {T, state_dim}
  std::vector<Tensor> obs;                        // per agent {T, obs_dim}
  std::vector<std::vector<AgentAction>> actions;  // [agent][t]
  std::vector<double> rewards;
  std::vector<std::uint8_t> dones;
  Tensor old_logprobs;  // {T, n_agents}
  Tensor values;        // {T, heads}
  Tensor bootstrap;     // {n_workers, heads}

  Tensor advantages;  // {T, heads} raw GAE
  Tensor returns;     // {T, heads}
  Tensor norm_adv;    // {T, heads} standardized over the whole buffer
  std::vector<double> joint_adv;  // norm_adv column 0
  Tensor split_adv;   // {T, n_agents}

  int size() const { return n_workers * horizon; }
  int worker_of(int t) const { return t / horizon; }
  int step_of(int t) const { return t % horizon; }
};

// One forward pass per (t, agent) under frozen parameters; no tape.
inline Tensor snapshot_probs(const PolicyEnsemble& ens,
                             const RolloutBuffer& buffer) {
  Tensor snap(buffer.size(), buffer.n_agents);
  for (int agent = 0; agent < buffer.n_agents; ++agent) {
    const Tensor lp =
        logprob_batch(ens, agent, buffer.obs[agent], buffer.actions[agent]);
    for (int t = 0; t < buffer.size(); ++t) snap.at(t, agent) = lp[t];
  }
  return snap;
}

namespace detail {

inline int collect_thread_count(int n_workers) {
  int cap = static_cast<int>(std::thread::hardware_concurrency());
  if (const char* env = std::getenv("FP3O_LAB_THREADS")) {
    const int v = std::atoi(env);
    if (v > 0) cap = v;
  }
  return std::max(1, std::min(n_workers, cap));
}

}  // namespace detail

// Deterministic on-policy collection: per-worker rng streams, workers
// merged in index order regardless of the thread schedule.
inline RolloutBuffer collect(const PolicyEnsemble& ens, const CriticNet& critic,
                             const EnvSpec& spec, int n_workers, int horizon,
                             std::uint64_t seed) {
  if (n_workers < 1 || horizon < 1)
    throw std::invalid_argument("collect: workers and horizon must be >= 1");
  RolloutBuffer buf;
  buf.n_agents = spec.n_agents;
  buf.n_workers = n_workers;
  buf.horizon = horizon;
  buf.n_value_heads = critic.central ? 1 : spec.n_agents;
  const int total = n_workers * horizon;
  buf.states = Tensor(total, spec.state_dim());
  buf.obs.assign(spec.n_agents, Tensor(total, spec.obs_dim()));
  buf.actions.assign(spec.n_agents, std::vector<AgentAction>(total));
  buf.rewards.assign(total, 0.0);
  buf.dones.assign(total, 0);
  buf.old_logprobs = Tensor(total, spec.n_agents);
  buf.values = Tensor(total, buf.n_value_heads);
  buf.bootstrap = Tensor(n_workers, buf.n_value_heads);

  Tensor final_states(n_workers, spec.state_dim());
  std::vector<Tensor> final_obs(spec.n_agents, Tensor(n_workers, spec.obs_dim()));

  const Rng base(seed);
  auto run_worker = [&](int w) {
    Rng rng = base.fork(static_cast<std::uint64_t>(w));
    Env env(spec);
    StepResult sr = env.reset();
    for (int step = 0; step < horizon; ++step) {
      const int t = w * horizon + step;
      for (int c = 0; c < spec.state_dim(); ++c)
        buf.states.at(t, c) = sr.state[c];
      JointAction joint(spec.n_agents);
      for (int agent = 0; agent < spec.n_agents; ++agent) {
        for (int c = 0; c < spec.obs_dim(); ++c)
          buf.obs[agent].at(t, c) = sr.obs[agent][c];
        const ActSample s = act(ens, agent, sr.obs[agent], rng);
        joint[agent] = s.action;
        buf.actions[agent][t] = s.action;
      }
      sr = env.step(joint);
      buf.rewards[t] = sr.reward;
      buf.dones[t] = sr.done ? 1 : 0;
      if (sr.done && step + 1 < horizon) sr = env.reset();
    }
    for (int c = 0; c < spec.state_dim(); ++c)
      final_states.at(w, c) = sr.state[c];
    for (int agent = 0; agent < spec.n_agents; ++agent)
      for (int c = 0; c < spec.obs_dim(); ++c)
        final_obs[agent].at(w, c) = sr.obs[agent][c];
  };

  // worker failures surface with their index, also across threads
  std::vector<std::exception_ptr> errors(n_workers);
  auto run_worker_safe = [&](int w) {
    try {
      run_worker(w);
    } catch (...) {
      errors[w] = std::current_exception();
    }
  };
  const int threads = detail::collect_thread_count(n_workers);
  if (threads <= 1) {
    for (int w = 0; w < n_workers; ++w) run_worker_safe(w);
  } else {
    std::vector<std::thread> pool;
    std::atomic<int> next{0};
    for (int k = 0; k < threads; ++k)
      pool.emplace_back([&] {
        for (int w = next.fetch_add(1); w < n_workers; w = next.fetch_add(1))
          run_worker_safe(w);
      });
    for (std::thread& th : pool) th.join();
  }
  for (int w = 0; w < n_workers; ++w) {
    if (!errors[w]) continue;
    try {
      std::rethrow_exception(errors[w]);
    } catch (const std::exception& e) {
      throw std::runtime_error("collect: worker " + std::to_string(w) + ": " +
                               e.what());
    }
  }

  // critic values in one batched pass per head; recompute the stored
  // logprobs the same batched way the snapshots use
  if (critic.central) {
    const Tensor v = critic.values(0, buf.states);
    for (int t = 0; t < total; ++t) buf.values.at(t, 0) = v[t];
    const Tensor vb = critic.values(0, final_states);
    for (int w = 0; w < n_workers; ++w) buf.bootstrap.at(w, 0) = vb[w];
  } else {
    for (int agent = 0; agent < spec.n_agents; ++agent) {
      const Tensor v = critic.values(agent, buf.obs[agent]);
      for (int t = 0; t < total; ++t) buf.values.at(t, agent) = v[t];
      const Tensor vb = critic.values(agent, final_obs[agent]);
      for (int w = 0; w < n_workers; ++w) buf.bootstrap.at(w, agent) = vb[w];
    }
  }
  buf.old_logprobs = snapshot_probs(ens, buf);
  if (!buf.old_logprobs.all_finite())
    throw std::runtime_error("collect: non-finite log-probabilities");
  return buf;
}

// GAE(lambda) per worker row and value head, episodes delimited by done.
inline void gae(RolloutBuffer& buf, double gamma = 0.99, double lambda = 0.95) {
  const int total = buf.size();
  buf.advantages = Tensor(total, buf.n_value_heads);
  buf.returns = Tensor(total, buf.n_value_heads);
  for (int w = 0; w < buf.n_workers; ++w) {
    for (int h = 0; h < buf.n_value_heads; ++h) {
      double running = 0.0;
      for (int step = buf.horizon - 1; step >= 0; --step) {
        const int t = w * buf.horizon + step;
        const double not_done = buf.dones[t] ? 0.0 : 1.0;
        const double next_v = step + 1 < buf.horizon
                                  ? buf.values.at(t + 1, h)
                                  : buf.bootstrap.at(w, h);
        const double delta = buf.rewards[t] + gamma * next_v * not_done -
                             buf.values.at(t, h);
        running = delta + gamma * lambda * not_done * running;
        buf.advantages.at(t, h) = running;
        buf.returns.at(t, h) = running + buf.values.at(t, h);
      }
    }
  }
}

// Standardize over the whole buffer (epsilon 1e-5 in the denominator; a
// zero-variance buffer is only mean-shifted), then split the joint
// advantage into per-agent scalars.
inline void normalize_then_split(RolloutBuffer& buf, const SplitRule& rule) {
  if (buf.advantages.size() == 0)
    throw std::logic_error("normalize_then_split: run gae first");
  const std::int64_t n = buf.advantages.size();
  double mean = 0.0;
  for (double v : buf.advantages.data) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : buf.advantages.data) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  const double std_dev = std::sqrt(var);

  buf.norm_adv = Tensor(buf.advantages.rows(), buf.advantages.cols());
  for (std::int64_t i = 0; i < n; ++i) {
    const double centered = buf.advantages[i] - mean;
    buf.norm_adv[i] = std_dev == 0.0 ? centered : centered / (std_dev + 1e-5);
  }

  const int total = buf.size();
  buf.joint_adv.resize(total);
  for (int t = 0; t < total; ++t) buf.joint_adv[t] = buf.norm_adv.at(t, 0);

  buf.split_adv = Tensor(total, buf.n_agents);
  if (rule.kind == SplitKind::average) {
    for (int t = 0; t < total; ++t)
      for (int i = 0; i < buf.n_agents; ++i)
        buf.split_adv.at(t, i) = buf.joint_adv[t] / buf.n_agents;
  } else {
    Rng rng(splitmix64(rule.seed ^ 0xd1f7c3ULL));
    std::vector<double> w(buf.n_agents);
    for (int t = 0; t < total; ++t) {
      rng.dirichlet_uniform(w);
      for (int i = 0; i < buf.n_agents; ++i)
        buf.split_adv.at(t, i) = w[i] * buf.joint_adv[t];
    }
  }
}

// Shuffled partition of [0, total) into `count` near-equal batches.
inline std::vector<std::vector<int>> minibatches(int total, int count,
                                                 Rng& rng) {
  if (count < 1 || count > total)
    throw std::invalid_argument("minibatches: bad batch count");
  std::vector<int> ids(total);
  std::iota(ids.begin(), ids.end(), 0);
  rng.shuffle(ids);
  std::vector<std::vector<int>> out(count);
  const int base = total / count, extra = total % count;
  int cursor = 0;
  for (int b = 0; b < count; ++b) {
    const int len = base + (b < extra ? 1 : 0);
    out[b].assign(ids.begin() + cursor, ids.begin() + cursor + len);
    cursor += len;
  }
  return out;
}

// Debug dump, one row per (timestep, agent).
inline void buffer_csv(const RolloutBuffer& buf, std::ostream& out) {
  out << "worker,t,agent,action,reward,value,adv,adv_i\n";
  char line[256];
  for (int t = 0; t < buf.size(); ++t)
    for (int agent = 0; agent < buf.n_agents; ++agent) {
      const AgentAction& a = buf.actions[agent][t];
      const double action_repr =
          a.discrete >= 0 ? static_cast<double>(a.discrete)
                          : (a.continuous.empty() ? 0.0 : a.continuous[0]);
      const int head = buf.n_value_heads == 1 ? 0 : agent;
      std::snprintf(line, sizeof(line),
                    "%d,%d,%d,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                    buf.worker_of(t), buf.step_of(t), agent, action_repr,
                    buf.rewards[t], buf.values.at(t, head),
                    buf.advantages.size() ? buf.advantages.at(t, head) : 0.0,
                    buf.split_adv.size() ? buf.split_adv.at(t, agent) : 0.0);
      out << line;
    }
}

}  // namespace fp3o
