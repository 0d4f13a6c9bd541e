#pragma once

#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "fp3o/graph.hpp"
#include "fp3o/param_store.hpp"
#include "fp3o/pipeline.hpp"
#include "fp3o/policy.hpp"
#include "fp3o/rollout.hpp"

namespace fp3o {

enum class Algo { fp3o, fp3o_instep_only, happo, mappo, ippo, coppo };

inline const char* to_string(Algo a) {
  switch (a) {
    case Algo::fp3o: return "fp3o";
    case Algo::fp3o_instep_only: return "fp3o_instep_only";
    case Algo::happo: return "happo";
    case Algo::mappo: return "mappo";
    case Algo::ippo: return "ippo";
    default: return "coppo";
  }
}

inline Algo algo_from_string(const std::string& s) {
  if (s == "fp3o") return Algo::fp3o;
  if (s == "fp3o_instep_only") return Algo::fp3o_instep_only;
  if (s == "happo") return Algo::happo;
  if (s == "mappo") return Algo::mappo;
  if (s == "ippo") return Algo::ippo;
  if (s == "coppo") return Algo::coppo;
  throw std::invalid_argument("unknown algo: " + s);
}

struct UpdateConfig {
  Algo algo = Algo::fp3o;
  double ppo_clip = 0.2;
  bool double_clip = false;
  double ppo_clip2 = 0.2;
  int ppo_epochs = 5;
  int num_mini_batch = 32;
  double entropy_coef = 0.001;
  double actor_lr = 5e-4;
  double critic_lr = 5e-4;
  double gradient_clip_norm = 10.0;
  double optimizer_epsilon = 1e-5;
  double huber_delta = 10.0;
  SplitKind split = SplitKind::average;
  Sharing sharing = Sharing::full;

  void validate() const {
    if (ppo_clip <= 0.0 || ppo_clip >= 1.0 || ppo_clip2 <= 0.0 ||
        ppo_clip2 >= 1.0)
      throw std::invalid_argument("UpdateConfig: clip range must be in (0,1)");
    if (ppo_epochs < 1) throw std::invalid_argument("UpdateConfig: epochs");
  }
};

struct IterationReport {
  bool aborted = false;
  bool condition_met = true;      // dependent-step gate, MC estimate
  bool dependent_executed = false;
  double sum_mu_intermediate = 0.0;
  double sum_mu_old = 0.0;
  double sum_mu_final = 0.0;      // post-hoc, with the final policies
  bool constraint_truth = true;
  bool matching = true;           // condition truth == constraint truth
  std::vector<double> kl_mean, kl_max;
  double actor_loss = 0.0;
  double critic_loss = 0.0;
  double entropy = 0.0;
};

// Negated mean of the clipped two-branch surrogate
//   min((r_i * rest - 1) * r_j * adv, (clip(r_i) * rest - 1) * r_j * adv)
// or, with the double clip g = clip(rest * r_j, 1 +- eps2),
//   min((r_i * g - r_j) * adv, (clip(r_i) * g - r_j) * adv).
// ratio_i is live; rest and r_j are frozen snapshot ratios.
inline VarId fp3o_objective(Graph& g, VarId ratio_i, const Tensor& ratio_rest,
                            const Tensor& ratio_j, const Tensor& adv,
                            double eps, bool double_clip, double eps2) {
  const VarId clipped = g.clip(ratio_i, 1.0 - eps, 1.0 + eps);
  VarId s1, s2;
  if (!double_clip) {
    Tensor rj_adv = ratio_j;
    for (std::int64_t i = 0; i < rj_adv.size(); ++i) rj_adv[i] *= adv[i];
    s1 = g.mul_const(g.add_scalar(g.mul_const(ratio_i, ratio_rest), -1.0),
                     rj_adv);
    s2 = g.mul_const(g.add_scalar(g.mul_const(clipped, ratio_rest), -1.0),
                     std::move(rj_adv));
  } else {
    Tensor inner = ratio_rest;
    for (std::int64_t i = 0; i < inner.size(); ++i) {
      const double joint = ratio_rest[i] * ratio_j[i];
      inner[i] = std::clamp(joint, 1.0 - eps2, 1.0 + eps2);
    }
    s1 = g.mul_const(g.add_const(g.mul_const(ratio_i, inner), ratio_j, -1.0),
                     adv);
    s2 = g.mul_const(
        g.add_const(g.mul_const(clipped, std::move(inner)), ratio_j, -1.0),
        adv);
  }
  return g.scale(g.mean_all(g.minimum(s1, s2)), -1.0);
}

struct ConditionEstimate {
  double sum_mu_intermediate = 0.0;
  double sum_mu_old = 0.0;
  bool condition_met = true;
};

namespace detail {

inline Tensor gather_rows(const Tensor& src, const std::vector<int>& ids) {
  Tensor out(static_cast<std::int64_t>(ids.size()), src.cols());
  for (std::size_t b = 0; b < ids.size(); ++b)
    for (std::int64_t c = 0; c < src.cols(); ++c)
      out.at(b, c) = src.at(ids[b], c);
  return out;
}

inline std::vector<AgentAction> gather_actions(
    const std::vector<AgentAction>& src, const std::vector<int>& ids) {
  std::vector<AgentAction> out(ids.size());
  for (std::size_t b = 0; b < ids.size(); ++b) out[b] = src[ids[b]];
  return out;
}

inline Tensor gather_col(const Tensor& src, const std::vector<int>& ids,
                         int col) {
  Tensor out(static_cast<std::int64_t>(ids.size()), 1);
  for (std::size_t b = 0; b < ids.size(); ++b) out[b] = src.at(ids[b], col);
  return out;
}

// sum over agents i of mean_t[ r_own(t, i) * prod_{j != i} r_others(t, j)
// * split_adv(t, i) ] with ratios taken against snap_k.
inline double sum_mu_estimate(const RolloutBuffer& buf, const Tensor& snap_k,
                              const Tensor& snap_own,
                              const Tensor& snap_others) {
  const int total = buf.size();
  double sum = 0.0;
  for (int i = 0; i < buf.n_agents; ++i) {
    double acc = 0.0;
    for (int t = 0; t < total; ++t) {
      double log_ratio = snap_own.at(t, i) - snap_k.at(t, i);
      for (int j = 0; j < buf.n_agents; ++j)
        if (j != i) log_ratio += snap_others.at(t, j) - snap_k.at(t, j);
      acc += std::exp(log_ratio) * buf.split_adv.at(t, i);
    }
    sum += acc / static_cast<double>(total);
  }
  return sum;
}

struct OptimState {
  const UpdateConfig& cfg;
  double actor_loss_sum = 0.0;
  double critic_loss_sum = 0.0;
  double entropy_sum = 0.0;
  int actor_steps = 0;
  int critic_steps = 0;
  bool failed = false;

  bool actor_step(Graph& g, VarId loss, PolicyEnsemble& ens) {
    const double v = g.value(loss)[0];
    if (!std::isfinite(v)) {
      failed = true;
      return false;
    }
    g.backward(loss);
    GradMap grads = g.take_slot_grads();
    clip_grad_norm(grads, cfg.gradient_clip_norm);
    if (!adam_step(ens.store, grads,
                   {.lr = cfg.actor_lr, .eps = cfg.optimizer_epsilon})) {
      failed = true;
      return false;
    }
    actor_loss_sum += v;
    ++actor_steps;
    return true;
  }

  bool critic_step(Graph& g, VarId loss, CriticNet& critic) {
    const double v = g.value(loss)[0];
    if (!std::isfinite(v)) {
      failed = true;
      return false;
    }
    g.backward(loss);
    GradMap grads = g.take_slot_grads();
    clip_grad_norm(grads, cfg.gradient_clip_norm);
    if (!adam_step(critic.store, grads,
                   {.lr = cfg.critic_lr, .eps = cfg.optimizer_epsilon})) {
      failed = true;
      return false;
    }
    critic_loss_sum += v;
    ++critic_steps;
    return true;
  }
};

// Huber regression of the critic on returns over one mini-batch.
inline VarId critic_loss(Graph& g, const CriticNet& critic,
                         const RolloutBuffer& buf, const std::vector<int>& ids,
                         double delta) {
  if (critic.central) {
    const Tensor states = gather_rows(buf.states, ids);
    return g.huber_mean(critic.values_taped(g, 0, states),
                        gather_col(buf.returns, ids, 0), delta);
  }
  VarId total = -1;
  for (int agent = 0; agent < buf.n_agents; ++agent) {
    const Tensor obs = gather_rows(buf.obs[agent], ids);
    const VarId l = g.huber_mean(critic.values_taped(g, agent, obs),
                                 gather_col(buf.returns, ids, agent), delta);
    total = total < 0 ? l : g.add(total, l);
  }
  return g.scale(total, 1.0 / buf.n_agents);
}

}  // namespace detail

// Monte Carlo estimates of the dependent-step condition on buffer samples
// drawn from the old policy.
inline ConditionEstimate condition_estimate(const RolloutBuffer& buf,
                                            const Tensor& snap_k,
                                            const Tensor& snap_k05) {
  ConditionEstimate est;
  est.sum_mu_intermediate =
      detail::sum_mu_estimate(buf, snap_k, snap_k05, snap_k05);
  est.sum_mu_old = detail::sum_mu_estimate(buf, snap_k, snap_k05, snap_k);
  est.condition_met = est.sum_mu_intermediate >= est.sum_mu_old;
  return est;
}

// Full-pipeline iteration: independent step for every pipeline opener,
// probability snapshots at the intermediate parameters, the condition
// check, and (when it holds) the dependent step for every selected
// candidate. All ratios reference the iteration's initial parameters.
// Non-finite losses abort and restore the initial parameters.
inline IterationReport fp3o_iteration(PolicyEnsemble& ens, CriticNet& critic,
                                      const RolloutBuffer& buf,
                                      const PipelineAssignment& assignment,
                                      const UpdateConfig& cfg, Rng& rng,
                                      bool instep_only = false) {
  cfg.validate();
  assignment.validate();
  const int n = buf.n_agents;
  const int total = buf.size();
  const PolicyEnsemble ens_k = ens;
  const CriticNet critic_k = critic;
  const Tensor& snap_k = buf.old_logprobs;

  IterationReport rep;
  detail::OptimState opt{cfg};

  // independent step: every pipeline trains its opener on its own split
  // advantage; the critic trains on the same schedule
  for (int epoch = 0; epoch < cfg.ppo_epochs && !opt.failed; ++epoch) {
    Rng erng = rng.fork(epoch);
    for (const auto& ids : minibatches(total, cfg.num_mini_batch, erng)) {
      Graph g;
      Tensor ones(static_cast<std::int64_t>(ids.size()), 1);
      ones.fill(1.0);
      VarId loss = -1;
      for (int p = 0; p < n; ++p) {
        const int agent = assignment.i_order[p];
        const Tensor obs = detail::gather_rows(buf.obs[agent], ids);
        const EvalVars ev = evaluate_actions(
            g, ens, agent, obs, detail::gather_actions(buf.actions[agent], ids));
        const VarId ratio =
            g.exp_(g.add_const(ev.logprob,
                               detail::gather_col(snap_k, ids, agent), -1.0));
        const VarId obj = fp3o_objective(
            g, ratio, ones, ones, detail::gather_col(buf.split_adv, ids, agent),
            cfg.ppo_clip, cfg.double_clip, cfg.ppo_clip2);
        const VarId ent = g.mean_all(ev.entropy);
        opt.entropy_sum += g.value(ent)[0];
        const VarId term = g.add(obj, g.scale(ent, -cfg.entropy_coef));
        loss = loss < 0 ? term : g.add(loss, term);
      }
      loss = g.scale(loss, 1.0 / n);
      if (!opt.actor_step(g, loss, ens)) break;
      Graph gc;
      const VarId closs =
          detail::critic_loss(gc, critic, buf, ids, cfg.huber_delta);
      if (!opt.critic_step(gc, closs, critic)) break;
    }
  }

  if (opt.failed) {
    ens = ens_k;
    critic = critic_k;
    rep.aborted = true;
    return rep;
  }

  const Tensor snap_k05 = snapshot_probs(ens, buf);
  const ConditionEstimate est = condition_estimate(buf, snap_k, snap_k05);
  rep.condition_met = est.condition_met;
  rep.sum_mu_intermediate = est.sum_mu_intermediate;
  rep.sum_mu_old = est.sum_mu_old;

  // dependent step: pipeline p trains its candidate j_p against frozen
  // intermediate ratios; skipped when the condition fails, leaving
  // theta_{k+1} = theta_{k+0.5}
  if (!instep_only && est.condition_met) {
    rep.dependent_executed = true;
    // frozen per-pipeline tensors over the whole buffer
    std::vector<Tensor> rest_all(n), rj_all(n);
    for (int p = 0; p < n; ++p) {
      const int opener = assignment.i_order[p];
      const int candidate = assignment.j_order[p];
      Tensor rest(total, 1), rj(total, 1);
      for (int t = 0; t < total; ++t) {
        double log_rest = 0.0;
        for (int m = 0; m < n; ++m)
          if (m != opener && m != candidate)
            log_rest += snap_k05.at(t, m) - snap_k.at(t, m);
        rest[t] = std::exp(log_rest);
        rj[t] = std::exp(snap_k05.at(t, opener) - snap_k.at(t, opener));
      }
      rest_all[p] = std::move(rest);
      rj_all[p] = std::move(rj);
    }
    for (int epoch = 0; epoch < cfg.ppo_epochs && !opt.failed; ++epoch) {
      Rng erng = rng.fork(1000 + epoch);
      for (const auto& ids : minibatches(total, cfg.num_mini_batch, erng)) {
        Graph g;
        VarId loss = -1;
        for (int p = 0; p < n; ++p) {
          const int agent = assignment.j_order[p];
          const Tensor obs = detail::gather_rows(buf.obs[agent], ids);
          const EvalVars ev = evaluate_actions(
              g, ens, agent, obs,
              detail::gather_actions(buf.actions[agent], ids));
          const VarId ratio = g.exp_(g.add_const(
              ev.logprob, detail::gather_col(snap_k, ids, agent), -1.0));
          Tensor rest(static_cast<std::int64_t>(ids.size()), 1);
          Tensor rj(static_cast<std::int64_t>(ids.size()), 1);
          for (std::size_t b = 0; b < ids.size(); ++b) {
            rest[b] = rest_all[p][ids[b]];
            rj[b] = rj_all[p][ids[b]];
          }
          const VarId obj = fp3o_objective(
              g, ratio, std::move(rest), std::move(rj),
              detail::gather_col(buf.split_adv, ids, agent), cfg.ppo_clip,
              cfg.double_clip, cfg.ppo_clip2);
          const VarId ent = g.mean_all(ev.entropy);
          opt.entropy_sum += g.value(ent)[0];
          const VarId term = g.add(obj, g.scale(ent, -cfg.entropy_coef));
          loss = loss < 0 ? term : g.add(loss, term);
        }
        loss = g.scale(loss, 1.0 / n);
        if (!opt.actor_step(g, loss, ens)) break;
      }
    }
    if (opt.failed) {
      ens = ens_k;
      critic = critic_k;
      rep.aborted = true;
      return rep;
    }
  }

  // post-hoc constraint with the final policies on the same buffer
  const Tensor snap_k1 = snapshot_probs(ens, buf);
  rep.sum_mu_final = detail::sum_mu_estimate(buf, snap_k, snap_k05, snap_k1);
  rep.constraint_truth = rep.sum_mu_final >= rep.sum_mu_old;
  rep.matching = rep.condition_met == rep.constraint_truth;

  const auto kls = kl_per_agent(ens_k, ens, buf.obs);
  for (const KlSummary& k : kls) {
    rep.kl_mean.push_back(k.mean);
    rep.kl_max.push_back(k.max);
  }
  rep.actor_loss = opt.actor_steps ? opt.actor_loss_sum / opt.actor_steps : 0.0;
  rep.critic_loss =
      opt.critic_steps ? opt.critic_loss_sum / opt.critic_steps : 0.0;
  rep.entropy = opt.actor_steps ? opt.entropy_sum / (opt.actor_steps * n) : 0.0;
  return rep;
}

// Sequential scheme: agents update one at a time in a freshly shuffled
// order; each agent's surrogate carries the running ratio product of the
// agents that already finished.
inline IterationReport happo_iteration(PolicyEnsemble& ens, CriticNet& critic,
                                       const RolloutBuffer& buf,
                                       const UpdateConfig& cfg, Rng& rng) {
  cfg.validate();
  const int n = buf.n_agents;
  const int total = buf.size();
  const PolicyEnsemble ens_k = ens;
  const CriticNet critic_k = critic;
  const Tensor& snap_k = buf.old_logprobs;

  IterationReport rep;
  detail::OptimState opt{cfg};

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);

  for (int epoch = 0; epoch < cfg.ppo_epochs && !opt.failed; ++epoch) {
    Rng erng = rng.fork(5000 + epoch);
    for (const auto& ids : minibatches(total, cfg.num_mini_batch, erng)) {
      Graph gc;
      const VarId closs =
          detail::critic_loss(gc, critic, buf, ids, cfg.huber_delta);
      if (!opt.critic_step(gc, closs, critic)) break;
    }
  }

  Tensor factor(total, 1);
  factor.fill(1.0);
  rep.kl_mean.assign(n, 0.0);
  rep.kl_max.assign(n, 0.0);
  for (int m = 0; m < n && !opt.failed; ++m) {
    const int agent = order[m];
    for (int epoch = 0; epoch < cfg.ppo_epochs && !opt.failed; ++epoch) {
      Rng erng = rng.fork(static_cast<std::uint64_t>(agent) * 100 + epoch);
      for (const auto& ids : minibatches(total, cfg.num_mini_batch, erng)) {
        Graph g;
        const Tensor obs = detail::gather_rows(buf.obs[agent], ids);
        const EvalVars ev = evaluate_actions(
            g, ens, agent, obs, detail::gather_actions(buf.actions[agent], ids));
        const VarId ratio = g.exp_(g.add_const(
            ev.logprob, detail::gather_col(snap_k, ids, agent), -1.0));
        Tensor fa(static_cast<std::int64_t>(ids.size()), 1);
        for (std::size_t b = 0; b < ids.size(); ++b)
          fa[b] = factor[ids[b]] * buf.joint_adv[ids[b]];
        const VarId s1 = g.mul_const(ratio, fa);
        const VarId s2 =
            g.mul_const(g.clip(ratio, 1.0 - cfg.ppo_clip, 1.0 + cfg.ppo_clip),
                        std::move(fa));
        const VarId ent = g.mean_all(ev.entropy);
        opt.entropy_sum += g.value(ent)[0];
        const VarId loss =
            g.add(g.scale(g.mean_all(g.minimum(s1, s2)), -1.0),
                  g.scale(ent, -cfg.entropy_coef));
        if (!opt.actor_step(g, loss, ens)) break;
      }
    }
    // fold this agent's finished update into the running factor
    const Tensor lp_new =
        logprob_batch(ens, agent, buf.obs[agent], buf.actions[agent]);
    for (int t = 0; t < total; ++t)
      factor[t] *= std::exp(lp_new[t] - snap_k.at(t, agent));
    const auto kls = kl_per_agent(ens_k, ens, buf.obs);
    rep.kl_mean[agent] = kls[agent].mean;
    rep.kl_max[agent] = kls[agent].max;
  }

  if (opt.failed) {
    ens = ens_k;
    critic = critic_k;
    rep.aborted = true;
    return rep;
  }
  rep.actor_loss = opt.actor_steps ? opt.actor_loss_sum / opt.actor_steps : 0.0;
  rep.critic_loss =
      opt.critic_steps ? opt.critic_loss_sum / opt.critic_steps : 0.0;
  rep.entropy = opt.actor_steps ? opt.entropy_sum / opt.actor_steps : 0.0;
  return rep;
}

// Simultaneous PPO-clip updates for every agent with the joint advantage.
// MAPPO pairs this with a centralized critic, IPPO with local critics whose
// per-agent advantage estimates live in their own value head.
inline IterationReport mappo_ippo_iteration(PolicyEnsemble& ens,
                                            CriticNet& critic,
                                            const RolloutBuffer& buf,
                                            const UpdateConfig& cfg, Rng& rng,
                                            bool ippo) {
  cfg.validate();
  const int n = buf.n_agents;
  const int total = buf.size();
  const PolicyEnsemble ens_k = ens;
  const CriticNet critic_k = critic;
  const Tensor& snap_k = buf.old_logprobs;

  IterationReport rep;
  detail::OptimState opt{cfg};

  for (int epoch = 0; epoch < cfg.ppo_epochs && !opt.failed; ++epoch) {
    Rng erng = rng.fork(epoch);
    for (const auto& ids : minibatches(total, cfg.num_mini_batch, erng)) {
      Graph g;
      VarId loss = -1;
      for (int agent = 0; agent < n; ++agent) {
        const Tensor obs = detail::gather_rows(buf.obs[agent], ids);
        const EvalVars ev = evaluate_actions(
            g, ens, agent, obs, detail::gather_actions(buf.actions[agent], ids));
        const VarId ratio = g.exp_(g.add_const(
            ev.logprob, detail::gather_col(snap_k, ids, agent), -1.0));
        const int col = ippo ? agent : 0;
        const Tensor adv = detail::gather_col(buf.norm_adv, ids, col);
        const VarId s1 = g.mul_const(ratio, adv);
        const VarId s2 =
            g.mul_const(g.clip(ratio, 1.0 - cfg.ppo_clip, 1.0 + cfg.ppo_clip),
                        adv);
        const VarId ent = g.mean_all(ev.entropy);
        opt.entropy_sum += g.value(ent)[0];
        const VarId term =
            g.add(g.scale(g.mean_all(g.minimum(s1, s2)), -1.0),
                  g.scale(ent, -cfg.entropy_coef));
        loss = loss < 0 ? term : g.add(loss, term);
      }
      loss = g.scale(loss, 1.0 / n);
      if (!opt.actor_step(g, loss, ens)) break;
      Graph gc;
      const VarId closs =
          detail::critic_loss(gc, critic, buf, ids, cfg.huber_delta);
      if (!opt.critic_step(gc, closs, critic)) break;
    }
  }

  if (opt.failed) {
    ens = ens_k;
    critic = critic_k;
    rep.aborted = true;
    return rep;
  }
  const auto kls = kl_per_agent(ens_k, ens, buf.obs);
  for (const KlSummary& k : kls) {
    rep.kl_mean.push_back(k.mean);
    rep.kl_max.push_back(k.max);
  }
  rep.actor_loss = opt.actor_steps ? opt.actor_loss_sum / opt.actor_steps : 0.0;
  rep.critic_loss =
      opt.critic_steps ? opt.critic_loss_sum / opt.critic_steps : 0.0;
  rep.entropy = opt.actor_steps ? opt.entropy_sum / (opt.actor_steps * n) : 0.0;
  return rep;
}

// Joint-ratio updates: each agent's live ratio is multiplied by the other
// agents' joint ratio recomputed at every mini-batch and inner-clipped.
// Only meaningful under full sharing; other modes are rejected.
inline IterationReport coppo_iteration(PolicyEnsemble& ens, CriticNet& critic,
                                       const RolloutBuffer& buf,
                                       const UpdateConfig& cfg, Rng& rng) {
  cfg.validate();
  if (cfg.sharing != Sharing::full)
    throw std::invalid_argument(
        "coppo_iteration: only full parameter sharing is supported");
  const int n = buf.n_agents;
  const int total = buf.size();
  const PolicyEnsemble ens_k = ens;
  const CriticNet critic_k = critic;
  const Tensor& snap_k = buf.old_logprobs;

  IterationReport rep;
  detail::OptimState opt{cfg};

  for (int epoch = 0; epoch < cfg.ppo_epochs && !opt.failed; ++epoch) {
    Rng erng = rng.fork(epoch);
    for (const auto& ids : minibatches(total, cfg.num_mini_batch, erng)) {
      // live log-ratios of all agents on this batch, frozen per batch
      Tensor live(static_cast<std::int64_t>(ids.size()), n);
      for (int agent = 0; agent < n; ++agent) {
        const Tensor obs = detail::gather_rows(buf.obs[agent], ids);
        const Tensor lp = logprob_batch(
            ens, agent, obs, detail::gather_actions(buf.actions[agent], ids));
        for (std::size_t b = 0; b < ids.size(); ++b)
          live.at(b, agent) = lp[b] - snap_k.at(ids[b], agent);
      }
      Graph g;
      VarId loss = -1;
      for (int agent = 0; agent < n; ++agent) {
        const Tensor obs = detail::gather_rows(buf.obs[agent], ids);
        const EvalVars ev = evaluate_actions(
            g, ens, agent, obs, detail::gather_actions(buf.actions[agent], ids));
        const VarId ratio = g.exp_(g.add_const(
            ev.logprob, detail::gather_col(snap_k, ids, agent), -1.0));
        Tensor g_adv(static_cast<std::int64_t>(ids.size()), 1);
        for (std::size_t b = 0; b < ids.size(); ++b) {
          double log_rest = 0.0;
          for (int j = 0; j < n; ++j)
            if (j != agent) log_rest += live.at(b, j);
          const double rest = std::clamp(std::exp(log_rest),
                                         1.0 - cfg.ppo_clip2,
                                         1.0 + cfg.ppo_clip2);
          g_adv[b] = rest * buf.joint_adv[ids[b]];
        }
        const VarId s1 = g.mul_const(ratio, g_adv);
        const VarId s2 =
            g.mul_const(g.clip(ratio, 1.0 - cfg.ppo_clip, 1.0 + cfg.ppo_clip),
                        std::move(g_adv));
        const VarId ent = g.mean_all(ev.entropy);
        opt.entropy_sum += g.value(ent)[0];
        const VarId term =
            g.add(g.scale(g.mean_all(g.minimum(s1, s2)), -1.0),
                  g.scale(ent, -cfg.entropy_coef));
        loss = loss < 0 ? term : g.add(loss, term);
      }
      loss = g.scale(loss, 1.0 / n);
      if (!opt.actor_step(g, loss, ens)) break;
      Graph gc;
      const VarId closs =
          detail::critic_loss(gc, critic, buf, ids, cfg.huber_delta);
      if (!opt.critic_step(gc, closs, critic)) break;
    }
  }

  if (opt.failed) {
    ens = ens_k;
    critic = critic_k;
    rep.aborted = true;
    return rep;
  }
  const auto kls = kl_per_agent(ens_k, ens, buf.obs);
  for (const KlSummary& k : kls) {
    rep.kl_mean.push_back(k.mean);
    rep.kl_max.push_back(k.max);
  }
  rep.actor_loss = opt.actor_steps ? opt.actor_loss_sum / opt.actor_steps : 0.0;
  rep.critic_loss =
      opt.critic_steps ? opt.critic_loss_sum / opt.critic_steps : 0.0;
  rep.entropy = opt.actor_steps ? opt.entropy_sum / (opt.actor_steps * n) : 0.0;
  return rep;
}

// Dispatch on the configured scheme. The buffer must already hold GAE and
// split advantages.
inline IterationReport run_update(PolicyEnsemble& ens, CriticNet& critic,
                                  const RolloutBuffer& buf,
                                  const PipelineAssignment& assignment,
                                  const UpdateConfig& cfg, Rng& rng) {
  switch (cfg.algo) {
    case Algo::fp3o:
      return fp3o_iteration(ens, critic, buf, assignment, cfg, rng, false);
    case Algo::fp3o_instep_only:
      return fp3o_iteration(ens, critic, buf, assignment, cfg, rng, true);
    case Algo::happo:
      return happo_iteration(ens, critic, buf, cfg, rng);
    case Algo::mappo:
      return mappo_ippo_iteration(ens, critic, buf, cfg, rng, false);
    case Algo::ippo:
      return mappo_ippo_iteration(ens, critic, buf, cfg, rng, true);
    default:
      return coppo_iteration(ens, critic, buf, cfg, rng);
  }
}

}  // namespace fp3o
