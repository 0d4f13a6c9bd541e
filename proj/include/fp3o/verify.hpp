#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fp3o/rollout.hpp"
#include "fp3o/tabular.hpp"
#include "fp3o/train.hpp"
#include "fp3o/updaters.hpp"

namespace fp3o {

struct CheckResult {
  std::string name;
  bool pass = false;
  double value = 0.0;      // measured residual / statistic
  double tolerance = 0.0;  // pass iff value < tolerance (unless count-based)
  std::string detail;
};

inline bool all_pass(const std::vector<CheckResult>& checks) {
  for (const CheckResult& c : checks)
    if (!c.pass) return false;
  return true;
}

inline nlohmann::json checks_to_json(const std::vector<CheckResult>& checks) {
  nlohmann::json out = nlohmann::json::array();
  for (const CheckResult& c : checks)
    out.push_back({{"name", c.name},
                   {"pass", c.pass},
                   {"value", c.value},
                   {"tolerance", c.tolerance},
                   {"detail", c.detail}});
  return out;
}

namespace detail {

inline TabularMdp random_small_mdp(Rng& rng) {
  const int n_agents = 1 + rng.uniform_int(3);   // 1..3
  const int n_states = 2 + rng.uniform_int(3);   // 2..4
  std::vector<int> actions(n_agents);
  for (int& a : actions) a = 2 + rng.uniform_int(2);  // 2..3
  return TabularMdp::random(rng, n_agents, n_states, std::move(actions));
}

inline std::vector<std::vector<int>> all_orderings(int n) {
  std::vector<int> ord(n);
  std::iota(ord.begin(), ord.end(), 0);
  std::vector<std::vector<int>> out;
  do {
    out.push_back(ord);
  } while (std::next_permutation(ord.begin(), ord.end()));
  return out;
}

}  // namespace detail

// Identity checks on a seeded corpus of small MDPs: the advantage
// decomposition, the two-term split, cross-pipeline bound equality,
// importance-sampling equivalence, bound validity and per-state zero-mean
// advantages.
inline std::vector<CheckResult> verify_oracle_suite(
    int n_random_mdps = 200, const TabularMdp* extra = nullptr) {
  Rng rng(0x0ac1eULL);
  double chain_max = 0.0, two_term_max = 0.0, lemma1_max = 0.0;
  double gap_max = 0.0, zero_mean_max = 0.0;

  std::vector<TabularMdp> corpus;
  corpus.push_back(TabularMdp::two_guard());
  for (int k = 0; k < n_random_mdps; ++k) {
    Rng r = rng.fork(k);
    corpus.push_back(detail::random_small_mdp(r));
  }
  if (extra) corpus.push_back(*extra);

  for (std::size_t idx = 0; idx < corpus.size(); ++idx) {
    const TabularMdp& mdp = corpus[idx];
    Rng r = rng.fork(1000 + idx);
    const TabularPolicy pol = TabularPolicy::random(mdp, r);
    const PolicyEvaluation eval = evaluate_policy(mdp, pol);
    for (int s = 0; s < mdp.n_states; ++s) {
      double mean = 0.0;
      for (int ja = 0; ja < mdp.joint_actions(); ++ja)
        mean += pol.joint_prob(mdp, s, ja) * eval.adv.at(s, ja);
      zero_mean_max = std::max(zero_mean_max, std::abs(mean));
    }
    for (const auto& ord : detail::all_orderings(mdp.n_agents))
      for (int s = 0; s < mdp.n_states; ++s)
        for (int ja = 0; ja < mdp.joint_actions(); ++ja) {
          const auto res = decomposition_residual(mdp, eval, pol, s, ja, ord);
          chain_max = std::max(chain_max, res.chain);
          two_term_max = std::max(two_term_max, res.two_term_max);
        }
    const TabularPolicy pol_new = TabularPolicy::perturbed(mdp, pol, r, 0.3);
    const double bound = shared_lower_bound(mdp, eval, pol, pol_new);
    for (int p = 0; p < mdp.n_agents; ++p) {
      std::vector<int> rest;
      for (int i = 0; i < mdp.n_agents; ++i)
        if (i != p) rest.push_back(i);
      const std::vector<int> opener = {p};
      const SurrogateTerms m1 = surrogate_m(mdp, eval, pol, pol_new, {}, opener);
      const SurrogateTerms m2 =
          surrogate_m(mdp, eval, pol, pol_new, opener, rest);
      lemma1_max = std::max(lemma1_max,
                            std::abs(bound - (eval.j + m1.m_value + m2.m_value)));
      const auto [g1, g2] = importance_equivalence_gap(mdp, eval, pol, pol_new, p);
      gap_max = std::max({gap_max, g1, g2});
    }
  }

  // bound validity on dedicated random policy pairs
  int violations = 0;
  const int n_pairs = 100;
  for (int k = 0; k < n_pairs; ++k) {
    Rng r = rng.fork(50000 + k);
    const TabularMdp mdp = detail::random_small_mdp(r);
    const TabularPolicy pol_old = TabularPolicy::random(mdp, r);
    const TabularPolicy pol_new = TabularPolicy::random(mdp, r);
    const PolicyEvaluation eval_old = evaluate_policy(mdp, pol_old);
    const PolicyEvaluation eval_new = evaluate_policy(mdp, pol_new);
    if (eval_new.j < shared_lower_bound(mdp, eval_old, pol_old, pol_new) - 1e-10)
      ++violations;
  }

  std::vector<CheckResult> out;
  out.push_back({"decomposition_chain_residual", chain_max < 1e-10, chain_max,
                 1e-10, "advantage decomposition over all orderings"});
  out.push_back({"two_term_split_residual", two_term_max < 1e-10, two_term_max,
                 1e-10, "single-agent/complement split"});
  out.push_back({"shared_bound_pipeline_equality", lemma1_max < 1e-10,
                 lemma1_max, 1e-10, "bound equals every pipeline route"});
  out.push_back({"importance_sampling_gaps", gap_max < 1e-10, gap_max, 1e-10,
                 "surrogate vs importance-sampled forms"});
  out.push_back({"lower_bound_validity", violations == 0,
                 static_cast<double>(violations), 1.0,
                 "J(new) >= bound on " + std::to_string(n_pairs) + " pairs"});
  out.push_back({"advantage_zero_mean", zero_mean_max < 1e-10, zero_mean_max,
                 1e-10, "per-state policy-weighted advantage"});
  return out;
}

// Backward pass against central finite differences, plus the shared-slot
// gradient accumulation identity.
inline std::vector<CheckResult> verify_gradients_suite(int n_nets = 50) {
  Rng rng(0x96adULL);
  double fd_worst = 0.0;
  for (int trial = 0; trial < n_nets; ++trial) {
    Rng r = rng.fork(trial);
    MlpSpec spec;
    spec.input_dim = 3 + r.uniform_int(3);
    spec.hidden = {8, 8};
    spec.output_dim = 2 + r.uniform_int(3);
    spec.head = trial % 3 == 2 ? Head::gaussian : Head::categorical;
    ParamStore store = bind_sharing(spec, 1, Sharing::none);
    orthogonal_init(store, spec, r.next_u64());
    for (int i = 0; i < store.slot_count(); ++i)
      for (double& v : store.slot(i).value.data) v += 0.2 * r.normal();
    const int batch = 5;
    Tensor x(batch, spec.input_dim);
    for (double& v : x.data) v = r.normal();
    std::vector<int> acts(batch);
    for (int& a : acts) a = r.uniform_int(spec.output_dim);

    auto loss_of = [&](GradMap* grads) {
      Graph g;
      const VarId out = mlp_forward_taped(g, store, spec, 0, x);
      VarId loss;
      if (spec.head == Head::categorical) {
        const VarId ratio = g.exp_(g.cat_logprob(out, acts));
        loss = g.add(g.mean_all(g.minimum(ratio, g.clip(ratio, 0.8, 1.2))),
                     g.scale(g.mean_all(g.cat_entropy(out)), -0.01));
      } else {
        Tensor a(batch, spec.output_dim);
        for (std::int64_t i = 0; i < a.size(); ++i)
          a[i] = 0.1 * static_cast<double>(i % 5) - 0.2;
        const VarId ls = mlp_log_std_taped(g, store, spec, 0);
        loss = g.add(g.mean_all(g.exp_(g.gauss_logprob(out, ls, a))),
                     g.scale(g.mean_all(g.gauss_entropy(ls, batch)), -0.01));
      }
      const double v = g.value(loss)[0];
      if (grads) {
        g.backward(loss);
        *grads = g.take_slot_grads();
      }
      return v;
    };

    GradMap grads;
    loss_of(&grads);
    const double h = 1e-5;
    for (auto& [slot_id, gr] : grads) {
      Tensor& w = store.slot(slot_id).value;
      for (std::int64_t i = 0; i < w.size(); ++i) {
        const double keep = w[i];
        w[i] = keep + h;
        const double up = loss_of(nullptr);
        w[i] = keep - h;
        const double dn = loss_of(nullptr);
        w[i] = keep;
        const double fd = (up - dn) / (2.0 * h);
        fd_worst = std::max(
            fd_worst, std::abs(gr[i] - fd) /
                          std::max(std::abs(gr[i]) + std::abs(fd), 1e-6));
      }
    }
  }

  // shared-slot gradient equals the sum of unshared gradients
  double share_worst = 0.0;
  {
    Rng r = rng.fork(777);
    MlpSpec spec;
    spec.input_dim = 4;
    spec.hidden = {8, 8};
    spec.output_dim = 3;
    ParamStore shared = bind_sharing(spec, 3, Sharing::full);
    orthogonal_init(shared, spec, 42);
    ParamStore split = bind_sharing(spec, 3, Sharing::none);
    for (int layer = 0; layer < spec.layer_count(); ++layer)
      for (int a = 0; a < 3; ++a)
        split.slot(split.slot_of(a, layer)).value =
            shared.slot(shared.slot_of(0, layer)).value;
    std::vector<Tensor> xs;
    std::vector<std::vector<int>> acts;
    for (int a = 0; a < 3; ++a) {
      Tensor x(4, 4);
      for (double& v : x.data) v = r.normal();
      xs.push_back(std::move(x));
      std::vector<int> ac(4);
      for (int& v : ac) v = r.uniform_int(3);
      acts.push_back(std::move(ac));
    }
    auto agent_loss = [&](Graph& g, const ParamStore& st, int agent) {
      return g.mean_all(
          g.cat_logprob(mlp_forward_taped(g, st, spec, agent, xs[agent]),
                        acts[agent]));
    };
    Graph gs;
    gs.backward(gs.add(gs.add(agent_loss(gs, shared, 0), agent_loss(gs, shared, 1)),
                       agent_loss(gs, shared, 2)));
    Graph gu;
    gu.backward(gu.add(gu.add(agent_loss(gu, split, 0), agent_loss(gu, split, 1)),
                       agent_loss(gu, split, 2)));
    for (int layer = 0; layer < spec.layer_count(); ++layer) {
      const Tensor& gshared = gs.slot_grads().at(shared.slot_of(0, layer));
      for (std::int64_t i = 0; i < gshared.size(); ++i) {
        double sum = 0.0;
        for (int a = 0; a < 3; ++a)
          sum += gu.slot_grads().at(split.slot_of(a, layer))[i];
        share_worst = std::max(share_worst, std::abs(gshared[i] - sum));
      }
    }
  }

  std::vector<CheckResult> out;
  out.push_back({"finite_difference_gradients", fd_worst < 1e-4, fd_worst, 1e-4,
                 std::to_string(n_nets) + " random nets, central differences"});
  out.push_back({"shared_slot_gradient_sum", share_worst < 1e-12, share_worst,
                 1e-12, "full sharing vs summed per-agent grads"});
  return out;
}

// Scheme-level identities: the independent-step objective is gradient
// equivalent to the PPO-clip objective, its value vanishes at the old
// parameters, GAE(lambda = 1) matches Monte Carlo returns, and the cyclic
// selection yields fixed-point-free permutations.
inline std::vector<CheckResult> verify_schemes_suite(int n_batches = 100) {
  Rng rng(0x5cde3ULL);
  double grad_worst = 0.0, value_worst = 0.0;
  const EnvSpec env = EnvSpec::matrix_default();
  for (int trial = 0; trial < n_batches; ++trial) {
    Rng r = rng.fork(trial);
    PolicyEnsemble ens =
        PolicyEnsemble::make(env, Sharing::partial, NetConfig{}, r.next_u64());
    const int agent = static_cast<int>(r.next_u64() % 2);
    const int batch = 16;
    Tensor obs(batch, ens.raw_obs_dim);
    for (double& v : obs.data) v = r.uniform();
    std::vector<AgentAction> acts(batch);
    Tensor old_lp(batch, 1);
    {
      Rng sampler = r.fork(1);
      for (int b = 0; b < batch; ++b) {
        std::vector<double> row(obs.data.begin() + b * ens.raw_obs_dim,
                                obs.data.begin() + (b + 1) * ens.raw_obs_dim);
        const ActSample s = act(ens, agent, row, sampler);
        acts[b] = s.action;
      }
      const Tensor lp = logprob_batch(ens, agent, obs, acts);
      for (int b = 0; b < batch; ++b) old_lp[b] = lp[b];
    }
    // old parameters exactly: objective must be identically zero
    {
      Graph g;
      Tensor ones(batch, 1);
      ones.fill(1.0);
      Tensor adv(batch, 1);
      for (int b = 0; b < batch; ++b) adv[b] = r.normal();
      const EvalVars ev = evaluate_actions(g, ens, agent, obs, acts);
      const VarId ratio = g.exp_(g.add_const(ev.logprob, old_lp, -1.0));
      const VarId loss =
          fp3o_objective(g, ratio, ones, ones, adv, 0.2, false, 0.2);
      value_worst = std::max(value_worst, std::abs(g.value(loss)[0]));
    }
    // gradient equivalence after a parameter shift
    for (int i = 0; i < ens.store.slot_count(); ++i)
      for (double& v : ens.store.slot(i).value.data) v += 0.03 * r.normal();
    Tensor adv(batch, 1);
    for (int b = 0; b < batch; ++b) adv[b] = r.normal();
    Graph g1, g2;
    {
      const EvalVars ev = evaluate_actions(g1, ens, agent, obs, acts);
      const VarId ratio = g1.exp_(g1.add_const(ev.logprob, old_lp, -1.0));
      Tensor ones(batch, 1);
      ones.fill(1.0);
      g1.backward(fp3o_objective(g1, ratio, ones, ones, adv, 0.2, false, 0.2));
    }
    {
      const EvalVars ev = evaluate_actions(g2, ens, agent, obs, acts);
      const VarId ratio = g2.exp_(g2.add_const(ev.logprob, old_lp, -1.0));
      const VarId s1 = g2.mul_const(ratio, adv);
      const VarId s2 = g2.mul_const(g2.clip(ratio, 0.8, 1.2), adv);
      g2.backward(g2.scale(g2.mean_all(g2.minimum(s1, s2)), -1.0));
    }
    for (const auto& [slot, grad] : g1.slot_grads()) {
      const Tensor& other = g2.slot_grads().at(slot);
      for (std::int64_t i = 0; i < grad.size(); ++i) {
        const double denom =
            std::max({std::abs(grad[i]), std::abs(other[i]), 1e-12});
        grad_worst = std::max(grad_worst, std::abs(grad[i] - other[i]) / denom);
      }
    }
  }

  // GAE(lambda = 1) against the Monte Carlo oracle on complete episodes
  double gae_worst = 0.0;
  {
    Rng r = rng.fork(31337);
    PolicyEnsemble ens =
        PolicyEnsemble::make(env, Sharing::full, NetConfig{}, r.next_u64());
    CriticNet critic =
        CriticNet::make_central(env.state_dim(), NetConfig{}, r.next_u64());
    RolloutBuffer buf = collect(ens, critic, env, 2, 50, r.next_u64());
    gae(buf, 0.97, 1.0);
    for (int w = 0; w < 2; ++w)
      for (int start = 0; start < 50; start += env.episode_length)
        for (int s = start; s < start + env.episode_length; ++s) {
          const int t = w * 50 + s;
          double mc = 0.0, disc = 1.0;
          for (int u = s; u < start + env.episode_length; ++u) {
            mc += disc * buf.rewards[w * 50 + u];
            disc *= 0.97;
          }
          gae_worst = std::max(
              gae_worst, std::abs(buf.advantages.at(t, 0) -
                                  (mc - buf.values.at(t, 0))));
        }
  }

  // selection properties for n in 2..8 and every valid shift
  bool selection_ok = true;
  for (int n = 2; n <= 8; ++n)
    for (int shift = 1; shift < n; ++shift) {
      try {
        nonoverlapping_selection(n, shift).validate();
      } catch (const std::exception&) {
        selection_ok = false;
      }
    }
  const PipelineAssignment example =
      nonoverlapping_selection(std::vector<int>{2, 4, 1, 3, 5}, 1);
  const bool example_ok = example.j_order == std::vector<int>{4, 1, 3, 5, 2};

  std::vector<CheckResult> out;
  out.push_back({"independent_step_ppo_grad_equivalence", grad_worst < 1e-10,
                 grad_worst, 1e-10,
                 std::to_string(n_batches) + " random batches"});
  out.push_back({"objective_zero_at_old_parameters", value_worst == 0.0,
                 value_worst, 1e-300, "batch-wide exact zero"});
  out.push_back({"gae_lambda1_monte_carlo", gae_worst < 1e-10, gae_worst,
                 1e-10, "complete episodes"});
  out.push_back({"selection_fixed_point_free", selection_ok && example_ok,
                 selection_ok && example_ok ? 0.0 : 1.0, 1.0,
                 "n in 2..8, all shifts; five-agent example"});
  return out;
}

}  // namespace fp3o
