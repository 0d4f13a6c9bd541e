#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "fp3o/envs.hpp"
#include "fp3o/graph.hpp"
#include "fp3o/mlp.hpp"
#include "fp3o/param_store.hpp"
#include "fp3o/rng.hpp"
#include "fp3o/tensor.hpp"

namespace fp3o {

struct NetConfig {
  int fc_dim = 64;
  int num_fc = 2;
  double gain_head = 0.01;
  double std_x_coef = 1.0;
  double std_y_coef = 0.5;

  double init_std() const { return std_x_coef * std_y_coef; }
};

// Per-agent stochastic policies over one parameter store. Under full
// sharing a one-hot agent id is appended to each observation so the shared
// network can act distinctly per agent.
struct PolicyEnsemble {
  MlpSpec spec;
  Sharing mode = Sharing::none;
  int n_agents = 0;
  int raw_obs_dim = 0;
  ParamStore store;

  bool gaussian() const { return spec.head == Head::gaussian; }
  bool append_id() const { return mode == Sharing::full; }

  static PolicyEnsemble make(const EnvSpec& env, Sharing mode,
                             const NetConfig& net, std::uint64_t seed) {
    if (!env.continuous_actions())
      for (int i = 1; i < env.n_agents; ++i)
        if (env.actions[i] != env.actions[0])
          throw std::invalid_argument(
              "PolicyEnsemble: sharing needs one action space per family");
    PolicyEnsemble ens;
    ens.mode = mode;
    ens.n_agents = env.n_agents;
    ens.raw_obs_dim = env.obs_dim();
    ens.spec.input_dim =
        ens.raw_obs_dim + (mode == Sharing::full ? env.n_agents : 0);
    ens.spec.hidden.assign(net.num_fc, net.fc_dim);
    ens.spec.output_dim =
        env.continuous_actions() ? env.action_dim() : env.actions[0];
    ens.spec.head =
        env.continuous_actions() ? Head::gaussian : Head::categorical;
    ens.store = bind_sharing(ens.spec, env.n_agents, mode);
    orthogonal_init(ens.store, ens.spec, seed, std::sqrt(2.0), net.gain_head,
                    net.init_std());
    return ens;
  }

  Tensor net_input(int agent, const Tensor& raw_obs) const {
    if (raw_obs.cols() != raw_obs_dim)
      throw std::invalid_argument("net_input: obs dim mismatch");
    if (!append_id()) return raw_obs;
    Tensor x(raw_obs.rows(), raw_obs_dim + n_agents);
    for (std::int64_t b = 0; b < raw_obs.rows(); ++b) {
      for (int c = 0; c < raw_obs_dim; ++c) x.at(b, c) = raw_obs.at(b, c);
      x.at(b, raw_obs_dim + agent) = 1.0;
    }
    return x;
  }

  Tensor net_input(int agent, const std::vector<double>& obs) const {
    Tensor raw(1, raw_obs_dim);
    if (static_cast<int>(obs.size()) != raw_obs_dim)
      throw std::invalid_argument("net_input: obs dim mismatch");
    for (int c = 0; c < raw_obs_dim; ++c) raw.at(0, c) = obs[c];
    return net_input(agent, raw);
  }
};

struct ActSample {
  AgentAction action;
  double logprob = 0.0;
};

namespace detail {

inline double categorical_logprob_row(const Tensor& logits, std::int64_t row,
                                      int action) {
  return logits.at(row, action) - row_log_sum_exp(logits, row);
}

inline double gaussian_logprob_row(const Tensor& mean, const Tensor& log_std,
                                   std::int64_t row,
                                   const std::vector<double>& action) {
  double lp = 0.0;
  for (std::int64_t d = 0; d < mean.cols(); ++d) {
    const double sigma = std::exp(log_std[d]);
    const double z = (action[d] - mean.at(row, d)) / sigma;
    lp += -0.5 * z * z - log_std[d] - 0.5 * std::log(2.0 * M_PI);
  }
  return lp;
}

}  // namespace detail

// Sample an action; categorical draws use inverse-CDF over the canonical
// action order, gaussian draws use mean + std * z.
inline ActSample act(const PolicyEnsemble& ens, int agent,
                     const std::vector<double>& obs, Rng& rng) {
  const Tensor x = ens.net_input(agent, obs);
  const Tensor out = mlp_forward(ens.store, ens.spec, agent, x);
  if (!out.all_finite()) throw std::runtime_error("act: non-finite head output");
  ActSample s;
  if (!ens.gaussian()) {
    const double lse = row_log_sum_exp(out, 0);
    std::vector<double> probs(out.cols());
    for (std::int64_t a = 0; a < out.cols(); ++a)
      probs[a] = std::exp(out.at(0, a) - lse);
    s.action.discrete = rng.categorical(probs);
    s.logprob = detail::categorical_logprob_row(out, 0, s.action.discrete);
  } else {
    const Tensor log_std = mlp_log_std(ens.store, ens.spec, agent);
    s.action.continuous.resize(out.cols());
    for (std::int64_t d = 0; d < out.cols(); ++d)
      s.action.continuous[d] =
          out.at(0, d) + std::exp(log_std[d]) * rng.normal();
    s.logprob =
        detail::gaussian_logprob_row(out, log_std, 0, s.action.continuous);
  }
  return s;
}

// Greedy evaluation action: categorical argmax, gaussian mean.
inline AgentAction greedy_action(const PolicyEnsemble& ens, int agent,
                                 const std::vector<double>& obs) {
  const Tensor x = ens.net_input(agent, obs);
  const Tensor out = mlp_forward(ens.store, ens.spec, agent, x);
  AgentAction a;
  if (!ens.gaussian()) {
    int best = 0;
    for (std::int64_t c = 1; c < out.cols(); ++c)
      if (out.at(0, c) > out.at(0, best)) best = static_cast<int>(c);
    a.discrete = best;
  } else {
    a.continuous.assign(out.data.begin(), out.data.end());
  }
  return a;
}

// Log-probabilities of taken actions under the current parameters, no tape.
inline Tensor logprob_batch(const PolicyEnsemble& ens, int agent,
                            const Tensor& raw_obs,
                            const std::vector<AgentAction>& acts) {
  const Tensor x = ens.net_input(agent, raw_obs);
  const Tensor out = mlp_forward(ens.store, ens.spec, agent, x);
  Tensor lp(out.rows(), 1);
  if (!ens.gaussian()) {
    for (std::int64_t b = 0; b < out.rows(); ++b)
      lp[b] = detail::categorical_logprob_row(out, b, acts[b].discrete);
  } else {
    const Tensor log_std = mlp_log_std(ens.store, ens.spec, agent);
    for (std::int64_t b = 0; b < out.rows(); ++b)
      lp[b] = detail::gaussian_logprob_row(out, log_std, b, acts[b].continuous);
  }
  return lp;
}

struct EvalVars {
  VarId logprob;  // {B, 1}
  VarId entropy;  // {B, 1}
};

// Differentiable log-probabilities and entropies of taken actions.
inline EvalVars evaluate_actions(Graph& g, const PolicyEnsemble& ens,
                                 int agent, const Tensor& raw_obs,
                                 const std::vector<AgentAction>& acts) {
  const Tensor x = ens.net_input(agent, raw_obs);
  const VarId out = mlp_forward_taped(g, ens.store, ens.spec, agent, x);
  if (!ens.gaussian()) {
    std::vector<int> ids(acts.size());
    for (std::size_t k = 0; k < acts.size(); ++k) ids[k] = acts[k].discrete;
    return {g.cat_logprob(out, ids), g.cat_entropy(out)};
  }
  Tensor a(raw_obs.rows(), ens.spec.output_dim);
  for (std::int64_t b = 0; b < a.rows(); ++b)
    for (std::int64_t d = 0; d < a.cols(); ++d)
      a.at(b, d) = acts[b].continuous[d];
  const VarId ls = mlp_log_std_taped(g, ens.store, ens.spec, agent);
  return {g.gauss_logprob(out, ls, std::move(a)),
          g.gauss_entropy(ls, raw_obs.rows())};
}

struct KlSummary {
  double mean = 0.0;
  double max = 0.0;
};

// D_KL(old^i || new^i) per agent over an observation batch.
inline std::vector<KlSummary> kl_per_agent(
    const PolicyEnsemble& ens_old, const PolicyEnsemble& ens_new,
    const std::vector<Tensor>& raw_obs_per_agent) {
  if (ens_old.n_agents != ens_new.n_agents ||
      ens_old.gaussian() != ens_new.gaussian())
    throw std::invalid_argument("kl_per_agent: ensembles incompatible");
  std::vector<KlSummary> out(ens_old.n_agents);
  for (int agent = 0; agent < ens_old.n_agents; ++agent) {
    const Tensor& raw = raw_obs_per_agent[agent];
    const Tensor xo = ens_old.net_input(agent, raw);
    const Tensor xn = ens_new.net_input(agent, raw);
    const Tensor zo = mlp_forward(ens_old.store, ens_old.spec, agent, xo);
    const Tensor zn = mlp_forward(ens_new.store, ens_new.spec, agent, xn);
    double total = 0.0, worst = 0.0;
    if (!ens_old.gaussian()) {
      for (std::int64_t b = 0; b < raw.rows(); ++b) {
        const double lo = row_log_sum_exp(zo, b), ln = row_log_sum_exp(zn, b);
        double kl = 0.0;
        for (std::int64_t a = 0; a < zo.cols(); ++a) {
          const double lpo = zo.at(b, a) - lo;
          const double lpn = zn.at(b, a) - ln;
          kl += std::exp(lpo) * (lpo - lpn);
        }
        total += kl;
        worst = std::max(worst, kl);
      }
    } else {
      const Tensor so = mlp_log_std(ens_old.store, ens_old.spec, agent);
      const Tensor sn = mlp_log_std(ens_new.store, ens_new.spec, agent);
      for (std::int64_t b = 0; b < raw.rows(); ++b) {
        double kl = 0.0;
        for (std::int64_t d = 0; d < zo.cols(); ++d) {
          const double v_old = std::exp(2.0 * so[d]);
          const double v_new = std::exp(2.0 * sn[d]);
          const double dm = zo.at(b, d) - zn.at(b, d);
          kl += sn[d] - so[d] + (v_old + dm * dm) / (2.0 * v_new) - 0.5;
        }
        total += kl;
        worst = std::max(worst, kl);
      }
    }
    out[agent].mean = raw.rows() > 0 ? total / raw.rows() : 0.0;
    out[agent].max = worst;
  }
  return out;
}

// Centralized critic over the global state, or per-agent critics over
// local observations (the IPPO variant; sharing applies across the agent
// critics the same way it does for actors).
struct CriticNet {
  MlpSpec spec;
  bool central = true;
  Sharing mode = Sharing::none;
  int n_agents = 1;
  int raw_in_dim = 0;
  ParamStore store;

  static CriticNet make_central(int state_dim, const NetConfig& net,
                                std::uint64_t seed) {
    CriticNet c;
    c.central = true;
    c.n_agents = 1;
    c.raw_in_dim = state_dim;
    c.spec.input_dim = state_dim;
    c.spec.hidden.assign(net.num_fc, net.fc_dim);
    c.spec.output_dim = 1;
    c.store = bind_sharing(c.spec, 1, Sharing::none);
    orthogonal_init(c.store, c.spec, seed);
    return c;
  }

  static CriticNet make_local(int obs_dim, int n_agents, Sharing mode,
                              const NetConfig& net, std::uint64_t seed) {
    CriticNet c;
    c.central = false;
    c.mode = mode;
    c.n_agents = n_agents;
    c.raw_in_dim = obs_dim;
    c.spec.input_dim = obs_dim + (mode == Sharing::full ? n_agents : 0);
    c.spec.hidden.assign(net.num_fc, net.fc_dim);
    c.spec.output_dim = 1;
    c.store = bind_sharing(c.spec, n_agents, mode);
    orthogonal_init(c.store, c.spec, seed);
    return c;
  }

  Tensor input(int agent, const Tensor& raw) const {
    if (central || mode != Sharing::full) return raw;
    Tensor x(raw.rows(), raw_in_dim + n_agents);
    for (std::int64_t b = 0; b < raw.rows(); ++b) {
      for (int c = 0; c < raw_in_dim; ++c) x.at(b, c) = raw.at(b, c);
      x.at(b, raw_in_dim + agent) = 1.0;
    }
    return x;
  }

  // {B, 1} value estimates; agent picks the head for local critics.
  Tensor values(int agent, const Tensor& raw) const {
    return mlp_forward(store, spec, central ? 0 : agent, input(agent, raw));
  }

  VarId values_taped(Graph& g, int agent, const Tensor& raw) const {
    return mlp_forward_taped(g, store, spec, central ? 0 : agent,
                             input(agent, raw));
  }
};

}  // namespace fp3o
