#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "fp3o/pipeline.hpp"
#include "fp3o/rng.hpp"
#include "fp3o/tensor.hpp"

namespace fp3o {

constexpr double kSolveTol = 1e-10;
constexpr double kStochasticTol = 1e-12;

// Finite decentralized MDP with a shared reward. Joint actions are encoded
// in mixed radix with the last agent's action varying fastest.
struct TabularMdp {
  int n_agents = 0;
  int n_states = 0;
  std::vector<int> actions;  // per-agent action count
  Tensor transition;         // {S * A_joint, S}, row (s, a) -> distribution over s'
  Tensor reward;             // {S, A_joint}
  double gamma = 0.9;
  std::vector<double> rho0;

  int joint_actions() const {
    int a = 1;
    for (int k : actions) a *= k;
    return a;
  }

  int encode(std::span<const int> a) const {
    int idx = 0;
    for (int i = 0; i < n_agents; ++i) idx = idx * actions[i] + a[i];
    return idx;
  }

  void decode(int ja, std::span<int> out) const {
    for (int i = n_agents - 1; i >= 0; --i) {
      out[i] = ja % actions[i];
      ja /= actions[i];
    }
  }

  int agent_action(int ja, int agent) const {
    for (int i = n_agents - 1; i > agent; --i) ja /= actions[i];
    return ja % actions[agent];
  }

  void validate() const {
    if (gamma < 0.0 || gamma >= 1.0)
      throw std::invalid_argument("TabularMdp: gamma must lie in [0, 1)");
    const int a_joint = joint_actions();
    if (transition.rows() != static_cast<std::int64_t>(n_states) * a_joint ||
        transition.cols() != n_states)
      throw std::invalid_argument("TabularMdp: transition shape");
    for (std::int64_t r = 0; r < transition.rows(); ++r) {
      double sum = 0.0;
      for (int c = 0; c < n_states; ++c) {
        if (transition.at(r, c) < 0.0)
          throw std::invalid_argument("TabularMdp: negative probability");
        sum += transition.at(r, c);
      }
      if (std::abs(sum - 1.0) > kStochasticTol)
        throw std::invalid_argument("TabularMdp: transition row not stochastic");
    }
    double rsum = 0.0;
    for (double v : rho0) rsum += v;
    if (std::abs(rsum - 1.0) > kStochasticTol)
      throw std::invalid_argument("TabularMdp: rho0 not a distribution");
  }

  // Two agents, two states. State 0 pays 1 for matching actions, state 1
  // pays 1 for differing actions; a match sends the system to state 0,
  // otherwise to state 1.
  static TabularMdp two_guard() {
    TabularMdp m;
    m.n_agents = 2;
    m.n_states = 2;
    m.actions = {2, 2};
    m.gamma = 0.9;
    m.rho0 = {0.5, 0.5};
    m.transition = Tensor(2 * 4, 2);
    m.reward = Tensor(2, 4);
    for (int s = 0; s < 2; ++s)
      for (int a1 = 0; a1 < 2; ++a1)
        for (int a2 = 0; a2 < 2; ++a2) {
          const int ja = a1 * 2 + a2;
          const bool match = a1 == a2;
          m.reward.at(s, ja) = (s == 0 ? match : !match) ? 1.0 : 0.0;
          m.transition.at(s * 4 + ja, match ? 0 : 1) = 1.0;
        }
    m.validate();
    return m;
  }

  static TabularMdp random(Rng& rng, int n_agents, int n_states,
                           std::vector<int> actions, double gamma = 0.9) {
    TabularMdp m;
    m.n_agents = n_agents;
    m.n_states = n_states;
    m.actions = std::move(actions);
    m.gamma = gamma;
    const int a_joint = m.joint_actions();
    m.transition = Tensor(static_cast<std::int64_t>(n_states) * a_joint, n_states);
    m.reward = Tensor(n_states, a_joint);
    for (std::int64_t r = 0; r < m.transition.rows(); ++r) {
      std::vector<double> row(n_states);
      rng.dirichlet_uniform(row);
      for (int c = 0; c < n_states; ++c) m.transition.at(r, c) = row[c];
    }
    for (double& v : m.reward.data) v = rng.uniform(-1.0, 1.0);
    m.rho0.resize(n_states);
    rng.dirichlet_uniform(m.rho0);
    m.validate();
    return m;
  }

  nlohmann::json to_json() const;
  static TabularMdp from_json(const nlohmann::json& j);
};

// Product-form joint policy: one row-stochastic matrix per agent.
struct TabularPolicy {
  std::vector<Tensor> probs;  // per agent {S, A_i}

  void validate(const TabularMdp& mdp) const {
    if (static_cast<int>(probs.size()) != mdp.n_agents)
      throw std::invalid_argument("TabularPolicy: agent count mismatch");
    for (int i = 0; i < mdp.n_agents; ++i) {
      if (probs[i].rows() != mdp.n_states || probs[i].cols() != mdp.actions[i])
        throw std::invalid_argument("TabularPolicy: shape mismatch");
      for (std::int64_t s = 0; s < probs[i].rows(); ++s) {
        double sum = 0.0;
        for (std::int64_t a = 0; a < probs[i].cols(); ++a) {
          if (probs[i].at(s, a) < 0.0)
            throw std::invalid_argument("TabularPolicy: negative probability");
          sum += probs[i].at(s, a);
        }
        if (std::abs(sum - 1.0) > kStochasticTol)
          throw std::invalid_argument("TabularPolicy: row not stochastic");
      }
    }
  }

  double joint_prob(const TabularMdp& mdp, int s, int ja) const {
    double p = 1.0;
    for (int i = 0; i < mdp.n_agents; ++i)
      p *= probs[i].at(s, mdp.agent_action(ja, i));
    return p;
  }

  static TabularPolicy uniform(const TabularMdp& mdp) {
    TabularPolicy p;
    for (int i = 0; i < mdp.n_agents; ++i) {
      Tensor t(mdp.n_states, mdp.actions[i]);
      t.fill(1.0 / mdp.actions[i]);
      p.probs.push_back(std::move(t));
    }
    return p;
  }

  static TabularPolicy random(const TabularMdp& mdp, Rng& rng) {
    TabularPolicy p;
    for (int i = 0; i < mdp.n_agents; ++i) {
      Tensor t(mdp.n_states, mdp.actions[i]);
      for (int s = 0; s < mdp.n_states; ++s) {
        std::vector<double> row(mdp.actions[i]);
        rng.dirichlet_uniform(row);
        for (int a = 0; a < mdp.actions[i]; ++a) t.at(s, a) = row[a];
      }
      p.probs.push_back(std::move(t));
    }
    return p;
  }

  // Mix toward a random policy; keeps full support for importance ratios.
  static TabularPolicy perturbed(const TabularMdp& mdp, const TabularPolicy& base,
                                 Rng& rng, double amount) {
    TabularPolicy noise = random(mdp, rng);
    TabularPolicy out = base;
    for (int i = 0; i < mdp.n_agents; ++i)
      for (std::int64_t k = 0; k < out.probs[i].size(); ++k)
        out.probs[i][k] =
            (1.0 - amount) * base.probs[i][k] + amount * noise.probs[i][k];
    return out;
  }
};

// Exact evaluation artifacts. rho is the unnormalized discounted visitation
// sum_t gamma^t P(s_t = s), so rho . 1 = 1 / (1 - gamma).
struct PolicyEvaluation {
  std::vector<double> v;
  Tensor q;    // {S, A_joint}
  Tensor adv;  // {S, A_joint}
  std::vector<double> rho;
  double j = 0.0;

  double max_abs_adv() const {
    double m = 0.0;
    for (double x : adv.data) m = std::max(m, std::abs(x));
    return m;
  }
};

inline double penalty_coefficient(const PolicyEvaluation& eval, double gamma) {
  return 4.0 * gamma * eval.max_abs_adv() / ((1.0 - gamma) * (1.0 - gamma));
}

inline PolicyEvaluation evaluate_policy(const TabularMdp& mdp,
                                        const TabularPolicy& pol) {
  const int S = mdp.n_states, A = mdp.joint_actions();
  Eigen::MatrixXd p_pi = Eigen::MatrixXd::Zero(S, S);
  Eigen::VectorXd r_pi = Eigen::VectorXd::Zero(S);
  for (int s = 0; s < S; ++s)
    for (int ja = 0; ja < A; ++ja) {
      const double w = pol.joint_prob(mdp, s, ja);
      if (w == 0.0) continue;
      r_pi(s) += w * mdp.reward.at(s, ja);
      for (int t = 0; t < S; ++t)
        p_pi(s, t) += w * mdp.transition.at(s * A + ja, t);
    }

  const Eigen::MatrixXd sys =
      Eigen::MatrixXd::Identity(S, S) - mdp.gamma * p_pi;
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(sys);
  const Eigen::VectorXd v = lu.solve(r_pi);
  if ((sys * v - r_pi).cwiseAbs().maxCoeff() > kSolveTol)
    throw std::runtime_error("evaluate_policy: value solve residual too large");

  Eigen::VectorXd rho0(S);
  for (int s = 0; s < S; ++s) rho0(s) = mdp.rho0[s];
  const Eigen::MatrixXd sys_t =
      Eigen::MatrixXd::Identity(S, S) - mdp.gamma * p_pi.transpose();
  Eigen::PartialPivLU<Eigen::MatrixXd> lu_t(sys_t);
  const Eigen::VectorXd rho = lu_t.solve(rho0);
  if ((sys_t * rho - rho0).cwiseAbs().maxCoeff() > kSolveTol)
    throw std::runtime_error("evaluate_policy: visitation solve residual too large");

  PolicyEvaluation out;
  out.v.assign(v.data(), v.data() + S);
  out.rho.assign(rho.data(), rho.data() + S);
  out.q = Tensor(S, A);
  out.adv = Tensor(S, A);
  for (int s = 0; s < S; ++s)
    for (int ja = 0; ja < A; ++ja) {
      double q = mdp.reward.at(s, ja);
      for (int t = 0; t < S; ++t)
        q += mdp.gamma * mdp.transition.at(s * A + ja, t) * v(t);
      out.q.at(s, ja) = q;
      out.adv.at(s, ja) = q - v(s);
    }
  out.j = rho0.dot(v);
  return out;
}

namespace detail {

// Iterate joint actions of `agents`, calling fn(actions like a[k] for
// agents[k], product of weights under pol).
template <class Fn>
void for_each_subset_action(const TabularMdp& mdp, const TabularPolicy& pol,
                            std::span<const int> agents, int s, Fn&& fn) {
  const int k = static_cast<int>(agents.size());
  std::vector<int> a(k, 0);
  while (true) {
    double w = 1.0;
    for (int m = 0; m < k; ++m) w *= pol.probs[agents[m]].at(s, a[m]);
    fn(std::span<const int>(a), w);
    int pos = k - 1;
    while (pos >= 0 && ++a[pos] == mdp.actions[agents[pos]]) {
      a[pos] = 0;
      --pos;
    }
    if (pos < 0) break;
  }
}

}  // namespace detail

// E over complement actions of Q(s, joint a), with the subset's actions
// fixed. Empty subset gives V(s); the full set gives Q(s, a) exactly.
inline double multi_agent_q(const TabularMdp& mdp, const PolicyEvaluation& eval,
                            const TabularPolicy& pol,
                            std::span<const int> subset, int s,
                            std::span<const int> a_subset) {
  if (subset.size() != a_subset.size())
    throw std::invalid_argument("multi_agent_q: subset/action size mismatch");
  std::vector<int> joint(mdp.n_agents, -1);
  for (std::size_t k = 0; k < subset.size(); ++k) {
    const int agent = subset[k];
    if (a_subset[k] < 0 || a_subset[k] >= mdp.actions[agent])
      throw std::out_of_range("multi_agent_q: action out of range");
    joint[agent] = a_subset[k];
  }
  std::vector<int> complement;
  for (int i = 0; i < mdp.n_agents; ++i)
    if (joint[i] < 0) complement.push_back(i);

  double total = 0.0;
  detail::for_each_subset_action(
      mdp, pol, complement, s, [&](std::span<const int> a, double w) {
        for (std::size_t k = 0; k < complement.size(); ++k)
          joint[complement[k]] = a[k];
        total += w * eval.q.at(s, mdp.encode(joint));
      });
  return total;
}

// Additional contribution of i_set acting a_i after j_set already acted a_j.
inline double multi_agent_advantage(const TabularMdp& mdp,
                                    const PolicyEvaluation& eval,
                                    const TabularPolicy& pol,
                                    std::span<const int> j_set,
                                    std::span<const int> i_set, int s,
                                    std::span<const int> a_j,
                                    std::span<const int> a_i) {
  for (int j : j_set)
    for (int i : i_set)
      if (i == j)
        throw std::invalid_argument("multi_agent_advantage: overlapping sets");
  std::vector<int> both(j_set.begin(), j_set.end());
  both.insert(both.end(), i_set.begin(), i_set.end());
  std::vector<int> a_both(a_j.begin(), a_j.end());
  a_both.insert(a_both.end(), a_i.begin(), a_i.end());
  return multi_agent_q(mdp, eval, pol, both, s, a_both) -
         multi_agent_q(mdp, eval, pol, j_set, s, a_j);
}

struct DecompositionResidual {
  double chain = 0.0;         // n-term telescope over one agent ordering
  double two_term_max = 0.0;  // single-agent / complement split, max over p
};

inline DecompositionResidual decomposition_residual(
    const TabularMdp& mdp, const PolicyEvaluation& eval,
    const TabularPolicy& pol, int s, int ja, std::span<const int> ordering) {
  if (static_cast<int>(ordering.size()) != mdp.n_agents)
    throw std::invalid_argument("decomposition_residual: bad ordering");
  std::vector<int> joint(mdp.n_agents);
  mdp.decode(ja, joint);

  const double a_full = eval.adv.at(s, ja);
  double chain_sum = 0.0;
  std::vector<int> prefix, a_prefix;
  for (int m = 0; m < mdp.n_agents; ++m) {
    const int agent = ordering[m];
    const int act[] = {joint[agent]};
    const int ag[] = {agent};
    chain_sum += multi_agent_advantage(mdp, eval, pol, prefix, ag, s, a_prefix,
                                       act);
    prefix.push_back(agent);
    a_prefix.push_back(joint[agent]);
  }

  DecompositionResidual out;
  out.chain = std::abs(a_full - chain_sum);
  for (int p = 0; p < mdp.n_agents; ++p) {
    std::vector<int> rest, a_rest;
    for (int i = 0; i < mdp.n_agents; ++i)
      if (i != p) {
        rest.push_back(i);
        a_rest.push_back(joint[i]);
      }
    const int ap[] = {joint[p]};
    const int agp[] = {p};
    const double first =
        multi_agent_advantage(mdp, eval, pol, {}, agp, s, {}, ap);
    const double second =
        multi_agent_advantage(mdp, eval, pol, agp, rest, s, ap, a_rest);
    out.two_term_max =
        std::max(out.two_term_max, std::abs(a_full - first - second));
  }
  return out;
}

// max over states of D_KL(old || new) for one agent; +inf when new lacks
// support where old has mass.
inline double kl_max_over_states(const Tensor& old_probs,
                                 const Tensor& new_probs) {
  double worst = 0.0;
  for (std::int64_t s = 0; s < old_probs.rows(); ++s) {
    double kl = 0.0;
    for (std::int64_t a = 0; a < old_probs.cols(); ++a) {
      const double po = old_probs.at(s, a);
      if (po <= 0.0) continue;
      const double pn = new_probs.at(s, a);
      if (pn <= 0.0) return std::numeric_limits<double>::infinity();
      kl += po * std::log(po / pn);
    }
    worst = std::max(worst, kl);
  }
  return worst;
}

struct SurrogateTerms {
  double penalty_coef = 0.0;
  std::vector<double> kl_max;  // per i_set agent
  double m_value = 0.0;
};

// Definition-1 surrogate M over the new joint policy; expectation under
// rho_old and the full new joint action distribution.
inline SurrogateTerms surrogate_m(const TabularMdp& mdp,
                                  const PolicyEvaluation& eval_old,
                                  const TabularPolicy& pol_old,
                                  const TabularPolicy& pol_new,
                                  std::span<const int> j_set,
                                  std::span<const int> i_set) {
  SurrogateTerms out;
  out.penalty_coef = penalty_coefficient(eval_old, mdp.gamma);

  double expectation = 0.0;
  std::vector<int> joint(mdp.n_agents);
  for (int s = 0; s < mdp.n_states; ++s) {
    if (eval_old.rho[s] == 0.0) continue;
    double inner = 0.0;
    for (int ja = 0; ja < mdp.joint_actions(); ++ja) {
      const double w = pol_new.joint_prob(mdp, s, ja);
      if (w == 0.0) continue;
      mdp.decode(ja, joint);
      std::vector<int> a_j, a_i;
      for (int j : j_set) a_j.push_back(joint[j]);
      for (int i : i_set) a_i.push_back(joint[i]);
      inner += w * multi_agent_advantage(mdp, eval_old, pol_old, j_set, i_set,
                                         s, a_j, a_i);
    }
    expectation += eval_old.rho[s] * inner;
  }

  double penalty = 0.0;
  for (int i : i_set) {
    const double kl = kl_max_over_states(pol_old.probs[i], pol_new.probs[i]);
    out.kl_max.push_back(kl);
    if (out.penalty_coef > 0.0) penalty += out.penalty_coef * kl;
  }
  out.m_value = expectation - penalty;
  return out;
}

// The value every pipeline's lower bound shares: J + E_rho,old[prod ratio
// * A] - sum_i C KLmax_i. Unbounded KL propagates as -inf.
inline double shared_lower_bound(const TabularMdp& mdp,
                                 const PolicyEvaluation& eval_old,
                                 const TabularPolicy& pol_old,
                                 const TabularPolicy& pol_new) {
  double expectation = 0.0;
  for (int s = 0; s < mdp.n_states; ++s) {
    if (eval_old.rho[s] == 0.0) continue;
    double inner = 0.0;
    for (int ja = 0; ja < mdp.joint_actions(); ++ja) {
      const double w = pol_new.joint_prob(mdp, s, ja);
      if (w == 0.0) continue;
      inner += w * eval_old.adv.at(s, ja);
    }
    expectation += eval_old.rho[s] * inner;
  }
  const double c = penalty_coefficient(eval_old, mdp.gamma);
  double penalty = 0.0;
  for (int i = 0; i < mdp.n_agents; ++i) {
    const double kl = kl_max_over_states(pol_old.probs[i], pol_new.probs[i]);
    if (std::isinf(kl) && c > 0.0)
      return -std::numeric_limits<double>::infinity();
    penalty += c * kl;
  }
  return eval_old.j + expectation - penalty;
}

// Gaps between the exact surrogate expectations and their importance
// sampled forms, for pipeline opener p. Both should vanish to solver
// precision.
inline std::pair<double, double> importance_equivalence_gap(
    const TabularMdp& mdp, const PolicyEvaluation& eval_old,
    const TabularPolicy& pol_old, const TabularPolicy& pol_new, int p) {
  const int agents[] = {p};
  std::vector<int> rest;
  for (int i = 0; i < mdp.n_agents; ++i)
    if (i != p) rest.push_back(i);

  double lhs1 = 0.0, rhs1 = 0.0, lhs2 = 0.0, rhs2 = 0.0;
  std::vector<int> joint(mdp.n_agents);
  for (int s = 0; s < mdp.n_states; ++s) {
    const double rho = eval_old.rho[s];
    if (rho == 0.0) continue;
    // exact surrogate expectations under the new policies
    for (int ap = 0; ap < mdp.actions[p]; ++ap) {
      const int act[] = {ap};
      lhs1 += rho * pol_new.probs[p].at(s, ap) *
              multi_agent_advantage(mdp, eval_old, pol_old, {}, agents, s, {},
                                    act);
    }
    for (int ja = 0; ja < mdp.joint_actions(); ++ja) {
      mdp.decode(ja, joint);
      const double w_new = pol_new.joint_prob(mdp, s, ja);
      if (w_new > 0.0) {
        std::vector<int> a_rest;
        for (int i : rest) a_rest.push_back(joint[i]);
        const int ap[] = {joint[p]};
        lhs2 += rho * w_new *
                multi_agent_advantage(mdp, eval_old, pol_old, agents, rest, s,
                                      ap, a_rest);
      }
      // importance-sampled forms under the old policy
      const double w_old = pol_old.joint_prob(mdp, s, ja);
      if (w_old > 0.0) {
        const double r_p = pol_new.probs[p].at(s, joint[p]) /
                           pol_old.probs[p].at(s, joint[p]);
        double r_rest = 1.0;
        for (int i : rest)
          r_rest *= pol_new.probs[i].at(s, joint[i]) /
                    pol_old.probs[i].at(s, joint[i]);
        const double a = eval_old.adv.at(s, ja);
        rhs1 += rho * w_old * r_p * a;
        rhs2 += rho * w_old * (r_rest - 1.0) * r_p * a;
      }
    }
  }
  return {std::abs(lhs1 - rhs1), std::abs(lhs2 - rhs2)};
}

// Per-agent scalar split of the joint advantage; rows align with adv.
struct TabularSplit {
  std::vector<Tensor> parts;  // per agent {S, A_joint}

  static TabularSplit average(const PolicyEvaluation& eval, int n_agents) {
    TabularSplit s;
    for (int i = 0; i < n_agents; ++i) {
      Tensor t = eval.adv;
      for (double& v : t.data) v /= n_agents;
      s.parts.push_back(std::move(t));
    }
    return s;
  }

  static TabularSplit random(const PolicyEvaluation& eval, int n_agents,
                             Rng& rng) {
    TabularSplit s;
    s.parts.assign(n_agents, Tensor(eval.adv.rows(), eval.adv.cols()));
    std::vector<double> w(n_agents);
    for (std::int64_t k = 0; k < eval.adv.size(); ++k) {
      rng.dirichlet_uniform(w);
      for (int i = 0; i < n_agents; ++i) s.parts[i][k] = w[i] * eval.adv[k];
    }
    return s;
  }

  void validate(const PolicyEvaluation& eval) const {
    for (std::int64_t k = 0; k < eval.adv.size(); ++k) {
      double sum = 0.0;
      for (const Tensor& t : parts) sum += t[k];
      if (std::abs(sum - eval.adv[k]) > 1e-9)
        throw std::invalid_argument("TabularSplit: parts do not sum to A");
    }
  }
};

// mu(pol_other^{-i}) with agent i drawn from the intermediate policy and
// the complement from pol_other, under the old visitation.
inline double mu_exact(const TabularMdp& mdp, const PolicyEvaluation& eval_old,
                       const TabularPolicy& pol_intermediate,
                       const TabularPolicy& pol_other, int agent,
                       const TabularSplit& split) {
  split.validate(eval_old);
  double total = 0.0;
  std::vector<int> joint(mdp.n_agents);
  for (int s = 0; s < mdp.n_states; ++s) {
    const double rho = eval_old.rho[s];
    if (rho == 0.0) continue;
    for (int ja = 0; ja < mdp.joint_actions(); ++ja) {
      mdp.decode(ja, joint);
      double w = pol_intermediate.probs[agent].at(s, joint[agent]);
      for (int i = 0; i < mdp.n_agents; ++i)
        if (i != agent) w *= pol_other.probs[i].at(s, joint[i]);
      if (w == 0.0) continue;
      total += rho * w * split.parts[agent].at(s, ja);
    }
  }
  return total;
}

// ---- tabular softmax policies and the exact penalty iteration ----

struct TabularLogits {
  bool shared = false;          // one table used by every agent
  std::vector<Tensor> theta;    // per agent (or a single table when shared)

  static TabularLogits zeros(const TabularMdp& mdp, bool shared_mode) {
    TabularLogits l;
    l.shared = shared_mode;
    if (shared_mode) {
      for (int i = 1; i < mdp.n_agents; ++i)
        if (mdp.actions[i] != mdp.actions[0])
          throw std::invalid_argument(
              "TabularLogits: shared mode needs identical action counts");
      l.theta.push_back(Tensor(mdp.n_states, mdp.actions[0]));
    } else {
      for (int i = 0; i < mdp.n_agents; ++i)
        l.theta.push_back(Tensor(mdp.n_states, mdp.actions[i]));
    }
    return l;
  }

  const Tensor& table(int agent) const { return theta[shared ? 0 : agent]; }
  Tensor& table(int agent) { return theta[shared ? 0 : agent]; }

  TabularPolicy policy(const TabularMdp& mdp) const {
    TabularPolicy p;
    for (int i = 0; i < mdp.n_agents; ++i) {
      const Tensor& th = table(i);
      Tensor probs(th.rows(), th.cols());
      for (std::int64_t s = 0; s < th.rows(); ++s) {
        double mx = th.at(s, 0);
        for (std::int64_t a = 1; a < th.cols(); ++a)
          mx = std::max(mx, th.at(s, a));
        double z = 0.0;
        for (std::int64_t a = 0; a < th.cols(); ++a)
          z += std::exp(th.at(s, a) - mx);
        for (std::int64_t a = 0; a < th.cols(); ++a)
          probs.at(s, a) = std::exp(th.at(s, a) - mx) / z;
      }
      p.probs.push_back(std::move(probs));
    }
    return p;
  }
};

namespace detail {

// d/dtheta(s, c) of sum_b pi(b|s) w(s, b) for softmax logits.
inline void add_linear_softmax_grad(const Tensor& pi, const Tensor& w,
                                    double coeff, Tensor& grad) {
  for (std::int64_t s = 0; s < pi.rows(); ++s) {
    double avg = 0.0;
    for (std::int64_t b = 0; b < pi.cols(); ++b)
      avg += pi.at(s, b) * w.at(s, b);
    for (std::int64_t c = 0; c < pi.cols(); ++c)
      grad.at(s, c) += coeff * pi.at(s, c) * (w.at(s, c) - avg);
  }
}

// Subgradient of max_s KL(pi_old(.|s) || pi(.|s)) at the argmax state.
inline void add_klmax_grad(const Tensor& pi_old, const Tensor& pi,
                           double coeff, Tensor& grad) {
  int worst_s = 0;
  double worst = -1.0;
  for (std::int64_t s = 0; s < pi.rows(); ++s) {
    double kl = 0.0;
    for (std::int64_t a = 0; a < pi.cols(); ++a)
      if (pi_old.at(s, a) > 0.0)
        kl += pi_old.at(s, a) * std::log(pi_old.at(s, a) / pi.at(s, a));
    if (kl > worst) {
      worst = kl;
      worst_s = static_cast<int>(s);
    }
  }
  for (std::int64_t c = 0; c < pi.cols(); ++c)
    grad.at(worst_s, c) += coeff * (pi.at(worst_s, c) - pi_old.at(worst_s, c));
}

// Weights w(s, b) for the linear-in-pi^agent expectation
// sum_s rho(s) sum_a pi_k(a|s) frozen(s, a) (pi^agent(a^agent|s) /
// pi_k^agent(a^agent|s)) split_agent(s, a).
inline Tensor expectation_weights(const TabularMdp& mdp,
                                  const PolicyEvaluation& eval,
                                  const TabularPolicy& pol_k, int agent,
                                  const Tensor& split_part,
                                  const std::vector<double>* frozen) {
  Tensor w(mdp.n_states, mdp.actions[agent]);
  std::vector<int> joint(mdp.n_agents);
  for (int s = 0; s < mdp.n_states; ++s) {
    if (eval.rho[s] == 0.0) continue;
    for (int ja = 0; ja < mdp.joint_actions(); ++ja) {
      const double pk = pol_k.joint_prob(mdp, s, ja);
      if (pk == 0.0) continue;
      mdp.decode(ja, joint);
      const double denom = pol_k.probs[agent].at(s, joint[agent]);
      const double f =
          frozen ? (*frozen)[static_cast<std::size_t>(s) * mdp.joint_actions() + ja]
                 : 1.0;
      w.at(s, joint[agent]) +=
          eval.rho[s] * pk * f * split_part.at(s, ja) / denom;
    }
  }
  return w;
}

}  // namespace detail

struct PenaltyIterationResult {
  TabularLogits logits;
  bool accepted = false;
  bool condition_met = false;
  double j_before = 0.0;
  double j_after = 0.0;
  double bound = 0.0;
};

// One exact full-pipeline iteration on softmax logits: penalty-gradient
// ascent on the independent objectives, the exact mu constraint check,
// penalty ascent on the dependent objectives, then an acceptance gate on
// the shared lower bound. The raw step size is scaled by 1/C (the penalty
// curvature scale) and backtracked until a candidate clears the gate, so
// the certificate never depends on the optimizer. Rejection returns the
// input logits unchanged; acceptance certifies J(candidate) >= J(pol_k) up
// to solver precision.
inline PenaltyIterationResult safe_penalty_iteration(
    const TabularMdp& mdp, const TabularLogits& logits_k,
    const PipelineAssignment& assignment, int steps, double step_size) {
  assignment.validate();
  if (assignment.size() != mdp.n_agents)
    throw std::invalid_argument("safe_penalty_iteration: assignment size");

  const TabularPolicy pol_k = logits_k.policy(mdp);
  const PolicyEvaluation eval = evaluate_policy(mdp, pol_k);
  const double c = penalty_coefficient(eval, mdp.gamma);
  const TabularSplit split = TabularSplit::average(eval, mdp.n_agents);

  PenaltyIterationResult out;
  out.logits = logits_k;
  out.j_before = eval.j;
  out.j_after = eval.j;
  out.bound = eval.j;

  if (steps <= 0 || step_size == 0.0) {
    out.accepted = true;
    out.condition_met = true;
    return out;
  }

  auto ascend = [&](TabularLogits& logits, std::span<const int> trained,
                    const std::vector<std::vector<double>>* frozen_per_pipeline,
                    double alpha) {
    for (int step = 0; step < steps; ++step) {
      const TabularPolicy pol = logits.policy(mdp);
      std::vector<Tensor> grad(logits.theta.size());
      for (std::size_t t = 0; t < grad.size(); ++t)
        grad[t] = Tensor(logits.theta[t].rows(), logits.theta[t].cols());
      for (int p = 0; p < mdp.n_agents; ++p) {
        const int agent = trained[p];
        Tensor& g = grad[logits.shared ? 0 : agent];
        const Tensor w = detail::expectation_weights(
            mdp, eval, pol_k, agent, split.parts[agent],
            frozen_per_pipeline ? &(*frozen_per_pipeline)[p] : nullptr);
        detail::add_linear_softmax_grad(pol.probs[agent], w, 1.0, g);
        detail::add_klmax_grad(pol_k.probs[agent], pol.probs[agent], -c, g);
      }
      for (std::size_t t = 0; t < grad.size(); ++t) {
        if (!grad[t].all_finite())
          throw std::runtime_error("safe_penalty_iteration: non-finite gradient");
        for (std::int64_t k = 0; k < grad[t].size(); ++k)
          logits.theta[t][k] += alpha * grad[t][k];
      }
    }
  };

  auto attempt = [&](double alpha, bool& condition_met) {
    // independent step: pipeline p trains its opener i_p
    TabularLogits intermediate = logits_k;
    ascend(intermediate, assignment.i_order, nullptr, alpha);
    const TabularPolicy pol_int = intermediate.policy(mdp);

    // exact dependent-step condition:
    // sum_i mu(pi_int^{-i}) >= sum_i mu(pi_k^{-i})
    double mu_int = 0.0, mu_old = 0.0;
    for (int i = 0; i < mdp.n_agents; ++i) {
      mu_int += mu_exact(mdp, eval, pol_int, pol_int, i, split);
      mu_old += mu_exact(mdp, eval, pol_int, pol_k, i, split);
    }
    condition_met = mu_int >= mu_old;
    if (!condition_met) return intermediate;

    // frozen per-pipeline ratio products:
    // r(pi_int^{-{i_p, j_p}}) * r(pi_int^{i_p})
    std::vector<std::vector<double>> frozen(mdp.n_agents);
    std::vector<int> joint(mdp.n_agents);
    for (int p = 0; p < mdp.n_agents; ++p) {
      frozen[p].assign(
          static_cast<std::size_t>(mdp.n_states) * mdp.joint_actions(), 1.0);
      for (int s = 0; s < mdp.n_states; ++s)
        for (int ja = 0; ja < mdp.joint_actions(); ++ja) {
          mdp.decode(ja, joint);
          double f = 1.0;
          for (int m = 0; m < mdp.n_agents; ++m) {
            if (m == assignment.j_order[p]) continue;
            f *= pol_int.probs[m].at(s, joint[m]) /
                 pol_k.probs[m].at(s, joint[m]);
          }
          frozen[p][static_cast<std::size_t>(s) * mdp.joint_actions() + ja] = f;
        }
    }
    TabularLogits candidate = intermediate;
    ascend(candidate, assignment.j_order, &frozen, alpha);
    return candidate;
  };

  double alpha = step_size / std::max(c, 1.0);
  for (int backtrack = 0; backtrack < 12; ++backtrack, alpha *= 0.5) {
    bool condition_met = false;
    const TabularLogits candidate = attempt(alpha, condition_met);
    const TabularPolicy pol_cand = candidate.policy(mdp);
    const double bound = shared_lower_bound(mdp, eval, pol_k, pol_cand);
    if (bound >= eval.j - 1e-12) {
      out.accepted = true;
      out.condition_met = condition_met;
      out.bound = bound;
      out.logits = candidate;
      out.j_after = evaluate_policy(mdp, pol_cand).j;
      return out;
    }
    out.bound = bound;
  }
  out.accepted = false;
  return out;
}

// ---- JSON description file ----

namespace detail {

inline void read_nested(const nlohmann::json& node, int depth,
                        const std::vector<int>& actions,
                        std::vector<double>& out) {
  if (depth == static_cast<int>(actions.size())) {
    if (node.is_array())
      for (const auto& v : node) out.push_back(v.get<double>());
    else
      out.push_back(node.get<double>());
    return;
  }
  if (!node.is_array() || static_cast<int>(node.size()) != actions[depth])
    throw std::invalid_argument("TabularMdp json: bad nesting");
  for (const auto& child : node) read_nested(child, depth + 1, actions, out);
}

inline nlohmann::json write_nested(const double* data, int depth,
                                   const std::vector<int>& actions,
                                   int leaf_len, int& cursor) {
  if (depth == static_cast<int>(actions.size())) {
    if (leaf_len == 1) return data[cursor++];
    nlohmann::json arr = nlohmann::json::array();
    for (int k = 0; k < leaf_len; ++k) arr.push_back(data[cursor++]);
    return arr;
  }
  nlohmann::json arr = nlohmann::json::array();
  for (int a = 0; a < actions[depth]; ++a)
    arr.push_back(write_nested(data, depth + 1, actions, leaf_len, cursor));
  return arr;
}

}  // namespace detail

inline nlohmann::json TabularMdp::to_json() const {
  nlohmann::json trans = nlohmann::json::array();
  nlohmann::json rew = nlohmann::json::array();
  for (int s = 0; s < n_states; ++s) {
    int cursor = 0;
    trans.push_back(detail::write_nested(
        transition.data.data() + static_cast<std::int64_t>(s) * joint_actions() * n_states,
        0, actions, n_states, cursor));
    cursor = 0;
    rew.push_back(detail::write_nested(
        reward.data.data() + static_cast<std::int64_t>(s) * joint_actions(), 0,
        actions, 1, cursor));
  }
  return {{"n_agents", n_agents}, {"actions", actions},
          {"transition", trans},  {"reward", rew},
          {"gamma", gamma},       {"rho0", rho0}};
}

inline TabularMdp TabularMdp::from_json(const nlohmann::json& j) {
  TabularMdp m;
  m.n_agents = j.at("n_agents").get<int>();
  m.actions = j.at("actions").get<std::vector<int>>();
  m.gamma = j.at("gamma").get<double>();
  m.rho0 = j.at("rho0").get<std::vector<double>>();
  m.n_states = static_cast<int>(m.rho0.size());
  const int a_joint = m.joint_actions();
  const auto& trans = j.at("transition");
  const auto& rew = j.at("reward");
  if (static_cast<int>(trans.size()) != m.n_states ||
      static_cast<int>(rew.size()) != m.n_states)
    throw std::invalid_argument("TabularMdp json: state count mismatch");
  m.transition = Tensor(static_cast<std::int64_t>(m.n_states) * a_joint, m.n_states);
  m.reward = Tensor(m.n_states, a_joint);
  for (int s = 0; s < m.n_states; ++s) {
    std::vector<double> flat;
    detail::read_nested(trans[s], 0, m.actions, flat);
    if (static_cast<int>(flat.size()) != a_joint * m.n_states)
      throw std::invalid_argument("TabularMdp json: transition size");
    for (int k = 0; k < a_joint * m.n_states; ++k)
      m.transition.data[static_cast<std::int64_t>(s) * a_joint * m.n_states + k] = flat[k];
    flat.clear();
    detail::read_nested(rew[s], 0, m.actions, flat);
    if (static_cast<int>(flat.size()) != a_joint)
      throw std::invalid_argument("TabularMdp json: reward size");
    for (int k = 0; k < a_joint; ++k)
      m.reward.data[static_cast<std::int64_t>(s) * a_joint + k] = flat[k];
  }
  m.validate();
  return m;
}

}  // namespace fp3o
