#include <gtest/gtest.h>

#include <cmath>

#include "fp3o/tabular.hpp"
#include "fp3o/updaters.hpp"

namespace fp3o {
namespace {

struct TrainSetup {
  EnvSpec env;
  PolicyEnsemble ens;
  CriticNet critic;
  TrainSetup(Sharing mode, std::uint64_t seed = 11,
             EnvSpec spec = EnvSpec::matrix_default())
      : env(std::move(spec)),
        ens(PolicyEnsemble::make(env, mode, NetConfig{}, seed)),
        critic(CriticNet::make_central(env.state_dim(), NetConfig{}, seed + 1)) {}

  RolloutBuffer rollout(int workers, int horizon, std::uint64_t seed,
                        SplitKind split = SplitKind::average) {
    RolloutBuffer buf = collect(ens, critic, env, workers, horizon, seed);
    gae(buf, 0.99, 0.95);
    normalize_then_split(buf, {split, seed});
    return buf;
  }
};

UpdateConfig small_cfg(Algo algo, Sharing sharing) {
  UpdateConfig cfg;
  cfg.algo = algo;
  cfg.sharing = sharing;
  cfg.ppo_epochs = 2;
  cfg.num_mini_batch = 4;
  return cfg;
}

TEST(Fp3oObjective, ZeroAtOldParameters) {
  Graph g;
  Tensor ones(8, 1);
  ones.fill(1.0);
  Tensor adv(8, 1);
  for (int i = 0; i < 8; ++i) adv[i] = 0.5 * i - 2.0;
  // ratio exp(lp - lp) = 1 exactly
  const VarId lp = g.constant(Tensor::of(8, 1, {-1, -2, -3, -4, -1, -2, -3, -4}));
  const VarId ratio =
      g.exp_(g.add_const(lp, g.value(lp), -1.0));
  const VarId loss = fp3o_objective(g, ratio, ones, ones, adv, 0.2, false, 0.2);
  EXPECT_EQ(g.value(loss)[0], 0.0);
}

TEST(Fp3oObjective, ClippedBranchHandValue) {
  Graph g;
  Tensor ones(1, 1);
  ones.fill(1.0);
  Tensor adv(1, 1);
  adv[0] = 2.0;
  const VarId ratio = g.constant(Tensor::of(1, 1, {1.5}));
  const VarId loss = fp3o_objective(g, ratio, ones, ones, adv, 0.2, false, 0.2);
  // min((1.5 - 1) * 2, (1.2 - 1) * 2) = 0.4, negated
  EXPECT_NEAR(g.value(loss)[0], -0.4, 1e-15);
}

TEST(Fp3oObjective, DoubleClipBoundsOthersRatio) {
  Graph g;
  Tensor rest = Tensor::of(1, 1, {2.0});
  Tensor rj = Tensor::of(1, 1, {1.0});
  Tensor adv = Tensor::of(1, 1, {1.0});
  const VarId ratio = g.constant(Tensor::of(1, 1, {1.0}));
  const VarId loss = fp3o_objective(g, ratio, rest, rj, adv, 0.2, true, 0.2);
  // g = clip(2.0, 0.8, 1.2) = 1.2; (1 * 1.2 - 1) * 1 = 0.2, negated
  EXPECT_NEAR(g.value(loss)[0], -0.2, 1e-15);
}

TEST(Fp3oObjective, IndependentStepGradEqualsPpoClipGrad) {
  Rng rng(41);
  for (int trial = 0; trial < 10; ++trial) {
    TrainSetup s(Sharing::partial, 100 + trial);
    RolloutBuffer buf = s.rollout(1, 32, 7 + trial);
    const std::vector<int> ids = [&] {
      std::vector<int> v(32);
      std::iota(v.begin(), v.end(), 0);
      return v;
    }();
    const int agent = trial % 2;
    const Tensor adv = [&] {
      Tensor t(32, 1);
      for (int i = 0; i < 32; ++i) t[i] = buf.split_adv.at(i, agent);
      return t;
    }();
    Tensor ones(32, 1);
    ones.fill(1.0);

    Graph g1;
    {
      const EvalVars ev =
          evaluate_actions(g1, s.ens, agent, buf.obs[agent], buf.actions[agent]);
      Tensor old_lp(32, 1);
      for (int t = 0; t < 32; ++t) old_lp[t] = buf.old_logprobs.at(t, agent);
      const VarId ratio = g1.exp_(g1.add_const(ev.logprob, old_lp, -1.0));
      g1.backward(fp3o_objective(g1, ratio, ones, ones, adv, 0.2, false, 0.2));
    }
    Graph g2;
    {
      const EvalVars ev =
          evaluate_actions(g2, s.ens, agent, buf.obs[agent], buf.actions[agent]);
      Tensor old_lp(32, 1);
      for (int t = 0; t < 32; ++t) old_lp[t] = buf.old_logprobs.at(t, agent);
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
        EXPECT_LT(std::abs(grad[i] - other[i]) / denom, 1e-10);
      }
    }
  }
}

TEST(ConditionEstimate, TrivialAtUnchangedParameters) {
  TrainSetup s(Sharing::full);
  RolloutBuffer buf = s.rollout(1, 40, 3);
  const ConditionEstimate est =
      condition_estimate(buf, buf.old_logprobs, buf.old_logprobs);
  EXPECT_TRUE(est.condition_met);
  EXPECT_NEAR(est.sum_mu_intermediate, est.sum_mu_old, 1e-12);
}

TEST(ConditionEstimate, AverageSplitReducesToJointRatioForm) {
  TrainSetup s(Sharing::none, 19);
  RolloutBuffer buf = s.rollout(1, 60, 5);
  // fabricate an intermediate snapshot by shifting logprobs
  Tensor snap05 = buf.old_logprobs;
  Rng rng(77);
  for (double& v : snap05.data) v += 0.1 * rng.normal();
  const ConditionEstimate est =
      condition_estimate(buf, buf.old_logprobs, snap05);
  // with the average split, sum_i mean[R_joint * A/n] = mean[R_joint * A]
  double direct = 0.0;
  for (int t = 0; t < buf.size(); ++t) {
    double lr = 0.0;
    for (int j = 0; j < buf.n_agents; ++j)
      lr += snap05.at(t, j) - buf.old_logprobs.at(t, j);
    direct += std::exp(lr) * buf.joint_adv[t];
  }
  direct /= buf.size();
  EXPECT_NEAR(est.sum_mu_intermediate, direct, 1e-10);
}

// Monte Carlo estimator against the exact oracle value on TwoGuard
// tabular policies; states drawn iid from the normalized visitation, so
// the estimator targets (1 - gamma) * mu_exact.
TEST(ConditionEstimate, UnbiasedForExactMuOnTabularPolicies) {
  const TabularMdp mdp = TabularMdp::two_guard();
  Rng rng(53);
  const TabularPolicy pol_k = TabularPolicy::perturbed(
      mdp, TabularPolicy::uniform(mdp), rng, 0.2);
  const TabularPolicy pol_int = TabularPolicy::perturbed(mdp, pol_k, rng, 0.25);
  const PolicyEvaluation eval = evaluate_policy(mdp, pol_k);
  const TabularSplit split = TabularSplit::average(eval, 2);

  double mu_int_exact = 0.0, mu_old_exact = 0.0;
  for (int i = 0; i < 2; ++i) {
    mu_int_exact += mu_exact(mdp, eval, pol_int, pol_int, i, split);
    mu_old_exact += mu_exact(mdp, eval, pol_int, pol_k, i, split);
  }
  const double norm = 1.0 - mdp.gamma;
  std::vector<double> rho_norm = {eval.rho[0] * norm, eval.rho[1] * norm};

  const int samples = 20000, resamples = 20;
  double sum_int = 0.0, sum_int_sq = 0.0, sum_old = 0.0;
  for (int r = 0; r < resamples; ++r) {
    RolloutBuffer buf;
    buf.n_agents = 2;
    buf.n_workers = 1;
    buf.horizon = samples;
    buf.old_logprobs = Tensor(samples, 2);
    Tensor snap05(samples, 2);
    buf.split_adv = Tensor(samples, 2);
    for (int t = 0; t < samples; ++t) {
      const int s = rng.categorical(rho_norm);
      int acts[2];
      for (int i = 0; i < 2; ++i) {
        std::span<const double> row(
            pol_k.probs[i].data.data() + static_cast<std::int64_t>(s) * 2, 2);
        acts[i] = rng.categorical(row);
        buf.old_logprobs.at(t, i) = std::log(pol_k.probs[i].at(s, acts[i]));
        snap05.at(t, i) = std::log(pol_int.probs[i].at(s, acts[i]));
      }
      const int ja = mdp.encode(std::vector<int>{acts[0], acts[1]});
      for (int i = 0; i < 2; ++i)
        buf.split_adv.at(t, i) = split.parts[i].at(s, ja);
    }
    const ConditionEstimate est =
        condition_estimate(buf, buf.old_logprobs, snap05);
    sum_int += est.sum_mu_intermediate;
    sum_int_sq += est.sum_mu_intermediate * est.sum_mu_intermediate;
    sum_old += est.sum_mu_old;
  }
  const double mean_int = sum_int / resamples;
  const double var_int =
      (sum_int_sq - resamples * mean_int * mean_int) / (resamples - 1);
  const double se_int = std::sqrt(var_int / resamples);
  EXPECT_LT(std::abs(mean_int - norm * mu_int_exact), 4.0 * se_int);
  EXPECT_NEAR(sum_old / resamples, norm * mu_old_exact, 0.01);
}

TEST(Fp3oIteration, ZeroLearningRateIsIdentity) {
  TrainSetup s(Sharing::full);
  RolloutBuffer buf = s.rollout(2, 20, 9);
  UpdateConfig cfg = small_cfg(Algo::fp3o, Sharing::full);
  cfg.actor_lr = 0.0;
  cfg.critic_lr = 0.0;
  const Tensor before = s.ens.store.slot(0).value;
  Rng rng(1);
  const IterationReport rep = fp3o_iteration(
      s.ens, s.critic, buf, nonoverlapping_selection(2), cfg, rng);
  EXPECT_TRUE(rep.condition_met);
  EXPECT_TRUE(rep.matching);
  for (double k : rep.kl_mean) EXPECT_DOUBLE_EQ(k, 0.0);
  for (std::int64_t i = 0; i < before.size(); ++i)
    EXPECT_EQ(s.ens.store.slot(0).value[i], before[i]);
}

TEST(Fp3oIteration, EveryAgentParameterChangesOncePerStep) {
  TrainSetup s(Sharing::none, 23);
  RolloutBuffer buf = s.rollout(2, 40, 13);
  UpdateConfig cfg = small_cfg(Algo::fp3o, Sharing::none);
  cfg.actor_lr = 1e-3;
  const int head = s.ens.spec.layer_count() - 1;
  std::vector<Tensor> before;
  for (int a = 0; a < 2; ++a)
    before.push_back(s.ens.store.slot(s.ens.store.slot_of(a, head)).value);
  Rng rng(3);
  const IterationReport rep = fp3o_iteration(
      s.ens, s.critic, buf, nonoverlapping_selection(2), cfg, rng);
  EXPECT_FALSE(rep.aborted);
  for (int a = 0; a < 2; ++a) {
    const Tensor& after =
        s.ens.store.slot(s.ens.store.slot_of(a, head)).value;
    bool changed = false;
    for (std::int64_t i = 0; i < after.size(); ++i)
      if (after[i] != before[a][i]) changed = true;
    EXPECT_TRUE(changed) << "agent " << a;
  }
}

TEST(Fp3oIteration, DeterministicReports) {
  auto run = [] {
    TrainSetup s(Sharing::partial, 31);
    RolloutBuffer buf = s.rollout(2, 30, 17);
    UpdateConfig cfg = small_cfg(Algo::fp3o, Sharing::partial);
    Rng rng(5);
    return fp3o_iteration(s.ens, s.critic, buf, nonoverlapping_selection(2),
                          cfg, rng);
  };
  const IterationReport a = run(), b = run();
  EXPECT_EQ(a.actor_loss, b.actor_loss);
  EXPECT_EQ(a.critic_loss, b.critic_loss);
  EXPECT_EQ(a.sum_mu_intermediate, b.sum_mu_intermediate);
  EXPECT_EQ(a.kl_mean, b.kl_mean);
  EXPECT_EQ(a.condition_met, b.condition_met);
}

TEST(Fp3oIteration, InstepOnlyNeverRunsDependentStep) {
  TrainSetup s(Sharing::full, 37);
  RolloutBuffer buf = s.rollout(2, 30, 19);
  UpdateConfig cfg = small_cfg(Algo::fp3o_instep_only, Sharing::full);
  Rng rng(7);
  const IterationReport rep = fp3o_iteration(
      s.ens, s.critic, buf, nonoverlapping_selection(2), cfg, rng, true);
  EXPECT_FALSE(rep.dependent_executed);
  EXPECT_TRUE(rep.matching);  // theta_{k+1} == theta_{k+0.5}
}

TEST(HappoIteration, ZeroLearningRateGivesZeroKl) {
  TrainSetup s(Sharing::full, 41);
  RolloutBuffer buf = s.rollout(1, 40, 21);
  UpdateConfig cfg = small_cfg(Algo::happo, Sharing::full);
  cfg.actor_lr = 0.0;
  cfg.critic_lr = 0.0;
  Rng rng(9);
  const IterationReport rep = happo_iteration(s.ens, s.critic, buf, cfg, rng);
  for (double k : rep.kl_mean) EXPECT_DOUBLE_EQ(k, 0.0);
  for (double k : rep.kl_max) EXPECT_DOUBLE_EQ(k, 0.0);
}

TEST(HappoIteration, SingleAgentActorMatchesMappo) {
  EnvSpec env = EnvSpec::matrix_default();
  env.n_agents = 1;
  env.actions = {3};
  env.payoff = {1.0, 0.3, 0.0};
  auto make = [&] { return TrainSetup(Sharing::none, 51, env); };
  TrainSetup a = make(), b = make();
  RolloutBuffer buf_a = a.rollout(1, 32, 23);
  RolloutBuffer buf_b = b.rollout(1, 32, 23);
  UpdateConfig cfg = small_cfg(Algo::happo, Sharing::none);
  Rng ra(3), rb(3);
  happo_iteration(a.ens, a.critic, buf_a, cfg, ra);
  mappo_ippo_iteration(b.ens, b.critic, buf_b, cfg, rb, false);
  // with one agent the running factor is identically 1, so the actor
  // updates coincide exactly
  for (int i = 0; i < a.ens.store.slot_count(); ++i)
    for (std::int64_t k = 0; k < a.ens.store.slot(i).value.size(); ++k)
      EXPECT_EQ(a.ens.store.slot(i).value[k], b.ens.store.slot(i).value[k]);
}

TEST(MappoIppo, ClipBranchSelectionOnNegativeAdvantage) {
  // adv < 0 and ratio 0.5: min picks the clipped branch value 0.8 * adv
  Graph g;
  const VarId ratio = g.constant(Tensor::of(1, 1, {0.5}));
  Tensor adv = Tensor::of(1, 1, {-1.0});
  const VarId s1 = g.mul_const(ratio, adv);
  const VarId s2 = g.mul_const(g.clip(ratio, 0.8, 1.2), adv);
  EXPECT_DOUBLE_EQ(g.value(g.minimum(s1, s2))[0], -0.8);
}

TEST(MappoIppo, IppoUsesPerAgentValueHeads) {
  EnvSpec env = EnvSpec::matrix_default();
  PolicyEnsemble ens = PolicyEnsemble::make(env, Sharing::none, NetConfig{}, 5);
  CriticNet critic = CriticNet::make_local(env.obs_dim(), env.n_agents,
                                           Sharing::none, NetConfig{}, 6);
  RolloutBuffer buf = collect(ens, critic, env, 1, 32, 3);
  gae(buf);
  normalize_then_split(buf, {SplitKind::average, 0});
  UpdateConfig cfg = small_cfg(Algo::ippo, Sharing::none);
  Rng rng(11);
  const IterationReport rep =
      mappo_ippo_iteration(ens, critic, buf, cfg, rng, true);
  EXPECT_FALSE(rep.aborted);
  EXPECT_GE(rep.kl_mean.size(), 2u);
}

TEST(Coppo, RejectsNonFullSharing) {
  TrainSetup s(Sharing::partial, 61);
  RolloutBuffer buf = s.rollout(1, 20, 29);
  UpdateConfig cfg = small_cfg(Algo::coppo, Sharing::partial);
  Rng rng(13);
  EXPECT_THROW(coppo_iteration(s.ens, s.critic, buf, cfg, rng),
               std::invalid_argument);
}

TEST(Coppo, SingleAgentReducesToPpo) {
  EnvSpec env = EnvSpec::matrix_default();
  env.n_agents = 1;
  env.actions = {3};
  env.payoff = {1.0, 0.3, 0.0};
  auto make = [&] { return TrainSetup(Sharing::full, 71, env); };
  TrainSetup a = make(), b = make();
  RolloutBuffer buf_a = a.rollout(1, 32, 31);
  RolloutBuffer buf_b = b.rollout(1, 32, 31);
  UpdateConfig cfg = small_cfg(Algo::coppo, Sharing::full);
  Rng ra(3), rb(3);
  coppo_iteration(a.ens, a.critic, buf_a, cfg, ra);
  cfg.algo = Algo::mappo;
  mappo_ippo_iteration(b.ens, b.critic, buf_b, cfg, rb, false);
  for (int i = 0; i < a.ens.store.slot_count(); ++i)
    for (std::int64_t k = 0; k < a.ens.store.slot(i).value.size(); ++k)
      EXPECT_EQ(a.ens.store.slot(i).value[k], b.ens.store.slot(i).value[k]);
}

TEST(SnapshotProbs, ImmutableAcrossParameterUpdates) {
  TrainSetup s(Sharing::full, 91);
  RolloutBuffer buf = s.rollout(1, 30, 41);
  const Tensor snap = snapshot_probs(s.ens, buf);
  const Tensor copy = snap;
  UpdateConfig cfg = small_cfg(Algo::fp3o, Sharing::full);
  Rng rng(17);
  fp3o_iteration(s.ens, s.critic, buf, nonoverlapping_selection(2), cfg, rng);
  for (std::int64_t i = 0; i < snap.size(); ++i)
    EXPECT_EQ(snap[i], copy[i]);
  // the intermediate parameters moved, so a fresh snapshot differs
  const Tensor snap2 = snapshot_probs(s.ens, buf);
  bool differs = false;
  for (std::int64_t i = 0; i < snap.size(); ++i)
    if (snap2[i] != snap[i]) differs = true;
  EXPECT_TRUE(differs);
  // ratios against the old snapshot stay finite and nonnegative
  for (std::int64_t i = 0; i < snap.size(); ++i) {
    const double ratio = std::exp(snap2[i] - snap[i]);
    EXPECT_TRUE(std::isfinite(ratio));
    EXPECT_GE(ratio, 0.0);
  }
}

TEST(Fp3oIteration, DoubleClipVariantRunsClean) {
  TrainSetup s(Sharing::full, 93);
  RolloutBuffer buf = s.rollout(2, 30, 43);
  UpdateConfig cfg = small_cfg(Algo::fp3o, Sharing::full);
  cfg.double_clip = true;
  cfg.ppo_clip2 = 0.2;
  Rng rng(19);
  const IterationReport rep = fp3o_iteration(
      s.ens, s.critic, buf, nonoverlapping_selection(2), cfg, rng);
  EXPECT_FALSE(rep.aborted);
  for (double k : rep.kl_mean) EXPECT_GE(k, 0.0);
}

TEST(FullSharing, PipelineLossesAccumulateIntoSharedSlots) {
  // gradient of the 1/n-summed pipeline losses on a shared store equals
  // the explicit sum of per-pipeline gradients computed separately
  TrainSetup s(Sharing::full, 81);
  RolloutBuffer buf = s.rollout(1, 24, 37);
  const std::vector<int> ids = [&] {
    std::vector<int> v(24);
    std::iota(v.begin(), v.end(), 0);
    return v;
  }();
  Tensor ones(24, 1);
  ones.fill(1.0);

  auto pipeline_loss = [&](Graph& g, int agent) {
    const EvalVars ev =
        evaluate_actions(g, s.ens, agent, buf.obs[agent], buf.actions[agent]);
    Tensor old_lp(24, 1);
    for (int t = 0; t < 24; ++t) old_lp[t] = buf.old_logprobs.at(t, agent);
    const VarId ratio = g.exp_(g.add_const(ev.logprob, old_lp, -1.0));
    Tensor adv(24, 1);
    for (int t = 0; t < 24; ++t) adv[t] = buf.split_adv.at(t, agent);
    return fp3o_objective(g, ratio, ones, ones, adv, 0.2, false, 0.2);
  };

  Graph joint;
  joint.backward(joint.add(pipeline_loss(joint, 0), pipeline_loss(joint, 1)));
  Graph g0;
  g0.backward(pipeline_loss(g0, 0));
  Graph g1;
  g1.backward(pipeline_loss(g1, 1));

  for (const auto& [slot, grad] : joint.slot_grads()) {
    for (std::int64_t i = 0; i < grad.size(); ++i) {
      const double a = g0.slot_grads().count(slot) ? g0.slot_grads().at(slot)[i] : 0.0;
      const double b = g1.slot_grads().count(slot) ? g1.slot_grads().at(slot)[i] : 0.0;
      EXPECT_NEAR(grad[i], a + b, 1e-12);
    }
  }
}

}  // namespace
}  // namespace fp3o
