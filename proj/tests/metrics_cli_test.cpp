#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fp3o/plot.hpp"
#include "fp3o/train.hpp"

namespace fp3o {
namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "fp3o_test" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

RunConfig tiny_matrix_config(Algo algo, Sharing sharing, std::uint64_t seed,
                             const fs::path& out) {
  RunConfig cfg;
  cfg.env = EnvSpec::matrix_default();
  cfg.upd.algo = algo;
  cfg.upd.sharing = sharing;
  cfg.upd.num_mini_batch = 8;
  cfg.rollout_threads = 2;
  cfg.buffer_length = 50;
  cfg.total_steps = 600;
  cfg.eval_interval = 2;
  cfg.eval_episodes = 8;
  cfg.seed = seed;
  cfg.out_dir = out.string();
  return cfg;
}

TEST(MatchingDegree, Arithmetic) {
  std::vector<MetricRecord> recs(4);
  for (auto& r : recs) r.matching = true;
  EXPECT_DOUBLE_EQ(matching_degree(recs), 100.0);
  recs[2].matching = false;
  EXPECT_DOUBLE_EQ(matching_degree(recs), 75.0);
  // order invariance
  std::swap(recs[0], recs[2]);
  EXPECT_DOUBLE_EQ(matching_degree(recs), 75.0);
  EXPECT_THROW(matching_degree({}), std::invalid_argument);
}

TEST(MetricRecord, JsonRoundTrip) {
  MetricRecord r;
  r.iteration = 7;
  r.env_steps = 700;
  r.eval_mean = 3.25;
  r.condition_met = false;
  r.matching = false;
  r.kl_mean = {0.1, 0.2};
  r.algo = "fp3o";
  r.seed = 42;
  const MetricRecord back = MetricRecord::from_json(r.to_json());
  EXPECT_EQ(back.iteration, 7);
  EXPECT_EQ(back.env_steps, 700);
  EXPECT_DOUBLE_EQ(*back.eval_mean, 3.25);
  EXPECT_FALSE(back.eval_std.has_value());
  EXPECT_FALSE(back.condition_met);
  EXPECT_EQ(back.kl_mean, (std::vector<double>{0.1, 0.2}));
  EXPECT_EQ(back.seed, 42u);
}

TEST(KlReport, SingleIterationQuantilesEqualValue) {
  MetricRecord r;
  r.kl_mean = {0.3, 0.5};
  r.kl_max = {0.4, 0.9};
  const auto rows = kl_report({r});
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_DOUBLE_EQ(rows[0].median, 0.3);
  EXPECT_DOUBLE_EQ(rows[0].p90, 0.3);
  EXPECT_DOUBLE_EQ(rows[0].max, 0.4);
  EXPECT_DOUBLE_EQ(rows[1].median, 0.5);
  std::ostringstream os;
  kl_report_csv(rows, os);
  EXPECT_NE(os.str().find("agent,median,p90,max"), std::string::npos);
}

TEST(Train, ByteIdenticalMetricsForSameSeed) {
  const fs::path a = temp_dir("det_a"), b = temp_dir("det_b");
  train(tiny_matrix_config(Algo::fp3o, Sharing::full, 3, a));
  train(tiny_matrix_config(Algo::fp3o, Sharing::full, 3, b));
  EXPECT_EQ(slurp(a / "metrics.jsonl"), slurp(b / "metrics.jsonl"));
  EXPECT_EQ(slurp(a / "checkpoint.fp3o"), slurp(b / "checkpoint.fp3o"));
  EXPECT_EQ(slurp(a / "kl_summary.csv"), slurp(b / "kl_summary.csv"));
}

TEST(Train, ZeroStepsEmitsInitialEvaluationOnly) {
  const fs::path out = temp_dir("zero_steps");
  RunConfig cfg = tiny_matrix_config(Algo::mappo, Sharing::full, 5, out);
  cfg.total_steps = 0;
  const TrainResult res = train(cfg);
  EXPECT_EQ(res.iterations, 0);
  ASSERT_EQ(res.records.size(), 1u);
  EXPECT_EQ(res.records[0].env_steps, 0);
  EXPECT_TRUE(res.records[0].eval_mean.has_value());
}

TEST(Train, StrictlyIncreasingStepCounter) {
  const fs::path out = temp_dir("steps");
  const TrainResult res =
      train(tiny_matrix_config(Algo::fp3o, Sharing::partial, 7, out));
  std::int64_t prev = 0;
  for (const MetricRecord& r : res.records) {
    EXPECT_GT(r.env_steps, prev);
    prev = r.env_steps;
  }
}

TEST(Train, DumpBufferWritesCsv) {
  const fs::path out = temp_dir("dump");
  RunConfig cfg = tiny_matrix_config(Algo::mappo, Sharing::none, 9, out);
  cfg.dump_buffer = true;
  train(cfg);
  EXPECT_TRUE(fs::exists(out / "buffer.csv"));
  std::ifstream in(out / "buffer.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "worker,t,agent,action,reward,value,adv,adv_i");
}

TEST(Train, EarlyStopCallback) {
  const fs::path out = temp_dir("early");
  RunConfig cfg = tiny_matrix_config(Algo::fp3o, Sharing::full, 11, out);
  cfg.total_steps = 100000;
  const TrainResult res = train(
      cfg, [](const MetricRecord& r) { return r.iteration >= 3; });
  EXPECT_EQ(res.iterations, 4);
}

TEST(Checkpoint, RoundTripPreservesParametersAndEval) {
  const fs::path out = temp_dir("ckpt");
  RunConfig cfg = tiny_matrix_config(Algo::fp3o, Sharing::partial, 13, out);
  const TrainResult res = train(cfg);
  const Checkpoint ck = load_checkpoint(res.checkpoint_path);
  EXPECT_EQ(ck.ens.n_agents, 2);
  const EnvSpec env = EnvSpec::from_json(ck.manifest.at("env"));
  const EvalResult from_ckpt = evaluate(ck.ens, env, 8, 1);
  EXPECT_DOUBLE_EQ(from_ckpt.mean, *res.final_eval_mean);
}

TEST(Evaluate, ScriptedOptimalPolicyHitsOracleReturn) {
  const EnvSpec env = EnvSpec::matrix_default();
  PolicyEnsemble ens = PolicyEnsemble::make(env, Sharing::none, NetConfig{}, 3);
  for (int i = 0; i < ens.store.slot_count(); ++i)
    ens.store.slot(i).value.fill(0.0);
  // force argmax to the jointly optimal action 0 for both agents
  const int head = ens.spec.layer_count() - 1;
  for (int agent = 0; agent < 2; ++agent) {
    Tensor& w = ens.store.slot(ens.store.slot_of(agent, head)).value;
    w.at(ens.spec.layer_in(head), 0) = 5.0;
  }
  const EvalResult res = evaluate(ens, env, 8, 1);
  EXPECT_DOUBLE_EQ(res.mean, optimal_return(env));
  EXPECT_DOUBLE_EQ(res.std_dev, 0.0);
}

TEST(Evaluate, UniformRandomPolicyMatchesClosedFormMean) {
  const EnvSpec env = EnvSpec::matrix_default();
  PolicyEnsemble ens = PolicyEnsemble::make(env, Sharing::none, NetConfig{}, 3);
  for (int i = 0; i < ens.store.slot_count(); ++i)
    ens.store.slot(i).value.fill(0.0);
  const int episodes = 1000;
  const EvalResult res = evaluate(ens, env, episodes, 7, /*greedy=*/false);
  // per-step mean payoff = (1.0 + 0.8 + 0.8) / 9 over 10 steps
  const double expect = 10.0 * (1.0 + 0.8 + 0.8) / 9.0;
  const double se = res.std_dev / std::sqrt(static_cast<double>(episodes));
  EXPECT_LT(std::abs(res.mean - expect), 3.0 * se);
}

TEST(Evaluate, RejectsZeroEpisodes) {
  const EnvSpec env = EnvSpec::matrix_default();
  PolicyEnsemble ens = PolicyEnsemble::make(env, Sharing::none, NetConfig{}, 3);
  EXPECT_THROW(evaluate(ens, env, 0, 1), std::invalid_argument);
}

TEST(Train, ZeroLearningRateHasFullMatchingDegree) {
  const fs::path out = temp_dir("lr0");
  RunConfig cfg = tiny_matrix_config(Algo::fp3o, Sharing::full, 15, out);
  cfg.upd.actor_lr = 0.0;
  cfg.upd.critic_lr = 0.0;
  const TrainResult res = train(cfg);
  ASSERT_TRUE(res.matching_degree_pct.has_value());
  EXPECT_DOUBLE_EQ(*res.matching_degree_pct, 100.0);
  for (const MetricRecord& r : res.records) {
    EXPECT_TRUE(r.condition_met);
    EXPECT_TRUE(r.constraint_truth);
  }
}

TEST(Plot, EmptyInputGivesEmptyAxesSvg) {
  const fs::path in = temp_dir("plot_empty_in");
  const fs::path out = temp_dir("plot_empty_out");
  const PlotResult res = plot_runs(in, out);
  EXPECT_EQ(res.series, 0);
  EXPECT_TRUE(fs::exists(out / "eval_return.svg"));
  const std::string svg = slurp(out / "eval_return.svg");
  EXPECT_NE(svg.find("<svg"), std::string::npos);
  EXPECT_NE(svg.find("no data"), std::string::npos);
}

TEST(Plot, TwoSeedsConstantReturnProduceOneSeries) {
  const fs::path in = temp_dir("plot_in");
  for (int seed = 0; seed < 2; ++seed) {
    std::ofstream out(in / ("run" + std::to_string(seed) + ".jsonl"));
    for (int it = 0; it < 5; ++it) {
      MetricRecord r;
      r.iteration = it;
      r.env_steps = 100 * (it + 1);
      r.eval_mean = 1.0;
      r.eval_std = 0.0;
      r.env = "matrix";
      r.algo = "fp3o";
      r.sharing = "full";
      r.seed = seed;
      write_jsonl_line(out, r);
    }
  }
  // malformed line is skipped with a warning
  {
    std::ofstream out(in / "broken.jsonl", std::ios::app);
    out << "{not json}\n";
  }
  const fs::path outdir = temp_dir("plot_out");
  const PlotResult res = plot_runs(in, outdir);
  EXPECT_EQ(res.warnings, 1);
  EXPECT_GE(res.series, 1);
  const std::string svg = slurp(outdir / "eval_return.svg");
  EXPECT_NE(svg.find("matrix fp3o full"), std::string::npos);
  EXPECT_NE(svg.find("polyline"), std::string::npos);
}

TEST(Plot, Fp3oVsMappoOverlayHasTwoSeries) {
  const fs::path in = temp_dir("plot_overlay_in");
  fs::create_directories(in / "a");
  fs::create_directories(in / "b");
  for (const std::string algo : {"fp3o", "mappo"}) {
    std::ofstream out(in / (algo == "fp3o" ? "a" : "b") / "metrics.jsonl");
    for (int it = 0; it < 4; ++it) {
      MetricRecord r;
      r.iteration = it;
      r.env_steps = 50 * (it + 1);
      r.eval_mean = algo == "fp3o" ? 2.0 : 1.0;
      r.env = "matrix";
      r.algo = algo;
      r.sharing = "full";
      write_jsonl_line(out, r);
    }
  }
  const fs::path outdir = temp_dir("plot_overlay_out");
  const PlotResult res = plot_runs(in, outdir);
  EXPECT_EQ(res.series, 2);
  const std::string svg = slurp(outdir / "eval_return.svg");
  EXPECT_NE(svg.find("matrix fp3o full"), std::string::npos);
  EXPECT_NE(svg.find("matrix mappo full"), std::string::npos);
}

TEST(RunConfig, JsonRoundTripKeepsTableKeys) {
  RunConfig cfg;
  cfg.upd.algo = Algo::happo;
  cfg.upd.sharing = Sharing::partial;
  cfg.gae_lamda = 0.9;
  cfg.upd.entropy_coef = 0.01;
  const nlohmann::json j = cfg.to_json();
  EXPECT_TRUE(j.contains("gae_lamda"));
  EXPECT_TRUE(j.contains("num_mini_batch"));
  EXPECT_TRUE(j.contains("ppo_epochs"));
  const RunConfig back = RunConfig::from_json(j);
  EXPECT_EQ(back.upd.algo, Algo::happo);
  EXPECT_EQ(back.upd.sharing, Sharing::partial);
  EXPECT_DOUBLE_EQ(back.gae_lamda, 0.9);
  EXPECT_DOUBLE_EQ(back.upd.entropy_coef, 0.01);
}

TEST(Train, FewerSamplesThanMinibatchesRejected) {
  const fs::path out = temp_dir("reject");
  RunConfig cfg = tiny_matrix_config(Algo::fp3o, Sharing::full, 17, out);
  cfg.rollout_threads = 1;
  cfg.buffer_length = 10;
  cfg.upd.num_mini_batch = 32;
  EXPECT_THROW(train(cfg), std::invalid_argument);
}

}  // namespace
}  // namespace fp3o
