#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fp3o/updaters.hpp"

namespace fp3o {

// One JSONL record per training iteration. The run tags (env, algo,
// sharing, seed) ride along so plots can group files without sidecar
// metadata.
struct MetricRecord {
  int iteration = 0;
  std::int64_t env_steps = 0;
  std::optional<double> eval_mean;
  std::optional<double> eval_std;
  bool condition_met = true;
  bool dependent_executed = false;
  bool constraint_truth = true;
  bool matching = true;
  double sum_mu_intermediate = 0.0;
  double sum_mu_old = 0.0;
  double sum_mu_final = 0.0;
  std::vector<double> kl_mean, kl_max;
  double actor_loss = 0.0;
  double critic_loss = 0.0;
  double entropy = 0.0;
  bool aborted = false;

  std::string env, algo, sharing;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const {
    nlohmann::json j{{"iteration", iteration},
                     {"env_steps", env_steps},
                     {"condition_met", condition_met},
                     {"dependent_executed", dependent_executed},
                     {"constraint_truth", constraint_truth},
                     {"matching", matching},
                     {"sum_mu_intermediate", sum_mu_intermediate},
                     {"sum_mu_old", sum_mu_old},
                     {"sum_mu_final", sum_mu_final},
                     {"kl_mean", kl_mean},
                     {"kl_max", kl_max},
                     {"actor_loss", actor_loss},
                     {"critic_loss", critic_loss},
                     {"entropy", entropy},
                     {"aborted", aborted},
                     {"env", env},
                     {"algo", algo},
                     {"sharing", sharing},
                     {"seed", seed}};
    j["eval_mean"] = eval_mean ? nlohmann::json(*eval_mean) : nlohmann::json();
    j["eval_std"] = eval_std ? nlohmann::json(*eval_std) : nlohmann::json();
    return j;
  }

  static MetricRecord from_json(const nlohmann::json& j) {
    MetricRecord r;
    r.iteration = j.at("iteration").get<int>();
    r.env_steps = j.at("env_steps").get<std::int64_t>();
    if (j.contains("eval_mean") && !j.at("eval_mean").is_null())
      r.eval_mean = j.at("eval_mean").get<double>();
    if (j.contains("eval_std") && !j.at("eval_std").is_null())
      r.eval_std = j.at("eval_std").get<double>();
    r.condition_met = j.value("condition_met", true);
    r.dependent_executed = j.value("dependent_executed", false);
    r.constraint_truth = j.value("constraint_truth", true);
    r.matching = j.value("matching", true);
    r.sum_mu_intermediate = j.value("sum_mu_intermediate", 0.0);
    r.sum_mu_old = j.value("sum_mu_old", 0.0);
    r.sum_mu_final = j.value("sum_mu_final", 0.0);
    r.kl_mean = j.value("kl_mean", std::vector<double>{});
    r.kl_max = j.value("kl_max", std::vector<double>{});
    r.actor_loss = j.value("actor_loss", 0.0);
    r.critic_loss = j.value("critic_loss", 0.0);
    r.entropy = j.value("entropy", 0.0);
    r.aborted = j.value("aborted", false);
    r.env = j.value("env", "");
    r.algo = j.value("algo", "");
    r.sharing = j.value("sharing", "");
    r.seed = j.value("seed", std::uint64_t{0});
    return r;
  }

  void fill_from(const IterationReport& rep) {
    condition_met = rep.condition_met;
    dependent_executed = rep.dependent_executed;
    constraint_truth = rep.constraint_truth;
    matching = rep.matching;
    sum_mu_intermediate = rep.sum_mu_intermediate;
    sum_mu_old = rep.sum_mu_old;
    sum_mu_final = rep.sum_mu_final;
    kl_mean = rep.kl_mean;
    kl_max = rep.kl_max;
    actor_loss = rep.actor_loss;
    critic_loss = rep.critic_loss;
    entropy = rep.entropy;
    aborted = rep.aborted;
  }
};

inline void write_jsonl_line(std::ostream& out, const MetricRecord& r) {
  out << r.to_json().dump() << '\n';
}

// Line-by-line parse; malformed lines are skipped and counted.
inline std::vector<MetricRecord> read_jsonl(std::istream& in,
                                            int* warnings = nullptr) {
  std::vector<MetricRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(MetricRecord::from_json(nlohmann::json::parse(line)));
    } catch (const std::exception&) {
      if (warnings) ++*warnings;
    }
  }
  return out;
}

// Percentage of iterations whose condition truth-value agrees with the
// post-hoc constraint truth-value. Order-invariant by construction.
inline double matching_degree(const std::vector<MetricRecord>& records) {
  if (records.empty())
    throw std::invalid_argument("matching_degree: no iterations");
  int n_match = 0;
  for (const MetricRecord& r : records)
    if (r.matching) ++n_match;
  return 100.0 * n_match / static_cast<double>(records.size());
}

struct KlQuantiles {
  int agent = 0;
  double median = 0.0;
  double p90 = 0.0;
  double max = 0.0;
};

// Nearest-rank quantiles of the per-iteration mean KL, per agent; max is
// taken over the per-iteration max KL.
inline std::vector<KlQuantiles> kl_report(
    const std::vector<MetricRecord>& records) {
  std::size_t n_agents = 0;
  for (const MetricRecord& r : records)
    n_agents = std::max(n_agents, r.kl_mean.size());
  std::vector<KlQuantiles> out;
  for (std::size_t agent = 0; agent < n_agents; ++agent) {
    std::vector<double> means;
    double worst = 0.0;
    for (const MetricRecord& r : records) {
      if (agent < r.kl_mean.size()) means.push_back(r.kl_mean[agent]);
      if (agent < r.kl_max.size()) worst = std::max(worst, r.kl_max[agent]);
    }
    if (means.empty()) continue;
    std::sort(means.begin(), means.end());
    auto rank = [&](double q) {
      const std::size_t idx = static_cast<std::size_t>(
          std::ceil(q * static_cast<double>(means.size())));
      return means[std::min(means.size() - 1, idx > 0 ? idx - 1 : 0)];
    };
    out.push_back({static_cast<int>(agent), rank(0.5), rank(0.9), worst});
  }
  return out;
}

inline void kl_report_csv(const std::vector<KlQuantiles>& rows,
                          std::ostream& out) {
  out << "agent,median,p90,max\n";
  char line[128];
  for (const KlQuantiles& r : rows) {
    std::snprintf(line, sizeof(line), "%d,%.17g,%.17g,%.17g\n", r.agent,
                  r.median, r.p90, r.max);
    out << line;
  }
}

}  // namespace fp3o
