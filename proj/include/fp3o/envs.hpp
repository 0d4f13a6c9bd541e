#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fp3o/rng.hpp"
#include "fp3o/tensor.hpp"

namespace fp3o {

enum class EnvKind { matrix, spread, linereach };

inline const char* to_string(EnvKind k) {
  switch (k) {
    case EnvKind::matrix: return "matrix";
    case EnvKind::spread: return "spread";
    default: return "linereach";
  }
}

inline EnvKind env_kind_from_string(const std::string& s) {
  if (s == "matrix") return EnvKind::matrix;
  if (s == "spread") return EnvKind::spread;
  if (s == "linereach") return EnvKind::linereach;
  throw std::invalid_argument("unknown env kind: " + s);
}

struct AgentAction {
  int discrete = -1;
  std::vector<double> continuous;
};

using JointAction = std::vector<AgentAction>;

struct StepResult {
  std::vector<std::vector<double>> obs;  // per agent
  std::vector<double> state;             // global
  double reward = 0.0;
  bool done = false;
};

struct EnvSpec {
  EnvKind kind = EnvKind::matrix;
  int n_agents = 2;
  int episode_length = 10;
  bool heterogeneous = false;
  std::uint64_t seed = 0;

  // matrix: payoff over joint actions, mixed-radix flat layout
  std::vector<int> actions = {3, 3};
  std::vector<double> payoff;

  // spread
  int grid_w = 5, grid_h = 5, n_landmarks = 3;

  // linereach
  std::vector<double> targets;
  double max_step = 0.1;

  // A coordination payoff with one global optimum and two strictly worse
  // local optima on the diagonal.
  static EnvSpec matrix_default() {
    EnvSpec s;
    s.kind = EnvKind::matrix;
    s.n_agents = 2;
    s.actions = {3, 3};
    s.episode_length = 10;
    s.payoff.assign(9, 0.0);
    s.payoff[0 * 3 + 0] = 1.0;
    s.payoff[1 * 3 + 1] = 0.8;
    s.payoff[2 * 3 + 2] = 0.8;
    return s;
  }

  static EnvSpec spread_default(int n_agents = 3, bool heterogeneous = false) {
    EnvSpec s;
    s.kind = EnvKind::spread;
    s.n_agents = n_agents;
    s.n_landmarks = n_agents;
    s.heterogeneous = heterogeneous;
    s.episode_length = 25;
    s.actions.assign(n_agents, 5);
    return s;
  }

  static EnvSpec linereach_default(int n_agents = 2) {
    EnvSpec s;
    s.kind = EnvKind::linereach;
    s.n_agents = n_agents;
    s.episode_length = 25;
    s.actions.clear();
    s.targets.resize(n_agents);
    for (int i = 0; i < n_agents; ++i)
      s.targets[i] = (i % 2 == 0 ? 1.0 : -1.0) * (0.4 + 0.2 * i);
    return s;
  }

  bool continuous_actions() const { return kind == EnvKind::linereach; }

  int action_count(int agent) const {
    if (continuous_actions())
      throw std::logic_error("action_count: continuous env");
    return actions[agent];
  }

  int action_dim() const { return continuous_actions() ? 1 : 0; }

  int obs_dim() const {
    switch (kind) {
      case EnvKind::matrix: return n_agents;  // agent one-hot
      case EnvKind::spread: return 2 + 2 * std::min(2, n_landmarks);
      default: return 2;  // own position and target
    }
  }

  int state_dim() const {
    switch (kind) {
      case EnvKind::matrix: return 1;  // constant token
      case EnvKind::spread: return 2 * (n_agents + n_landmarks);
      default: return 2 * n_agents;
    }
  }

  int joint_action_count() const {
    int a = 1;
    for (int k : actions) a *= k;
    return a;
  }

  void validate() const {
    if (episode_length < 1)
      throw std::invalid_argument("EnvSpec: episode_length must be >= 1");
    if (n_agents < 1) throw std::invalid_argument("EnvSpec: no agents");
    if (kind == EnvKind::matrix &&
        static_cast<int>(payoff.size()) != joint_action_count())
      throw std::invalid_argument("EnvSpec: payoff size mismatch");
    if (kind == EnvKind::linereach &&
        static_cast<int>(targets.size()) != n_agents)
      throw std::invalid_argument("EnvSpec: target count mismatch");
  }

  nlohmann::json to_json() const {
    nlohmann::json j{{"kind", to_string(kind)},
                     {"n_agents", n_agents},
                     {"episode_length", episode_length},
                     {"heterogeneous", heterogeneous},
                     {"seed", seed}};
    if (kind == EnvKind::matrix) {
      j["actions"] = actions;
      j["payoff"] = payoff;
    } else if (kind == EnvKind::spread) {
      j["grid_w"] = grid_w;
      j["grid_h"] = grid_h;
      j["n_landmarks"] = n_landmarks;
    } else {
      j["targets"] = targets;
      j["max_step"] = max_step;
    }
    return j;
  }

  static EnvSpec from_json(const nlohmann::json& j) {
    EnvSpec base;
    const EnvKind kind = env_kind_from_string(j.at("kind").get<std::string>());
    const int n = j.value("n_agents", 2);
    switch (kind) {
      case EnvKind::matrix: base = matrix_default(); break;
      case EnvKind::spread: base = spread_default(n); break;
      default: base = linereach_default(n);
    }
    base.n_agents = n;
    if (kind == EnvKind::matrix && n != 2 && !j.contains("payoff")) {
      base.actions.assign(n, 3);
      base.payoff.assign(base.joint_action_count(), 0.0);
      // diagonal coordination payoff generalized to n agents
      for (int a = 0; a < 3; ++a) {
        int idx = 0;
        for (int i = 0; i < n; ++i) idx = idx * 3 + a;
        base.payoff[idx] = a == 0 ? 1.0 : 0.8;
      }
    }
    base.episode_length = j.value("episode_length", base.episode_length);
    base.heterogeneous = j.value("heterogeneous", base.heterogeneous);
    base.seed = j.value("seed", base.seed);
    if (j.contains("actions")) base.actions = j.at("actions").get<std::vector<int>>();
    if (j.contains("payoff")) base.payoff = j.at("payoff").get<std::vector<double>>();
    base.grid_w = j.value("grid_w", base.grid_w);
    base.grid_h = j.value("grid_h", base.grid_h);
    base.n_landmarks = j.value("n_landmarks", base.n_landmarks);
    if (j.contains("targets")) base.targets = j.at("targets").get<std::vector<double>>();
    base.max_step = j.value("max_step", base.max_step);
    base.validate();
    return base;
  }
};

namespace detail {

struct Cell {
  int x = 0, y = 0;
};

inline int manhattan(const Cell& a, const Cell& b) {
  return std::abs(a.x - b.x) + std::abs(a.y - b.y);
}

// Distinct cells for agents then landmarks, a pure function of the spec seed
// so every episode replays the same layout.
inline void spread_layout(const EnvSpec& spec, std::vector<Cell>& agents,
                          std::vector<Cell>& landmarks) {
  Rng rng(splitmix64(spec.seed ^ 0x5e77a9ULL));
  const int cells = spec.grid_w * spec.grid_h;
  if (spec.n_agents + spec.n_landmarks > cells)
    throw std::invalid_argument("spread: grid too small for layout");
  std::vector<int> ids(cells);
  std::iota(ids.begin(), ids.end(), 0);
  rng.shuffle(ids);
  agents.clear();
  landmarks.clear();
  for (int i = 0; i < spec.n_agents; ++i)
    agents.push_back({ids[i] % spec.grid_w, ids[i] / spec.grid_w});
  for (int l = 0; l < spec.n_landmarks; ++l) {
    const int id = ids[spec.n_agents + l];
    landmarks.push_back({id % spec.grid_w, id / spec.grid_w});
  }
}

inline double spread_reward(const EnvSpec& spec, const std::vector<Cell>& agents,
                            const std::vector<Cell>& landmarks) {
  const double diam = static_cast<double>(spec.grid_w - 1 + spec.grid_h - 1);
  double total = 0.0;
  for (const Cell& l : landmarks) {
    int best = manhattan(l, agents[0]);
    for (const Cell& a : agents) best = std::min(best, manhattan(l, a));
    total += static_cast<double>(best);
  }
  return -total / (diam * static_cast<double>(spec.n_landmarks));
}

inline void spread_move(const EnvSpec& spec, Cell& c, int action) {
  switch (action) {
    case 0: break;                                        // stay
    case 1: c.y = std::min(c.y + 1, spec.grid_h - 1); break;  // up
    case 2: c.y = std::max(c.y - 1, 0); break;                // down
    case 3: c.x = std::max(c.x - 1, 0); break;                // left
    case 4: c.x = std::min(c.x + 1, spec.grid_w - 1); break;  // right
    default: throw std::out_of_range("spread: action out of range");
  }
}

}  // namespace detail

// Desk-scale cooperative environments. All agents receive the same scalar
// reward at every step; episodes end exactly at episode_length.
class Env {
 public:
  explicit Env(EnvSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    if (spec_.kind == EnvKind::spread)
      detail::spread_layout(spec_, init_agents_, landmarks_);
  }

  const EnvSpec& spec() const { return spec_; }

  StepResult reset() {
    t_ = 0;
    if (spec_.kind == EnvKind::spread) agents_ = init_agents_;
    if (spec_.kind == EnvKind::linereach)
      positions_.assign(spec_.n_agents, 0.0);
    StepResult r = observe();
    r.reward = 0.0;
    r.done = false;
    return r;
  }

  StepResult step(const JointAction& action) {
    if (static_cast<int>(action.size()) != spec_.n_agents)
      throw std::invalid_argument("step: joint action arity");
    double reward = 0.0;
    switch (spec_.kind) {
      case EnvKind::matrix: {
        int idx = 0;
        for (int i = 0; i < spec_.n_agents; ++i) {
          const int a = action[i].discrete;
          if (a < 0 || a >= spec_.actions[i])
            throw std::out_of_range("matrix: action out of range");
          idx = idx * spec_.actions[i] + a;
        }
        reward = spec_.payoff[idx];
        break;
      }
      case EnvKind::spread: {
        for (int i = 0; i < spec_.n_agents; ++i) {
          const int a = action[i].discrete;
          const int moves = (spec_.heterogeneous && i == 0) ? 2 : 1;
          for (int m = 0; m < moves; ++m)
            detail::spread_move(spec_, agents_[i], a);
        }
        reward = detail::spread_reward(spec_, agents_, landmarks_);
        break;
      }
      case EnvKind::linereach: {
        for (int i = 0; i < spec_.n_agents; ++i) {
          if (action[i].continuous.empty())
            throw std::invalid_argument("linereach: missing continuous action");
          const double u = std::clamp(action[i].continuous[0],
                                      -spec_.max_step, spec_.max_step);
          positions_[i] += u;
        }
        for (int i = 0; i < spec_.n_agents; ++i)
          reward -= std::abs(positions_[i] - spec_.targets[i]);
        break;
      }
    }
    ++t_;
    StepResult r = observe();
    r.reward = reward;
    r.done = t_ >= spec_.episode_length;
    return r;
  }

 private:
  StepResult observe() const {
    StepResult r;
    r.obs.resize(spec_.n_agents);
    switch (spec_.kind) {
      case EnvKind::matrix: {
        for (int i = 0; i < spec_.n_agents; ++i) {
          r.obs[i].assign(spec_.n_agents, 0.0);
          r.obs[i][i] = 1.0;
        }
        r.state = {1.0};
        break;
      }
      case EnvKind::spread: {
        const double wx = spec_.grid_w > 1 ? spec_.grid_w - 1.0 : 1.0;
        const double wy = spec_.grid_h > 1 ? spec_.grid_h - 1.0 : 1.0;
        const int k = std::min(2, spec_.n_landmarks);
        for (int i = 0; i < spec_.n_agents; ++i) {
          std::vector<double>& o = r.obs[i];
          o.push_back(agents_[i].x / wx);
          o.push_back(agents_[i].y / wy);
          // nearest k landmarks by manhattan distance, index tie-break
          std::vector<int> order(spec_.n_landmarks);
          std::iota(order.begin(), order.end(), 0);
          std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
            return detail::manhattan(landmarks_[a], agents_[i]) <
                   detail::manhattan(landmarks_[b], agents_[i]);
          });
          for (int n = 0; n < k; ++n) {
            const detail::Cell& l = landmarks_[order[n]];
            o.push_back((l.x - agents_[i].x) / wx);
            o.push_back((l.y - agents_[i].y) / wy);
          }
        }
        for (const detail::Cell& a : agents_) {
          r.state.push_back(a.x / wx);
          r.state.push_back(a.y / wy);
        }
        for (const detail::Cell& l : landmarks_) {
          r.state.push_back(l.x / wx);
          r.state.push_back(l.y / wy);
        }
        break;
      }
      case EnvKind::linereach: {
        for (int i = 0; i < spec_.n_agents; ++i)
          r.obs[i] = {positions_[i], spec_.targets[i]};
        r.state = positions_;
        r.state.insert(r.state.end(), spec_.targets.begin(),
                       spec_.targets.end());
        break;
      }
    }
    return r;
  }

  EnvSpec spec_;
  int t_ = 0;
  std::vector<detail::Cell> init_agents_, agents_, landmarks_;
  std::vector<double> positions_;
};

// Maximal undiscounted episode return, used as the acceptance oracle.
// matrix: exact table maximum; spread: brute-force landmark assignment with
// shortest-path walks; linereach: closed-form partial sums.
inline double optimal_return(const EnvSpec& spec) {
  spec.validate();
  switch (spec.kind) {
    case EnvKind::matrix: {
      double best = spec.payoff[0];
      for (double v : spec.payoff) best = std::max(best, v);
      return best * spec.episode_length;
    }
    case EnvKind::spread: {
      if (spec.n_agents > 6 || spec.n_landmarks > 6)
        throw std::invalid_argument(
            "optimal_return: spread instance too large for enumeration");
      std::vector<detail::Cell> agents0, landmarks;
      detail::spread_layout(spec, agents0, landmarks);
      // injective assignment landmark -> agent, walked greedily
      std::vector<int> agent_ids(spec.n_agents);
      std::iota(agent_ids.begin(), agent_ids.end(), 0);
      double best = -std::numeric_limits<double>::infinity();
      std::vector<int> perm = agent_ids;
      do {
        std::vector<detail::Cell> agents = agents0;
        double total = 0.0;
        for (int t = 0; t < spec.episode_length; ++t) {
          for (int l = 0; l < spec.n_landmarks; ++l) {
            detail::Cell& a = agents[perm[l]];
            const detail::Cell& target = landmarks[l];
            const int moves =
                (spec.heterogeneous && perm[l] == 0) ? 2 : 1;
            for (int m = 0; m < moves; ++m) {
              if (a.x < target.x)
                ++a.x;
              else if (a.x > target.x)
                --a.x;
              else if (a.y < target.y)
                ++a.y;
              else if (a.y > target.y)
                --a.y;
            }
          }
          total += detail::spread_reward(spec, agents, landmarks);
        }
        best = std::max(best, total);
      } while (std::next_permutation(perm.begin(), perm.end()));
      return best;
    }
    default: {
      double total = 0.0;
      for (int i = 0; i < spec.n_agents; ++i) {
        const double d = std::abs(spec.targets[i]);
        for (int t = 1; t <= spec.episode_length; ++t)
          total -= std::max(0.0, d - t * spec.max_step);
      }
      return total;
    }
  }
}

}  // namespace fp3o
