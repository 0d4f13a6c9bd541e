#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "fp3o/graph.hpp"
#include "fp3o/rng.hpp"
#include "fp3o/tensor.hpp"

namespace fp3o {

enum class Sharing { full, partial, none };
enum class Head { categorical, gaussian };

inline const char* to_string(Sharing s) {
  switch (s) {
    case Sharing::full: return "full";
    case Sharing::partial: return "partial";
    default: return "none";
  }
}

inline Sharing sharing_from_string(const std::string& s) {
  if (s == "full") return Sharing::full;
  if (s == "partial") return Sharing::partial;
  if (s == "none") return Sharing::none;
  throw std::invalid_argument("unknown sharing mode: " + s);
}

// Layer parameters live in one augmented tensor per layer:
//   rows [0, in)  weight matrix
//   row  in       bias
//   row  in+1     state-independent log-std (gaussian head layer only)
struct MlpSpec {
  int input_dim = 0;
  std::vector<int> hidden = {64, 64};
  int output_dim = 0;
  Head head = Head::categorical;

  int layer_count() const { return static_cast<int>(hidden.size()) + 1; }

  int layer_in(int layer) const {
    return layer == 0 ? input_dim : hidden[layer - 1];
  }

  int layer_out(int layer) const {
    return layer < static_cast<int>(hidden.size()) ? hidden[layer]
                                                   : output_dim;
  }

  bool is_head(int layer) const { return layer == layer_count() - 1; }

  std::pair<std::int64_t, std::int64_t> slot_shape(int layer) const {
    const int extra = (is_head(layer) && head == Head::gaussian) ? 2 : 1;
    return {layer_in(layer) + extra, layer_out(layer)};
  }

  nlohmann::json to_json() const {
    return {{"input_dim", input_dim},
            {"hidden", hidden},
            {"output_dim", output_dim},
            {"head", head == Head::categorical ? "categorical" : "gaussian"}};
  }

  static MlpSpec from_json(const nlohmann::json& j) {
    MlpSpec s;
    s.input_dim = j.at("input_dim").get<int>();
    s.hidden = j.at("hidden").get<std::vector<int>>();
    s.output_dim = j.at("output_dim").get<int>();
    s.head = j.at("head").get<std::string>() == "gaussian" ? Head::gaussian
                                                           : Head::categorical;
    return s;
  }
};

// Named parameter slots plus the (agent, layer) -> slot binding graph.
// Two bindings on the same slot observe the same storage, so an update
// through one agent is seen bit-identically by the other.
class ParamStore {
 public:
  struct Slot {
    std::string name;
    Tensor value;
    Tensor m;  // Adam first moment
    Tensor v;  // Adam second moment
    std::int64_t step = 0;
  };

  int add_slot(std::string name, Tensor value) {
    Slot s;
    s.name = std::move(name);
    s.m = Tensor(value.rows(), value.cols());
    s.v = Tensor(value.rows(), value.cols());
    s.value = std::move(value);
    slots_.push_back(std::move(s));
    return static_cast<int>(slots_.size()) - 1;
  }

  void bind(int agent, int layer, int slot_id) {
    bindings_[{agent, layer}] = slot_id;
  }

  int slot_of(int agent, int layer) const {
    auto it = bindings_.find({agent, layer});
    if (it == bindings_.end())
      throw std::out_of_range("ParamStore: unbound (agent, layer)");
    return it->second;
  }

  Slot& slot(int id) { return slots_[id]; }
  const Slot& slot(int id) const { return slots_[id]; }
  int slot_count() const { return static_cast<int>(slots_.size()); }
  const std::map<std::pair<int, int>, int>& bindings() const {
    return bindings_;
  }

 private:
  std::vector<Slot> slots_;
  std::map<std::pair<int, int>, int> bindings_;
};

// full    -> one slot per layer, bound by every agent
// partial -> hidden layers shared, one head slot per agent
// none    -> one slot per (agent, layer)
inline ParamStore bind_sharing(const MlpSpec& spec, int n_agents,
                               Sharing mode) {
  ParamStore store;
  const int layers = spec.layer_count();
  auto make_slot = [&](const std::string& name, int layer) {
    auto [r, c] = spec.slot_shape(layer);
    return store.add_slot(name, Tensor(r, c));
  };
  for (int layer = 0; layer < layers; ++layer) {
    const bool shared =
        mode == Sharing::full || (mode == Sharing::partial && !spec.is_head(layer));
    if (shared) {
      const int id = make_slot("shared.l" + std::to_string(layer), layer);
      for (int a = 0; a < n_agents; ++a) store.bind(a, layer, id);
    } else {
      for (int a = 0; a < n_agents; ++a) {
        const int id = make_slot(
            "agent" + std::to_string(a) + ".l" + std::to_string(layer), layer);
        store.bind(a, layer, id);
      }
    }
  }
  return store;
}

namespace detail {

// Orthogonal matrix via QR of a standard normal draw, sign-fixed so the
// result is unique for a given sample.
inline Eigen::MatrixXd orthogonal_matrix(std::int64_t rows, std::int64_t cols,
                                         Rng& rng) {
  const std::int64_t big = std::max(rows, cols), small = std::min(rows, cols);
  Eigen::MatrixXd a(big, small);
  for (std::int64_t i = 0; i < big; ++i)
    for (std::int64_t j = 0; j < small; ++j) a(i, j) = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(big, small);
  Eigen::MatrixXd r = qr.matrixQR().topRows(small).triangularView<Eigen::Upper>();
  for (std::int64_t j = 0; j < small; ++j)
    if (r(j, j) < 0.0) q.col(j) = -q.col(j);
  return rows >= cols ? q : Eigen::MatrixXd(q.transpose());
}

}  // namespace detail

// Orthogonal weights scaled by gain, zero bias, log-std row set so that the
// initial std equals init_std. Deterministic per (seed, slot index).
inline void orthogonal_init(ParamStore& store, const MlpSpec& spec,
                            std::uint64_t seed,
                            double gain_hidden = std::sqrt(2.0),
                            double gain_head = 0.01, double init_std = 0.5) {
  // Recover each slot's layer from the binding table.
  std::vector<int> layer_of(store.slot_count(), -1);
  for (const auto& [key, slot] : store.bindings()) layer_of[slot] = key.second;
  Rng base(seed);
  for (int id = 0; id < store.slot_count(); ++id) {
    const int layer = layer_of[id];
    if (layer < 0) throw std::logic_error("orthogonal_init: dangling slot");
    Rng rng = base.fork(static_cast<std::uint64_t>(id));
    const int in = spec.layer_in(layer), out = spec.layer_out(layer);
    const double gain = spec.is_head(layer) ? gain_head : gain_hidden;
    Eigen::MatrixXd w = detail::orthogonal_matrix(in, out, rng) * gain;
    Tensor& t = store.slot(id).value;
    t.fill(0.0);
    for (int i = 0; i < in; ++i)
      for (int j = 0; j < out; ++j) t.at(i, j) = w(i, j);
    if (spec.is_head(layer) && spec.head == Head::gaussian)
      for (int j = 0; j < out; ++j) t.at(in + 1, j) = std::log(init_std);
  }
}

// Global L2 norm across all slots; rescales in place iff it exceeds
// max_norm. Returns the pre-clip norm.
inline double clip_grad_norm(GradMap& grads, double max_norm = 10.0) {
  double sq = 0.0;
  for (const auto& [slot, g] : grads)
    for (double v : g.data) sq += v * v;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (auto& [slot, g] : grads)
      for (double& v : g.data) v *= s;
  }
  return norm;
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-5;
};

// Standard Adam with bias correction; moment state lives in the store.
// Returns false (store untouched) if any gradient is non-finite.
inline bool adam_step(ParamStore& store, const GradMap& grads,
                      const AdamConfig& cfg) {
  for (const auto& [slot, g] : grads)
    if (!g.all_finite()) return false;
  for (const auto& [slot_id, g] : grads) {
    ParamStore::Slot& s = store.slot(slot_id);
    s.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(s.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(s.step));
    for (std::int64_t i = 0; i < g.size(); ++i) {
      s.m[i] = cfg.beta1 * s.m[i] + (1.0 - cfg.beta1) * g[i];
      s.v[i] = cfg.beta2 * s.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = s.m[i] / bc1;
      const double vhat = s.v[i] / bc2;
      s.value[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
  return true;
}

// ---- checkpoint serialization ----
// Layout: manifest JSON describing slot names/shapes/bindings, then one raw
// little-endian f64 array per slot in manifest order.

inline nlohmann::json store_manifest(const ParamStore& store) {
  nlohmann::json slots = nlohmann::json::array();
  for (int i = 0; i < store.slot_count(); ++i) {
    const auto& s = store.slot(i);
    slots.push_back({{"name", s.name},
                     {"rows", s.value.rows()},
                     {"cols", s.value.cols()}});
  }
  nlohmann::json bindings = nlohmann::json::array();
  for (const auto& [key, slot] : store.bindings())
    bindings.push_back({key.first, key.second, slot});
  return {{"slots", slots}, {"bindings", bindings}};
}

inline void write_store_blobs(std::ostream& out, const ParamStore& store) {
  static_assert(sizeof(double) == 8);
  for (int i = 0; i < store.slot_count(); ++i) {
    const Tensor& t = store.slot(i).value;
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  }
}

inline ParamStore read_store(std::istream& in, const nlohmann::json& manifest) {
  ParamStore store;
  for (const auto& js : manifest.at("slots")) {
    Tensor t(js.at("rows").get<std::int64_t>(), js.at("cols").get<std::int64_t>());
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!in) throw std::runtime_error("checkpoint: truncated slot data");
    store.add_slot(js.at("name").get<std::string>(), std::move(t));
  }
  for (const auto& jb : manifest.at("bindings"))
    store.bind(jb.at(0).get<int>(), jb.at(1).get<int>(), jb.at(2).get<int>());
  return store;
}

}  // namespace fp3o
