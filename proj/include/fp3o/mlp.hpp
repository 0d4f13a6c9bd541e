#pragma once

#include "fp3o/graph.hpp"
#include "fp3o/param_store.hpp"
#include "fp3o/tensor.hpp"

namespace fp3o {

namespace detail {

// Shared affine kernel so taped and untaped forwards produce identical
// arithmetic.
inline Tensor affine_eval(const Tensor& x, const Tensor& w) {
  const std::int64_t in = x.cols(), out = w.cols();
  Tensor y(x.rows(), out);
  ConstMatMap wm(w.data.data(), in, out);
  y.map().noalias() = x.map() * wm;
  ConstMatMap bias(w.data.data() + in * out, 1, out);
  y.map().rowwise() += bias.row(0);
  return y;
}

}  // namespace detail

// Plain inference pass: head output (logits, or the mean for a gaussian
// head). No tape.
inline Tensor mlp_forward(const ParamStore& store, const MlpSpec& spec,
                          int agent, const Tensor& x) {
  if (x.cols() != spec.input_dim)
    throw std::invalid_argument("mlp_forward: input dim mismatch");
  Tensor h = x;
  for (int layer = 0; layer < spec.layer_count(); ++layer) {
    h = detail::affine_eval(h, store.slot(store.slot_of(agent, layer)).value);
    if (!spec.is_head(layer))
      for (double& v : h.data) v = v > 0.0 ? v : 0.0;
  }
  return h;
}

inline Tensor mlp_log_std(const ParamStore& store, const MlpSpec& spec,
                          int agent) {
  if (spec.head != Head::gaussian)
    throw std::logic_error("mlp_log_std: categorical head");
  const int layer = spec.layer_count() - 1;
  const Tensor& w = store.slot(store.slot_of(agent, layer)).value;
  Tensor out(1, w.cols());
  const std::int64_t r = spec.layer_in(layer) + 1;
  for (std::int64_t c = 0; c < w.cols(); ++c) out[c] = w.at(r, c);
  return out;
}

// Taped pass recording the computation for backward. Returns the head
// output var; the per-layer param nodes alias the store's slots, so shared
// slots accumulate summed gradients across agents.
inline VarId mlp_forward_taped(Graph& g, const ParamStore& store,
                               const MlpSpec& spec, int agent,
                               const Tensor& x) {
  if (x.cols() != spec.input_dim)
    throw std::invalid_argument("mlp_forward_taped: input dim mismatch");
  VarId h = g.constant(x);
  for (int layer = 0; layer < spec.layer_count(); ++layer) {
    const int slot = store.slot_of(agent, layer);
    const VarId w = g.param(store.slot(slot).value, slot);
    h = g.affine(h, w);
    if (!spec.is_head(layer)) h = g.relu(h);
  }
  return h;
}

// Taped log-std row of the gaussian head.
inline VarId mlp_log_std_taped(Graph& g, const ParamStore& store,
                               const MlpSpec& spec, int agent) {
  if (spec.head != Head::gaussian)
    throw std::logic_error("mlp_log_std_taped: categorical head");
  const int layer = spec.layer_count() - 1;
  const int slot = store.slot_of(agent, layer);
  const VarId w = g.param(store.slot(slot).value, slot);
  return g.row(w, spec.layer_in(layer) + 1);
}

}  // namespace fp3o
