#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <vector>

#include "fp3o/tensor.hpp"

namespace fp3o {

using VarId = std::int32_t;
using GradMap = std::map<int, Tensor>;  // slot id -> accumulated gradient

// Reverse-mode tape. Nodes are appended in evaluation order, so iterating
// the tape backwards is a valid topological order for backpropagation.
// Parameter leaves carry a slot id; gradients of all leaves bound to the
// same slot are summed, which is what realizes shared-parameter training.
class Graph {
 public:
  VarId constant(Tensor v) { return push(std::move(v), -1, false, nullptr); }

  VarId param(const Tensor& value, int slot_id) {
    if (slot_id < 0) throw std::invalid_argument("param: bad slot id");
    return push(value, slot_id, true, nullptr);
  }

  const Tensor& value(VarId id) const {
    if (id < 0 || id >= static_cast<VarId>(nodes_.size()))
      throw std::out_of_range("Graph::value: id not on this tape");
    return nodes_[id].value;
  }

  // y = x * W[0:in,:] + W[in,:]  (rows past in+1, if any, are untouched)
  VarId affine(VarId x, VarId w) {
    const Tensor& xv = nodes_[x].value;
    const Tensor& wv = nodes_[w].value;
    const std::int64_t in = xv.cols();
    const std::int64_t out = wv.cols();
    if (wv.rows() < in + 1)
      throw std::invalid_argument("affine: weight rows < input dim + 1");
    Tensor y(xv.rows(), out);
    {
      ConstMatMap wm(wv.data.data(), in, out);
      y.map().noalias() = xv.map() * wm;
      ConstMatMap bias(wv.data.data() + in * out, 1, out);
      y.map().rowwise() += bias.row(0);
    }
    return push(std::move(y), -1, needs(x) || needs(w),
                [x, w, in, out](Graph& g, VarId self) {
      const Tensor& up = g.nodes_[self].grad;
      const Tensor& xv = g.nodes_[x].value;
      const Tensor& wv = g.nodes_[w].value;
      ConstMatMap wm(wv.data.data(), in, out);
      if (g.wants_grad(x)) {
        Tensor& gx = g.grad_of(x);
        gx.map().noalias() += up.map() * wm.transpose();
      }
      if (g.wants_grad(w)) {
        Tensor& gw = g.grad_of(w);
        MatMap gwm(gw.data.data(), in, out);
        gwm.noalias() += xv.map().transpose() * up.map();
        MatMap gb(gw.data.data() + in * out, 1, out);
        gb.row(0) += up.map().colwise().sum();
      }
    });
  }

  VarId relu(VarId x) {
    Tensor y = nodes_[x].value;
    for (double& v : y.data) v = v > 0.0 ? v : 0.0;
    return push(std::move(y), -1, needs(x), [x](Graph& g, VarId self) {
      if (!g.wants_grad(x)) return;
      const Tensor& up = g.nodes_[self].grad;
      const Tensor& xv = g.nodes_[x].value;
      Tensor& gx = g.grad_of(x);
      for (std::int64_t i = 0; i < xv.size(); ++i)
        if (xv[i] > 0.0) gx[i] += up[i];
    });
  }

  VarId add(VarId a, VarId b) {
    const Tensor& av = nodes_[a].value;
    const Tensor& bv = nodes_[b].value;
    require_same_shape(av, bv, "add");
    Tensor y = av;
    for (std::int64_t i = 0; i < y.size(); ++i) y[i] += bv[i];
    return push(std::move(y), -1, needs(a) || needs(b),
                [a, b](Graph& g, VarId self) {
      const Tensor& up = g.nodes_[self].grad;
      if (g.wants_grad(a)) {
        Tensor& ga = g.grad_of(a);
        for (std::int64_t i = 0; i < up.size(); ++i) ga[i] += up[i];
      }
      if (g.wants_grad(b)) {
        Tensor& gb = g.grad_of(b);
        for (std::int64_t i = 0; i < up.size(); ++i) gb[i] += up[i];
      }
    });
  }

  VarId mul(VarId a, VarId b) {
    const Tensor& av = nodes_[a].value;
    const Tensor& bv = nodes_[b].value;
    require_same_shape(av, bv, "mul");
    Tensor y = av;
    for (std::int64_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
    return push(std::move(y), -1, needs(a) || needs(b),
                [a, b](Graph& g, VarId self) {
      const Tensor& up = g.nodes_[self].grad;
      const Tensor& av = g.nodes_[a].value;
      const Tensor& bv = g.nodes_[b].value;
      if (g.wants_grad(a)) {
        Tensor& ga = g.grad_of(a);
        for (std::int64_t i = 0; i < up.size(); ++i) ga[i] += up[i] * bv[i];
      }
      if (g.wants_grad(b)) {
        Tensor& gb = g.grad_of(b);
        for (std::int64_t i = 0; i < up.size(); ++i) gb[i] += up[i] * av[i];
      }
    });
  }

  // x * c elementwise, c constant
  VarId mul_const(VarId x, Tensor c) {
    const Tensor& xv = nodes_[x].value;
    require_same_shape(xv, c, "mul_const");
    Tensor y = xv;
    for (std::int64_t i = 0; i < y.size(); ++i) y[i] *= c[i];
    return push(std::move(y), -1, needs(x),
                [x, c = std::move(c)](Graph& g, VarId self) {
                  if (!g.wants_grad(x)) return;
                  const Tensor& up = g.nodes_[self].grad;
                  Tensor& gx = g.grad_of(x);
                  for (std::int64_t i = 0; i < up.size(); ++i)
                    gx[i] += up[i] * c[i];
                });
  }

  // x + scale * c, c constant
  VarId add_const(VarId x, Tensor c, double scale = 1.0) {
    const Tensor& xv = nodes_[x].value;
    require_same_shape(xv, c, "add_const");
    Tensor y = xv;
    for (std::int64_t i = 0; i < y.size(); ++i) y[i] += scale * c[i];
    return push(std::move(y), -1, needs(x),
                [x](Graph& g, VarId self) {
      if (!g.wants_grad(x)) return;
      const Tensor& up = g.nodes_[self].grad;
      Tensor& gx = g.grad_of(x);
      for (std::int64_t i = 0; i < up.size(); ++i) gx[i] += up[i];
    });
  }

  VarId add_scalar(VarId x, double s) {
    Tensor y = nodes_[x].value;
    for (double& v : y.data) v += s;
    return push(std::move(y), -1, needs(x),
                [x](Graph& g, VarId self) {
      if (!g.wants_grad(x)) return;
      const Tensor& up = g.nodes_[self].grad;
      Tensor& gx = g.grad_of(x);
      for (std::int64_t i = 0; i < up.size(); ++i) gx[i] += up[i];
    });
  }

  VarId scale(VarId x, double s) {
    Tensor y = nodes_[x].value;
    for (double& v : y.data) v *= s;
    return push(std::move(y), -1, needs(x),
                [x, s](Graph& g, VarId self) {
      if (!g.wants_grad(x)) return;
      const Tensor& up = g.nodes_[self].grad;
      Tensor& gx = g.grad_of(x);
      for (std::int64_t i = 0; i < up.size(); ++i) gx[i] += up[i] * s;
    });
  }

  VarId exp_(VarId x) {
    Tensor y = nodes_[x].value;
    for (double& v : y.data) v = std::exp(v);
    return push(std::move(y), -1, needs(x),
                [x](Graph& g, VarId self) {
      if (!g.wants_grad(x)) return;
      const Tensor& up = g.nodes_[self].grad;
      const Tensor& yv = g.nodes_[self].value;
      Tensor& gx = g.grad_of(x);
      for (std::int64_t i = 0; i < up.size(); ++i) gx[i] += up[i] * yv[i];
    });
  }

  // Elementwise min; ties take the first argument.
  VarId minimum(VarId a, VarId b) {
    const Tensor& av = nodes_[a].value;
    const Tensor& bv = nodes_[b].value;
    require_same_shape(av, bv, "minimum");
    Tensor y = av;
    for (std::int64_t i = 0; i < y.size(); ++i)
      y[i] = av[i] <= bv[i] ? av[i] : bv[i];
    return push(std::move(y), -1, needs(a) || needs(b),
                [a, b](Graph& g, VarId self) {
      const Tensor& up = g.nodes_[self].grad;
      const Tensor& av = g.nodes_[a].value;
      const Tensor& bv = g.nodes_[b].value;
      const bool wa = g.wants_grad(a), wb = g.wants_grad(b);
      Tensor* ga = wa ? &g.grad_of(a) : nullptr;
      Tensor* gb = wb ? &g.grad_of(b) : nullptr;
      for (std::int64_t i = 0; i < up.size(); ++i) {
        if (av[i] <= bv[i]) {
          if (wa) (*ga)[i] += up[i];
        } else if (wb) {
          (*gb)[i] += up[i];
        }
      }
    });
  }

  // Gradient passes inside [lo, hi] inclusive.
  VarId clip(VarId x, double lo, double hi) {
    Tensor y = nodes_[x].value;
    for (double& v : y.data) v = v < lo ? lo : (v > hi ? hi : v);
    return push(std::move(y), -1, needs(x),
                [x, lo, hi](Graph& g, VarId self) {
      if (!g.wants_grad(x)) return;
      const Tensor& up = g.nodes_[self].grad;
      const Tensor& xv = g.nodes_[x].value;
      Tensor& gx = g.grad_of(x);
      for (std::int64_t i = 0; i < up.size(); ++i)
        if (xv[i] >= lo && xv[i] <= hi) gx[i] += up[i];
    });
  }

  VarId sum_all(VarId x) {
    const Tensor& xv = nodes_[x].value;
    Tensor y(1, 1);
    for (double v : xv.data) y[0] += v;
    return push(std::move(y), -1, needs(x),
                [x](Graph& g, VarId self) {
      if (!g.wants_grad(x)) return;
      const double up = g.nodes_[self].grad[0];
      Tensor& gx = g.grad_of(x);
      for (std::int64_t i = 0; i < gx.size(); ++i) gx[i] += up;
    });
  }

  VarId mean_all(VarId x) {
    const Tensor& xv = nodes_[x].value;
    const double inv = 1.0 / static_cast<double>(xv.size());
    Tensor y(1, 1);
    for (double v : xv.data) y[0] += v;
    y[0] *= inv;
    return push(std::move(y), -1, needs(x),
                [x, inv](Graph& g, VarId self) {
      if (!g.wants_grad(x)) return;
      const double up = g.nodes_[self].grad[0] * inv;
      Tensor& gx = g.grad_of(x);
      for (std::int64_t i = 0; i < gx.size(); ++i) gx[i] += up;
    });
  }

  // {1, cols} view of one row.
  VarId row(VarId x, std::int64_t r) {
    const Tensor& xv = nodes_[x].value;
    Tensor y(1, xv.cols());
    for (std::int64_t c = 0; c < xv.cols(); ++c) y[c] = xv.at(r, c);
    return push(std::move(y), -1, needs(x),
                [x, r](Graph& g, VarId self) {
      if (!g.wants_grad(x)) return;
      const Tensor& up = g.nodes_[self].grad;
      Tensor& gx = g.grad_of(x);
      for (std::int64_t c = 0; c < up.cols(); ++c) gx.at(r, c) += up[c];
    });
  }

  // log pi(a|s) for categorical logits {B, A} -> {B, 1}
  VarId cat_logprob(VarId logits, std::vector<int> actions) {
    const Tensor& z = nodes_[logits].value;
    const std::int64_t batch = z.rows(), na = z.cols();
    if (static_cast<std::int64_t>(actions.size()) != batch)
      throw std::invalid_argument("cat_logprob: action batch mismatch");
    for (int a : actions)
      if (a < 0 || a >= na)
        throw std::out_of_range("cat_logprob: action out of support");
    Tensor y(batch, 1);
    for (std::int64_t b = 0; b < batch; ++b)
      y[b] = z.at(b, actions[b]) - row_log_sum_exp(z, b);
    return push(std::move(y), -1, needs(logits),
                [logits, actions = std::move(actions)](Graph& g, VarId self) {
                  if (!g.wants_grad(logits)) return;
                  const Tensor& up = g.nodes_[self].grad;
                  const Tensor& z = g.nodes_[logits].value;
                  Tensor& gz = g.grad_of(logits);
                  const std::int64_t na = z.cols();
                  for (std::int64_t b = 0; b < z.rows(); ++b) {
                    const double lse = row_log_sum_exp(z, b);
                    for (std::int64_t j = 0; j < na; ++j) {
                      const double p = std::exp(z.at(b, j) - lse);
                      const double d = (j == actions[b] ? 1.0 : 0.0) - p;
                      gz.at(b, j) += up[b] * d;
                    }
                  }
                });
  }

  // -sum_a p log p per row -> {B, 1}
  VarId cat_entropy(VarId logits) {
    const Tensor& z = nodes_[logits].value;
    const std::int64_t batch = z.rows(), na = z.cols();
    Tensor y(batch, 1);
    for (std::int64_t b = 0; b < batch; ++b) {
      const double lse = row_log_sum_exp(z, b);
      double h = 0.0;
      for (std::int64_t j = 0; j < na; ++j) {
        const double lp = z.at(b, j) - lse;
        h -= std::exp(lp) * lp;
      }
      y[b] = h;
    }
    return push(std::move(y), -1, needs(logits),
                [logits](Graph& g, VarId self) {
      if (!g.wants_grad(logits)) return;
      const Tensor& up = g.nodes_[self].grad;
      const Tensor& z = g.nodes_[logits].value;
      const Tensor& h = g.nodes_[self].value;
      Tensor& gz = g.grad_of(logits);
      for (std::int64_t b = 0; b < z.rows(); ++b) {
        const double lse = row_log_sum_exp(z, b);
        for (std::int64_t j = 0; j < z.cols(); ++j) {
          const double lp = z.at(b, j) - lse;
          gz.at(b, j) += up[b] * (-std::exp(lp) * (lp + h[b]));
        }
      }
    });
  }

  // Diagonal Gaussian log density. mean {B, D}, log_std {1, D},
  // actions {B, D} -> {B, 1}.
  VarId gauss_logprob(VarId mean, VarId log_std, Tensor actions) {
    const Tensor& mu = nodes_[mean].value;
    const Tensor& ls = nodes_[log_std].value;
    require_same_shape(mu, actions, "gauss_logprob");
    if (ls.rows() != 1 || ls.cols() != mu.cols())
      throw std::invalid_argument("gauss_logprob: log_std shape");
    const std::int64_t batch = mu.rows(), dim = mu.cols();
    Tensor y(batch, 1);
    for (std::int64_t b = 0; b < batch; ++b) {
      double lp = 0.0;
      for (std::int64_t d = 0; d < dim; ++d) {
        const double sigma = std::exp(ls[d]);
        const double zd = (actions.at(b, d) - mu.at(b, d)) / sigma;
        lp += -0.5 * zd * zd - ls[d] - 0.5 * std::log(2.0 * M_PI);
      }
      y[b] = lp;
    }
    return push(
        std::move(y), -1, needs(mean) || needs(log_std),
        [mean, log_std, actions = std::move(actions)](Graph& g, VarId self) {
          const Tensor& up = g.nodes_[self].grad;
          const Tensor& mu = g.nodes_[mean].value;
          const Tensor& ls = g.nodes_[log_std].value;
          const bool wm = g.wants_grad(mean), ws = g.wants_grad(log_std);
          Tensor* gm = wm ? &g.grad_of(mean) : nullptr;
          Tensor* gs = ws ? &g.grad_of(log_std) : nullptr;
          for (std::int64_t b = 0; b < mu.rows(); ++b) {
            for (std::int64_t d = 0; d < mu.cols(); ++d) {
              const double sigma = std::exp(ls[d]);
              const double diff = actions.at(b, d) - mu.at(b, d);
              const double z2 = (diff * diff) / (sigma * sigma);
              if (wm) gm->at(b, d) += up[b] * diff / (sigma * sigma);
              if (ws) (*gs)[d] += up[b] * (z2 - 1.0);
            }
          }
        });
  }

  // Entropy of the diagonal Gaussian, replicated per batch row -> {B, 1}.
  VarId gauss_entropy(VarId log_std, std::int64_t batch) {
    const Tensor& ls = nodes_[log_std].value;
    double h = 0.0;
    for (double v : ls.data) h += v + 0.5 * std::log(2.0 * M_PI * M_E);
    Tensor y(batch, 1);
    y.fill(h);
    return push(std::move(y), -1, needs(log_std),
                [log_std](Graph& g, VarId self) {
      if (!g.wants_grad(log_std)) return;
      const Tensor& up = g.nodes_[self].grad;
      Tensor& gs = g.grad_of(log_std);
      double total = 0.0;
      for (std::int64_t b = 0; b < up.size(); ++b) total += up[b];
      for (std::int64_t d = 0; d < gs.size(); ++d) gs[d] += total;
    });
  }

  // Mean Huber loss between pred {B, 1} and a constant target {B, 1}.
  VarId huber_mean(VarId pred, Tensor target, double delta) {
    const Tensor& p = nodes_[pred].value;
    require_same_shape(p, target, "huber_mean");
    const double inv = 1.0 / static_cast<double>(p.size());
    Tensor y(1, 1);
    for (std::int64_t i = 0; i < p.size(); ++i) {
      const double e = p[i] - target[i];
      const double a = std::abs(e);
      y[0] += (a <= delta ? 0.5 * e * e : delta * (a - 0.5 * delta)) * inv;
    }
    return push(std::move(y), -1, needs(pred),
                [pred, target = std::move(target), delta, inv](Graph& g,
                                                               VarId self) {
                  if (!g.wants_grad(pred)) return;
                  const double up = g.nodes_[self].grad[0] * inv;
                  const Tensor& p = g.nodes_[pred].value;
                  Tensor& gp = g.grad_of(pred);
                  for (std::int64_t i = 0; i < p.size(); ++i) {
                    const double e = p[i] - target[i];
                    const double d =
                        std::abs(e) <= delta ? e : (e > 0 ? delta : -delta);
                    gp[i] += up * d;
                  }
                });
  }

  // Backpropagate from a scalar root and accumulate per-slot gradients.
  void backward(VarId root) {
    if (nodes_[root].value.size() != 1)
      throw std::invalid_argument("backward: root must be scalar");
    grad_of(root)[0] = 1.0;
    for (VarId id = root; id >= 0; --id) {
      Node& n = nodes_[id];
      if (n.grad.size() == 0) continue;
      if (n.back) n.back(*this, id);
    }
    for (const Node& n : nodes_) {
      if (n.slot < 0 || n.grad.size() == 0) continue;
      auto it = slot_grads_.find(n.slot);
      if (it == slot_grads_.end()) {
        slot_grads_.emplace(n.slot, n.grad);
      } else {
        for (std::int64_t i = 0; i < n.grad.size(); ++i)
          it->second[i] += n.grad[i];
      }
    }
  }

  const GradMap& slot_grads() const { return slot_grads_; }
  GradMap take_slot_grads() { return std::move(slot_grads_); }

  // Gradient of a non-slot leaf (for finite-difference checks).
  const Tensor& grad(VarId id) const { return nodes_[id].grad; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;  // empty until touched
    int slot;
    bool needs_grad;
    std::function<void(Graph&, VarId)> back;
  };

  VarId push(Tensor value, int slot, bool needs_grad,
             std::function<void(Graph&, VarId)> back) {
    nodes_.push_back(
        Node{std::move(value), Tensor(), slot, needs_grad, std::move(back)});
    return static_cast<VarId>(nodes_.size()) - 1;
  }

  bool needs(VarId id) const { return nodes_[id].needs_grad; }

  bool wants_grad(VarId id) const { return nodes_[id].needs_grad; }

  Tensor& grad_of(VarId id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0)
      n.grad = Tensor(n.value.rows(), n.value.cols());
    return n.grad;
  }

  std::vector<Node> nodes_;
  GradMap slot_grads_;
};

}  // namespace fp3o
