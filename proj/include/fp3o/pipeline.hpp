#pragma once

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace fp3o {

// The permutation pair realizing the non-overlapping selection: pipeline p
// opens with agent i_order[p] at the independent step and trains
// j_order[p] at the dependent step. j_order must be a permutation with
// j_order[p] != i_order[p] everywhere, so every agent is trained by
// exactly one pipeline per step.
struct PipelineAssignment {
  std::vector<int> i_order;
  std::vector<int> j_order;

  int size() const { return static_cast<int>(i_order.size()); }

  // pipeline index that trains `agent` at the dependent step
  int pipeline_of_candidate(int agent) const {
    for (int p = 0; p < size(); ++p)
      if (j_order[p] == agent) return p;
    throw std::logic_error("PipelineAssignment: agent not selected");
  }

  // i_order and j_order must range over the same distinct agent labels and
  // j_order[p] != i_order[p] for every pipeline.
  void validate() const {
    const int n = size();
    if (static_cast<int>(j_order.size()) != n)
      throw std::invalid_argument("assignment: order size mismatch");
    std::vector<int> si = i_order, sj = j_order;
    std::sort(si.begin(), si.end());
    std::sort(sj.begin(), sj.end());
    if (std::adjacent_find(si.begin(), si.end()) != si.end())
      throw std::invalid_argument("assignment: duplicate agent in i_order");
    if (si != sj)
      throw std::invalid_argument("assignment: orders must cover the same agents");
    for (int p = 0; p < n; ++p)
      if (i_order[p] == j_order[p])
        throw std::invalid_argument("assignment: selection has a fixed point");
  }
};

// Cyclic-shift selection: j_order is i_order rotated left by `shift`.
inline PipelineAssignment nonoverlapping_selection(std::vector<int> i_order,
                                                   int shift = 1) {
  const int n = static_cast<int>(i_order.size());
  if (n < 2)
    throw std::invalid_argument(
        "nonoverlapping_selection: needs at least 2 agents");
  if (shift % n == 0)
    throw std::invalid_argument(
        "nonoverlapping_selection: shift must not be 0 mod n");
  PipelineAssignment a;
  a.i_order = std::move(i_order);
  a.j_order.resize(n);
  for (int p = 0; p < n; ++p)
    a.j_order[p] = a.i_order[(p + shift) % n];
  a.validate();
  return a;
}

inline PipelineAssignment nonoverlapping_selection(int n, int shift = 1) {
  std::vector<int> identity(static_cast<std::size_t>(std::max(n, 0)));
  std::iota(identity.begin(), identity.end(), 0);
  return nonoverlapping_selection(std::move(identity), shift);
}

}  // namespace fp3o
