#pragma once

// Primal network simplex on the complete bipartite transport graph.
//
// Tree bookkeeping follows the strongly-feasible-basis scheme used by LEMON's
// NetworkSimplex (artificial root, big-M demand arcs, "last blocking arc"
// leaving rule), with a plain parent/children representation instead of
// thread lists. Only original arcs are priced; artificial arcs never re-enter.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "otfuse/error.hpp"
#include "otfuse/types.hpp"

namespace otfuse::detail {

class NetworkSimplex {
 public:
  NetworkSimplex(const Matrix& cost, const Vector& supply, const Vector& demand)
      : cost_(cost), n_(cost.rows()), m_(cost.cols()), nodes_(n_ + m_), root_(n_ + m_) {
    arcs_ = n_ * m_;
    double max_cost = 0.0;
    for (Index i = 0; i < n_; ++i)
      for (Index j = 0; j < m_; ++j) max_cost = std::max(max_cost, std::abs(cost_(i, j)));
    art_cost_ = (max_cost + 1.0) * static_cast<double>(nodes_ + 1);
    eps_ = 1e-12 * std::max(1.0, max_cost);

    const auto total = static_cast<std::size_t>(nodes_ + 1);
    parent_.assign(total, -1);
    pred_.assign(total, -1);
    dir_.assign(total, 0);
    depth_.assign(total, 0);
    pi_.assign(total, 0.0);
    children_.assign(total, {});
    flow_.assign(static_cast<std::size_t>(arcs_ + nodes_), 0.0);
    art_source_.assign(static_cast<std::size_t>(nodes_), 0);
    art_target_.assign(static_cast<std::size_t>(nodes_), 0);
    art_arc_cost_.assign(static_cast<std::size_t>(nodes_), 0.0);

    children_[root_].reserve(static_cast<std::size_t>(nodes_));
    for (Index u = 0; u < nodes_; ++u) {
      const double s = u < n_ ? supply(u) : -demand(u - n_);
      const Index e = arcs_ + u;
      parent_[u] = root_;
      pred_[u] = e;
      depth_[u] = 1;
      children_[root_].push_back(u);
      if (s >= 0.0) {
        art_source_[u] = u;
        art_target_[u] = root_;
        art_arc_cost_[u] = 0.0;
        dir_[u] = +1;
        pi_[u] = 0.0;
        flow_[e] = s;
      } else {
        art_source_[u] = root_;
        art_target_[u] = u;
        art_arc_cost_[u] = art_cost_;
        dir_[u] = -1;
        pi_[u] = art_cost_;
        flow_[e] = -s;
      }
    }
    block_size_ = std::max<Index>(10, static_cast<Index>(std::ceil(std::sqrt(static_cast<double>(arcs_)))));
  }

  /// Runs pivots until no original arc has negative reduced cost.
  void run(std::int64_t max_pivots) {
    std::int64_t pivots = 0;
    for (;;) {
      while (find_entering()) {
        pivot();
        if (++pivots > max_pivots)
          throw SolverError("network simplex exceeded " + std::to_string(max_pivots) + " pivots");
      }
      // Incremental potential updates accumulate rounding; rebuild them from
      // the tree and re-price once before declaring optimality.
      recompute_potentials();
      if (!find_entering()) break;
      pivot();
      ++pivots;
    }
    pivots_ = pivots;
  }

  double flow(Index i, Index j) const { return flow_[static_cast<std::size_t>(i * m_ + j)]; }
  /// Largest flow left on an artificial arc; nonzero means infeasible input.
  double artificial_flow() const {
    double r = 0.0;
    for (Index u = 0; u < nodes_; ++u) r = std::max(r, std::abs(flow_[arcs_ + u]));
    return r;
  }
  double potential(Index u) const { return pi_[u]; }
  std::int64_t pivots() const { return pivots_; }

 private:
  Index src(Index e) const { return e < arcs_ ? e / m_ : art_source_[e - arcs_]; }
  Index tgt(Index e) const { return e < arcs_ ? n_ + e % m_ : art_target_[e - arcs_]; }
  double arc_cost(Index e) const { return e < arcs_ ? cost_(e / m_, e % m_) : art_arc_cost_[e - arcs_]; }
  double reduced(Index e) const { return arc_cost(e) + pi_[src(e)] - pi_[tgt(e)]; }

  // Block search pricing; within the chosen block the most negative reduced
  // cost wins and ties go to the lowest arc index.
  bool find_entering() {
    double best = 0.0;
    Index best_arc = -1;
    Index count = block_size_;
    for (Index step = 0; step < arcs_; ++step) {
      Index e = next_arc_ + step;
      if (e >= arcs_) e -= arcs_;
      const double c = reduced(e);
      if (c < best || (c == best && best_arc >= 0 && e < best_arc)) {
        best = c;
        best_arc = e;
      }
      if (--count == 0) {
        if (best < -eps_) break;
        count = block_size_;
      }
    }
    if (best_arc < 0 || best >= -eps_) return false;
    in_arc_ = best_arc;
    next_arc_ = best_arc;
    return true;
  }

  void pivot() {
    const Index first = src(in_arc_);
    const Index second = tgt(in_arc_);

    Index a = first, b = second;
    while (a != b) {
      if (depth_[a] > depth_[b]) {
        a = parent_[a];
      } else if (depth_[b] > depth_[a]) {
        b = parent_[b];
      } else {
        a = parent_[a];
        b = parent_[b];
      }
    }
    const Index join = a;

    constexpr double inf = std::numeric_limits<double>::infinity();
    double delta = inf;
    Index u_out = -1;
    int side = 0;
    for (Index u = first; u != join; u = parent_[u]) {
      if (dir_[u] == +1 && flow_[pred_[u]] < delta) {
        delta = flow_[pred_[u]];
        u_out = u;
        side = 1;
      }
    }
    for (Index u = second; u != join; u = parent_[u]) {
      if (dir_[u] == -1 && flow_[pred_[u]] <= delta) {
        delta = flow_[pred_[u]];
        u_out = u;
        side = 2;
      }
    }
    if (side == 0) throw SolverError("network simplex: unbounded pivot cycle");

    if (delta > 0.0) {
      flow_[in_arc_] += delta;
      for (Index u = first; u != join; u = parent_[u]) flow_[pred_[u]] -= dir_[u] * delta;
      for (Index u = second; u != join; u = parent_[u]) flow_[pred_[u]] += dir_[u] * delta;
    }
    flow_[pred_[u_out]] = 0.0;

    const Index u_in = side == 1 ? first : second;
    const Index v_in = side == 1 ? second : first;

    path_.clear();
    for (Index u = u_in;; u = parent_[u]) {
      path_.push_back(u);
      if (u == u_out) break;
    }
    remove_child(parent_[u_out], u_out);
    for (std::size_t k = path_.size() - 1; k > 0; --k) {
      const Index x = path_[k];
      const Index y = path_[k - 1];
      parent_[x] = y;
      pred_[x] = pred_[y];
      dir_[x] = -dir_[y];
      remove_child(x, y);
      children_[y].push_back(x);
    }
    parent_[u_in] = v_in;
    pred_[u_in] = in_arc_;
    dir_[u_in] = src(in_arc_) == u_in ? +1 : -1;
    children_[v_in].push_back(u_in);

    const double c = arc_cost(in_arc_);
    const double target_pi = dir_[u_in] == +1 ? pi_[v_in] - c : pi_[v_in] + c;
    shift_subtree(u_in, target_pi - pi_[u_in]);
  }

  void remove_child(Index p, Index child) {
    auto& ch = children_[p];
    ch.erase(std::find(ch.begin(), ch.end(), child));
  }

  void shift_subtree(Index top, double sigma) {
    stack_.clear();
    stack_.push_back(top);
    while (!stack_.empty()) {
      const Index u = stack_.back();
      stack_.pop_back();
      pi_[u] += sigma;
      depth_[u] = depth_[parent_[u]] + 1;
      for (Index c : children_[u]) stack_.push_back(c);
    }
  }

  void recompute_potentials() {
    pi_[root_] = 0.0;
    stack_.clear();
    for (Index c : children_[root_]) stack_.push_back(c);
    while (!stack_.empty()) {
      const Index u = stack_.back();
      stack_.pop_back();
      const Index e = pred_[u];
      const double c = arc_cost(e);
      pi_[u] = dir_[u] == +1 ? pi_[parent_[u]] - c : pi_[parent_[u]] + c;
      depth_[u] = depth_[parent_[u]] + 1;
      for (Index ch : children_[u]) stack_.push_back(ch);
    }
  }

  const Matrix& cost_;
  Index n_, m_, nodes_, root_, arcs_ = 0;
  double art_cost_ = 0.0;
  double eps_ = 0.0;
  Index block_size_ = 10;
  Index next_arc_ = 0;
  Index in_arc_ = -1;
  std::int64_t pivots_ = 0;

  std::vector<Index> parent_, pred_, depth_;
  std::vector<int> dir_;
  std::vector<double> pi_;
  std::vector<std::vector<Index>> children_;
  std::vector<double> flow_;
  std::vector<Index> art_source_, art_target_;
  std::vector<double> art_arc_cost_;
  std::vector<Index> path_, stack_;
};

}  // namespace otfuse::detail
